"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, invalid inputs, nothing
computable), 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .audio import KNOWN_MODELS, ModelSpec, WavError, load_model_spec, plan_windows, read_wav, resample
from .embedding import (EmbeddingStore, PrecomputedProvider, ProviderError, StoreFormatError,
                        SyntheticProvider, embed_planned, embed_recording, store_read, store_write)
from .experiment import (ConfigError, ExperimentConfig, InfeasibleTaskError, emit_report,
                         load_config, load_report, run_experiment, score_pretrained, trial_seed,
                         write_table)
from .manifest import (DatasetManifest, ManifestError, TaskSpec, UnmatchedLabelError,
                       class_counts, derive_task_labels, load_manifest, load_task)
from .metrics import UndefinedAucError
from .viz import (TsneConfig, emit_scatter, pca_fit, pca_transform, tsne_affinities, tsne_embed,
                  write_coords)

logger = logging.getLogger("fewshot_probe")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    pass


USER_ERRORS = (UserError, ManifestError, UnmatchedLabelError, ConfigError, StoreFormatError,
               WavError, InfeasibleTaskError, UndefinedAucError, FileNotFoundError,
               json.JSONDecodeError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_provenance(path: Path, command: str, args: argparse.Namespace, inputs, **extra) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose", "quiet")}
    record = {
        "tool": "fewshot_probe",
        "version": __version__,
        "command": command,
        "flags": flags,
        "inputs": {str(p): _digest(p) for p in inputs if Path(p).is_file()},
        **extra,
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")


def _resolve_model(spec: str) -> ModelSpec:
    if spec in KNOWN_MODELS:
        return KNOWN_MODELS[spec]
    if not Path(spec).is_file():
        raise UserError(f"--model-spec {spec!r} is neither a file nor one of {sorted(KNOWN_MODELS)}")
    try:
        return load_model_spec(spec)
    except (KeyError, TypeError) as exc:
        raise UserError(f"invalid model spec {spec}: {exc}") from exc


def _resolve_provider(spec: str, model: ModelSpec):
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        try:
            seed = int(arg or 0)
        except ValueError:
            raise UserError(f"--provider synthetic:<seed> needs an integer seed, got {arg!r}") from None
        return SyntheticProvider(model, seed)
    if kind == "precomputed":
        if not arg:
            raise UserError("--provider precomputed:<file> needs a file")
        return PrecomputedProvider.from_file(arg, model)
    raise UserError(f"unknown provider {spec!r} (use synthetic:<seed> or precomputed:<file>)")


def _labels_for(manifests: list[DatasetManifest], tasks: list[TaskSpec]) -> dict[str, list]:
    out = {}
    for task in tasks:
        labels = []
        for m in manifests:
            labels.extend(derive_task_labels(m, task))
        if not labels:
            raise UserError(f"task {task.task_id!r} retains no recordings")
        out[task.task_id] = labels
    return out


def _parse_store_flag(value: str) -> tuple[str, Path]:
    name, sep, path = value.partition("=")
    if not sep:
        return Path(value).stem, Path(value)
    return name, Path(path)


# --- subcommands -------------------------------------------------------------

def cmd_manifest_validate(args) -> int:
    manifests = [load_manifest(p) for p in args.manifest]
    for m in manifests:
        print(f"{m.dataset_id}: {len(m)} recordings")
    for tpath in args.task or []:
        task = load_task(tpath)
        labels = [lab for m in manifests for lab in derive_task_labels(m, task)]
        if not labels:
            raise UserError(f"task {task.task_id!r} retains no recordings")
        counts = class_counts(labels)
        print(f"task {task.task_id}: {len(labels)} recordings, {len(counts)} classes")
        for label, n in sorted(counts.items()):
            print(f"  {label}\t{n}")
    return EXIT_OK


def _embed_one(rec, model, provider):
    if provider.needs_audio:
        clip = read_wav(rec.audio_uri)
        if clip.sample_rate_hz != model.sample_rate_hz:
            clip = resample(clip, model.sample_rate_hz)
        return embed_recording(provider, clip, model, rec.recording_id)
    n = max(1, int(round(rec.duration_s * model.sample_rate_hz)))
    plan = plan_windows(n, model.sample_rate_hz, model.window_s)
    return embed_planned(provider, model, plan, None, rec.recording_id)


def cmd_embed(args) -> int:
    manifest = load_manifest(args.manifest)
    model = _resolve_model(args.model_spec)
    provider = _resolve_provider(args.provider, model)

    def job(rec):
        try:
            return rec, _embed_one(rec, model, provider), None
        except (OSError, WavError, ProviderError, ValueError) as exc:
            return rec, None, f"{type(exc).__name__}: {exc}"

    jobs = args.jobs if getattr(provider, "thread_safe", False) else 1
    recs = manifest.recordings
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, recs))
    else:
        results = [job(r) for r in recs]

    store = EmbeddingStore(model.embedding_dim, model=model)
    failures = []
    for i, (rec, emb, err) in enumerate(results, 1):
        if err is None:
            store.add(rec.recording_id, emb.vector)
        else:
            failures.append({"recording_id": rec.recording_id, "error": err})
        if i % 100 == 0 or i == len(results):
            logger.info("embedded %d/%d recordings", i, len(results))
    if not len(store):
        for f in failures:
            print(f"FAILED {f['recording_id']}: {f['error']}", file=sys.stderr)
        raise UserError("no recording could be embedded")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store_write(out, store)
    inputs = [args.manifest] + [r.audio_uri for r in recs if provider.needs_audio]
    _write_provenance(out.with_name(out.name + ".run.json"), "embed", args, inputs,
                      model=model.to_dict(), failures=failures)
    print(f"wrote {len(store)} embeddings to {out}")
    if failures:
        print(f"{len(failures)} recording(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f['recording_id']}: {f['error']}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "master_seed": args.seed})
    manifests = [load_manifest(p) for p in args.manifest]
    tasks = [load_task(p) for p in args.task]
    stores = {}
    for value in args.store:
        name, path = _parse_store_flag(value)
        if name in stores:
            raise UserError(f"store name {name!r} given twice")
        stores[name] = store_read(path)
    report = run_experiment(config, stores, _labels_for(manifests, tasks), jobs=args.jobs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit_all(report, out, args.format)
    seeds = {f"{t}/{m}/k={k}": [trial_seed(config.master_seed, t, m, k, i, config.pairing)
                                for i in range(config.trials)]
             for t, m, k in report.cells}
    _write_provenance(out / "run.json", "eval", args,
                      [args.config, *args.manifest, *args.task,
                       *(_parse_store_flag(s)[1] for s in args.store)],
                      config=config.to_dict(), trial_seeds=seeds)
    n_ok = len(report.ok_cells())
    print(f"{n_ok}/{len(report.cells)} cells evaluated; reports in {out}")
    for cell in report.cells.values():
        if cell.status == "ok":
            print(f"  {cell.task}\t{cell.model}\tk={cell.k}\tAUC {cell.mean:.4f} +/- {cell.std:.4f}")
        else:
            print(f"  {cell.task}\t{cell.model}\tk={cell.k}\t{cell.status}: {cell.reason}")
    return EXIT_OK if n_ok else EXIT_USER


def _emit_all(report, out: Path, fmt: str) -> None:
    from .plotting import plot_auc_by_k

    emit_report(report, "json", out / "report.json")
    if fmt == "csv":
        emit_report(report, "csv", out / "trials.csv")
    write_table(report, out / "table.csv")
    if report.ok_cells():
        plot_auc_by_k(report, out / "auc_by_k.png")


def cmd_report(args) -> int:
    report = load_report(args.report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit_all(report, out, args.format)
    _write_provenance(out / "run.json", "report", args, [args.report])
    header, rows = report.table()
    print("\t".join(header))
    for row in rows:
        print("\t".join([row[0]] + ["-" if v is None else f"{v:.3f}" for v in row[1:]]))
    return EXIT_OK


def _read_scores(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "recording_id" or len(header) < 3:
            raise UserError(f"{path}: header must be recording_id,<class>,<class>,...")
        ids, rows = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise UserError(f"{path}:{reader.line_num}: expected {len(header)} fields")
            ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise UserError(f"{path}:{reader.line_num}: non-numeric score") from None
    return ids, header[1:], np.array(rows, dtype=np.float64)


def cmd_score_pretrained(args) -> int:
    manifests = [load_manifest(p) for p in args.manifest]
    task = load_task(args.task[0]) if args.task else None
    if task is not None:
        labels = dict(_labels_for(manifests, [task])[task.task_id])
    else:
        labels = {r.recording_id: r.raw_label for m in manifests for r in m.recordings}
    ids, classes, scores = _read_scores(args.scores)
    keep = [i for i, rid in enumerate(ids) if rid in labels]
    if len(keep) < len(ids):
        logger.warning("%d scored recordings have no label and are ignored", len(ids) - len(keep))
    result = score_pretrained(scores[keep], [labels[ids[i]] for i in keep], classes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"per_class": result.per_class, "support": result.support,
               "macro": result.macro, "weighted": result.weighted}
    if args.format == "json":
        (out / "pretrained_auc.json").write_text(json.dumps(payload, indent=2) + "\n",
                                                 encoding="utf-8")
    else:
        with open(out / "pretrained_auc.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "support", "auc"])
            for c, v in result.per_class.items():
                w.writerow([c, result.support[c], repr(v)])
            w.writerow(["__macro__", sum(result.support.values()), repr(result.macro)])
    _write_provenance(out / "run.json", "score-pretrained", args,
                      [args.scores, *args.manifest, *(args.task or [])])
    print(f"off-the-shelf macro ROC-AUC: {result.macro:.4f}")
    return EXIT_OK


def cmd_tsne(args) -> int:
    from .plotting import plot_embedding_2d

    store = store_read(args.store)
    manifests = [load_manifest(p) for p in args.manifest]
    if args.task:
        task = load_task(args.task[0])
        pairs = _labels_for(manifests, [task])[task.task_id]
    else:
        pairs = [(r.recording_id, r.raw_label) for m in manifests for r in m.recordings]
    pairs = [(rid, lab) for rid, lab in pairs if rid in store]
    n = len(pairs)
    if n < 4:
        raise UserError(f"t-SNE needs at least 4 labelled embeddings, found {n}")
    ids = [rid for rid, _ in pairs]
    labels = [lab for _, lab in pairs]
    X = store.matrix(ids)

    out_dim = min(args.pca_dim, n - 1, X.shape[1])
    if out_dim < args.pca_dim:
        logger.warning("PCA dimension clamped from %d to %d for %d points", args.pca_dim, out_dim, n)
    perplexity = args.perplexity
    limit = (n - 1) / 3
    if perplexity >= limit:
        perplexity = float(np.nextafter(limit, 0))
        logger.warning("perplexity %.3g too large for %d points; using %.6g",
                       args.perplexity, n, perplexity)
    config = TsneConfig(perplexity=perplexity, iterations=args.iterations, seed=args.seed)
    Z = pca_transform(pca_fit(X, out_dim), X)
    coords = tsne_embed(tsne_affinities(Z, perplexity), config)

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_coords(f"{prefix}_coords.csv", ids, coords, labels)
    emit_scatter(coords, labels, f"{prefix}.svg")
    plot_embedding_2d(coords, labels, f"{prefix}.png")
    _write_provenance(Path(f"{prefix}.run.json"), "tsne", args,
                      [args.store, *args.manifest, *(args.task or [])],
                      pca_dim=out_dim, perplexity=perplexity)
    print(f"wrote {prefix}_coords.csv, {prefix}.svg and {prefix}.png ({n} points)")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fewshot-probe",
                description="Few-shot linear-probe evaluation of bioacoustic embeddings.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("manifest-validate", help="check manifests and task label sets")
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--task", action="append")
    s.set_defaults(func=cmd_manifest_validate)

    s = sub.add_parser("embed", help="embed every manifest recording into a store file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model-spec", required=True,
                   help=f"JSON file or one of: {', '.join(KNOWN_MODELS)}")
    s.add_argument("--provider", required=True, help="synthetic:<seed> | precomputed:<file>")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("eval", help="run the few-shot linear-probe protocol")
    s.add_argument("--config", required=True)
    s.add_argument("--store", action="append", required=True, help="[model=]store file")
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--task", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, help="override master_seed")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("score-pretrained", help="AUC of a model's own classifier scores")
    s.add_argument("--scores", required=True, help="CSV: recording_id,<class>,...")
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--task", action="append")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="json")
    s.set_defaults(func=cmd_score_pretrained)

    s = sub.add_parser("tsne", help="PCA + t-SNE scatter of stored embeddings")
    s.add_argument("--store", required=True)
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--task", action="append")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--pca-dim", type=int, default=32)
    s.set_defaults(func=cmd_tsne)

    s = sub.add_parser("report", help="re-render tables and figures from report.json")
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
