import math
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fewshot_probe.audio import TIME_MAJOR, AudioClip, ModelSpec, plan_windows
from fewshot_probe.embedding import (EmbeddingStore, PrecomputedProvider, ProviderError,
                                     StoreFormatError, SyntheticProvider, ZeroNormWarning,
                                     embed_planned, embed_recording, l2_normalize, nn_search,
                                     pool_recording, pool_time, read_window_file, store_read,
                                     store_write, write_window_file)

VEC_MODEL = ModelSpec("vec", 1000, 5.0, 12)
TM_MODEL = ModelSpec("tm", 1000, 3.0, 8, TIME_MAJOR)


def test_zero_window_gives_bias():
    p = SyntheticProvider(VEC_MODEL, seed=3)
    out = p.embed_window(np.zeros(5000))
    np.testing.assert_array_equal(out, p.bias[None, :])


def test_provider_deterministic(rng):
    x = rng.uniform(-1, 1, 5000)
    a = SyntheticProvider(VEC_MODEL, 7).embed_window(x)
    b = SyntheticProvider(VEC_MODEL, 7).embed_window(x.copy())
    assert a.tobytes() == b.tobytes()
    c = SyntheticProvider(VEC_MODEL, 8).embed_window(x)
    assert not np.array_equal(a, c)


def test_time_major_three_seconds(rng):
    out = SyntheticProvider(TM_MODEL, 0).embed_window(rng.uniform(-1, 1, 3000))
    assert out.shape == (146, 8)


def test_provider_rejects_wrong_length():
    with pytest.raises(ProviderError):
        SyntheticProvider(VEC_MODEL).embed_window(np.zeros(10), "r", 0)


def test_pool_time():
    v = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(pool_time(v), v[0])
    np.testing.assert_array_equal(pool_time(np.array([[1.0, 3.0], [3.0, 1.0]])), [2.0, 2.0])


def test_pool_time_matches_naive_sum(rng):
    m = rng.standard_normal((146, 8))
    naive = [math.fsum(m[i, j] for i in range(146)) / 146 for j in range(8)]
    np.testing.assert_allclose(pool_time(m), naive, rtol=0, atol=1e-14)


def test_pool_recording(rng):
    v = rng.standard_normal(5)
    np.testing.assert_array_equal(pool_recording([v]), v)
    np.testing.assert_array_equal(pool_recording([v, -v]), np.zeros(5))
    six = rng.standard_normal((6, 5))
    np.testing.assert_allclose(pool_recording(list(six)), six.sum(axis=0) / 6, atol=1e-15)


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(l2_normalize(u), u)
    with pytest.warns(ZeroNormWarning):
        z = l2_normalize(np.zeros(4))
    np.testing.assert_array_equal(z, np.zeros(4))


finite_vecs = arrays(np.float64, st.integers(1, 16),
                     elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


@given(finite_vecs, st.floats(1e-3, 1e3))
def test_normalize_idempotent_scale_invariant(v, c):
    if np.linalg.norm(v) <= 1e-9:
        return
    n = l2_normalize(v)
    assert abs(np.linalg.norm(n) - 1.0) < 1e-12
    np.testing.assert_allclose(l2_normalize(n), n, atol=1e-15)
    np.testing.assert_allclose(l2_normalize(c * v), n, atol=1e-12)


def test_embed_short_clip_single_window(rng):
    p = SyntheticProvider(VEC_MODEL, 1)
    x = rng.uniform(-1, 1, 1880)
    emb = embed_recording(p, AudioClip(1000, x), VEC_MODEL, "r")
    padded = np.zeros(5000)
    padded[:1880] = x
    expected = l2_normalize(p.embed_window(padded)[0])
    np.testing.assert_allclose(emb.vector, expected, atol=1e-15)
    assert emb.normalized and abs(np.linalg.norm(emb.vector) - 1) < 1e-6


def test_embed_thirty_second_clip(rng):
    p = SyntheticProvider(VEC_MODEL, 1)
    x = rng.uniform(-1, 1, 30000)
    emb = embed_recording(p, AudioClip(1000, x), VEC_MODEL, "r")
    wins = [p.embed_window(x[i * 5000:(i + 1) * 5000])[0] for i in range(6)]
    mean = np.mean(wins, axis=0)
    np.testing.assert_allclose(emb.vector, mean / np.linalg.norm(mean), atol=1e-14)
    again = embed_recording(p, AudioClip(1000, x), VEC_MODEL, "r")
    assert emb.vector.tobytes() == again.vector.tobytes()


def test_embed_time_major_pools_frames(rng):
    p = SyntheticProvider(TM_MODEL, 2)
    x = rng.uniform(-1, 1, 3000)
    emb = embed_recording(p, AudioClip(1000, x), TM_MODEL, "r")
    np.testing.assert_allclose(emb.vector, l2_normalize(p.embed_window(x).mean(axis=0)))


def test_single_window_pooling_degenerates(rng):
    frames = rng.standard_normal((146, 4))
    assert np.array_equal(pool_recording([pool_time(frames)]), pool_time(frames))


def test_embed_rate_mismatch():
    with pytest.raises(ValueError, match="Hz"):
        embed_recording(SyntheticProvider(VEC_MODEL), AudioClip(2000, np.zeros(10)), VEC_MODEL)


def test_silent_recording_zero_vector():
    model = ModelSpec("nobias", 100, 1.0, 4)
    p = SyntheticProvider(model)
    p.bias = np.zeros(4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        emb = embed_recording(p, AudioClip(100, np.zeros(250)), model, "quiet")
    assert not emb.normalized and np.all(emb.vector == 0)


def test_precomputed_provider(tmp_path, rng):
    table = {("a", 0): rng.standard_normal(12).astype(np.float32),
             ("a", 1): rng.standard_normal(12).astype(np.float32)}
    path = tmp_path / "w.embw"
    write_window_file(path, 12, table)
    dim, back = read_window_file(path)
    assert dim == 12 and all(back[k].tobytes() == table[k].tobytes() for k in table)
    prov = PrecomputedProvider.from_file(path, VEC_MODEL)
    plan = plan_windows(7000, 1000, 5.0)
    emb = embed_planned(prov, VEC_MODEL, plan, None, "a")
    mean = (table[("a", 0)].astype(float) + table[("a", 1)]) / 2
    np.testing.assert_allclose(emb.vector, mean / np.linalg.norm(mean))
    with pytest.raises(ProviderError, match="'b'"):
        embed_planned(prov, VEC_MODEL, plan, None, "b")


# --- store -----------------------------------------------------------------

def test_store_roundtrip(tmp_path, rng):
    s = EmbeddingStore(5)
    for i in range(3):
        s.add(f"rec-{i}", rng.standard_normal(5))
    store_write(tmp_path / "s.embs", s)
    assert store_read(tmp_path / "s.embs") == s


def test_store_wrong_magic(tmp_path):
    s = EmbeddingStore(2, {"a": [1.0, 0.0]})
    p = tmp_path / "s.embs"
    store_write(p, s)
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(StoreFormatError, match="magic"):
        store_read(p)


def test_store_truncated(tmp_path):
    p = tmp_path / "s.embs"
    store_write(p, EmbeddingStore(3, {"a": [1, 2, 3], "b": [4, 5, 6]}))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(StoreFormatError, match="truncated"):
        store_read(p)


def test_store_header_records_dim(tmp_path, rng):
    p = tmp_path / "perch.embs"
    store_write(p, EmbeddingStore(1536, {"x": rng.standard_normal(1536)}))
    magic, version, dim, count = struct.unpack_from("<4sIIQ", p.read_bytes())
    assert (magic, version, dim, count) == (b"EMBS", 1, 1536, 1)


def test_store_rejects_dim_mismatch():
    s = EmbeddingStore(3)
    with pytest.raises(ValueError):
        s.add("a", [1.0, 2.0])


def test_store_unicode_ids(tmp_path):
    s = EmbeddingStore(1, {"orca-Ä/ß 1": [1.0], "": [2.0]})
    store_write(tmp_path / "u.embs", s)
    assert store_read(tmp_path / "u.embs") == s


@settings(max_examples=30)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False,
                                 allow_subnormal=True)))
def test_store_bit_exact(tmp_path_factory, mat):
    s = EmbeddingStore(mat.shape[1], {f"r{i}": row for i, row in enumerate(mat)})
    p = tmp_path_factory.mktemp("bits") / "s.embs"
    store_write(p, s)
    assert store_read(p) == s


# --- search ----------------------------------------------------------------

def _store(rng, n=50, dim=6):
    return EmbeddingStore(dim, {f"id{i:03d}": l2_normalize(rng.standard_normal(dim))
                                for i in range(n)})


def test_self_match(rng):
    s = _store(rng)
    rid, sim = nn_search(s, s["id017"], 1)[0]
    assert rid == "id017" and abs(sim - 1.0) < 1e-6


def test_top_k_clamped(rng):
    s = _store(rng, n=7)
    assert len(nn_search(s, rng.standard_normal(6), 100)) == 7


def test_brute_force_order(rng):
    s = _store(rng)
    q = rng.standard_normal(6)
    sims = []
    for rid in s.ids():
        v = [float(a) for a in s[rid]]
        dot = math.fsum(a * b for a, b in zip(v, q))
        sims.append((-dot / (math.sqrt(math.fsum(a * a for a in v)) * math.sqrt(math.fsum(q * q))), rid))
    expected = [rid for _, rid in sorted(sims)]
    got = [rid for rid, _ in nn_search(s, q, 50)]
    assert got == expected


def test_ties_broken_by_id():
    s = EmbeddingStore(2, {"b": [1, 0], "a": [1, 0], "c": [0, 1]})
    assert [r for r, _ in nn_search(s, [1, 0], 3)] == ["a", "b", "c"]


def test_ranking_stable_when_appending_dissimilar(rng):
    s = _store(rng, n=20)
    q = s["id004"].astype(np.float64)
    before = nn_search(s, q, 5)
    for i in range(10):
        s.add(f"extra{i}", -q + 0.01 * rng.standard_normal(6))
    assert max(sim for rid, sim in nn_search(s, q, 30) if rid.startswith("extra")) < before[-1][1]
    assert nn_search(s, q, 5) == before


def test_search_errors(rng):
    with pytest.raises(ValueError):
        nn_search(EmbeddingStore(3), [1, 0, 0], 1)
    with pytest.raises(ValueError):
        nn_search(_store(rng), [1, 0], 1)
