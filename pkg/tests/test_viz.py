import re

import numpy as np
import pytest

from fewshot_probe.viz import (TsneConfig, conditional_affinities, embed_2d, emit_scatter,
                               kl_divergence, pca_fit, pca_transform, tsne_affinities,
                               tsne_embed, write_coords)

from .oracles import perplexity_of_row, silhouette


def three_clusters(seed=0, n=20, d=5, gap=10.0):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(gap * c, 1.0, (n, d)) for c in range(3)])
    return X, np.repeat(["a", "b", "c"], n)


class TestPca:
    def test_line_data(self, rng):
        direction = np.array([1.0, 2.0, -2.0]) / 3
        X = np.outer(rng.standard_normal(50), direction) + 1e-4 * rng.standard_normal((50, 3))
        m = pca_fit(X, 2)
        assert abs(abs(m.components[0] @ direction) - 1) < 1e-6
        assert m.explained_variance[0] / (X.var(axis=0, ddof=1).sum()) > 0.999

    def test_centered_isotropic_mean(self, rng):
        X = rng.standard_normal((200, 4))
        X -= X.mean(axis=0)
        assert np.max(np.abs(pca_fit(X, 3).mean)) < 1e-12

    def test_full_rank_reconstruction(self, rng):
        X = rng.standard_normal((40, 8))
        m = pca_fit(X, 8)
        Z = pca_transform(m, X)
        assert np.max(np.abs(m.mean + Z @ m.components - X)) < 1e-8

    def test_invariants(self, rng):
        X = rng.standard_normal((30, 10)) @ rng.standard_normal((10, 10))
        m = pca_fit(X, 6)
        np.testing.assert_allclose(m.components @ m.components.T, np.eye(6), atol=1e-8)
        assert np.all(np.diff(m.explained_variance) <= 0)
        assert np.max(np.abs(pca_transform(m, X).mean(axis=0))) < 1e-9
        pivots = np.argmax(np.abs(m.components), axis=1)
        assert np.all(m.components[np.arange(6), pivots] > 0)

    def test_mean_row_maps_to_zero(self, rng):
        X = rng.standard_normal((12, 4))
        m = pca_fit(X, 3)
        np.testing.assert_allclose(pca_transform(m, m.mean), 0.0, atol=1e-12)

    def test_isometry_at_full_dim(self, rng):
        X = rng.standard_normal((20, 5))
        Z = pca_transform(pca_fit(X, 5), X)
        np.testing.assert_allclose(np.linalg.norm(Z[3] - Z[11]), np.linalg.norm(X[3] - X[11]))

    def test_sign_is_deterministic_under_row_shuffle(self, rng):
        X = rng.standard_normal((25, 6))
        a = pca_fit(X, 4).components
        b = pca_fit(X[rng.permutation(25)], 4).components
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_out_dim_too_large(self, rng):
        with pytest.raises(ValueError):
            pca_fit(rng.standard_normal((5, 10)), 5)
        with pytest.raises(ValueError):
            pca_transform(pca_fit(rng.standard_normal((5, 3)), 2), np.zeros((1, 4)))


class TestAffinities:
    def test_conditional_rows(self, rng):
        X = rng.standard_normal((50, 6))
        P, _, ok = conditional_affinities(X, 10.0)
        assert ok.all()
        assert np.max(np.abs(P.sum(axis=1) - 1)) < 1e-9
        for i in range(50):
            assert abs(perplexity_of_row(P[i]) - 10.0) < 1e-3

    def test_joint_invariants(self, rng):
        P = tsne_affinities(rng.standard_normal((40, 3)) * 100, 8.0)
        np.testing.assert_array_equal(P, P.T)
        assert np.all(np.diag(P) == 0) and np.all(P >= 0)
        assert abs(P.sum() - 1) < 1e-9

    def test_identical_points(self, rng):
        X = rng.standard_normal((20, 3))
        X[7] = X[3]
        P, _, _ = conditional_affinities(X, 5.0)
        assert np.argmax(P[3]) == 7 and np.argmax(P[7]) == 3

    def test_all_duplicates_flagged_not_crashing(self):
        X = np.zeros((13, 2))
        P, _, _ = conditional_affinities(X, 3.0)
        assert np.all(np.isfinite(P))

    def test_perplexity_limit(self, rng):
        with pytest.raises(ValueError):
            tsne_affinities(rng.standard_normal((10, 2)), 3.0)


class TestTsne:
    def test_clusters_separate(self):
        X, y = three_clusters()
        Y = tsne_embed(tsne_affinities(X, 15.0), TsneConfig(perplexity=15.0))
        assert silhouette(Y, y) > 0.6
        np.testing.assert_allclose(Y.mean(axis=0), 0.0, atol=1e-10)

    def test_kl_decreases(self):
        X, _ = three_clusters(seed=2)
        P = tsne_affinities(X, 15.0)
        Y0 = tsne_embed(P, TsneConfig(iterations=0, seed=4))
        Y1 = tsne_embed(P, TsneConfig(iterations=1000, seed=4))
        assert kl_divergence(P, Y1) < kl_divergence(P, Y0)

    def test_deterministic(self):
        X, _ = three_clusters(seed=1)
        P = tsne_affinities(X, 10.0)
        cfg = TsneConfig(iterations=300, seed=5)
        assert tsne_embed(P, cfg).tobytes() == tsne_embed(P, cfg).tobytes()
        assert not np.array_equal(tsne_embed(P, cfg), tsne_embed(P, TsneConfig(iterations=300, seed=6)))

    def test_embed_2d_clamps_pca(self, caplog):
        X, _ = three_clusters(n=5, d=40)
        Y = embed_2d(X, 32, TsneConfig(perplexity=4.0, iterations=100))
        assert Y.shape == (15, 2) and "clamped" in caplog.text


class TestScatter:
    def test_structure(self, tmp_path):
        p = tmp_path / "s.svg"
        emit_scatter([[0, 0], [1, 1]], ["x", "y"], p)
        svg = p.read_text()
        assert svg.count("<circle") == 2
        assert svg.count('class="legend-entry"') == 2

    def test_relabel_changes_only_colors(self, tmp_path):
        coords = np.random.default_rng(0).standard_normal((10, 2))
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        emit_scatter(coords, list("aabbccaabb"), a)
        emit_scatter(coords, list("bbccaabbcc"), b)
        pos = lambda s: re.findall(r'cx="([^"]+)" cy="([^"]+)"', s)
        assert pos(a.read_text()) == pos(b.read_text())
        assert a.read_text() != b.read_text()

    def test_five_ecotypes(self, tmp_path):
        labels = ["NRKW", "OKW", "SAR", "SRKW", "TKW"] * 4
        emit_scatter(np.random.default_rng(1).standard_normal((20, 2)), labels, tmp_path / "e.svg")
        svg = (tmp_path / "e.svg").read_text()
        assert svg.count('class="legend-entry"') == 5
        for lab in set(labels):
            assert f">{lab}</text>" in svg

    def test_margins(self, tmp_path):
        emit_scatter([[0, 0], [10, 5]], ["a", "a"], tmp_path / "m.svg", width=640, height=480)
        xs = [float(v) for v in re.findall(r'cx="([^"]+)"', (tmp_path / "m.svg").read_text())]
        plot_w = 640 - (20 + 8 * 1 + 30)
        assert xs[0] == pytest.approx(0.05 * plot_w) and xs[1] == pytest.approx(0.95 * plot_w)

    def test_bytes_deterministic(self, tmp_path):
        X, y = three_clusters(seed=3)
        for name in ("a", "b"):
            Y = embed_2d(X, 32, TsneConfig(perplexity=10.0, iterations=250, seed=11))
            emit_scatter(Y, y, tmp_path / f"{name}.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_label_count_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            emit_scatter([[0, 0]], ["a", "b"], tmp_path / "x.svg")

    def test_coords_csv(self, tmp_path):
        write_coords(tmp_path / "c.csv", ["r1", "r2"], [[0.5, 1.0], [2.0, -1.0]], ["a", "b"])
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines == ["recording_id,x,y,label", "r1,0.5,1.0,a", "r2,2.0,-1.0,b"]
