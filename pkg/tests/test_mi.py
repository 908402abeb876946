import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2mdc.engine import Tensor
from m2mdc.ir import tiny_resnet
from m2mdc.mi import (
    ProbeSet,
    ScoreTable,
    block_mi,
    channel_mi,
    entropy,
    minmax,
    mutual_information,
    pool_activations,
    proxy_mid_scores,
    proxy_plane_scores,
    quantile_bin,
    score_activations,
    score_blocks,
)


def brute_force_mi(z, y):
    """Double loop over the joint histogram, straight from the definition."""
    n = len(z)
    zs, ys = sorted(set(z)), sorted(set(y))
    total = 0.0
    for a in zs:
        pa = sum(1 for v in z if v == a) / n
        for b in ys:
            pb = sum(1 for v in y if v == b) / n
            pab = sum(1 for u, v in zip(z, y) if u == a and v == b) / n
            if pab > 0:
                total += pab * math.log(pab / (pa * pb))
    return total


def sort_oracle_bins(column, bins):
    """Independent re-statement: count edges <= value, then relabel densely."""
    vals = list(column)
    srt = sorted(vals)
    n = len(vals)
    edges = [srt[min(k * n // bins, n - 1)] for k in range(1, bins)]
    raw = [sum(1 for e in edges if e <= v) for v in vals]
    dense = {r: i for i, r in enumerate(sorted(set(raw)))}
    return np.array([dense[r] for r in raw])


class TestPooling:
    def test_constant_activation(self):
        out = pool_activations({"b": Tensor(np.full((2, 3, 4, 4), 2.5))})
        np.testing.assert_array_equal(out["b"], 2.5)

    def test_known_sums(self, rng):
        a = rng.normal(size=(3, 2, 5, 4))
        out = pool_activations({"b": Tensor(a)})["b"]
        np.testing.assert_allclose(out, a.sum(axis=(2, 3)) / 20, atol=1e-14)

    def test_one_by_one_is_identity(self, rng):
        a = rng.normal(size=(3, 4, 1, 1))
        np.testing.assert_array_equal(pool_activations({"b": Tensor(a)})["b"], a[:, :, 0, 0])


class TestQuantileBin:
    def test_uniform_hundred(self):
        ids = quantile_bin(np.arange(100), 10)
        assert np.bincount(ids).tolist() == [10] * 10

    def test_constant_column(self):
        assert np.all(quantile_bin(np.full(50, 3.0), 10) == 0)

    def test_heavy_ties_match_sort_oracle(self, rng):
        col = np.concatenate([np.zeros(50), rng.normal(size=50)])
        rng.shuffle(col)
        np.testing.assert_array_equal(quantile_bin(col, 10), sort_oracle_bins(col, 10))
        assert quantile_bin(col, 10).max() < 9  # lower bins merged

    def test_equal_to_edge_goes_up(self):
        ids = quantile_bin(np.array([0.0, 1.0, 2.0, 3.0]), 2)
        assert ids.tolist() == [0, 0, 1, 1]

    @given(st.lists(st.integers(-5, 5), min_size=10, max_size=60), st.integers(2, 12))
    @settings(max_examples=100, deadline=None)
    def test_matches_oracle_on_tied_integers(self, col, bins):
        col = np.array(col, dtype=np.float64)
        np.testing.assert_array_equal(quantile_bin(col, bins), sort_oracle_bins(col, bins))

    def test_bins_must_be_at_least_two(self):
        with pytest.raises(ValueError):
            quantile_bin(np.arange(10), 1)


class TestMutualInformation:
    def test_constant_ids_zero(self):
        assert mutual_information(np.zeros(40, dtype=int), np.arange(40) % 4) == 0.0

    def test_perfect_dependence_ln4(self):
        y = np.arange(400) % 4
        assert mutual_information(y, y) == pytest.approx(math.log(4), abs=1e-15)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(5, 80))
            z = rng.integers(0, int(rng.integers(1, 8)), size=n)
            y = rng.integers(0, int(rng.integers(1, 6)), size=n)
            assert abs(mutual_information(z, y) - brute_force_mi(z.tolist(), y.tolist())) <= 1e-12

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 4)), min_size=1, max_size=80))
    @settings(max_examples=100, deadline=None)
    def test_bounds(self, pairs):
        z = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        mi = mutual_information(z, y)
        assert 0.0 <= mi <= min(entropy(z), entropy(y)) + 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=200)
        y = (x > 0).astype(int) + rng.integers(0, 2, size=200)
        base = mutual_information(quantile_bin(x, 10), y)
        for f in (np.exp, lambda v: 3.0 * v - 7.0, lambda v: v**3, np.arctan):
            assert abs(mutual_information(quantile_bin(f(x), 10), y) - base) <= 1e-12


class TestBlockScores:
    def test_noise_below_permutation_null(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 10, size=1000)
        pooled = rng.normal(size=(1000, 8))
        s = block_mi(pooled, y)
        null = [block_mi(pooled, rng.permutation(y)) for _ in range(100)]
        assert s <= np.percentile(null, 95)

    def test_one_hot_channels(self):
        y = np.arange(1000) % 4
        informative = np.eye(4)[y] * 1.0
        pooled = np.concatenate([informative, np.zeros((1000, 4))], axis=1)
        expected = 4 * mutual_information(quantile_bin(informative[:, 0], 10), y) / 8
        assert block_mi(pooled, y) == pytest.approx(expected, abs=1e-12)
        # each one-hot channel carries H(1/4, 3/4) nats about the label
        h = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
        assert block_mi(pooled, y) == pytest.approx(4 * h / 8, abs=1e-12)

    def test_channel_mi_shape(self, rng):
        assert channel_mi(rng.normal(size=(30, 5)), np.arange(30) % 3).shape == (5,)

    def test_ranking_stable_on_ties(self):
        t = score_activations({"a": np.zeros((10, 1)), "b": np.zeros((10, 1))}, np.arange(10) % 2)
        assert t.ranking() == ["a", "b"]

    def test_score_blocks_deterministic(self):
        g = tiny_resnet(seed=0)
        rng = np.random.default_rng(0)
        images = rng.normal(size=(80, 3, 32, 32)).astype(np.float32)
        labels = np.arange(80) % 10
        probe = ProbeSet.draw(images, labels, seed=3, batch_size=16, max_samples=64)
        a, b = score_blocks(g, probe), score_blocks(g, probe)
        assert a.block_scores == b.block_scores
        assert all(np.isfinite(v) and v >= 0 for v in a.block_scores.values())
        assert set(a.block_scores) == {b.name for b in g.blocks()}

    def test_identical_blocks_identical_scores(self, rng):
        act = rng.normal(size=(50, 6))
        t = score_activations({"x": act, "y": act.copy()}, np.arange(50) % 5)
        assert t.block_scores["x"] == t.block_scores["y"]

    def test_json_round_trip(self, tmp_path):
        t = ScoreTable({"layer1.0": 0.25, "layer1.1": 0.5}, {"layer1": [0.1, 0.2]}, probe_seed=7)
        t.to_json(tmp_path / "s.json")
        back = ScoreTable.from_json(tmp_path / "s.json")
        assert back.block_scores == t.block_scores and back.ranking() == t.ranking()

    def test_probe_draw_deterministic(self, rng):
        imgs, labels = rng.normal(size=(100, 3, 4, 4)), np.arange(100)
        a = ProbeSet.draw(imgs, labels, seed=1, batch_size=8, max_samples=40)
        b = ProbeSet.draw(imgs, labels, seed=1, batch_size=8, max_samples=40)
        assert np.array_equal(a.labels, b.labels) and len(a) == 40
        assert np.all(np.diff(a.labels) > 0)

    def test_probe_max_below_batch_rejected(self, rng):
        with pytest.raises(ValueError):
            ProbeSet(rng.normal(size=(4, 3, 2, 2)), np.arange(4), batch_size=64, max_samples=10)


class TestProxyScores:
    def test_zero_plane_ranks_last(self):
        g = tiny_resnet(seed=1)
        for b in g.stages["layer2"]:
            b.params["bn2.weight"].data[3] = 0.0
            b.params["conv2.weight"].data[3] = 0.0
        s = proxy_plane_scores(g, "layer2")
        assert s[3] == 0.0 and int(np.argmin(s)) == 3

    def test_direct_recomputation(self):
        g = tiny_resnet(seed=2)
        rng = np.random.default_rng(0)
        for b in g.stages["layer3"]:
            b.params["bn2.weight"].data[:] = rng.normal(size=b.out_channels)
        ref = 0.0
        for b in g.stages["layer3"]:
            gam = np.abs(b.params["bn2.weight"].data.astype(np.float64))
            l1 = np.abs(b.params["conv2.weight"].data.astype(np.float64)).sum(axis=(1, 2, 3))
            ref = ref + (gam - gam.min()) / (gam.max() - gam.min()) + (l1 - l1.min()) / (l1.max() - l1.min())
        np.testing.assert_allclose(proxy_plane_scores(g, "layer3"), ref, atol=1e-12)

    def test_mid_scores_shape(self):
        g = tiny_resnet(seed=0)
        assert proxy_mid_scores(g, "layer1.0").shape == (16,)

    def test_minmax_constant(self):
        assert np.all(minmax(np.ones(4)) == 0)

    def test_unknown_stage(self):
        with pytest.raises(KeyError):
            proxy_plane_scores(tiny_resnet(), "layer9")
