import numpy as np
import pytest

from helpers import random_slicespec, randomize_bn, zero_mask_oracle
from m2mdc import checkpoint
from m2mdc.ir import check_residual_invariants, forward, tiny_resnet
from m2mdc.profiler import profile
from m2mdc.slicer import (
    SliceError,
    SliceSpec,
    apply_slicespec,
    build_uniform_slicespec,
    co_slice_planes,
    mid_slice,
    planes_sliceable,
    select_planes,
)


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).normal(size=(4, 3, 32, 32))


def _logits(g, x):
    return forward(g, x.astype(g.stem.params["conv.weight"].dtype), mode="eval").logits.data


class TestSelectPlanes:
    def test_all(self):
        assert select_planes([0.3, 0.1, 0.2], 3) == [0, 1, 2]

    def test_tie_example(self):
        assert select_planes([0.1, 0.9, 0.5, 0.9], 2) == [1, 3]

    def test_ties_toward_lower_index(self):
        assert select_planes([0.5, 0.5, 0.5], 2) == [0, 1]

    def test_sort_oracle(self, rng):
        for _ in range(50):
            s = rng.normal(size=20)
            k = int(rng.integers(1, 21))
            oracle = sorted(sorted(range(20), key=lambda i: (-s[i], i))[:k])
            assert select_planes(s, k) == oracle

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(SliceError):
            select_planes([1.0, 2.0, 3.0], k)


class TestCoSlicePlanes:
    def test_identity_slice_bit_identical(self, batch):
        g = randomize_bn(tiny_resnet(seed=1), np.random.default_rng(1))
        out = co_slice_planes(g, "layer2", list(range(32)))
        assert np.array_equal(_logits(g, batch), _logits(out, batch))

    @pytest.mark.parametrize("stage", ["layer2", "layer3"])
    def test_zero_mask_oracle_f32(self, stage, batch):
        rng = np.random.default_rng(2)
        g = randomize_bn(tiny_resnet(seed=2), rng)
        c = g.stages[stage][0].out_channels
        kept = sorted(rng.choice(c, size=c // 3, replace=False).tolist())
        out = co_slice_planes(g, stage, kept)
        assert check_residual_invariants(out) == []
        ref = _logits(zero_mask_oracle(g, SliceSpec({stage: kept})), batch)
        np.testing.assert_allclose(_logits(out, batch), ref, atol=1e-5, rtol=0)
        assert np.abs(ref - _logits(g, batch)).max() > 1e-3  # the mask really changes the model

    def test_zero_mask_oracle_f64(self, batch):
        rng = np.random.default_rng(3)
        g = randomize_bn(tiny_resnet(seed=3, dtype=np.float64), rng)
        kept = [0, 3, 5, 8, 13, 21, 30]
        out = co_slice_planes(g, "layer2", kept)
        ref = _logits(zero_mask_oracle(g, SliceSpec({"layer2": kept})), batch)
        np.testing.assert_allclose(_logits(out, batch), ref, atol=1e-10, rtol=0)

    def test_half_planes_halves_conv2(self):
        g = tiny_resnet()
        before = sum(b.params["conv2.weight"].data.size for b in g.stages["layer3"])
        out = co_slice_planes(g, "layer3", list(range(0, 64, 2)))
        after = sum(b.params["conv2.weight"].data.size for b in out.stages["layer3"])
        assert after * 2 == before

    def test_last_stage_slices_head(self):
        out = co_slice_planes(tiny_resnet(), "layer3", list(range(10)))
        assert out.head.params["fc.weight"].shape == (10, 10)

    def test_stage_without_transition_rejected(self):
        g = tiny_resnet()
        assert not planes_sliceable(g, "layer1")
        with pytest.raises(SliceError, match="downsample"):
            co_slice_planes(g, "layer1", [0])

    def test_bad_indices(self):
        g = tiny_resnet()
        with pytest.raises(SliceError):
            co_slice_planes(g, "layer2", [0, 0])
        with pytest.raises(SliceError):
            co_slice_planes(g, "layer2", [32])
        with pytest.raises(SliceError):
            co_slice_planes(g, "layer2", [])


class TestMidSlice:
    def test_identity(self, batch):
        g = randomize_bn(tiny_resnet(seed=4), np.random.default_rng(4))
        out = mid_slice(g, "layer1.1", list(range(16)))
        assert np.array_equal(_logits(g, batch), _logits(out, batch))

    def test_zero_mask_oracle(self, batch):
        g = randomize_bn(tiny_resnet(seed=5), np.random.default_rng(5))
        kept = [1, 4, 9, 20, 31]
        out = mid_slice(g, "layer2.0", kept)
        ref = _logits(zero_mask_oracle(g, SliceSpec(mids={"layer2.0": kept})), batch)
        np.testing.assert_allclose(_logits(out, batch), ref, atol=1e-5, rtol=0)

    def test_macs_scale_with_kept(self):
        g = tiny_resnet()
        out = mid_slice(g, "layer3.1", list(range(16)))
        a = {l.name: l.macs for l in profile(g, (1, 3, 32, 32)).layers}
        b = {l.name: l.macs for l in profile(out, (1, 3, 32, 32)).layers}
        for conv in ("layer3.1.conv1", "layer3.1.conv2"):
            assert b[conv] * 4 == a[conv]
        assert b["layer3.0.conv1"] == a["layer3.0.conv1"]


class TestSliceSpecs:
    def test_random_specs_legal_and_exact(self, batch):
        rng = np.random.default_rng(6)
        g = randomize_bn(tiny_resnet(seed=6), rng)
        for _ in range(20):
            spec = random_slicespec(g, rng)
            out = apply_slicespec(g, spec)
            assert check_residual_invariants(out) == []
            np.testing.assert_allclose(_logits(out, batch[:2]), _logits(zero_mask_oracle(g, spec), batch[:2]),
                                       atol=1e-5, rtol=0)

    def test_uniform_identity(self):
        g = tiny_resnet()
        spec = build_uniform_slicespec(g, 1.0, 1.0)
        assert spec.planes["layer2"] == list(range(32))
        assert all(len(v) == 16 for k, v in spec.mids.items() if k.startswith("layer1"))

    def test_uniform_half(self):
        g = tiny_resnet()
        spec = build_uniform_slicespec(g, 0.5, 0.5)
        assert len(spec.planes["layer3"]) == 32
        assert "layer1" not in spec.planes

    def test_uniform_random_fractions_valid(self, rng):
        g = tiny_resnet()
        for _ in range(20):
            spec = build_uniform_slicespec(g, float(rng.uniform(0.01, 1)), float(rng.uniform(0.01, 1)))
            spec.validate(g)

    def test_per_stage_fraction(self):
        spec = build_uniform_slicespec(tiny_resnet(), {"layer2": 0.25}, 1.0)
        assert len(spec.planes["layer2"]) == 8 and len(spec.planes["layer3"]) == 64

    def test_bad_fraction(self):
        with pytest.raises(SliceError):
            build_uniform_slicespec(tiny_resnet(), 0.0, 1.0)

    def test_json_round_trip(self, tmp_path):
        spec = build_uniform_slicespec(tiny_resnet(), 0.5, 0.5)
        spec.to_json(tmp_path / "s.json")
        back = SliceSpec.from_json(tmp_path / "s.json")
        assert back.planes == spec.planes and back.mids == spec.mids

    def test_slice_commutes_with_checkpoint(self, tmp_path):
        g = randomize_bn(tiny_resnet(seed=7), np.random.default_rng(7))
        spec = build_uniform_slicespec(g, 0.5, 0.5)
        a = checkpoint.from_bytes(checkpoint.to_bytes(apply_slicespec(g, spec)))
        b = apply_slicespec(checkpoint.from_bytes(checkpoint.to_bytes(g)), spec)
        assert checkpoint.to_bytes(a) == checkpoint.to_bytes(b)
