import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import GRAD_CASES, N_GRAD_SHAPES, check_op
from m2mdc.engine import (
    NonFiniteGradient,
    ShapeError,
    Tensor,
    batchnorm2d,
    conv2d,
    cosine_similarity,
    cross_entropy,
    degenerate_cosine_count,
    linear,
    make_optimizer,
    no_grad,
    optimizer_step,
    reset_degenerate_cosine_count,
    residual_add,
    tensor,
)
from m2mdc.engine.optim import global_grad_norm


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("k", range(N_GRAD_SHAPES))
def test_gradient_matches_finite_differences(name, k):
    rng = np.random.default_rng([k, 7])
    op, arrays = GRAD_CASES[name](rng, k)
    assert check_op(op, arrays, seed=k) <= 1e-6


class TestConv:
    def test_direct_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 3, 3))
        for n in range(2):
            for o in range(4):
                for i in range(3):
                    for j in range(3):
                        ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_grouped_equals_split(self, rng):
        x = rng.normal(size=(1, 4, 5, 5))
        w = rng.normal(size=(6, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), padding=1, groups=2).data
        a = conv2d(Tensor(x[:, :2]), Tensor(w[:3]), padding=1).data
        b = conv2d(Tensor(x[:, 2:]), Tensor(w[3:]), padding=1).data
        np.testing.assert_allclose(out, np.concatenate([a, b], axis=1), atol=1e-12)

    def test_stride_two_floor_extent(self):
        out = conv2d(Tensor(np.zeros((1, 1, 32, 32))), Tensor(np.zeros((1, 1, 1, 1))), stride=2)
        assert out.shape == (1, 1, 16, 16)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="Cin"):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestBatchNorm:
    def test_train_mode_updates_running_stats(self, rng):
        x = rng.normal(loc=2.0, size=(4, 3, 5, 5))
        rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
        batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, mode="train")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3)) * m / (m - 1)
        np.testing.assert_allclose(rm.data, 0.1 * mean, atol=1e-12)
        np.testing.assert_allclose(rv.data, 0.9 + 0.1 * var, atol=1e-12)

    def test_eval_mode_leaves_buffers(self, rng):
        rm, rv = Tensor(rng.normal(size=3)), Tensor(rng.uniform(1, 2, size=3))
        before = rm.data.copy(), rv.data.copy()
        batchnorm2d(Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, "eval")
        assert np.array_equal(rm.data, before[0]) and np.array_equal(rv.data, before[1])

    def test_recalibrate_records_no_tape(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        out = batchnorm2d(x, Tensor(np.ones(3), requires_grad=True), Tensor(np.zeros(3)),
                          Tensor(np.zeros(3)), Tensor(np.ones(3)), mode="recalibrate")
        assert not out.requires_grad

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeError, match="gamma"):
            batchnorm2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(3)),
                        Tensor(np.zeros(3)), Tensor(np.ones(3)))


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        out = cross_entropy(Tensor(np.zeros((4, 10))), [0, 1, 2, 3])
        assert out.item() == pytest.approx(np.log(10), abs=1e-12)

    def test_cross_entropy_label_count(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((4, 10))), [0, 1])

    def test_cosine_zero_vector_returns_zero_and_counts(self):
        reset_degenerate_cosine_count()
        u = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]), requires_grad=True)
        v = Tensor(np.array([[1.0, 1.0], [2.0, 0.0]]))
        c = cosine_similarity(u, v)
        np.testing.assert_allclose(c.data, [0.0, 1.0])
        assert degenerate_cosine_count() == 1
        c.sum().backward()
        assert np.all(np.isfinite(u.grad))
        np.testing.assert_array_equal(u.grad[0], 0.0)

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0.1, 10))
    @settings(max_examples=50, deadline=None)
    def test_cosine_scale_invariant(self, vec, scale):
        u = np.array([vec])
        if np.linalg.norm(u) < 1e-3:
            return
        v = np.array([[1.0, -2.0, 0.5]])
        a = cosine_similarity(Tensor(u), Tensor(v)).data
        b = cosine_similarity(Tensor(u * scale), Tensor(v)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestTape:
    def test_shared_parent_accumulates(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        (a * a + a).sum().backward()
        assert a.grad[0] == pytest.approx(7.0)

    def test_no_grad_builds_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad

    def test_nonscalar_backward_requires_grad_arg(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(Exception):
            (a * 2.0).backward()

    def test_dtype_tags(self):
        assert tensor([1, 2], dtype="f32").dtype == np.float32
        assert tensor([1, 2], dtype="f64").dtype == np.float64

    def test_residual_add_shape_check(self):
        with pytest.raises(ShapeError):
            residual_add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_linear_shape_check(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestOptimizer:
    def test_adam_first_step_is_lr_sign(self):
        p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
        st_ = make_optimizer("adam", p, 0.1)
        optimizer_step(p, {"w": np.array([0.5, -2.0])}, st_)
        # bias-corrected first step moves each coordinate by ~lr
        np.testing.assert_allclose(p["w"].data, [0.9, -0.9], atol=1e-6)

    def test_clip_scales_to_norm(self):
        p = {"w": Tensor(np.zeros(2), requires_grad=True)}
        st_ = make_optimizer("sgd", p, 1.0)
        norm = optimizer_step(p, {"w": np.array([3.0, 4.0])}, st_, clip_norm=1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(p["w"].data, [-0.6, -0.8], atol=1e-12)

    def test_nan_names_parameter(self):
        p = {"layer1.0.conv1.weight": Tensor(np.zeros(2), requires_grad=True)}
        st_ = make_optimizer("adam", p, 1e-3)
        with pytest.raises(NonFiniteGradient, match="layer1.0.conv1.weight"):
            optimizer_step(p, {"layer1.0.conv1.weight": np.array([np.nan, 0.0])}, st_)

    def test_none_grad_leaves_parameter_bit_identical(self):
        p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        st_ = make_optimizer("adam", p, 1e-3)
        optimizer_step(p, {"a": np.ones(2), "b": None}, st_)
        assert np.array_equal(p["b"].data, np.ones(2))
        assert not np.array_equal(p["a"].data, np.ones(2))

    def test_global_norm(self):
        assert global_grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == pytest.approx(5.0)
