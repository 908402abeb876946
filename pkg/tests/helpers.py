"""Shared test utilities: finite differences and small graph fixtures."""

import numpy as np

from m2mdc.engine import Tensor


def numeric_grad(f, arrays, idx, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[idx]``."""
    x = arrays[idx]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, arrays, seed=0, grad_mask=None):
    """Max relative error between analytic and numeric gradients of
    ``sum(op(*tensors) * R)`` over every input in ``arrays``."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = {}

    def scalar(*arrs):
        out = op(*[Tensor(a.copy()) for a in arrs])
        if "R" not in probe:
            probe["R"] = rng.normal(size=out.shape)
        return float((out.data * probe["R"]).sum())

    scalar(*arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    out.backward(probe["R"])
    worst = 0.0
    for i, t in enumerate(ts):
        if grad_mask is not None and not grad_mask[i]:
            continue
        num = numeric_grad(scalar, arrays, i)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def distinct_values(rng, shape, spacing=1e-2):
    """Values with pairwise gaps >= ``spacing`` (no ties for max-pool)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


# --- gradient-check cases: name -> builder(rng, k) -> (op, arrays) -----------

from m2mdc.engine import (  # noqa: E402
    batchnorm2d,
    conv2d,
    cosine_similarity,
    cross_entropy,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    residual_add,
)

_CONV_SHAPES = [
    # (N, Cin, H, W, Cout, k, stride, pad, groups)
    (1, 1, 5, 5, 1, 3, 1, 0, 1),
    (2, 3, 6, 6, 4, 3, 1, 1, 1),
    (2, 4, 7, 7, 2, 3, 2, 1, 1),
    (1, 4, 6, 5, 4, 3, 1, 1, 4),
    (2, 2, 5, 6, 3, 1, 2, 0, 1),
    (1, 6, 8, 8, 4, 3, 2, 1, 2),
]


def _conv_case(rng, k):
    n, ci, h, w, co, ks, s, p, g = _CONV_SHAPES[k]
    x = rng.normal(size=(n, ci, h, w))
    wt = rng.normal(size=(co, ci // g, ks, ks))
    return (lambda a, b: conv2d(a, b, stride=s, padding=p, groups=g)), [x, wt]


_IMG_SHAPES = [(1, 1, 4, 4), (2, 3, 5, 5), (2, 2, 6, 7), (3, 4, 3, 3), (1, 5, 8, 6), (2, 3, 2, 5)]


def _pool_case(rng, k):
    return (lambda a: max_pool2d(a, 3, 2, 1)), [distinct_values(rng, _IMG_SHAPES[k])]


def _bn_case(mode):
    def build(rng, k):
        shape = _IMG_SHAPES[k]
        c = shape[1]
        rm = rng.normal(size=c)
        rv = rng.uniform(0.5, 2.0, size=c)

        def op(x, g, b):
            return batchnorm2d(x, g, b, Tensor(rm.copy()), Tensor(rv.copy()), mode=mode)

        return op, [rng.normal(size=shape), rng.uniform(0.5, 1.5, size=c), rng.normal(size=c)]

    return build


def _relu_case(rng, k):
    return relu, [away_from_zero(rng, _IMG_SHAPES[k])]


def _add_case(rng, k):
    s = _IMG_SHAPES[k]
    return residual_add, [rng.normal(size=s), rng.normal(size=s)]


def _gap_case(rng, k):
    return global_avg_pool, [rng.normal(size=_IMG_SHAPES[k])]


_MAT_SHAPES = [(1, 1, 1), (2, 3, 4), (5, 7, 3), (4, 2, 6), (3, 9, 10), (8, 4, 2)]


def _linear_case(rng, k):
    n, i, o = _MAT_SHAPES[k]
    return linear, [rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o)]


def _ce_case(rng, k):
    n, _, c = _MAT_SHAPES[k]
    c = max(c, 2)
    labels = rng.integers(0, c, size=n)
    return (lambda z: cross_entropy(z, labels)), [rng.normal(size=(n, c)) * 2]


def _cos_case(rng, k):
    n, d, _ = _MAT_SHAPES[k]
    d = max(d, 2)
    return cosine_similarity, [rng.normal(size=(n, d)), rng.normal(size=(n, d))]


def _arith_case(rng, k):
    s = _IMG_SHAPES[k]
    return (lambda a, b: ((a * b - a) + (-b) * 0.5).mean() + (a + 1.0).sum()), [rng.normal(size=s), rng.normal(size=s)]


def _broadcast_case(rng, k):
    s = _IMG_SHAPES[k]
    return (lambda a, b: a * b + b), [rng.normal(size=s), rng.normal(size=(1, s[1], 1, 1))]


GRAD_CASES = {
    "conv2d": _conv_case,
    "max_pool2d": _pool_case,
    "batchnorm2d_train": _bn_case("train"),
    "batchnorm2d_eval": _bn_case("eval"),
    "relu": _relu_case,
    "residual_add": _add_case,
    "global_avg_pool": _gap_case,
    "linear": _linear_case,
    "cross_entropy": _ce_case,
    "cosine_similarity": _cos_case,
    "tensor_arithmetic": _arith_case,
    "broadcast_mul_add": _broadcast_case,
}
N_GRAD_SHAPES = 6


# --- slicing oracles ---------------------------------------------------------


def zero_mask_oracle(graph, spec):
    """Unsliced copy of ``graph`` whose dropped planes/mids are forced to zero.

    Zeroing gamma and beta of the producing BN makes the channel exactly zero
    after ReLU (and after the residual add, where both branches are masked),
    so the sliced graph must reproduce this model's logits.
    """
    g = graph.clone()
    for stage, kept in spec.planes.items():
        blocks = g.stages[stage]
        width = blocks[0].params["conv2.weight"].shape[0]
        drop = np.setdiff1d(np.arange(width), kept)
        for j, b in enumerate(blocks):
            for key in ("bn2.weight", "bn2.bias"):
                b.params[key].data[drop] = 0.0
            if j == 0:
                for key in ("downsample.bn.weight", "downsample.bn.bias"):
                    b.params[key].data[drop] = 0.0
    for name, kept in spec.mids.items():
        b = g.block(name)
        width = b.params["conv1.weight"].shape[0]
        drop = np.setdiff1d(np.arange(width), kept)
        for key in ("bn1.weight", "bn1.bias"):
            b.params[key].data[drop] = 0.0
    return g


def random_slicespec(graph, rng):
    """Random legal planes + mids spec for a BasicResidual graph."""
    from m2mdc.slicer import SliceSpec, planes_sliceable, stage_planes

    planes, mids = {}, {}
    for stage in graph.stages:
        if planes_sliceable(graph, stage) and rng.random() < 0.8:
            c = stage_planes(graph, stage)
            k = int(rng.integers(1, c + 1))
            planes[stage] = sorted(rng.choice(c, size=k, replace=False).tolist())
    for b in graph.blocks():
        if rng.random() < 0.7:
            c = b.params["conv1.weight"].shape[0]
            k = int(rng.integers(1, c + 1))
            mids[b.name] = sorted(rng.choice(c, size=k, replace=False).tolist())
    return SliceSpec(planes, mids)


def randomize_bn(graph, rng):
    """Non-trivial BN statistics so eval-mode forwards exercise every term."""
    for name, t in graph.state().items():
        if name.endswith("running_mean") or name.endswith(".bias"):
            t.data[...] = rng.normal(scale=0.1, size=t.shape).astype(t.dtype)
        elif name.endswith("running_var"):
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape).astype(t.dtype)
    return graph


def small_config(out, seed=42, **pipeline):
    """A pipeline configuration that runs in seconds."""
    from m2mdc.config import RunConfig

    p = {"kd": {"epochs": 2}, "train": {"teacher_epochs": 1, "train_batch": 32, "eval_batch": 64, "bn_recal_batches": 2},
         "probe_batch": 16, "probe_max": 64}
    p.update(pipeline)
    return RunConfig.from_dict({
        "seed": seed,
        "out": str(out),
        "dataset": {"train_samples": 64, "eval_samples": 32},
        "model": {"widths": [8, 16, 16], "blocks": [2, 2, 2]},
        "pipeline": p,
    })


# --- acceptance verdicts -------------------------------------------------------

ACCEPTANCE_LINES = []
ACCEPTANCE_EXTRA = []


def verdict(n: int, ok: bool, detail: str) -> bool:
    """Record one ``PASS/FAIL criterion n: detail`` line for the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append((n, line))
    print(line)
    return ok
