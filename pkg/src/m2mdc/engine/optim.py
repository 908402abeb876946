"""Adam / SGD updates with global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def make_optimizer(kind: str, params: Mapping[str, Tensor], learning_rate: float, **kw) -> OptimizerState:
    state = OptimizerState(kind=kind, learning_rate=learning_rate, **kw)
    if kind == "adam":
        for name, p in params.items():
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
    return state


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    return float(np.sqrt(total))


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimizerState,
    clip_norm: Optional[float] = None,
) -> float:
    """Update ``params`` in place and return the pre-clip global gradient norm.

    Parameters without a gradient entry (or with ``None``) are skipped, which
    is how frozen parameters stay bit-identical.
    """
    live = {}
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        live[name] = g

    norm = global_grad_norm(live)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm

    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for name, g in live.items():
            p = params[name]
            p.data -= (lr * scale * g).astype(p.dtype)
        return norm

    b1, b2, eps, t = state.beta1, state.beta2, state.epsilon, state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in live.items():
        p = params[name]
        if scale != 1.0:
            g = g * scale
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return norm
