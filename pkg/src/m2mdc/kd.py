"""Training loops: teacher fit, BN recalibration and staged KD repair.

KD loss per batch::

    CE(student, y) + alpha * (1 - cos(student_logits, teacher_logits))
                   + beta  * (1 - cos(student_feat, teacher_feat))

with cosines averaged over the batch and (alpha, beta) ramped linearly from
zero in the first epoch to (alpha*, beta*) in the last.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .data import Dataset, iterate_batches
from .engine import Tensor, cosine_similarity, cross_entropy, make_optimizer, no_grad, optimizer_step
from .ir import ArchGraph, forward

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, manifest: dict):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class KDSchedule:
    epochs: int = 5
    alpha_star: float = 0.1
    beta_star: float = 0.1
    alignment: str = "cosine"  # "kl" is reserved for a softmax-KL variant, not implemented

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("KD schedule needs at least one epoch")
        if self.alignment not in ("cosine", "kl"):
            raise ValueError(f"unknown alignment {self.alignment!r}")

    def weights(self, t: int) -> tuple:
        """(alpha_t, beta_t) for 1-based epoch ``t``."""
        if not 1 <= t <= self.epochs:
            raise ValueError(f"epoch {t} outside 1..{self.epochs}")
        if self.epochs == 1:
            return 0.0, 0.0
        ramp = (t - 1) / (self.epochs - 1)
        return self.alpha_star * ramp, self.beta_star * ramp


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    teacher_lr: float = 1e-3
    kd_lr: float = 1e-4
    train_batch: int = 128
    eval_batch: int = 256
    clip_norm: float = 1.0
    teacher_epochs: int = 5
    hflip: bool = True
    bn_recal_batches: int = 50
    seed: int = 0  # batch order
    augment_seed: Optional[int] = None  # flips; falls back to ``seed``
    unfreeze: str = "all"  # or "final_third"

    def __post_init__(self):
        for name in ("teacher_lr", "kd_lr", "train_batch", "eval_batch", "clip_norm", "teacher_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.bn_recal_batches < 0:
            raise ValueError("TrainConfig.bn_recal_batches must be >= 0")
        if self.unfreeze not in ("all", "final_third"):
            raise ValueError("TrainConfig.unfreeze must be 'all' or 'final_third'")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _const(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(np.asarray(x))


def kd_loss(student_logits, teacher_logits, student_feat, teacher_feat, labels, alpha: float, beta: float):
    """Return (loss tensor, dict of float components)."""
    ce = cross_entropy(student_logits, labels)
    parts = {"ce": ce.item()}
    loss = ce
    t_logits, t_feat = _const(teacher_logits), _const(teacher_feat)
    logit_align = 1.0 - cosine_similarity(student_logits, t_logits).mean()
    feat_align = 1.0 - cosine_similarity(student_feat, t_feat).mean()
    parts["logit_align"] = logit_align.item()
    parts["feat_align"] = feat_align.item()
    if alpha:
        loss = loss + alpha * logit_align
    if beta:
        loss = loss + beta * feat_align
    parts["loss"] = loss.item()
    return loss, parts


# ---------------------------------------------------------------------------
# evaluation / recalibration
# ---------------------------------------------------------------------------


def evaluate(graph: ArchGraph, ds: Dataset, batch_size: int = 256) -> dict:
    total_ce, correct = 0.0, 0
    with no_grad():
        for x, y, _, _ in iterate_batches(ds, batch_size):
            res = forward(graph, x, mode="eval")
            total_ce += cross_entropy(res.logits, y).item() * len(y)
            correct += int((res.logits.data.argmax(axis=1) == y).sum())
    n = len(ds)
    return {"ce": total_ce / n, "acc": 100.0 * correct / n}


def bn_recalibrate(graph: ArchGraph, loader: Iterable, num_batches: int = 50) -> ArchGraph:
    """Refresh BN running statistics with forward-only passes; nothing else changes."""
    out = graph.clone()
    if num_batches == 0:
        return out
    seen = 0
    for item in loader:
        if seen >= num_batches:
            break
        x = item[0] if isinstance(item, tuple) else item
        forward(out, x, mode="recalibrate")
        seen += 1
    if seen == 0:
        raise ValueError("bn_recalibrate: loader yielded no batches")
    if seen < num_batches:
        warnings.warn(f"bn_recalibrate: loader exhausted after {seen} of {num_batches} batches")
    return out


def recal_loader(ds: Dataset, batch_size: int, passes: Optional[int] = None):
    """Deterministic, unaugmented passes over the training split.

    Cycles through the split ``passes`` times (forever when None) so a small
    split can still feed the requested number of recalibration batches.
    """
    p = 0
    while passes is None or p < passes:
        yield from iterate_batches(ds, batch_size)
        p += 1


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def trainable_prefixes(graph: ArchGraph, unfreeze: str) -> Optional[List[str]]:
    """Parameter prefixes left trainable; None means everything."""
    if unfreeze == "all":
        return None
    stages = list(graph.stages)
    first = (2 * len(stages)) // 3
    return stages[first:] + ["head"]


def _frozen_stages(graph: ArchGraph, prefixes) -> tuple:
    if prefixes is None:
        return ()
    return tuple(s for s in graph.stages if s not in prefixes)


def _collect_grads(params: Dict[str, Tensor]) -> Dict[str, Optional[np.ndarray]]:
    grads = {}
    for name, p in params.items():
        if p.requires_grad:
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return grads


def _augment_seed(config: TrainConfig) -> int:
    return config.seed if config.augment_seed is None else config.augment_seed


def _check_finite(value: float, where: str, manifest: dict) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {where}", dict(manifest, where=where))


def train_teacher(
    graph: ArchGraph,
    data: Dataset,
    config: TrainConfig,
    eval_data: Optional[Dataset] = None,
    epochs: Optional[int] = None,
) -> tuple:
    """Fit with cross-entropy; returns ``(graph, history)``.

    With ``unfreeze='final_third'`` only the last third of the stages and the
    head train; frozen stages (and the stem) also keep their BN statistics.
    """
    g = graph.clone()
    prefixes = trainable_prefixes(g, config.unfreeze)
    g.set_requires_grad(False)
    g.set_requires_grad(True, prefixes)
    frozen = _frozen_stages(g, prefixes)
    params = g.named_parameters()
    opt = make_optimizer(config.optimizer, {k: p for k, p in params.items() if p.requires_grad}, config.teacher_lr)
    rng_shuffle = np.random.default_rng([config.seed, 101])
    rng_flip = np.random.default_rng([_augment_seed(config), 102])
    history = []
    n_epochs = epochs if epochs is not None else config.teacher_epochs
    manifest = {"phase": "teacher", "config": config.to_dict()}
    for epoch in range(1, n_epochs + 1):
        tot, correct, n = 0.0, 0, 0
        for x, y, _, _ in iterate_batches(data, config.train_batch, rng_shuffle, rng_flip if config.hflip else None):
            res = forward(g, x, mode="train", frozen_stages=frozen)
            loss = cross_entropy(res.logits, y)
            _check_finite(loss.item(), f"teacher epoch {epoch}", manifest)
            loss.backward()
            optimizer_step(params, _collect_grads(params), opt, config.clip_norm)
            tot += loss.item() * len(y)
            correct += int((res.logits.data.argmax(axis=1) == y).sum())
            n += len(y)
        row = {"epoch": epoch, "ce": tot / n, "train_acc": 100.0 * correct / n}
        if eval_data is not None:
            ev = evaluate(g, eval_data, config.eval_batch)
            row.update(eval_ce=ev["ce"], eval_acc=ev["acc"])
        logger.info("teacher epoch %d: %s", epoch, row)
        history.append(row)
    g.set_requires_grad(True)
    return g, history


class TeacherCache:
    """Memoised eval-mode teacher outputs keyed by (sample index, flipped)."""

    def __init__(self, teacher: ArchGraph, data: Dataset):
        self.teacher, self.data = teacher, data
        self._store: Dict[tuple, tuple] = {}

    def lookup(self, x: np.ndarray, idx: np.ndarray, flipped: np.ndarray) -> tuple:
        keys = [(int(i), bool(f)) for i, f in zip(idx, flipped)]
        missing = [j for j, k in enumerate(keys) if k not in self._store]
        if missing:
            with no_grad():
                res = forward(self.teacher, x[missing], mode="eval")
            for j, lo, fe in zip(missing, res.logits.data, res.features.data):
                self._store[keys[j]] = (lo.copy(), fe.copy())
        logits = np.stack([self._store[k][0] for k in keys])
        feats = np.stack([self._store[k][1] for k in keys])
        return logits, feats


def kd_phase(
    student: ArchGraph,
    teacher: ArchGraph,
    data: Dataset,
    schedule: KDSchedule,
    config: TrainConfig,
    eval_data: Optional[Dataset] = None,
    tag: str = "kd",
    cache: Optional[TeacherCache] = None,
    feature_index=None,
) -> tuple:
    """Run ``schedule.epochs`` KD epochs; returns ``(student, per-epoch rows)``.

    ``feature_index`` picks the teacher feature channels the student's
    (plane-sliced) last stage still carries, so both sides of the feature
    alignment live in the same coordinates.
    """
    if schedule.alignment != "cosine":
        raise NotImplementedError(f"{schedule.alignment!r} alignment is not implemented")
    s = student.clone()
    s.set_requires_grad(True)
    params = s.named_parameters()
    opt = make_optimizer(config.optimizer, params, config.kd_lr)
    cache = cache or TeacherCache(teacher, data)
    tag_seed = sum(tag.encode())
    rng_shuffle = np.random.default_rng([config.seed, 201, tag_seed])
    rng_flip = np.random.default_rng([_augment_seed(config), 202, tag_seed])
    manifest = {"phase": tag, "config": config.to_dict(), "schedule": asdict(schedule)}
    rows = []
    for epoch in range(1, schedule.epochs + 1):
        alpha, beta = schedule.weights(epoch)
        sums = {"ce": 0.0, "logit_align": 0.0, "feat_align": 0.0}
        correct, n = 0, 0
        for x, y, idx, flipped in iterate_batches(data, config.train_batch, rng_shuffle, rng_flip if config.hflip else None):
            t_logits, t_feat = cache.lookup(x, idx, flipped)
            if feature_index is not None:
                t_feat = t_feat[:, feature_index]
            res = forward(s, x, mode="train")
            loss, parts = kd_loss(res.logits, t_logits, res.features, t_feat, y, alpha, beta)
            _check_finite(parts["loss"], f"{tag} epoch {epoch}", manifest)
            loss.backward()
            optimizer_step(params, _collect_grads(params), opt, config.clip_norm)
            for k in sums:
                sums[k] += parts[k] * len(y)
            correct += int((res.logits.data.argmax(axis=1) == y).sum())
            n += len(y)
        row = {
            "epoch": epoch,
            "ce": sums["ce"] / n,
            "logit_align": sums["logit_align"] / n,
            "feat_align": sums["feat_align"] / n,
            "train_acc": 100.0 * correct / n,
            "alpha": alpha,
            "beta": beta,
        }
        if eval_data is not None:
            ev = evaluate(s, eval_data, config.eval_batch)
            row.update(eval_ce=ev["ce"], eval_acc=ev["acc"])
        logger.info("%s epoch %d: %s", tag, epoch, row)
        rows.append(row)
    return s, rows


LOG_COLUMNS = ("epoch", "ce", "logit_align", "feat_align", "eval_acc", "alpha", "beta")


def write_log_csv(rows: List[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS) + ["train_acc", "eval_ce"], extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in w.fieldnames})
