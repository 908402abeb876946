"""Label-aware block saliency from pooled activations.

A block's score is the channel-mean of the plug-in mutual information (nats)
between each quantile-binned pooled channel and the labels. Plane and mid
channel proxy scores (|gamma| plus filter l1, min-max normalised) live here too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .engine import Tensor, no_grad
from .ir import BASIC, ArchGraph, enumerate_blocks, forward

ESTIMATORS = ("quantile_mi", "bn_gamma", "l1_norm")


@dataclass
class ProbeSet:
    """Fixed-order probe samples used for every scoring pass of a run."""

    images: np.ndarray
    labels: np.ndarray
    batch_size: int = 64
    max_samples: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.max_samples < self.batch_size:
            raise ValueError("max_samples must be >= batch_size")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    @classmethod
    def draw(cls, images, labels, seed: int, batch_size: int = 64, max_samples: int = 5000) -> "ProbeSet":
        """Seeded subset (sorted back into dataset order) of at most ``max_samples``."""
        n = len(labels)
        rng = np.random.default_rng(seed)
        take = min(n, max_samples)
        idx = np.sort(rng.permutation(n)[:take])
        return cls(images[idx], np.asarray(labels)[idx], batch_size, max_samples, seed)

    def __len__(self):
        return len(self.labels)

    def batches(self):
        for s in range(0, len(self.labels), self.batch_size):
            yield self.images[s : s + self.batch_size], self.labels[s : s + self.batch_size]


@dataclass
class ScoreTable:
    block_scores: Dict[str, float]
    per_plane_scores: Dict[str, List[float]] = field(default_factory=dict)
    bins: int = 10
    estimator: str = "quantile_mi"
    probe_seed: Optional[int] = None
    order: List[str] = field(default_factory=list)  # enumeration order, used for tie-breaks

    def __post_init__(self):
        if not self.order:
            self.order = list(self.block_scores)

    def ranking(self, descending: bool = False) -> List[str]:
        """Stable ranking; equal scores keep enumeration order."""
        pos = {n: i for i, n in enumerate(self.order)}
        names = sorted(self.block_scores, key=lambda n: pos.get(n, len(pos)))
        return sorted(names, key=lambda n: -self.block_scores[n] if descending else self.block_scores[n])

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "bins": self.bins,
            "probe_seed": self.probe_seed,
            "block_scores": {n: self.block_scores[n] for n in self.order},
            "ranking_ascending": self.ranking(),
            "ranking_descending": self.ranking(descending=True),
            "per_plane_scores": self.per_plane_scores,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTable":
        return cls(
            block_scores={k: float(v) for k, v in d["block_scores"].items()},
            per_plane_scores=d.get("per_plane_scores", {}),
            bins=d.get("bins", 10),
            estimator=d.get("estimator", "quantile_mi"),
            probe_seed=d.get("probe_seed"),
            order=list(d["block_scores"]),
        )

    @classmethod
    def from_json(cls, path) -> "ScoreTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# estimator primitives
# ---------------------------------------------------------------------------


def pool_activations(tapped: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Spatial mean of each [N,C,H,W] activation -> [N,C]."""
    out = {}
    for name, a in tapped.items():
        arr = a.data if isinstance(a, Tensor) else np.asarray(a)
        out[name] = arr.mean(axis=(2, 3))
    return out


def quantile_bin(column, bins: int = 10) -> np.ndarray:
    """Equal-frequency bin ids for one channel.

    Edge ``k`` is the order statistic at rank ``floor(k*N/bins)``; a value
    equal to an edge lands in the upper bin. Duplicate edges (ties) merge
    bins, and ids are compacted to 0..m-1, so a constant column is all zeros.
    Binning depends only on ranks, hence any strictly increasing transform of
    the column yields the same ids.
    """
    x = np.asarray(column)
    n = x.shape[0]
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    srt = np.sort(x, kind="stable")
    ranks = (np.arange(1, bins, dtype=np.int64) * n) // bins
    edges = srt[np.minimum(ranks, n - 1)]
    raw = np.searchsorted(edges, x, side="right")
    _, ids = np.unique(raw, return_inverse=True)
    return ids.astype(np.int64).reshape(n)


def mutual_information(bin_ids, labels) -> float:
    """Plug-in I(Z;Y) in nats from the joint empirical histogram."""
    z = np.asarray(bin_ids, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if n == 0:
        return 0.0
    _, z = np.unique(z, return_inverse=True)
    _, y = np.unique(y, return_inverse=True)
    nz, ny = int(z.max()) + 1, int(y.max()) + 1
    joint = np.bincount(z * ny + y, minlength=nz * ny).reshape(nz, ny).astype(np.float64)
    pz = joint.sum(axis=1) / n
    py = joint.sum(axis=0) / n
    pj = joint / n
    nzr, nzc = np.nonzero(joint)
    p = pj[nzr, nzc]
    mi = float(np.sum(p * np.log(p / (pz[nzr] * py[nzc]))))
    return max(mi, 0.0)


def entropy(ids) -> float:
    _, counts = np.unique(np.asarray(ids), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def channel_mi(pooled: np.ndarray, labels, bins: int = 10) -> np.ndarray:
    """MI of every column of a pooled [N,C] matrix with the labels."""
    pooled = np.asarray(pooled)
    return np.array([mutual_information(quantile_bin(pooled[:, c], bins), labels) for c in range(pooled.shape[1])])


def block_mi(pooled: np.ndarray, labels, bins: int = 10) -> float:
    return float(np.mean(channel_mi(pooled, labels, bins)))


def score_activations(pooled: Dict[str, np.ndarray], labels, bins: int = 10, order: Optional[Sequence[str]] = None) -> ScoreTable:
    names = list(order) if order is not None else list(pooled)
    scores = {n: block_mi(pooled[n], labels, bins) for n in names}
    return ScoreTable(scores, bins=bins, order=names)


# ---------------------------------------------------------------------------
# graph-level scoring
# ---------------------------------------------------------------------------


def collect_pooled(graph: ArchGraph, probe: ProbeSet, names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    names = list(names) if names is not None else [n for n, _ in enumerate_blocks(graph)]
    chunks: Dict[str, list] = {n: [] for n in names}
    with no_grad():
        for xb, _ in probe.batches():
            res = forward(graph, xb, mode="eval", taps=names)
            for n, z in pool_activations(res.taps).items():
                chunks[n].append(z.astype(np.float64))
    return {n: np.concatenate(c, axis=0) for n, c in chunks.items()}


def score_blocks(graph: ArchGraph, probe: ProbeSet, bins: int = 10, estimator: str = "quantile_mi") -> ScoreTable:
    """Score every enumerated block; also attaches proxy plane scores per stage."""
    if len(probe) == 0:
        raise ValueError("probe set is empty")
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    names = [n for n, _ in enumerate_blocks(graph)]
    if estimator == "quantile_mi":
        pooled = collect_pooled(graph, probe, names)
        table = score_activations(pooled, probe.labels, bins, order=names)
    else:
        table = ScoreTable({n: _weight_block_score(graph.block(n), estimator) for n in names}, bins=bins, order=names)
    table.estimator = estimator
    table.probe_seed = probe.seed
    table.per_plane_scores = {
        s: proxy_plane_scores(graph, s).tolist() for s, blocks in graph.stages.items() if blocks[0].kind == BASIC
    }
    return table


def _weight_block_score(block, estimator: str) -> float:
    if block.kind != BASIC:
        key_bn, key_w = "project_bn.weight", "project.weight"
    else:
        key_bn, key_w = "bn2.weight", "conv2.weight"
    if estimator == "bn_gamma":
        return float(np.mean(np.abs(block.params[key_bn].data)))
    w = block.params[key_w].data
    return float(np.mean(np.abs(w).reshape(w.shape[0], -1).sum(axis=1)))


def minmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _filter_l1(w: np.ndarray) -> np.ndarray:
    return np.abs(w.astype(np.float64)).reshape(w.shape[0], -1).sum(axis=1)


def proxy_plane_scores(graph: ArchGraph, stage: str) -> np.ndarray:
    """Sum over the stage's blocks of minmax(|gamma2|) + minmax(l1 of conv2 filters)."""
    if stage not in graph.stages:
        raise KeyError(f"unknown stage {stage!r}")
    total = None
    for b in graph.stages[stage]:
        g = np.abs(b.params["bn2.weight"].data.astype(np.float64))
        s = minmax(g) + minmax(_filter_l1(b.params["conv2.weight"].data))
        total = s if total is None else total + s
    return total


def proxy_mid_scores(graph: ArchGraph, block_name: str) -> np.ndarray:
    """minmax(|gamma1|) + minmax(l1 of conv1 filters) for one block's mid channels."""
    b = graph.block(block_name)
    g = np.abs(b.params["bn1.weight"].data.astype(np.float64))
    return minmax(g) + minmax(_filter_l1(b.params["conv1.weight"].data))
