"""Residual-safe channel surgery: stage planes co-slicing and mid-channel slicing.

Every edit returns a new graph and refuses to return one that fails
:func:`~m2mdc.ir.check_residual_invariants`. Kept indices keep their original
order so BN statistics stay aligned with their channels.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .engine import Tensor
from .ir import BASIC, BN_SUFFIXES, ArchGraph, GraphError, check_residual_invariants, sync_channel_fields
from .mi import proxy_mid_scores, proxy_plane_scores


class SliceError(GraphError):
    pass


def _index_set(kept, width: int, what: str) -> np.ndarray:
    idx = np.asarray(sorted(int(i) for i in kept), dtype=np.int64)
    if idx.size < 1 or idx.size > width:
        raise SliceError(f"{what}: need between 1 and {width} kept channels, got {idx.size}")
    if np.unique(idx).size != idx.size:
        raise SliceError(f"{what}: kept indices are not unique")
    if idx[0] < 0 or idx[-1] >= width:
        raise SliceError(f"{what}: kept indices must lie in [0, {width})")
    return idx


@dataclass
class SliceSpec:
    planes: Dict[str, List[int]] = field(default_factory=dict)
    mids: Dict[str, List[int]] = field(default_factory=dict)
    fractions: Optional[Dict[str, float]] = None

    def validate(self, graph: ArchGraph) -> None:
        for stage, kept in self.planes.items():
            if stage not in graph.stages:
                raise SliceError(f"unknown stage {stage!r}")
            _index_set(kept, stage_planes(graph, stage), f"planes[{stage}]")
        for name, kept in self.mids.items():
            b = graph.block(name)
            _index_set(kept, b.mid_channels, f"mids[{name}]")

    def to_dict(self) -> dict:
        return {"planes": self.planes, "mids": self.mids, "fractions": self.fractions}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SliceSpec":
        return cls(
            planes={k: [int(i) for i in v] for k, v in d.get("planes", {}).items()},
            mids={k: [int(i) for i in v] for k, v in d.get("mids", {}).items()},
            fractions=d.get("fractions"),
        )

    @classmethod
    def from_json(cls, path) -> "SliceSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def stage_planes(graph: ArchGraph, stage: str) -> int:
    return int(graph.stages[stage][0].params["conv2.weight"].shape[0])


def planes_sliceable(graph: ArchGraph, stage: str) -> bool:
    """Only stages that open with a projection shortcut own their residual stream."""
    blocks = graph.stages[stage]
    return bool(blocks) and blocks[0].kind == BASIC and blocks[0].has_downsample


def select_planes(scores, k: int) -> List[int]:
    """Indices of the ``k`` largest scores (ties toward the lower index), ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise SliceError(f"K={k} out of range for {s.size} planes")
    order = np.lexsort((np.arange(s.size), -s))
    return sorted(int(i) for i in order[:k])


def _take(t: Tensor, idx: np.ndarray, axis: int) -> None:
    t.data = np.ascontiguousarray(np.take(t.data, idx, axis=axis))
    t.grad = None


def _slice_bn(params, prefix: str, idx: np.ndarray) -> None:
    for k in BN_SUFFIXES:
        _take(params[f"{prefix}.{k}"], idx, 0)


def _verify(graph: ArchGraph, what: str) -> ArchGraph:
    problems = check_residual_invariants(graph)
    if problems:
        raise SliceError(f"{what} produced an illegal graph: " + "; ".join(problems))
    sync_channel_fields(graph)
    return graph


def co_slice_planes(graph: ArchGraph, stage: str, kept) -> ArchGraph:
    """Restrict a stage's residual planes to ``kept``.

    Slices every block's conv2/bn2 outputs, the transition block's
    downsample conv/bn outputs, the conv1 inputs of the stage's later blocks
    (they read the sliced stream), and the consumer of the stage output: the
    next stage's conv1 and downsample inputs, or the classifier columns.
    """
    if stage not in graph.stages:
        raise SliceError(f"unknown stage {stage!r}")
    if not planes_sliceable(graph, stage):
        raise SliceError(f"{stage}: first block has no downsample shortcut; its residual stream is owned upstream")
    idx = _index_set(kept, stage_planes(graph, stage), f"planes[{stage}]")
    g = graph.clone()
    names = list(g.stages)
    blocks = g.stages[stage]
    for j, b in enumerate(blocks):
        p = b.params
        _take(p["conv2.weight"], idx, 0)
        _slice_bn(p, "bn2", idx)
        if j == 0:
            _take(p["downsample.conv.weight"], idx, 0)
            _slice_bn(p, "downsample.bn", idx)
        else:
            _take(p["conv1.weight"], idx, 1)
    pos = names.index(stage)
    if pos + 1 < len(names):
        nxt = g.stages[names[pos + 1]][0]
        _take(nxt.params["conv1.weight"], idx, 1)
        if nxt.has_downsample:
            _take(nxt.params["downsample.conv.weight"], idx, 1)
    else:
        h = g.head.params
        if g.head.conv_channels:
            _take(h["conv.weight"], idx, 1)
        else:
            _take(h["fc.weight"], idx, 1)
    return _verify(g, f"co_slice_planes({stage})")


def mid_slice(graph: ArchGraph, block_name: str, kept) -> ArchGraph:
    """Keep only ``kept`` mid channels (conv1 out / bn1 / conv2 in) of one block."""
    b0 = graph.block(block_name)
    if b0.kind != BASIC:
        raise SliceError(f"{block_name}: mid slicing is defined for BasicResidual blocks only")
    idx = _index_set(kept, int(b0.params["conv1.weight"].shape[0]), f"mids[{block_name}]")
    g = graph.clone()
    p = g.block(block_name).params
    _take(p["conv1.weight"], idx, 0)
    _slice_bn(p, "bn1", idx)
    _take(p["conv2.weight"], idx, 1)
    return _verify(g, f"mid_slice({block_name})")


def build_uniform_slicespec(
    graph: ArchGraph,
    plane_fraction=1.0,
    mid_fraction=1.0,
) -> SliceSpec:
    """Uniform keep fractions turned into concrete index sets via proxy scores.

    Each fraction is a scalar or a per-stage mapping. Planes are only sliced
    in stages that own their residual stream; mids in every basic block.
    """
    def frac(f, stage):
        v = f.get(stage, 1.0) if isinstance(f, dict) else f
        if not 0.0 < v <= 1.0:
            raise SliceError(f"keep fraction for {stage} must be in (0, 1], got {v}")
        return float(v)

    planes, mids, fractions = OrderedDict(), OrderedDict(), OrderedDict()
    for stage, blocks in graph.stages.items():
        fp = frac(plane_fraction, stage)
        fm = frac(mid_fraction, stage)
        fractions[stage] = {"planes": fp, "mids": fm}
        if planes_sliceable(graph, stage):
            c = stage_planes(graph, stage)
            k = max(1, int(round(fp * c)))
            planes[stage] = select_planes(proxy_plane_scores(graph, stage), k)
        for b in blocks:
            if b.kind != BASIC:
                continue
            c = int(b.params["conv1.weight"].shape[0])
            k = max(1, int(round(fm * c)))
            mids[b.name] = select_planes(proxy_mid_scores(graph, b.name), k)
    return SliceSpec(dict(planes), dict(mids), dict(fractions))


def apply_planes(graph: ArchGraph, spec: SliceSpec) -> ArchGraph:
    g = graph
    for stage, kept in spec.planes.items():
        g = co_slice_planes(g, stage, kept)
    return g


def apply_mids(graph: ArchGraph, spec: SliceSpec) -> ArchGraph:
    g = graph
    for name, kept in spec.mids.items():
        g = mid_slice(g, name, kept)
    return g


def apply_slicespec(graph: ArchGraph, spec: SliceSpec) -> ArchGraph:
    """Planes first, then mids."""
    spec.validate(graph)
    return apply_mids(apply_planes(graph, spec), spec)
