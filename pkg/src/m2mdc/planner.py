"""Constrained greedy block pruning: scores + ratio -> legal keep_cfg."""

from __future__ import annotations

import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional

from .ir import ArchGraph, GraphError, KeepConfig, enumerate_blocks, protection_rule, reconstruct
from .mi import ScoreTable


@dataclass
class PrunePlan:
    ratio: Optional[float]  # None for hand-written keep_cfgs
    budget: int
    pruned: List[str]
    keep: KeepConfig
    skipped_protected: List[str] = field(default_factory=list)
    skipped_stage_survival: List[str] = field(default_factory=list)
    exhausted: bool = False
    source_blocks: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "budget": self.budget,
            "pruned": list(self.pruned),
            "keep_cfg": self.keep.to_dict(),
            "skipped_protected": list(self.skipped_protected),
            "skipped_stage_survival": list(self.skipped_stage_survival),
            "exhausted": self.exhausted,
            "source_blocks": list(self.source_blocks),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(
            ratio=d["ratio"],
            budget=d["budget"],
            pruned=list(d["pruned"]),
            keep=KeepConfig(OrderedDict(d["keep_cfg"])),
            skipped_protected=list(d.get("skipped_protected", [])),
            skipped_stage_survival=list(d.get("skipped_stage_survival", [])),
            exhausted=d.get("exhausted", False),
            source_blocks=list(d.get("source_blocks", [])),
        )

    @classmethod
    def from_json(cls, path) -> "PrunePlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def free_blocks(graph: ArchGraph) -> List[str]:
    return [b.name for blocks in graph.stages.values() for i, b in enumerate(blocks) if not protection_rule(b, i)]


def plan_block_prune(graph: ArchGraph, scores: ScoreTable, r: float) -> PrunePlan:
    """Walk blocks by ascending score, pruning until ``floor(r * |free|)`` are gone.

    Protected blocks and blocks whose removal would empty their stage are
    skipped (and recorded); skips do not count against the budget.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {r}")
    names = [n for n, _ in enumerate_blocks(graph)]
    missing = [n for n in names if n not in scores.block_scores]
    if missing:
        raise KeyError(f"score table has no entry for block(s) {missing}")

    position = {}
    for stage, blocks in graph.stages.items():
        for i, b in enumerate(blocks):
            position[b.name] = (stage, i, b)
    free = free_blocks(graph)
    k = math.floor(r * len(free))

    alive = {s: len(b) for s, b in graph.stages.items()}
    pruned, skip_prot, skip_stage = [], [], []
    order = ScoreTable({n: scores.block_scores[n] for n in names}, order=names).ranking()
    for name in order:
        if len(pruned) >= k:
            break
        stage, i, b = position[name]
        if protection_rule(b, i):
            skip_prot.append(name)
            continue
        if alive[stage] <= 1:
            skip_stage.append(name)
            continue
        alive[stage] -= 1
        pruned.append(name)

    exhausted = len(pruned) < k
    if exhausted:
        warnings.warn(f"prune budget {k} not reachable under constraints; pruned {len(pruned)}")
    gone = set(pruned)
    keep = KeepConfig(
        OrderedDict((s, [i for i, b in enumerate(blocks) if b.name not in gone]) for s, blocks in graph.stages.items())
    )
    return PrunePlan(r, k, pruned, keep, skip_prot, skip_stage, exhausted, names)


def plan_from_keep(graph: ArchGraph, keep: KeepConfig) -> PrunePlan:
    """Wrap a hand-written (frontier) keep_cfg as a plan after validating it."""
    keep.validate(graph)
    pruned = [b.name for s, blocks in graph.stages.items() for i, b in enumerate(blocks) if i not in keep.keep[s]]
    for s, blocks in graph.stages.items():
        for i, b in enumerate(blocks):
            if i not in keep.keep[s] and protection_rule(b, i):
                raise GraphError(f"keep_cfg removes protected block {b.name}")
    return PrunePlan(None, len(pruned), pruned, keep, source_blocks=[n for n, _ in enumerate_blocks(graph)])


def apply_plan(graph: ArchGraph, plan: PrunePlan) -> ArchGraph:
    names = [n for n, _ in enumerate_blocks(graph)]
    if plan.source_blocks and plan.source_blocks != names:
        raise GraphError(
            f"plan was made for blocks {plan.source_blocks}, graph has {names}; re-plan against this graph"
        )
    return reconstruct(graph, plan.keep)
