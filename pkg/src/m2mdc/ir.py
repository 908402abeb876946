"""Architecture IR for stage-structured CNNs.

An :class:`ArchGraph` is a stem, an ordered mapping of stages to blocks, and a
classifier head. Every tensor lives in a flat ``params`` dict on its owner
(stem, block, head) under the usual ``conv1.weight`` / ``bn1.running_mean``
style keys, which is also the naming used by the checkpoint format.

The four portability hooks are :func:`enumerate_blocks`, :func:`stage_of`,
:func:`protection_rule` and :func:`reconstruct`.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .engine import (
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    no_grad,
    relu,
    residual_add,
)

BASIC = "BasicResidual"
INVERTED = "InvertedResidual"

BN_SUFFIXES = ("weight", "bias", "running_mean", "running_var")


class GraphError(ValueError):
    """Structural problem in an ArchGraph or KeepConfig."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class BlockSpec:
    name: str
    kind: str
    stride: int
    in_channels: int
    mid_channels: int
    out_channels: int
    has_downsample: bool = False
    params: Dict[str, Tensor] = field(default_factory=dict)
    origin: Optional[str] = None
    expand: bool = True  # InvertedResidual only: False when expand ratio is 1

    @property
    def uses_residual(self) -> bool:
        if self.kind == BASIC:
            return True
        return self.stride == 1 and self.in_channels == self.out_channels

    def descriptor(self) -> dict:
        d = {
            "name": self.name,
            "kind": self.kind,
            "stride": self.stride,
            "in_channels": self.in_channels,
            "mid_channels": self.mid_channels,
            "out_channels": self.out_channels,
            "has_downsample": self.has_downsample,
            "origin": self.origin,
        }
        if self.kind == INVERTED:
            d["expand"] = self.expand
        return d


@dataclass
class StemSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    pool: bool = False
    params: Dict[str, Tensor] = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {k: getattr(self, k) for k in ("in_channels", "out_channels", "kernel", "stride", "padding", "pool")}


@dataclass
class HeadSpec:
    in_features: int
    num_classes: int
    conv_channels: Optional[int] = None  # 1x1 conv+bn+relu before pooling (MobileNetV2 tail)
    params: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.conv_channels or self.in_features

    def descriptor(self) -> dict:
        return {"in_features": self.in_features, "num_classes": self.num_classes, "conv_channels": self.conv_channels}


@dataclass
class ArchGraph:
    family: str
    stem: StemSpec
    stages: "OrderedDict[str, List[BlockSpec]]"
    head: HeadSpec

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def blocks(self) -> List[BlockSpec]:
        return [b for blocks in self.stages.values() for b in blocks]

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks():
            if b.name == name:
                return b
        raise KeyError(f"no block named {name!r}")

    def stage_of(self, name: str) -> str:
        return stage_of(self, name)

    def state(self) -> "OrderedDict[str, Tensor]":
        """Every stored tensor (parameters and BN buffers) keyed by full name."""
        out = OrderedDict()
        for k, t in self.stem.params.items():
            out[f"stem.{k}"] = t
        for b in self.blocks():
            for k, t in b.params.items():
                out[f"{b.name}.{k}"] = t
        for k, t in self.head.params.items():
            out[f"head.{k}"] = t
        return out

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, t) for k, t in self.state().items() if not _is_buffer(k))

    def named_buffers(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, t) for k, t in self.state().items() if _is_buffer(k))

    def descriptor(self) -> dict:
        return {
            "family": self.family,
            "stem": self.stem.descriptor(),
            "stages": [
                {"name": s, "blocks": [b.descriptor() for b in blocks]} for s, blocks in self.stages.items()
            ],
            "head": self.head.descriptor(),
        }

    def clone(self) -> "ArchGraph":
        return copy.deepcopy(self)

    def set_requires_grad(self, flag: bool, prefixes: Optional[List[str]] = None) -> None:
        for name, t in self.named_parameters().items():
            if prefixes is None or any(name == p or name.startswith(p + ".") for p in prefixes):
                t.requires_grad = flag

    def astype(self, dtype) -> "ArchGraph":
        g = self.clone()
        for t in g.state().values():
            t.data = t.data.astype(dtype)
        return g

    def dump(self) -> str:
        """Indented human-readable architecture listing."""
        s = self.stem
        lines = [f"{self.family}", f"  stem: conv{s.kernel}x{s.kernel} {s.in_channels}->{s.out_channels} stride {s.stride}"
                 + (" + maxpool" if s.pool else "")]
        for stage, blocks in self.stages.items():
            lines.append(f"  {stage}:")
            for b in blocks:
                tag = " [downsample]" if b.has_downsample else ""
                src = f" (from {b.origin})" if b.origin and b.origin != b.name else ""
                lines.append(
                    f"    {b.name}: {b.kind} {b.in_channels}->{b.mid_channels}->{b.out_channels} stride {b.stride}{tag}{src}"
                )
        h = self.head
        tail = f"conv1x1 {h.in_features}->{h.conv_channels}, " if h.conv_channels else ""
        lines.append(f"  head: {tail}avgpool, linear {h.feature_dim}->{h.num_classes}")
        return "\n".join(lines)


def _is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _kaiming_conv(rng, cout, cin_g, k, dtype):
    std = math.sqrt(2.0 / (cout * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin_g, k, k)).astype(dtype), requires_grad=True)


def _bn(prefix: str, c: int, dtype) -> Dict[str, Tensor]:
    return {
        f"{prefix}.weight": Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        f"{prefix}.bias": Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        f"{prefix}.running_mean": Tensor(np.zeros(c, dtype=dtype)),
        f"{prefix}.running_var": Tensor(np.ones(c, dtype=dtype)),
    }


def _basic_block(rng, name, cin, cout, stride, dtype) -> BlockSpec:
    ds = stride != 1 or cin != cout
    p = {"conv1.weight": _kaiming_conv(rng, cout, cin, 3, dtype)}
    p.update(_bn("bn1", cout, dtype))
    p["conv2.weight"] = _kaiming_conv(rng, cout, cout, 3, dtype)
    p.update(_bn("bn2", cout, dtype))
    if ds:
        p["downsample.conv.weight"] = _kaiming_conv(rng, cout, cin, 1, dtype)
        p.update(_bn("downsample.bn", cout, dtype))
    return BlockSpec(name, BASIC, stride, cin, cout, cout, ds, p, origin=name)


def _head(rng, cin, classes, dtype, conv_channels=None) -> HeadSpec:
    p = {}
    feat = cin
    if conv_channels:
        p["conv.weight"] = _kaiming_conv(rng, conv_channels, cin, 1, dtype)
        p.update(_bn("bn", conv_channels, dtype))
        feat = conv_channels
    bound = 1.0 / math.sqrt(feat)
    p["fc.weight"] = Tensor(rng.uniform(-bound, bound, size=(classes, feat)).astype(dtype), requires_grad=True)
    p["fc.bias"] = Tensor(rng.uniform(-bound, bound, size=(classes,)).astype(dtype), requires_grad=True)
    return HeadSpec(cin, classes, conv_channels, p)


def build_resnet(
    blocks_per_stage,
    widths,
    num_classes: int,
    *,
    stem_kernel: int = 3,
    stem_stride: int = 1,
    stem_pool: bool = False,
    in_channels: int = 3,
    family: str = "resnet",
    seed: int = 0,
    dtype=np.float32,
) -> ArchGraph:
    """BasicResidual ResNet: stage ``i`` has ``blocks_per_stage[i]`` blocks of width ``widths[i]``.

    Stages after the first open with a stride-2 transition block.
    """
    if len(blocks_per_stage) != len(widths) or not blocks_per_stage:
        raise GraphError("blocks_per_stage and widths must be non-empty and equal length")
    if any(n < 1 for n in blocks_per_stage):
        raise GraphError("every stage needs at least one block")
    rng = np.random.default_rng(seed)
    stem_out = widths[0]
    sp = {"conv.weight": _kaiming_conv(rng, stem_out, in_channels, stem_kernel, dtype)}
    sp.update(_bn("bn", stem_out, dtype))
    stem = StemSpec(in_channels, stem_out, stem_kernel, stem_stride, stem_kernel // 2, stem_pool, sp)
    stages = OrderedDict()
    cin = stem_out
    for si, (n, width) in enumerate(zip(blocks_per_stage, widths)):
        stage = f"layer{si + 1}"
        blocks = []
        for j in range(n):
            stride = 2 if (j == 0 and si > 0) else 1
            blocks.append(_basic_block(rng, f"{stage}.{j}", cin, width, stride, dtype))
            cin = width
        stages[stage] = blocks
    head = _head(rng, cin, num_classes, dtype)
    return ArchGraph(family, stem, stages, head)


def tiny_resnet(blocks_per_stage=(2, 2, 2), num_classes: int = 10, widths=(16, 32, 64), seed: int = 0, dtype=np.float32):
    return build_resnet(list(blocks_per_stage), list(widths), num_classes, family="tiny_resnet", seed=seed, dtype=dtype)


def resnet18(num_classes: int = 100, seed: int = 0, dtype=np.float32) -> ArchGraph:
    return build_resnet([2, 2, 2, 2], [64, 128, 256, 512], num_classes, stem_kernel=7, stem_stride=2,
                        stem_pool=True, family="resnet18", seed=seed, dtype=dtype)


def resnet34(num_classes: int = 100, seed: int = 0, dtype=np.float32) -> ArchGraph:
    return build_resnet([3, 4, 6, 3], [64, 128, 256, 512], num_classes, stem_kernel=7, stem_stride=2,
                        stem_pool=True, family="resnet34", seed=seed, dtype=dtype)


# expansion t, out channels c, repeats n, first stride s
MOBILENETV2_SETTINGS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def _inverted_block(rng, name, cin, cout, stride, t, dtype) -> BlockSpec:
    mid = cin * t
    p = {}
    if t != 1:
        p["expand.weight"] = _kaiming_conv(rng, mid, cin, 1, dtype)
        p.update(_bn("expand_bn", mid, dtype))
    p["dw.weight"] = _kaiming_conv(rng, mid, 1, 3, dtype)
    p.update(_bn("dw_bn", mid, dtype))
    p["project.weight"] = _kaiming_conv(rng, cout, mid, 1, dtype)
    p.update(_bn("project_bn", cout, dtype))
    return BlockSpec(name, INVERTED, stride, cin, mid, cout, False, p, origin=name, expand=t != 1)


def mobilenet_v2(num_classes: int = 100, seed: int = 0, dtype=np.float32) -> ArchGraph:
    """MobileNetV2 (width 1.0). Blocks are ``features.k``; stages group them by output width."""
    rng = np.random.default_rng(seed)
    sp = {"conv.weight": _kaiming_conv(rng, 32, 3, 3, dtype)}
    sp.update(_bn("bn", 32, dtype))
    stem = StemSpec(3, 32, 3, 2, 1, False, sp)
    stages = OrderedDict()
    cin, k = 32, 1
    for t, c, n, s in MOBILENETV2_SETTINGS:
        blocks = []
        for j in range(n):
            blocks.append(_inverted_block(rng, f"features.{k}", cin, c, s if j == 0 else 1, t, dtype))
            cin = c
            k += 1
        stages[f"features@{c}"] = blocks
    head = _head(rng, cin, num_classes, dtype, conv_channels=1280)
    return ArchGraph("mobilenet_v2", stem, stages, head)


# ---------------------------------------------------------------------------
# portability hooks
# ---------------------------------------------------------------------------


def enumerate_blocks(graph: ArchGraph) -> List[tuple]:
    """(name, BlockSpec) pairs in execution order; stem and head are never listed."""
    return [(b.name, b) for b in graph.blocks()]


def stage_of(graph: ArchGraph, block_name: str) -> str:
    for stage, blocks in graph.stages.items():
        if any(b.name == block_name for b in blocks):
            return stage
    raise KeyError(f"no block named {block_name!r}")


def protection_rule(block: BlockSpec, position: int) -> bool:
    """True when ``block`` is a resolution/channel transition and must survive.

    ``position`` is the block's index within its stage. Basic residual blocks
    are protected when they open a stage through a downsample shortcut;
    inverted residuals whenever they change stride or width.
    """
    if block.kind == INVERTED:
        return block.stride != 1 or block.in_channels != block.out_channels
    return position == 0 and block.has_downsample


def protected_blocks(graph: ArchGraph) -> List[str]:
    return [b.name for blocks in graph.stages.values() for i, b in enumerate(blocks) if protection_rule(b, i)]


@dataclass
class KeepConfig:
    """Stage name -> sorted surviving block indices (indices into the source graph)."""

    keep: "OrderedDict[str, List[int]]"

    def __post_init__(self):
        self.keep = OrderedDict((k, sorted(int(i) for i in v)) for k, v in self.keep.items())

    @classmethod
    def identity(cls, graph: ArchGraph) -> "KeepConfig":
        return cls(OrderedDict((s, list(range(len(b)))) for s, b in graph.stages.items()))

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.keep.items()}

    def validate(self, graph: ArchGraph) -> None:
        missing = [s for s in graph.stages if s not in self.keep]
        if missing:
            raise GraphError(f"keep_cfg is missing stage(s) {missing}")
        extra = [s for s in self.keep if s not in graph.stages]
        if extra:
            raise GraphError(f"keep_cfg names unknown stage(s) {extra}")
        for stage, idx in self.keep.items():
            n = len(graph.stages[stage])
            if not idx:
                raise GraphError(f"keep_cfg empties stage {stage}")
            if len(set(idx)) != len(idx):
                raise GraphError(f"keep_cfg repeats an index in stage {stage}: {idx}")
            bad = [i for i in idx if i < 0 or i >= n]
            if bad:
                raise GraphError(f"keep_cfg index {bad} out of range for {stage} ({n} blocks)")

    def __eq__(self, other) -> bool:
        if isinstance(other, dict):
            return self.to_dict() == {k: sorted(v) for k, v in other.items()}
        return isinstance(other, KeepConfig) and self.to_dict() == other.to_dict()


def reconstruct(graph: ArchGraph, keep: KeepConfig, *, allow_protected: bool = False) -> ArchGraph:
    """Splice each stage down to the blocks listed in ``keep``.

    Kept blocks carry bit-identical copies of the source tensors and are
    renumbered within their stage; ``origin`` keeps the source name.
    Removing a protected block is rejected unless ``allow_protected`` is set,
    in which case the channel interfaces still have to line up.
    """
    keep.validate(graph)
    for stage, blocks in graph.stages.items():
        kept = set(keep.keep[stage])
        for i, b in enumerate(blocks):
            if i not in kept and protection_rule(b, i) and not allow_protected:
                raise GraphError(f"keep_cfg removes protected block {b.name}")
    out = graph.clone()
    new_stages = OrderedDict()
    idx = 1
    for stage, blocks in out.stages.items():
        chosen = [blocks[i] for i in keep.keep[stage]]
        for j, b in enumerate(chosen):
            if b.kind == BASIC and b.name.startswith(stage + "."):
                b.name = f"{stage}.{j}"
            elif b.kind == INVERTED:
                b.name = f"features.{idx}"
            idx += 1
        new_stages[stage] = chosen
    out.stages = new_stages
    report = check_residual_invariants(out)
    if report:
        raise GraphError("reconstruction breaks channel interfaces: " + "; ".join(report))
    return out


# ---------------------------------------------------------------------------
# invariant checker
# ---------------------------------------------------------------------------


def _width(t: Tensor, axis: int = 0) -> int:
    return int(t.shape[axis])


def block_io(block: BlockSpec) -> tuple:
    """(input channels, output channels) as implied by the stored tensors."""
    p = block.params
    if block.kind == BASIC:
        cin = _width(p["conv1.weight"], 1)
        cout = _width(p["downsample.conv.weight"]) if block.has_downsample else cin
        return cin, cout
    first = p["expand.weight"] if block.expand else p["dw.weight"]
    cin = _width(first, 1) if block.expand else _width(first)
    return cin, _width(p["project.weight"])


def check_residual_invariants(graph: ArchGraph) -> List[str]:
    """Every residual/interface violation as a readable string; empty means legal."""
    problems: List[str] = []
    stem_out = _width(graph.stem.params["conv.weight"])
    for k in BN_SUFFIXES:
        if _width(graph.stem.params[f"bn.{k}"]) != stem_out:
            problems.append(f"stem: bn.{k} has {_width(graph.stem.params[f'bn.{k}'])} channels, conv has {stem_out}")
    prev_name, prev_out = "stem", stem_out
    for stage, blocks in graph.stages.items():
        if not blocks:
            problems.append(f"{stage}: stage is empty")
        for b in blocks:
            problems.extend(_check_block(b))
            cin, cout = block_io(b)
            if cin != prev_out:
                problems.append(f"{prev_name} -> {b.name}: {prev_name} emits {prev_out} channels, {b.name} expects {cin}")
            prev_name, prev_out = b.name, cout
    h = graph.head.params
    if graph.head.conv_channels:
        hin = _width(h["conv.weight"], 1)
        feat = _width(h["conv.weight"])
    else:
        hin = _width(h["fc.weight"], 1)
        feat = hin
    if hin != prev_out:
        problems.append(f"{prev_name} -> head: {prev_name} emits {prev_out} channels, head expects {hin}")
    if _width(h["fc.weight"], 1) != feat:
        problems.append(f"head: fc expects {_width(h['fc.weight'], 1)} features, pooling yields {feat}")
    return problems


def _check_block(b: BlockSpec) -> List[str]:
    p = b.params
    out: List[str] = []

    def bn_match(prefix, conv_key):
        c = _width(p[conv_key])
        for k in BN_SUFFIXES:
            if _width(p[f"{prefix}.{k}"]) != c:
                out.append(f"{b.name}: {prefix}.{k} has {_width(p[f'{prefix}.{k}'])} channels, {conv_key} emits {c}")

    if b.kind == BASIC:
        c1_in = _width(p["conv1.weight"], 1)
        c1_out = _width(p["conv1.weight"])
        c2_in = _width(p["conv2.weight"], 1)
        c2_out = _width(p["conv2.weight"])
        bn_match("bn1", "conv1.weight")
        bn_match("bn2", "conv2.weight")
        if c1_out != c2_in:
            out.append(f"{b.name}: conv1 emits {c1_out} mid channels, conv2 expects {c2_in}")
        if b.has_downsample:
            bn_match("downsample.bn", "downsample.conv.weight")
            ds_in = _width(p["downsample.conv.weight"], 1)
            ds_out = _width(p["downsample.conv.weight"])
            if ds_in != c1_in:
                out.append(f"{b.name}: downsample expects {ds_in} input channels, conv1 expects {c1_in}")
            if c2_out != ds_out:
                out.append(f"{b.name}: conv2_out_C={c2_out} != downsample_out_C={ds_out}")
        elif c2_out != c1_in:
            out.append(f"{b.name}: conv2_out_C={c2_out} != conv1_in_C={c1_in}")
        return out

    if b.expand:
        bn_match("expand_bn", "expand.weight")
    bn_match("dw_bn", "dw.weight")
    bn_match("project_bn", "project.weight")
    mid = _width(p["expand.weight"]) if b.expand else _width(p["dw.weight"])
    if _width(p["dw.weight"]) != mid:
        out.append(f"{b.name}: depthwise has {_width(p['dw.weight'])} channels, expansion emits {mid}")
    if _width(p["project.weight"], 1) != mid:
        out.append(f"{b.name}: project expects {_width(p['project.weight'], 1)} channels, depthwise emits {mid}")
    if b.uses_residual:
        cin, cout = block_io(b)
        if cin != cout:
            out.append(f"{b.name}: residual add needs project_out_C={cout} == in_C={cin}")
    return out


def sync_channel_fields(graph: ArchGraph) -> None:
    """Refresh BlockSpec/Head width fields from the stored tensors after surgery."""
    for b in graph.blocks():
        cin, cout = block_io(b)
        b.in_channels, b.out_channels = cin, cout
        if b.kind == BASIC:
            b.mid_channels = _width(b.params["conv1.weight"])
        else:
            b.mid_channels = _width(b.params["dw.weight"])
    s = graph.stem
    s.out_channels = _width(s.params["conv.weight"])
    h = graph.head
    h.in_features = _width(h.params["conv.weight"], 1) if h.conv_channels else _width(h.params["fc.weight"], 1)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: Tensor
    features: Tensor
    taps: Dict[str, Tensor]


def _bn_apply(x, p, prefix, mode):
    return batchnorm2d(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], p[f"{prefix}.running_mean"], p[f"{prefix}.running_var"], mode)


def _basic_forward(b: BlockSpec, x: Tensor, mode: str) -> Tensor:
    p = b.params
    out = relu(_bn_apply(conv2d(x, p["conv1.weight"], b.stride, 1), p, "bn1", mode))
    out = _bn_apply(conv2d(out, p["conv2.weight"], 1, 1), p, "bn2", mode)
    if b.has_downsample:
        skip = _bn_apply(conv2d(x, p["downsample.conv.weight"], b.stride, 0), p, "downsample.bn", mode)
    else:
        skip = x
    return relu(residual_add(out, skip))


def forward(
    graph: ArchGraph,
    batch,
    mode: str = "eval",
    taps=None,
    frozen_stages=(),
) -> ForwardResult:
    """Run the graph.

    ``mode`` is ``train``, ``eval`` or ``recalibrate`` (batch statistics,
    running-stat update, no tape). Blocks in ``frozen_stages`` (and the stem,
    when any stage is frozen) always normalize with running statistics.
    Requested ``taps`` receive the post-block activation of each named block.
    """
    if mode == "recalibrate":
        with no_grad():
            return _forward(graph, batch, mode, taps, frozen_stages)
    return _forward(graph, batch, mode, taps, frozen_stages)


def _forward(graph, batch, mode, taps, frozen_stages):
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != graph.stem.in_channels:
        raise GraphError(f"input {x.shape} does not match stem ({graph.stem.in_channels} channels, NCHW)")
    want = set(taps or ())
    unknown = want - {b.name for b in graph.blocks()}
    if unknown:
        raise KeyError(f"cannot tap unknown block(s) {sorted(unknown)}")
    tapped: Dict[str, Tensor] = {}
    frozen = set(frozen_stages)
    s = graph.stem
    stem_mode = "eval" if frozen and mode == "train" else mode
    x = relu(_bn_apply(conv2d(x, s.params["conv.weight"], s.stride, s.padding), s.params, "bn", stem_mode))
    if s.pool:
        x = max_pool2d(x, 3, 2, 1)
    for stage, blocks in graph.stages.items():
        stage_mode = "eval" if (stage in frozen and mode == "train") else mode
        for b in blocks:
            if b.kind != BASIC:
                raise GraphError(f"{b.name}: only BasicResidual blocks are executable; {b.kind} is structural-only")
            x = _basic_forward(b, x, stage_mode)
            if b.name in want:
                tapped[b.name] = x
    h = graph.head
    if h.conv_channels:
        x = relu(_bn_apply(conv2d(x, h.params["conv.weight"], 1, 0), h.params, "bn", mode))
    feats = global_avg_pool(x)
    logits = linear(feats, h.params["fc.weight"], h.params["fc.bias"])
    return ForwardResult(logits, feats, tapped)
