"""Exact parameter / multiply-accumulate accounting by static shape propagation.

Convention: conv MACs = Cout * (Cin/groups) * kh * kw * H' * W', linear MACs =
in * out; BN, ReLU, pooling and residual adds cost nothing. Parameters count
every weight, bias, gamma and beta; BN running statistics are excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Tuple

from .ir import BASIC, ArchGraph


@dataclass
class LayerProfile:
    name: str
    params: int
    macs: int
    output_shape: Tuple[int, ...]


@dataclass
class ComputeProfile:
    input_shape: Tuple[int, ...]
    layers: List[LayerProfile] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "layers": [
                {"name": l.name, "params": l.params, "macs": l.macs, "output_shape": list(l.output_shape)} for l in self.layers
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def table(self, flops: bool = False) -> str:
        unit = "FLOPs" if flops else "MACs"
        mult = 2 if flops else 1
        rows = [("layer", "params", unit, "output")]
        for l in self.layers:
            rows.append((l.name, f"{l.params:,}", f"{l.macs * mult:,}", "x".join(map(str, l.output_shape))))
        rows.append(("total", f"{self.total_params:,}", f"{self.total_macs * mult:,}", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = []
        for r in rows:
            lines.append(f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}  {r[3]}")
        return "\n".join(lines)


def _conv_out(h: int, k: int, s: int, p: int) -> int:
    if h + 2 * p < k:
        raise ValueError(f"kernel {k} does not fit extent {h} with padding {p}")
    return (h + 2 * p - k) // s + 1


class _Walker:
    def __init__(self, n, c, h, w):
        self.shape = (n, c, h, w)
        self.layers: List[LayerProfile] = []

    def conv(self, name, weight_shape, stride, padding, groups=1, inp=None):
        n, c, h, w = inp or self.shape
        cout, cin_g, kh, kw = weight_shape
        if cin_g * groups != c:
            raise ValueError(f"{name}: expects {cin_g * groups} input channels, gets {c}")
        ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
        macs = cout * cin_g * kh * kw * ho * wo * n
        self.layers.append(LayerProfile(name, cout * cin_g * kh * kw, macs, (n, cout, ho, wo)))
        return (n, cout, ho, wo)

    def bn(self, name, shape):
        self.layers.append(LayerProfile(name, 2 * shape[1], 0, shape))


def profile(graph: ArchGraph, input_shape=(1, 3, 224, 224)) -> ComputeProfile:
    if len(input_shape) != 4:
        raise ValueError("input_shape must be (N, C, H, W)")
    n, c, h, w = input_shape
    if c != graph.stem.in_channels:
        raise ValueError(f"input has {c} channels, stem expects {graph.stem.in_channels}")
    wk = _Walker(n, c, h, w)
    s = graph.stem
    x = wk.conv("stem.conv", s.params["conv.weight"].shape, s.stride, s.padding)
    wk.bn("stem.bn", x)
    if s.pool:
        x = (x[0], x[1], _conv_out(x[2], 3, 2, 1), _conv_out(x[3], 3, 2, 1))
        wk.layers.append(LayerProfile("stem.pool", 0, 0, x))
    for b in graph.blocks():
        p = b.params
        if b.kind == BASIC:
            y = wk.conv(f"{b.name}.conv1", p["conv1.weight"].shape, b.stride, 1, inp=x)
            wk.bn(f"{b.name}.bn1", y)
            y = wk.conv(f"{b.name}.conv2", p["conv2.weight"].shape, 1, 1, inp=y)
            wk.bn(f"{b.name}.bn2", y)
            if b.has_downsample:
                d = wk.conv(f"{b.name}.downsample.conv", p["downsample.conv.weight"].shape, b.stride, 0, inp=x)
                wk.bn(f"{b.name}.downsample.bn", d)
                if d != y:
                    raise ValueError(f"{b.name}: residual shapes {y} and {d} differ")
            elif y != x:
                raise ValueError(f"{b.name}: residual shapes {y} and {x} differ")
            x = y
        else:
            y = x
            if b.expand:
                y = wk.conv(f"{b.name}.expand", p["expand.weight"].shape, 1, 0, inp=y)
                wk.bn(f"{b.name}.expand_bn", y)
            mid = p["dw.weight"].shape[0]
            y = wk.conv(f"{b.name}.dw", p["dw.weight"].shape, b.stride, 1, groups=mid, inp=y)
            wk.bn(f"{b.name}.dw_bn", y)
            y = wk.conv(f"{b.name}.project", p["project.weight"].shape, 1, 0, inp=y)
            wk.bn(f"{b.name}.project_bn", y)
            x = y
    hd = graph.head
    if hd.conv_channels:
        x = wk.conv("head.conv", hd.params["conv.weight"].shape, 1, 0, inp=x)
        wk.bn("head.bn", x)
    wk.layers.append(LayerProfile("head.pool", 0, 0, (x[0], x[1])))
    out_f, in_f = hd.params["fc.weight"].shape
    if in_f != x[1]:
        raise ValueError(f"fc expects {in_f} features, pooling yields {x[1]}")
    wk.layers.append(LayerProfile("head.fc", out_f * in_f + out_f, out_f * in_f * x[0], (x[0], out_f)))
    return ComputeProfile(tuple(input_shape), wk.layers)


def reduction_pct(before: float, after: float) -> float:
    return round(100.0 * (before - after) / before, 1)


def profile_diff(before: ComputeProfile, after: ComputeProfile) -> dict:
    """Percent reductions (one decimal) of params and MACs; negative means growth."""
    if tuple(before.input_shape) != tuple(after.input_shape):
        raise ValueError(f"profiles taken at different input shapes {before.input_shape} vs {after.input_shape}")
    rp = reduction_pct(before.total_params, after.total_params)
    rm = reduction_pct(before.total_macs, after.total_macs) if before.total_macs else 0.0
    return {
        "params_before": before.total_params,
        "params_after": after.total_params,
        "macs_before": before.total_macs,
        "macs_after": after.total_macs,
        "params_reduction_pct": rp,
        "macs_reduction_pct": rm,
        "params_label": f"{-rp:+.1f}%" if rp else "0.0%",
        "macs_label": f"{-rm:+.1f}%" if rm else "0.0%",
    }
