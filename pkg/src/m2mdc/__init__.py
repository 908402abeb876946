"""Two-scale compression of residual networks: MI-guided block pruning,
residual-safe channel slicing and staged knowledge-distillation repair."""

from .config import RunConfig
from .ir import ArchGraph, KeepConfig, mobilenet_v2, reconstruct, resnet18, resnet34, tiny_resnet
from .pipeline import run_pipeline, write_report

__version__ = "0.1.0"

__all__ = [
    "ArchGraph",
    "KeepConfig",
    "RunConfig",
    "mobilenet_v2",
    "reconstruct",
    "resnet18",
    "resnet34",
    "run_pipeline",
    "tiny_resnet",
    "write_report",
]
