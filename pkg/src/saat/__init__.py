"""Targeted transfer attacks that align feature statistics instead of raw feature maps."""

from .attack import AttackConfig, build_gallery, run_attack
from .models import build, load_checkpoint, save_checkpoint, train
from .statalign import KernelSpec, gaa_loss, mmd2_biased, mmd2_linear_time, paa_loss

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "KernelSpec",
    "build",
    "build_gallery",
    "gaa_loss",
    "load_checkpoint",
    "mmd2_biased",
    "mmd2_linear_time",
    "paa_loss",
    "run_attack",
    "save_checkpoint",
    "train",
]
