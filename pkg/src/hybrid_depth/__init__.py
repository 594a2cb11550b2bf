"""Hybrid CNN-Transformer monocular depth with texture-shift and CKA tooling."""
from .acm_ffd import DepthNet, disp_to_depth
from .checkpoint import load_checkpoint, save_checkpoint
from .cka import CKAReport, cka, hsic
from .config import RunConfig, desk_preset
from .metrics import compute_metrics
from .networks import EncoderConfig, HybridEncoder, PoseNet
from .pipeline import analyze, evaluate, train
from .texture_shift import ShiftSpec, shift_dataset

__version__ = "0.1.0"

__all__ = [
    "CKAReport",
    "DepthNet",
    "EncoderConfig",
    "HybridEncoder",
    "PoseNet",
    "RunConfig",
    "ShiftSpec",
    "analyze",
    "cka",
    "compute_metrics",
    "desk_preset",
    "disp_to_depth",
    "evaluate",
    "hsic",
    "load_checkpoint",
    "save_checkpoint",
    "shift_dataset",
    "train",
]
