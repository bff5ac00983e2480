"""Sparse black-box adversarial attacks on video classifiers."""

from .saliency import SpatialParams, fine_grained_saliency, frame_mask, init_spatial_mask
from .signopt import AttackConfig, AttackResult, attack
from .video import clamp01, frame_zero, hadamard, l2_norm, read_vid, write_vid

__all__ = [
    "AttackConfig",
    "AttackResult",
    "SpatialParams",
    "attack",
    "clamp01",
    "fine_grained_saliency",
    "frame_mask",
    "frame_zero",
    "hadamard",
    "init_spatial_mask",
    "l2_norm",
    "read_vid",
    "write_vid",
]
