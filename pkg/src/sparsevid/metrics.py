"""Evaluation metrics: fooling ratio, queries, perceptibility, sparsity, time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputRejected

PIXEL_SCALE = 255.0  # internal [0,1] intensities are scaled up for MAP


@dataclass(frozen=True)
class MetricsRecord:
    fooled: bool
    queries: int
    map: float
    sparsity: float
    wall_seconds: float


def map_score(perturbation: np.ndarray) -> float:
    """Mean absolute perturbation: average per-pixel channel-vector magnitude.

    The input must already be on the 0-255 intensity scale; pixels index
    (frame, row, col) and the magnitude is the Euclidean norm over channels.
    """
    if perturbation.ndim != 4:
        raise InputRejected("perturbation must be (T, H, W, C)")
    pixel_mag = np.sqrt(np.sum(perturbation ** 2, axis=3))
    return float(pixel_mag.mean())


def mask_pixel_ratios(mask: np.ndarray) -> list[tuple[int, float]]:
    """(frame, kept-pixel ratio) for every frame retained in the mask.

    A pixel counts as kept when any of its channel bits is set; frames with
    no kept pixels are deleted frames and are omitted.
    """
    pixel_on = mask.any(axis=3)
    t, h, w = pixel_on.shape
    out = []
    for f in range(t):
        kept = int(pixel_on[f].sum())
        if kept:
            out.append((f, kept / (h * w)))
    return out


def sparsity_score(mask: np.ndarray,
                   per_frame_ratios: list[tuple[int, float]] | None = None) -> float:
    """Fraction of video pixels left unperturbed: 1 - mean kept ratio.

    Deleted frames contribute zero to the sum, so an all-ones mask scores 0.
    """
    if per_frame_ratios is None:
        per_frame_ratios = mask_pixel_ratios(mask)
    t = mask.shape[0]
    total = 0.0
    for _, ratio in per_frame_ratios:
        if not 0.0 < ratio <= 1.0:
            raise InputRejected(f"per-frame ratio {ratio} outside (0, 1]")
        total += ratio
    return 1.0 - total / t


def aggregate(records: list[MetricsRecord]) -> dict:
    """Mean metrics across attacks; FR and S are expressed as percentages."""
    if not records:
        raise InputRejected("cannot aggregate an empty record list")
    return {
        "fr": 100.0 * sum(r.fooled for r in records) / len(records),
        "queries": float(np.mean([r.queries for r in records])),
        "map": float(np.mean([r.map for r in records])),
        "sparsity_pct": 100.0 * float(np.mean([r.sparsity for r in records])),
        "wall_seconds": float(np.mean([r.wall_seconds for r in records])),
    }
