"""Per-frame saliency maps and the spatial sparsity mask.

Saliency is a multi-scale center-surround measure: each frame is reduced
to grayscale and compared against box means at several surround radii;
the absolute differences are summed over scales.  The spatial mask keeps,
per frame, exactly ``ceil(phi * W * H)`` pixels with the highest scores
(ties broken by scan order) and broadcasts the selection across channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputRejected
from .video import require_video


@dataclass(frozen=True)
class SpatialParams:
    """Salient-area ratio and surround radii for mask construction."""

    phi: float = 0.6
    scales: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if not 0.0 < self.phi <= 1.0:
            raise InputRejected(f"phi must be in (0, 1], got {self.phi}")
        if not self.scales:
            raise InputRejected("scales must be nonempty")
        if list(self.scales) != sorted(set(self.scales)) or min(self.scales) < 1:
            raise InputRejected("scales must be strictly increasing positive integers")
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))


def _box_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)x(2r+1) window around each pixel, edge-clamped."""
    k = 2 * radius + 1
    padded = np.pad(img, radius, mode="edge")
    windows = sliding_window_view(padded, (k, k))
    return windows.mean(axis=(-2, -1))


def fine_grained_saliency(v: np.ndarray, p: SpatialParams) -> np.ndarray:
    """Per-frame center-surround saliency scores, shape (T, H, W)."""
    require_video(v)
    _, h, w, _ = v.shape
    if max(p.scales) >= min(w, h):
        raise InputRejected(f"scale radius {max(p.scales)} too large for {w}x{h} frames")
    gray = v.mean(axis=3)
    out = np.zeros_like(gray)
    for t in range(gray.shape[0]):
        frame = gray[t]
        acc = np.zeros_like(frame)
        for r in p.scales:
            acc += np.abs(frame - _box_mean(frame, r))
        out[t] = acc
    return out


def frame_mask(saliency_map: np.ndarray, frame: int, phi: float) -> np.ndarray:
    """Binary (H, W) mask keeping the ceil(phi*W*H) highest-scoring pixels.

    Ties are resolved in ascending (h, w) scan order so the result is
    deterministic for flat score regions.
    """
    if not 0.0 < phi <= 1.0:
        raise InputRejected(f"phi must be in (0, 1], got {phi}")
    scores = saliency_map[frame]
    h, w = scores.shape
    keep = math.ceil(phi * w * h)
    # Stable sort on negated scores: equal scores stay in scan order.
    order = np.argsort(-scores.ravel(), kind="stable")
    mask = np.zeros(h * w)
    mask[order[:keep]] = 1.0
    return mask.reshape(h, w)


def init_spatial_mask(
    x: np.ndarray,
    x_hat: np.ndarray | None,
    p: SpatialParams,
) -> np.ndarray:
    """Spatial sparsity mask; union of both videos' masks when ``x_hat`` is given."""
    mask = _video_mask(x, p)
    if x_hat is not None:
        if x_hat.shape != x.shape:
            raise InputRejected(f"shape mismatch: {x_hat.shape} vs {x.shape}")
        mask = np.maximum(mask, _video_mask(x_hat, p))
    return mask


def _video_mask(v: np.ndarray, p: SpatialParams) -> np.ndarray:
    smap = fine_grained_saliency(v, p)
    t, h, w, c = v.shape
    frames = np.stack([frame_mask(smap, i, p.phi) for i in range(t)])
    return np.broadcast_to(frames[..., None], (t, h, w, c)).copy()
