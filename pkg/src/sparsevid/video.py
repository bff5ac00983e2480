"""Video tensor and mask primitives shared by every other module.

A video is a float64 ndarray of shape (T, H, W, C) with values in [0, 1]
for clean inputs (perturbed intermediates may exceed the range and are
clamped before any oracle query).  A mask has the same shape and holds
only 0.0 / 1.0.  Both are treated as immutable values: every operation
returns a fresh array and never writes through its arguments.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputRejected

VID_MAGIC = b"VIDT"


def require_video(v: np.ndarray, name: str = "video") -> np.ndarray:
    if not isinstance(v, np.ndarray) or v.ndim != 4:
        raise InputRejected(f"{name} must be a (T, H, W, C) array")
    if not np.isfinite(v).all():
        raise InputRejected(f"{name} contains non-finite values")
    return v


def require_mask(m: np.ndarray, like: np.ndarray | None = None) -> np.ndarray:
    if not isinstance(m, np.ndarray) or m.ndim != 4:
        raise InputRejected("mask must be a (T, H, W, C) array")
    if like is not None and m.shape != like.shape:
        raise InputRejected(f"mask shape {m.shape} does not match video shape {like.shape}")
    vals = np.unique(m)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise InputRejected("mask elements must be 0 or 1")
    return m


def hadamard(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Elementwise product of a video and a same-shaped mask."""
    if v.shape != m.shape:
        raise InputRejected(f"shape mismatch: {v.shape} vs {m.shape}")
    return v * m


def frame_zero(m: np.ndarray, f: int) -> np.ndarray:
    """Return a copy of ``m`` with frame ``f`` set to all zeros."""
    if not 0 <= f < m.shape[0]:
        raise InputRejected(f"frame index {f} out of range for T={m.shape[0]}")
    out = m.copy()
    out[f] = 0.0
    return out


def l2_norm(v: np.ndarray) -> float:
    """Euclidean norm over all elements."""
    return float(np.sqrt(np.sum(np.square(v, dtype=np.float64))))


def clamp01(v: np.ndarray) -> np.ndarray:
    """Clip every element into [0, 1]."""
    return np.clip(v, 0.0, 1.0)


def ones_count(m: np.ndarray) -> int:
    return int(np.sum(m))


def write_vid(path, v: np.ndarray) -> None:
    """Write a video file: magic + u32 T, W, H, C (LE) + float32 payload.

    The payload is laid out in (t, h, w, c) row-major order, matching the
    in-memory layout.
    """
    require_video(v)
    t, h, w, c = v.shape
    with open(path, "wb") as fh:
        fh.write(VID_MAGIC)
        fh.write(struct.pack("<4I", t, w, h, c))
        fh.write(v.astype("<f4").tobytes())


def read_vid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VID_MAGIC:
            raise InputRejected(f"{path}: bad magic {magic!r}")
        t, w, h, c = struct.unpack("<4I", fh.read(16))
        payload = np.frombuffer(fh.read(), dtype="<f4")
    expect = t * h * w * c
    if payload.size != expect:
        raise InputRejected(f"{path}: expected {expect} values, found {payload.size}")
    return payload.astype(np.float64).reshape(t, h, w, c)
