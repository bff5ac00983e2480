"""Synthetic moving-shape videos: a desk-scale stand-in for real footage.

Each class pairs a shape with a motion axis (square/horizontal,
circle/vertical, diamond/falling diagonal, cross/rising diagonal).  A
sample draws its colour, size, speed direction and start position from a
per-sample seeded generator, so the whole corpus is reproducible
bit-for-bit.  Videos are quantized through float32 at generation time so
in-memory arrays match what a round-trip through ``.vid`` files yields.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputRejected
from .video import read_vid, write_vid

SHAPES = ("square", "circle", "diamond", "cross")
MOTIONS = ((0, 1), (1, 0), (1, 1), (-1, 1))  # (dr, dc) per class


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 250
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    shape_size: int = 5
    contrast: float = 0.12
    train_fraction: float = 0.7
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise InputRejected("need at least 2 frames")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise InputRejected(f"num_classes must be in [1, {len(SHAPES)}]")
        if not 0.0 < self.train_fraction < 1.0:
            raise InputRejected("train_fraction must be in (0, 1)")
        if self.shape_size < 2:
            raise InputRejected("shape_size must be at least 2")
        if self.contrast <= 0:
            raise InputRejected("contrast must be positive")


@dataclass
class Dataset:
    train_videos: np.ndarray
    train_labels: np.ndarray
    test_videos: np.ndarray
    test_labels: np.ndarray
    num_classes: int


def _shape_mask(shape: str, size: int, center: tuple[int, int],
                height: int, width: int) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width]
    dr = rr - center[0]
    dc = cc - center[1]
    if shape == "square":
        return (np.abs(dr) <= size) & (np.abs(dc) <= size)
    if shape == "circle":
        return dr * dr + dc * dc <= size * size
    if shape == "diamond":
        return np.abs(dr) + np.abs(dc) <= size
    if shape == "cross":
        return ((np.abs(dr) <= 1) & (np.abs(dc) <= size)) | \
               ((np.abs(dc) <= 1) & (np.abs(dr) <= size))
    raise InputRejected(f"unknown shape {shape!r}")


def render_sample(spec: SyntheticDatasetSpec, label: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One (T, H, W, C) video of the class's shape translating across frames."""
    t, h, w, c = spec.frames, spec.height, spec.width, spec.channels
    size = spec.shape_size
    # Low-contrast shape over a textured mid-gray background.  The gentle
    # contrast keeps the trained classifier's decision margins small (so
    # desk-scale attacks face realistic perturbation budgets) while the
    # noise keeps its sensitivity alive across the whole frame.
    base = rng.uniform(0.38, 0.42, size=c)
    color = base + spec.contrast * rng.uniform(0.8, 1.2, size=c)
    bg = np.broadcast_to(base, (h, w, c)).copy()
    if spec.noise > 0:
        bg = bg + rng.uniform(-spec.noise, spec.noise, size=(h, w, c))

    dr, dc = MOTIONS[label]
    flip = -1 if rng.random() < 0.5 else 1
    dr, dc = dr * flip, dc * flip
    span = t - 1

    def start_range(delta: int, extent: int) -> tuple[int, int]:
        lo = size + max(0, -delta * span)
        hi = extent - 1 - size - max(0, delta * span)
        if hi < lo:
            raise InputRejected("video too small for the configured motion")
        return lo, hi

    r_lo, r_hi = start_range(dr, h)
    c_lo, c_hi = start_range(dc, w)
    r0 = int(rng.integers(r_lo, r_hi + 1))
    c0 = int(rng.integers(c_lo, c_hi + 1))

    video = np.empty((t, h, w, c))
    for frame in range(t):
        canvas = bg.copy()
        mask = _shape_mask(SHAPES[label], size, (r0 + dr * frame, c0 + dc * frame), h, w)
        canvas[mask] = color
        video[frame] = canvas
    video = np.clip(video, 0.0, 1.0)
    return video.astype("<f4").astype(np.float64)


def build_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    """Render the full corpus in memory with a deterministic per-sample seed."""
    train_v, train_l, test_v, test_l = [], [], [], []
    n_train = math.ceil(spec.train_fraction * spec.samples_per_class)
    for label in range(spec.num_classes):
        for index in range(spec.samples_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, label, index]))
            video = render_sample(spec, label, rng)
            if index < n_train:
                train_v.append(video)
                train_l.append(label)
            else:
                test_v.append(video)
                test_l.append(label)
    return Dataset(
        train_videos=np.asarray(train_v, dtype=np.float32),
        train_labels=np.asarray(train_l),
        test_videos=np.asarray(test_v, dtype=np.float32),
        test_labels=np.asarray(test_l),
        num_classes=spec.num_classes,
    )


def gen_dataset(spec: SyntheticDatasetSpec, out_dir) -> dict:
    """Write train/test ``.vid`` trees plus a manifest; returns the manifest."""
    data = build_dataset(spec)
    manifest = {"num_classes": spec.num_classes, "spec": asdict(spec),
                "train": [], "test": []}
    for split, videos, labels in (("train", data.train_videos, data.train_labels),
                                  ("test", data.test_videos, data.test_labels)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        per_class = {}
        for video, label in zip(videos, labels):
            i = per_class.get(int(label), 0)
            per_class[int(label)] = i + 1
            rel = f"{split}/class{label}_{i:04d}.vid"
            write_vid(os.path.join(out_dir, rel), video.astype(np.float64))
            manifest[split].append({"file": rel, "label": int(label)})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(root) -> Dataset:
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    splits = {}
    for split in ("train", "test"):
        videos = [read_vid(os.path.join(root, entry["file"]))
                  for entry in manifest[split]]
        labels = [entry["label"] for entry in manifest[split]]
        splits[split] = (np.asarray(videos, dtype=np.float32), np.asarray(labels))
    return Dataset(
        train_videos=splits["train"][0], train_labels=splits["train"][1],
        test_videos=splits["test"][0], test_labels=splits["test"][1],
        num_classes=manifest["num_classes"],
    )
