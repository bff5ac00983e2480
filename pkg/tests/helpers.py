"""Shared test utilities: brute-force oracles and black-box shims."""

from __future__ import annotations

import numpy as np

from sparsevid.oracle import LinearOracle, OracleVerdict


def brute_force_box_mean(frame: np.ndarray, radius: int) -> np.ndarray:
    """Windowed mean with edge clamping, computed pixel by pixel."""
    h, w = frame.shape
    out = np.zeros_like(frame, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            total = 0.0
            for dr in range(-radius, radius + 1):
                for dc in range(-radius, radius + 1):
                    rr = min(max(r + dr, 0), h - 1)
                    cc = min(max(c + dc, 0), w - 1)
                    total += frame[rr, cc]
            out[r, c] = total / (2 * radius + 1) ** 2
    return out


def brute_force_saliency(video: np.ndarray, scales) -> np.ndarray:
    gray = video.astype(np.float64).mean(axis=3)
    out = np.zeros_like(gray)
    for t in range(video.shape[0]):
        for r in scales:
            out[t] += np.abs(gray[t] - brute_force_box_mean(gray[t], r))
    return out


class BlackBoxShim:
    """Wrapper that exposes only ``query``; any other access raises."""

    def __init__(self, inner):
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "calls", [0])

    def query(self, v):
        self.calls[0] += 1
        return object.__getattribute__(self, "_inner").query(v)

    def __getattr__(self, name):
        if name in ("query", "calls"):
            return object.__getattribute__(self, name)
        raise AssertionError(f"black-box breach: oracle attribute {name!r} accessed")


class RuleOracle:
    """Hand-built deterministic oracle driven by a scoring function.

    ``score_fn(video) -> np.ndarray`` of class scores; top-1 by lowest
    index on ties, probability by softmax.
    """

    def __init__(self, score_fn, input_shape, num_classes):
        from sparsevid.oracle import QueryCounter, softmax
        self._score_fn = score_fn
        self._softmax = softmax
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.counter = QueryCounter()

    def query(self, v):
        assert v.shape == self.input_shape
        self.counter.increment()
        scores = np.asarray(self._score_fn(v), dtype=np.float64)
        label = int(np.argmax(scores))
        return OracleVerdict(label, float(self._softmax(scores)[label]))


def random_linear_oracle(rng, shape, num_classes=2, weight_scale=1.0,
                         bias_scale=0.5) -> LinearOracle:
    weights = rng.normal(scale=weight_scale, size=(num_classes, *shape))
    biases = rng.normal(scale=bias_scale, size=num_classes)
    return LinearOracle(weights, biases)


def grid_scan_boundary(oracle: LinearOracle, x, unit_dir, from_label,
                       lam_max=5.0, resolution=1e-4):
    """First label change along a direction by dense scanning (no clamping)."""
    lam = resolution
    flat = unit_dir.ravel()
    base = oracle._w_flat @ x.ravel() + oracle.biases
    rates = oracle._w_flat @ flat
    while lam <= lam_max:
        scores = base + lam * rates
        if int(np.argmax(scores)) != from_label:
            return lam
        lam += resolution
    return None
