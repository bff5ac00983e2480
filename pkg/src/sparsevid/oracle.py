"""Black-box threat models: soft-label oracles and query accounting.

The only signal an oracle exposes is ``query``: top-1 label plus its
probability.  Attack code must treat everything else as out of bounds,
so per-attack accounting goes through :class:`CountedOracle` rather than
reaching into the model.

Two desk-scale oracle families live here: linear classifiers (closed-form
boundary distances, used as ground truth by the attack tests) and a small
convolutional video classifier that averages features over frames, which
leaves some frames redundant for the frame-selection agent to discover.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import InputRejected, TrainingFailure
from .nn import Adam, Conv2d, Linear, ReLU

ORACLE_MAGIC = b"ORCL"
ORACLE_VERSION = 1


@dataclass(frozen=True)
class OracleVerdict:
    """Top-1 label and its probability: the full output of one query."""

    label: int
    prob: float


class QueryCounter:
    """Monotone query tally; increments are atomic so rollout workers can share it."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def increment(self) -> None:
        with self._lock:
            self._count += 1


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


class Oracle:
    """Base class: deterministic scores -> argmax label (lowest index wins ties)."""

    num_classes: int
    input_shape: tuple[int, int, int, int]

    def __init__(self):
        self.counter = QueryCounter()

    def _scores(self, v: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def query(self, v: np.ndarray) -> OracleVerdict:
        if v.shape != self.input_shape:
            raise InputRejected(f"oracle expects {self.input_shape}, got {v.shape}")
        self.counter.increment()
        scores = self._scores(v)
        label = int(np.argmax(scores))
        prob = float(softmax(scores)[label])
        return OracleVerdict(label, prob)


class CountedOracle:
    """Query passthrough with its own counter; used for per-attack accounting."""

    def __init__(self, inner):
        self._inner = inner
        self.counter = QueryCounter()

    def query(self, v: np.ndarray) -> OracleVerdict:
        self.counter.increment()
        return self._inner.query(v)


class LinearOracle(Oracle):
    """Per-class linear scores over the flattened video."""

    def __init__(self, weights: np.ndarray, biases: np.ndarray):
        super().__init__()
        if weights.ndim != 5 or weights.shape[0] < 2:
            raise InputRejected("weights must be (K, T, H, W, C) with K >= 2")
        if biases.shape != (weights.shape[0],):
            raise InputRejected("biases must be length K")
        if not (np.isfinite(weights).all() and np.isfinite(biases).all()):
            raise InputRejected("oracle parameters must be finite")
        self.weights = weights.astype(np.float64)
        self.biases = biases.astype(np.float64)
        self.num_classes = weights.shape[0]
        self.input_shape = weights.shape[1:]
        self._w_flat = self.weights.reshape(self.num_classes, -1)

    def _scores(self, v: np.ndarray) -> np.ndarray:
        return self._w_flat @ v.ravel() + self.biases


def linear_boundary_distance(
    oracle: LinearOracle,
    x: np.ndarray,
    direction: np.ndarray,
    from_label: int,
    lam_max: float | None = None,
) -> float | None:
    """Smallest step along a unit direction that changes the top-1 label.

    Solved in closed form from the per-class linear score crossings;
    returns None when no class overtakes ``from_label`` within ``lam_max``.
    """
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-9:
        raise InputRejected(f"direction must be unit norm, got {norm}")
    scores = oracle._w_flat @ x.ravel() + oracle.biases
    if int(np.argmax(scores)) != from_label:
        raise InputRejected("from_label is not the top-1 class at x")
    rates = oracle._w_flat @ direction.ravel()
    best = np.inf
    for k in range(oracle.num_classes):
        if k == from_label:
            continue
        gap = scores[from_label] - scores[k]
        rel = rates[k] - rates[from_label]
        if rel <= 0.0:
            continue
        lam = gap / rel
        if 0.0 < lam < best:
            best = lam
    if not np.isfinite(best):
        return None
    if lam_max is not None and best > lam_max:
        return None
    return float(best)


class ConvOracle(Oracle):
    """Two spatial conv layers per frame, temporal average, one dense layer.

    The temporal stage is a plain mean over per-frame features, so frames
    carrying similar content are interchangeable to the classifier.
    """

    POOL_GRID = 4
    CH = (8, 16)

    def __init__(self, frames: int, height: int, width: int, channels: int,
                 num_classes: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_shape = (frames, height, width, channels)
        self.num_classes = num_classes
        self.conv1 = Conv2d(channels, self.CH[0], 3, 2, 1, rng)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(self.CH[0], self.CH[1], 3, 2, 1, rng)
        self.relu2 = ReLU()
        h2 = (height + 1) // 2
        h4 = (h2 + 1) // 2
        w2 = (width + 1) // 2
        w4 = (w2 + 1) // 2
        # Pool to a coarse grid when it divides evenly, else keep full maps.
        self.grid_h = self.POOL_GRID if h4 % self.POOL_GRID == 0 else h4
        self.grid_w = self.POOL_GRID if w4 % self.POOL_GRID == 0 else w4
        self.dense = Linear(self.CH[1] * self.grid_h * self.grid_w, num_classes, rng)
        self._pool_shape = None

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.dense.params()

    def grads(self):
        return self.conv1.grads() + self.conv2.grads() + self.dense.grads()

    def _frame_stack(self, videos: np.ndarray) -> np.ndarray:
        b, t, h, w, c = videos.shape
        x = videos.transpose(0, 1, 4, 2, 3).reshape(b * t, c, h, w)
        x = self.relu1.forward(self.conv1.forward(x))
        x = self.relu2.forward(self.conv2.forward(x))
        return x

    def forward(self, videos: np.ndarray) -> np.ndarray:
        """Batch logits (B, K) for videos (B, T, H, W, C)."""
        b, t = videos.shape[:2]
        x = self._frame_stack(videos)
        n, ch, h4, w4 = x.shape
        bh, bw = h4 // self.grid_h, w4 // self.grid_w
        self._pool_shape = (n, ch, h4, w4)
        pooled = x.reshape(n, ch, self.grid_h, bh, self.grid_w, bw).mean(axis=(3, 5))
        frame_feats = pooled.reshape(b, t, -1)
        video_feats = frame_feats.mean(axis=1)
        return self.dense.forward(video_feats)

    def backward(self, dlogits: np.ndarray) -> list[np.ndarray]:
        n, ch, h4, w4 = self._pool_shape
        b = dlogits.shape[0]
        t = n // b
        dvid = self.dense.backward(dlogits)
        dframe = np.repeat(dvid[:, None, :] / t, t, axis=1).reshape(n, ch, self.grid_h, self.grid_w)
        bh, bw = h4 // self.grid_h, w4 // self.grid_w
        dpool = np.repeat(np.repeat(dframe, bh, axis=2), bw, axis=3) / (bh * bw)
        dx = self.relu2.backward(dpool)
        dx = self.conv2.backward(dx)
        dx = self.relu1.backward(dx)
        self.conv1.backward(dx)
        return self.grads()

    def _scores(self, v: np.ndarray) -> np.ndarray:
        return self.forward(v[None])[0]

    def accuracy(self, videos: np.ndarray, labels: np.ndarray, batch: int = 64) -> float:
        hits = 0
        for start in range(0, len(videos), batch):
            logits = self.forward(videos[start:start + batch])
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[start:start + batch]))
        return hits / len(videos)


def train_conv_oracle(
    train_videos: np.ndarray,
    train_labels: np.ndarray,
    test_videos: np.ndarray,
    test_labels: np.ndarray,
    num_classes: int,
    epochs: int = 12,
    seed: int = 0,
    lr: float = 5e-3,
    batch_size: int = 32,
    stop_accuracy: float = 0.97,
    label_smoothing: float = 0.3,
) -> ConvOracle:
    """Fit a ConvOracle on the synthetic set; deterministic given the seed.

    Label smoothing keeps logit gaps (and with them the decision margins)
    small, which is what makes the desk-scale model attackable at tight
    perturbation budgets without costing accuracy.  Raises TrainingFailure
    when held-out accuracy stays below 80% after the epoch budget.
    """
    if train_labels.min() < 0 or train_labels.max() >= num_classes:
        raise InputRejected("labels out of range")
    t, h, w, c = train_videos.shape[1:]
    rng = np.random.default_rng(seed)
    model = ConvOracle(t, h, w, c, num_classes, rng)
    # Zero logits at the start: avoids a saturated softmax on epoch one.
    model.dense.weight[...] = 0.0
    model.dense.bias[...] = 0.0
    opt = Adam(model.params(), lr=lr)
    n = len(train_videos)
    acc = 0.0
    off_target = label_smoothing / num_classes
    on_target = 1.0 - label_smoothing + off_target
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = model.forward(train_videos[idx])
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            dlogits = probs - off_target
            dlogits[np.arange(len(idx)), train_labels[idx]] -= on_target - off_target
            dlogits /= len(idx)
            opt.step(model.backward(dlogits))
        acc = model.accuracy(test_videos, test_labels)
        if acc >= stop_accuracy:
            break
    if acc < 0.80:
        raise TrainingFailure(f"held-out accuracy {acc:.3f} below 0.80 after {epochs} epochs")
    return model


def save_oracle(path, oracle: Oracle) -> None:
    """Single binary file: magic, version, JSON metadata, float64 arrays."""
    if isinstance(oracle, LinearOracle):
        meta = {"kind": "linear", "num_classes": oracle.num_classes,
                "input_shape": list(oracle.input_shape)}
        arrays = [oracle.weights, oracle.biases]
    elif isinstance(oracle, ConvOracle):
        meta = {"kind": "conv", "num_classes": oracle.num_classes,
                "input_shape": list(oracle.input_shape)}
        arrays = oracle.params()
    else:
        raise InputRejected(f"cannot serialize oracle type {type(oracle).__name__}")
    blob = json.dumps(meta).encode()
    with open(path, "wb") as fh:
        fh.write(ORACLE_MAGIC)
        fh.write(struct.pack("<II", ORACLE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_oracle(path) -> Oracle:
    with open(path, "rb") as fh:
        if fh.read(4) != ORACLE_MAGIC:
            raise InputRejected(f"{path}: not an oracle file")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != ORACLE_VERSION:
            raise InputRejected(f"{path}: unsupported oracle version {version}")
        meta = json.loads(fh.read(meta_len))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape))
            data = np.frombuffer(fh.read(8 * size), dtype="<f8")
            arrays.append(data.astype(np.float64).reshape(shape))
    if meta["kind"] == "linear":
        return LinearOracle(arrays[0], arrays[1])
    if meta["kind"] == "conv":
        t, h, w, c = meta["input_shape"]
        model = ConvOracle(t, h, w, c, meta["num_classes"])
        for dst, src in zip(model.params(), arrays):
            if dst.shape != src.shape:
                raise InputRejected("oracle file parameter shapes do not match")
            dst[...] = src
        return model
    raise InputRejected(f"unknown oracle kind {meta['kind']!r}")
