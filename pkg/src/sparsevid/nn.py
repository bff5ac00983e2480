"""Minimal neural-network layers with exact analytic gradients.

Everything runs in float64 numpy.  Each layer caches what its backward
pass needs during ``forward`` and raises if ``backward`` is called
without a recorded forward.  Gradients are exact derivatives of the
recorded computation; the test suite checks every layer type against
central finite differences.
"""

from __future__ import annotations

import json
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, InputRejected

NN_MAGIC = b"NNCK"
NN_VERSION = 1


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: parameterless layers reuse these defaults."""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N, C, H, W) -> column matrix (N*OH*OW, C*kh*kw) plus geometry."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


class Conv2d(Layer):
    """Spatial convolution with square kernel, zero padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 pad: int, rng: np.random.Generator):
        fan_in = in_ch * kernel * kernel
        self.weight = _uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.bias = _uniform_init(rng, (out_ch,), fan_in)
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]

    def forward(self, x):
        cols, oh, ow = _im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        out_ch = self.weight.shape[0]
        w_mat = self.weight.reshape(out_ch, -1)
        y = cols @ w_mat.T + self.bias
        n = x.shape[0]
        self._cache = (x, oh, ow)
        return y.reshape(n, oh, ow, out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy):
        if self._cache is None:
            raise ContractViolation("backward without recorded forward")
        x, oh, ow = self._cache
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        out_ch = self.weight.shape[0]
        dy_flat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, out_ch)
        cols, _, _ = _im2col(x, k, k, s, p)
        self.dweight = (dy_flat.T @ cols).reshape(self.weight.shape)
        self.dbias = dy_flat.sum(axis=0)
        dcols = dy_flat @ self.weight.reshape(out_ch, -1)
        dwin = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dwin[:, :, i, j]
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            raise ContractViolation("backward without recorded forward")
        return dy * self._mask


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            self.weight = np.zeros((out_features, in_features))
            self.bias = np.zeros(out_features)
        else:
            self.weight = _uniform_init(rng, (out_features, in_features), in_features)
            self.bias = _uniform_init(rng, (out_features,), in_features)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]

    def forward(self, x):
        self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, dy):
        if self._cache is None:
            raise ContractViolation("backward without recorded forward")
        x = self._cache
        self.dweight = dy.T @ x
        self.dbias = dy.sum(axis=0)
        return dy @ self.weight


class FrameNet:
    """Conv stack applied per frame, pooled, then an FC head over frames.

    Input is a batch of video-shaped states (B, T, H, W, C).  The conv
    stack never mixes frames (temporal kernel and stride are both 1 by
    construction: frames ride the batch axis), each frame is reduced to
    one feature vector by global average pooling, and the head sees the
    frame features concatenated in temporal order.
    """

    CONV_CHANNELS = (8, 16, 16, 32, 32)
    CONV_STRIDES = (1, 2, 1, 2, 1)
    FC_WIDTHS = (128, 64)

    def __init__(self, frames: int, height: int, width: int, channels: int,
                 out_dim: int, rng: np.random.Generator):
        self.frames = frames
        self.height = height
        self.width = width
        self.channels = channels
        self.out_dim = out_dim

        self.conv_stack: list[Layer] = []
        in_ch = channels
        for ch, stride in zip(self.CONV_CHANNELS, self.CONV_STRIDES):
            self.conv_stack.append(Conv2d(in_ch, ch, 3, stride, 1, rng))
            self.conv_stack.append(ReLU())
            in_ch = ch
        self.feat_dim = in_ch

        self.head: list[Layer] = []
        in_f = frames * self.feat_dim
        for width_fc in self.FC_WIDTHS:
            self.head.append(Linear(in_f, width_fc, rng))
            self.head.append(ReLU())
            in_f = width_fc
        self.head.append(Linear(in_f, out_dim, rng, zero_init=True))
        self._pool_cache = None

    def layers(self) -> list[Layer]:
        return self.conv_stack + self.head

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers() for p in layer.params()]

    def set_params(self, arrays) -> None:
        own = self.params()
        if len(own) != len(arrays):
            raise InputRejected("parameter count mismatch")
        for dst, src in zip(own, arrays):
            if dst.shape != src.shape:
                raise InputRejected(f"parameter shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src

    def _check_input(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 4:
            states = states[None]
        if states.ndim != 5 or states.shape[1:] != (self.frames, self.height,
                                                    self.width, self.channels):
            raise InputRejected(
                f"expected states (B, {self.frames}, {self.height}, "
                f"{self.width}, {self.channels}), got {states.shape}")
        return states

    def frame_features(self, states: np.ndarray) -> np.ndarray:
        """Per-frame pooled conv features, shape (B, T, F).  Caches for backward."""
        states = self._check_input(states)
        b = states.shape[0]
        x = states.transpose(0, 1, 4, 2, 3).reshape(
            b * self.frames, self.channels, self.height, self.width)
        for layer in self.conv_stack:
            x = layer.forward(x)
        self._pool_cache = x.shape
        pooled = x.mean(axis=(2, 3))
        return pooled.reshape(b, self.frames, self.feat_dim)

    def forward(self, states: np.ndarray) -> np.ndarray:
        """Logits of shape (B, out_dim)."""
        feats = self.frame_features(states)
        x = feats.reshape(feats.shape[0], -1)
        for layer in self.head:
            x = layer.forward(x)
        return x

    def backward(self, dlogits: np.ndarray) -> list[np.ndarray]:
        """Gradients for every parameter of the recorded forward pass."""
        if self._pool_cache is None:
            raise ContractViolation("backward without recorded forward")
        dx = np.asarray(dlogits, dtype=np.float64)
        for layer in reversed(self.head):
            dx = layer.backward(dx)
        n, ch, oh, ow = self._pool_cache
        dpool = dx.reshape(n, ch)
        dconv = np.broadcast_to(dpool[:, :, None, None] / (oh * ow),
                                (n, ch, oh, ow)).copy()
        for layer in reversed(self.conv_stack):
            dconv = layer.backward(dconv)
        return [g for layer in self.layers() for g in layer.grads()]

    def clone(self) -> "FrameNet":
        twin = FrameNet(self.frames, self.height, self.width, self.channels,
                        self.out_dim, np.random.default_rng(0))
        twin.set_params([p.copy() for p in self.params()])
        return twin

    def meta(self) -> dict:
        return {
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "out_dim": self.out_dim,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "FrameNet":
        return cls(meta["frames"], meta["height"], meta["width"],
                   meta["channels"], meta["out_dim"], np.random.default_rng(0))


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list (updates in place)."""

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise InputRejected("gradient list does not match parameter list")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def save_checkpoint(path, net: FrameNet) -> None:
    """Versioned header + layer-ordered float32 parameter arrays."""
    meta = json.dumps(net.meta()).encode()
    with open(path, "wb") as fh:
        fh.write(NN_MAGIC)
        fh.write(struct.pack("<II", NN_VERSION, len(meta)))
        fh.write(meta)
        arrays = net.params()
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> FrameNet:
    with open(path, "rb") as fh:
        if fh.read(4) != NN_MAGIC:
            raise InputRejected(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != NN_VERSION:
            raise InputRejected(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len))
        net = FrameNet.from_meta(meta)
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * size), dtype="<f4")
            arrays.append(data.astype(np.float64).reshape(shape))
    net.set_params(arrays)
    return net
