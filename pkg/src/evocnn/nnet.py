"""Dense-tensor CNN training kernels: forward/backward passes, loss, SGD.

Everything operates on plain numpy arrays in NCHW layout (batch, channels,
height, width) or (batch, features) for flat tensors. Training runs in
float32; the kernels preserve whatever dtype they are given, which lets the
gradient-check suite drive them in float64. All backward passes are exact
analytic gradients of their forward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .genome import Gaussian, GaussianFanAvg, InitScheme, UniformFanIn

DTYPE = np.float32

CHECKPOINT_MAGIC = b"DNDX"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class NumericalDivergence(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class SolverConfig:
    """Training hyperparameters; defaults reproduce the reference regime."""

    base_lr: float = 0.01
    lr_policy: str = "inv"
    gamma: float = 1e-4
    power: float = 0.75
    momentum: float = 0.90
    weight_decay: float = 0.0005
    epochs: int = 5
    batch_size: int = 32


@dataclass
class LayerState:
    """Parameters plus momentum buffers for one trainable layer."""

    weights: np.ndarray
    bias: np.ndarray
    weight_velocity: np.ndarray
    bias_velocity: np.ndarray

    @classmethod
    def zeros_like(cls, weights: np.ndarray, bias: np.ndarray) -> "LayerState":
        return cls(weights, bias,
                   np.zeros_like(weights), np.zeros_like(bias))


# ---------------------------------------------------------------------------
# Convolution (cross-correlation, no kernel flip)


def _conv_cols(x: np.ndarray, kernel: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv output {oh}x{ow} collapses below 1")
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, oh, ow, k, k) -> (n*oh*ow, c*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(x: np.ndarray, state: LayerState, kernel: int, stride: int,
                   padding: int) -> np.ndarray:
    n, c, _, _ = x.shape
    f = state.weights.shape[0]
    if state.weights.shape != (f, c, kernel, kernel):
        raise ShapeMismatch(
            f"conv weights {state.weights.shape} incompatible with input channels {c}")
    cols, oh, ow = _conv_cols(x, kernel, stride, padding)
    out = cols @ state.weights.reshape(f, -1).T + state.bias
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)


def conv2d_backward(x: np.ndarray, state: LayerState, dy: np.ndarray, kernel: int,
                    stride: int, padding: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    f = state.weights.shape[0]
    _, _, oh, ow = dy.shape
    cols, coh, cow = _conv_cols(x, kernel, stride, padding)
    if (coh, cow) != (oh, ow):
        raise ShapeMismatch("upstream gradient shape does not match conv output")
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
    dweights = (dy_mat.T @ cols).reshape(state.weights.shape)
    dbias = dy.sum(axis=(0, 2, 3))
    dcols = (dy_mat @ state.weights.reshape(f, -1)).reshape(n, oh, ow, c, kernel, kernel)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dweights, dbias


# ---------------------------------------------------------------------------
# Pooling


def _pool_windows(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, int, int]:
    _, _, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"pool output {oh}x{ow} collapses below 1")
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return win, oh, ow


def maxpool_forward(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win, _, _ = _pool_windows(x, kernel, stride)
    return win.max(axis=(4, 5))


def maxpool_backward(x: np.ndarray, dy: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    n, c, _, _ = x.shape
    win, oh, ow = _pool_windows(x, kernel, stride)
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=4)  # first maximum wins on ties
    iy = (np.arange(oh) * stride)[None, None, :, None] + arg // kernel
    ix = (np.arange(ow) * stride)[None, None, None, :] + arg % kernel
    dx = np.zeros_like(x)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), iy, ix), dy)
    return dx


def avgpool_forward(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win, _, _ = _pool_windows(x, kernel, stride)
    return win.mean(axis=(4, 5))


def avgpool_backward(x: np.ndarray, dy: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    _, _, oh, ow = dy.shape
    share = dy / (kernel * kernel)
    dx = np.zeros_like(x)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
    return dx


# ---------------------------------------------------------------------------
# Pointwise and dense layers


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def fc_forward(x: np.ndarray, state: LayerState) -> np.ndarray:
    if x.shape[1] != state.weights.shape[0]:
        raise ShapeMismatch(
            f"fc input features {x.shape[1]} != weight rows {state.weights.shape[0]}")
    return x @ state.weights + state.bias


def fc_backward(x: np.ndarray, state: LayerState,
                dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = dy @ state.weights.T
    dweights = x.T @ dy
    dbias = dy.sum(axis=0)
    return dx, dweights, dbias


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Computed in log-sum-exp form with max subtraction, so extreme logits
    cannot produce log(0).
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(z)
    total = exp.sum(axis=1)
    loss = float(np.mean(np.log(total) - z[np.arange(n), labels]))
    probs = exp / total[:, None]
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


# ---------------------------------------------------------------------------
# Optimizer and schedule


def inv_lr(iteration: int, cfg: SolverConfig) -> float:
    """Learning rate after `iteration` steps: base_lr * (1 + gamma*t)^(-power)."""
    return cfg.base_lr * (1.0 + cfg.gamma * iteration) ** (-cfg.power)


def sgd_step(state: LayerState, dweights: np.ndarray, dbias: np.ndarray,
             lr: float, cfg: SolverConfig) -> LayerState:
    """v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Updates in place."""
    state.weight_velocity *= cfg.momentum
    state.weight_velocity -= lr * (dweights + cfg.weight_decay * state.weights)
    state.weights += state.weight_velocity
    state.bias_velocity *= cfg.momentum
    state.bias_velocity -= lr * (dbias + cfg.weight_decay * state.bias)
    state.bias += state.bias_velocity
    return state


# ---------------------------------------------------------------------------
# Weight initialization


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:  # conv (filters, channels, k, k)
        f, c, kh, kw = shape
        return c * kh * kw, f * kh * kw
    if len(shape) == 2:  # fc (in, out)
        return shape[0], shape[1]
    raise ShapeMismatch(f"cannot derive fans for shape {shape}")


def init_weights(scheme: InitScheme, shape: tuple[int, ...],
                 rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = _fans(shape)
    if isinstance(scheme, Gaussian):
        w = rng.normal(0.0, scheme.stddev, size=shape)
    elif isinstance(scheme, UniformFanIn):
        bound = float(np.sqrt(3.0 / fan_in))
        w = rng.uniform(-bound, bound, size=shape)
    elif isinstance(scheme, GaussianFanAvg):
        w = rng.normal(0.0, float(np.sqrt(2.0 / (fan_in + fan_out))), size=shape)
    else:
        raise TypeError(f"unknown init scheme {scheme!r}")
    return w.astype(DTYPE)


# ---------------------------------------------------------------------------
# Weight checkpoints


def save_checkpoint(path, entries: Iterable[tuple[int, np.ndarray, np.ndarray]]) -> None:
    """Write per-layer parameters: gene id, parameter count, raw weights then bias."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        for gene_id, weights, bias in entries:
            count = weights.size + bias.size
            fh.write(struct.pack("<IQ", gene_id, count))
            fh.write(np.ascontiguousarray(weights, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())


def load_checkpoint(path) -> list[tuple[int, np.ndarray]]:
    """Read back (gene id, flat float32 parameter vector) entries in file order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a weight checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    entries = []
    offset = 6
    while offset < len(data):
        gene_id, count = struct.unpack_from("<IQ", data, offset)
        offset += 12
        end = offset + 4 * count
        if end > len(data):
            raise ValueError("truncated weight checkpoint")
        params = np.frombuffer(data[offset:end], dtype="<f4").copy()
        entries.append((gene_id, params))
        offset = end
    return entries
