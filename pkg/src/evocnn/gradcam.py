"""Gradient-weighted class-activation heatmaps and overlay rendering.

The heatmap for a class at a convolution layer is the rectified sum of that
layer's activation maps, each weighted by the spatial average of the raw
class-logit gradient flowing into it. The map is max-normalized to [0, 1]
whenever any value is positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compile import Network
from .genome import Conv, FullyConnected
from .imgpipe import resize

OVERLAY_ALPHA = 0.4


class LayerNotConvolutional(ValueError):
    pass


@dataclass(frozen=True)
class Heatmap:
    """Non-negative activation-influence map over one layer's spatial grid."""

    values: np.ndarray  # (h, w) float32, max <= 1 when normalized

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def default_target_layer(net: Network) -> int:
    """The deepest convolution before the first fully-connected layer."""
    chosen = None
    for layer in net.layers:
        if isinstance(layer.kind, FullyConnected):
            break
        if isinstance(layer.kind, Conv):
            chosen = layer.gene_id
    if chosen is None:
        raise LayerNotConvolutional("network has no convolution layer to target")
    return chosen


def gradcam(net: Network, img: np.ndarray, layer: int | None = None,
            class_index: int = 1, normalize: bool = True) -> Heatmap:
    """Heatmap of `class_index`'s influence sources at a convolution layer.

    The gradient target is the raw pre-softmax logit of the chosen class.
    Deterministic given the network weights and the image.
    """
    if layer is None:
        layer = default_target_layer(net)
    target = next((l for l in net.layers if l.gene_id == layer), None)
    if target is None or not isinstance(target.kind, Conv):
        raise LayerNotConvolutional(f"gene {layer} is not a convolution layer")
    if not 0 <= class_index < net.classes:
        raise ValueError(f"class index {class_index} out of range for {net.classes} classes")

    h, w, c = net.input_shape
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[None, :, :]
    if img.shape != (c, h, w):
        raise ValueError(f"image shape {img.shape} does not match network input {(c, h, w)}")
    x = img[None]

    activations: dict[int, np.ndarray] = {}
    logits = net.forward(x, keep=True, record=activations)
    dlogits = np.zeros_like(logits)
    dlogits[0, class_index] = 1.0
    grads = {layer: None}
    net.backward(dlogits, record=grads)

    acts = activations[layer][0]      # (filters, h, w)
    grad = grads[layer]
    if grad is None:                  # layer not on the path to the logit
        weights = np.zeros(acts.shape[0], dtype=np.float32)
    else:
        weights = grad[0].mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    if normalize:
        peak = cam.max()
        if peak > 0:
            cam = cam / peak
    return Heatmap(values=cam.astype(np.float32))


# ---------------------------------------------------------------------------
# Rendering


def color_ramp(values: np.ndarray) -> np.ndarray:
    """Fixed monotone black->red->yellow->white ramp over [0, 1].

    r = clip(3v, 0, 1), g = clip(3v - 1, 0, 1), b = clip(3v - 2, 0, 1).
    """
    v = np.asarray(values, dtype=np.float64)
    return np.stack([
        np.clip(3.0 * v, 0.0, 1.0),
        np.clip(3.0 * v - 1.0, 0.0, 1.0),
        np.clip(3.0 * v - 2.0, 0.0, 1.0),
    ], axis=-1)


def overlay(heatmap: Heatmap, img: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the upsampled heatmap over the grayscale image.

    Per pixel: out = (1 - alpha*v) * gray + alpha*v * ramp(v), so zero-heat
    pixels reproduce the grayscale input exactly. Returns (h, w, 3) uint8.
    """
    img = np.asarray(img)
    gray = img.astype(np.float64)
    if img.dtype == np.uint8:
        gray = gray / 255.0
    else:
        gray = np.clip(gray, 0.0, 1.0)
    v = resize(heatmap.values, img.shape)
    v = np.clip(v, 0.0, 1.0)
    ramp = color_ramp(v)
    weight = (alpha * v)[:, :, None]
    blended = (1.0 - weight) * gray[:, :, None] + weight * ramp
    return np.round(blended * 255.0).astype(np.uint8)


def heatmap_to_u8(heatmap: Heatmap) -> np.ndarray:
    """Raw normalized map scaled to 0..255."""
    return np.round(np.clip(heatmap.values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary (P5) PGM writer for 8-bit grayscale arrays."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
