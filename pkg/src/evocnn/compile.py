"""Compile genomes into executable networks; train them; score fitness.

A compiled network owns per-layer parameter state and activation caches, so
each instance must stay confined to one evaluation thread; compiling the
same genome under the same seed always produces identical weights.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import nnet
from .genome import (
    Conv,
    FullyConnected,
    Genome,
    Input,
    MODE_MAX,
    Pool,
    ReLU,
    Shape,
    SoftmaxOutput,
    deserialize,
    infer_shapes,
    serialize,
    topo_order,
    validate,
)
from .nnet import LayerState, NumericalDivergence, SolverConfig

log = logging.getLogger(__name__)

BUNDLE_GENOME = "genome.json"
BUNDLE_WEIGHTS = "weights.dndx"
BUNDLE_MANIFEST = "manifest.json"


class _Layer:
    """One executable node; caches its forward input for the backward pass."""

    __slots__ = ("gene_id", "kind", "state", "cache", "dweights", "dbias")

    def __init__(self, gene_id: int, kind, state: LayerState | None):
        self.gene_id = gene_id
        self.kind = kind
        self.state = state
        self.cache = None
        self.dweights = None
        self.dbias = None

    def forward(self, x: np.ndarray, keep: bool) -> np.ndarray:
        kind = self.kind
        if isinstance(kind, Conv):
            if keep:
                self.cache = x
            return nnet.conv2d_forward(x, self.state, kind.kernel, kind.stride, kind.padding)
        if isinstance(kind, Pool):
            if keep:
                self.cache = x
            if kind.mode == MODE_MAX:
                return nnet.maxpool_forward(x, kind.kernel, kind.stride)
            return nnet.avgpool_forward(x, kind.kernel, kind.stride)
        if isinstance(kind, ReLU):
            if keep:
                self.cache = x
            return nnet.relu_forward(x)
        if isinstance(kind, FullyConnected):
            flat = x.reshape(x.shape[0], -1)
            if keep:
                self.cache = (flat, x.shape)
            return nnet.fc_forward(flat, self.state)
        if isinstance(kind, SoftmaxOutput):
            flat = x.reshape(x.shape[0], -1)
            if keep:
                self.cache = x.shape
            return flat  # raw logits; the loss applies the softmax
        raise TypeError(f"cannot execute layer kind {kind!r}")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        kind = self.kind
        if isinstance(kind, Conv):
            dx, self.dweights, self.dbias = nnet.conv2d_backward(
                self.cache, self.state, dy, kind.kernel, kind.stride, kind.padding)
            return dx
        if isinstance(kind, Pool):
            if kind.mode == MODE_MAX:
                return nnet.maxpool_backward(self.cache, dy, kind.kernel, kind.stride)
            return nnet.avgpool_backward(self.cache, dy, kind.kernel, kind.stride)
        if isinstance(kind, ReLU):
            return nnet.relu_backward(self.cache, dy)
        if isinstance(kind, FullyConnected):
            flat, orig_shape = self.cache
            dx, self.dweights, self.dbias = nnet.fc_backward(flat, self.state, dy)
            return dx.reshape(orig_shape)
        if isinstance(kind, SoftmaxOutput):
            return dy.reshape(self.cache)
        raise TypeError(f"cannot execute layer kind {kind!r}")


@dataclass
class Network:
    """Executable form of a genome: layers in topological order."""

    genome: Genome
    layers: list[_Layer]
    preds: dict[int, list[int]]
    input_shape: Shape
    classes: int

    def param_layers(self) -> list[_Layer]:
        return [l for l in self.layers if l.state is not None]

    def forward(self, x: np.ndarray, keep: bool = False,
                record: dict[int, np.ndarray] | None = None) -> np.ndarray:
        outputs: dict[int, np.ndarray] = {}
        out = None
        for layer in self.layers:
            if isinstance(layer.kind, Input):
                out = x
            else:
                ps = self.preds[layer.gene_id]
                merged = outputs[ps[0]]
                for p in ps[1:]:
                    merged = merged + outputs[p]
                out = layer.forward(merged, keep)
            outputs[layer.gene_id] = out
            if record is not None:
                record[layer.gene_id] = out
        return out

    def backward(self, dlogits: np.ndarray,
                 record: dict[int, np.ndarray] | None = None) -> None:
        """Propagate the loss gradient through every layer; parameter layers
        stash their dweights/dbias. `record` captures the gradient arriving
        at each requested gene's output."""
        grads: dict[int, np.ndarray] = {self.layers[-1].gene_id: dlogits}
        for layer in reversed(self.layers):
            dy = grads.pop(layer.gene_id, None)
            if dy is None:
                continue
            if record is not None and layer.gene_id in record:
                record[layer.gene_id] = dy
            if isinstance(layer.kind, Input):
                continue
            dx = layer.backward(dy)
            for p in self.preds[layer.gene_id]:
                if p in grads:
                    grads[p] = grads[p] + dx
                else:
                    grads[p] = dx


def compile_genome(g: Genome, rng: np.random.Generator) -> Network:
    """Allocate and initialize a network for a valid genome."""
    validate(g)
    shapes = infer_shapes(g)
    order = topo_order(g)
    preds: dict[int, list[int]] = {gene.id: [] for gene in g.genes}
    for c in g.connections:
        preds[c.dst].append(c.src)
    kinds = {gene.id: gene.kind for gene in g.genes}
    input_gene = next(gene for gene in g.genes if isinstance(gene.kind, Input))
    softmax = next(gene for gene in g.genes if isinstance(gene.kind, SoftmaxOutput))

    layers = []
    for gid in order:
        kind = kinds[gid]
        state = None
        if isinstance(kind, Conv):
            in_c = shapes[preds[gid][0]][2]
            w = nnet.init_weights(kind.init, (kind.filters, in_c, kind.kernel, kind.kernel), rng)
            b = np.zeros(kind.filters, dtype=nnet.DTYPE)
            state = LayerState.zeros_like(w, b)
        elif isinstance(kind, FullyConnected):
            h, w_, c = shapes[preds[gid][0]]
            fan_in = h * w_ * c
            w = nnet.init_weights(kind.init, (fan_in, kind.units), rng)
            b = np.zeros(kind.units, dtype=nnet.DTYPE)
            state = LayerState.zeros_like(w, b)
        layers.append(_Layer(gid, kind, state))

    return Network(genome=g, layers=layers, preds=preds,
                   input_shape=(input_gene.kind.height, input_gene.kind.width,
                                input_gene.kind.channels),
                   classes=softmax.kind.classes)


def param_count(net: Network) -> int:
    return sum(l.state.weights.size + l.state.bias.size for l in net.param_layers())


# ---------------------------------------------------------------------------
# Training and fitness


def _as_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def _to_nchw(net: Network, images: np.ndarray) -> np.ndarray:
    """Accept (n, h, w) single-channel stacks or full (n, c, h, w) batches."""
    h, w, c = net.input_shape
    if images.ndim == 3:
        if c != 1:
            raise nnet.ShapeMismatch(f"network expects {c} channels, got single-channel stack")
        images = images[:, None, :, :]
    if images.shape[1:] != (c, h, w):
        raise nnet.ShapeMismatch(
            f"input batch {images.shape[1:]} does not match network input {(c, h, w)}")
    return np.ascontiguousarray(images, dtype=images.dtype)


def train(net: Network, images: np.ndarray, labels: np.ndarray, cfg: SolverConfig,
          rng: np.random.Generator) -> tuple[Network, float]:
    """Mini-batch SGD for cfg.epochs epochs; the learning rate decays by
    global iteration. Shuffles every epoch with the supplied generator.
    Raises NumericalDivergence when the loss leaves the finite range."""
    images = _to_nchw(net, images)
    n = images.shape[0]
    iteration = 0
    loss = math.nan
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start, stop in _as_batches(n, cfg.batch_size):
            idx = perm[start:stop]
            x = images[idx]
            y = labels[idx]
            logits = net.forward(x, keep=True)
            loss, dlogits = nnet.softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise NumericalDivergence(f"loss {loss} at iteration {iteration}")
            net.backward(dlogits)
            lr = nnet.inv_lr(iteration, cfg)
            for layer in net.param_layers():
                nnet.sgd_step(layer.state, layer.dweights, layer.dbias, lr, cfg)
            iteration += 1
    return net, loss


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = _to_nchw(net, images)
    out = np.empty(images.shape[0], dtype=np.int64)
    for start, stop in _as_batches(images.shape[0], batch_size):
        logits = net.forward(images[start:stop])
        out[start:stop] = logits.argmax(axis=1)
    return out


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    return float((predict(net, images) == labels).mean())


def evaluate_fitness(g: Genome, data, cfg: SolverConfig, seed: int) -> float:
    """Compile, train on the train split, and score accuracy on the dev split.

    Candidates whose training diverges score 0 instead of aborting the
    search. Deterministic for a given (genome, data, config, seed).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    net = compile_genome(g, rng)
    try:
        # overflow to inf is the divergence signal, not an error
        with np.errstate(over="ignore", invalid="ignore"):
            train(net, data.train_images, data.train_labels, cfg, rng)
    except NumericalDivergence as e:
        log.warning("candidate diverged (%s); assigning fitness 0", e)
        return 0.0
    return accuracy(net, data.dev_images, data.dev_labels)


# ---------------------------------------------------------------------------
# Model bundles


def export_bundle(out_dir, net: Network, extra: dict | None = None) -> None:
    """Write a model bundle: genome descriptor, weight checkpoint, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, BUNDLE_GENOME), "w", encoding="utf-8") as fh:
        fh.write(serialize(net.genome))
    nnet.save_checkpoint(
        os.path.join(out_dir, BUNDLE_WEIGHTS),
        [(l.gene_id, l.state.weights, l.state.bias) for l in net.param_layers()])
    manifest = {
        "genome": BUNDLE_GENOME,
        "weights": BUNDLE_WEIGHTS,
        "input_shape": list(net.input_shape),
        "classes": net.classes,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, BUNDLE_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_bundle(bundle_dir) -> tuple[Network, dict]:
    """Rebuild a network from a bundle directory, weights included."""
    with open(os.path.join(bundle_dir, BUNDLE_MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(bundle_dir, manifest["genome"]), encoding="utf-8") as fh:
        genome = deserialize(fh.read())
    net = compile_genome(genome, np.random.Generator(np.random.PCG64(0)))
    entries = dict(nnet.load_checkpoint(os.path.join(bundle_dir, manifest["weights"])))
    for layer in net.param_layers():
        if layer.gene_id not in entries:
            raise ValueError(f"checkpoint missing parameters for gene {layer.gene_id}")
        params = entries[layer.gene_id]
        wsize = layer.state.weights.size
        if params.size != wsize + layer.state.bias.size:
            raise ValueError(f"parameter count mismatch for gene {layer.gene_id}")
        layer.state.weights = params[:wsize].reshape(layer.state.weights.shape)
        layer.state.bias = params[wsize:].reshape(layer.state.bias.shape)
    return net, manifest
