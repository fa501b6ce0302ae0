"""Shared fixtures and numerical helpers for the test suite."""

import os

# pin BLAS to one thread before numpy loads: reproducibility across worker
# counts and no oversubscription under multiprocessing tests
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from evocnn.genome import (
    Connection,
    Conv,
    FullyConnected,
    Gaussian,
    GaussianFanAvg,
    Genome,
    Input,
    LayerGene,
    MODE_MAX,
    Pool,
    ReLU,
    SoftmaxOutput,
    minimal_genome,
)

REFERENCE_DESCRIPTOR = os.path.join(os.path.dirname(__file__), "..",
                                    "descriptors", "cxr_reference.json")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


def fd_gradient(f, x, h=1e-3):
    """Central finite differences of scalar f() w.r.t. array x, in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(a, b, floor=1e-6):
    """Largest elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def chain_genome(input_shape, kinds, classes=2):
    """Linear chain genome: Input -> kinds... -> FC(classes) -> Softmax."""
    genes = [LayerGene(0, Input(*input_shape))]
    for kind in kinds:
        genes.append(LayerGene(len(genes), kind))
    genes.append(LayerGene(len(genes), FullyConnected(classes, GaussianFanAvg())))
    genes.append(LayerGene(len(genes), SoftmaxOutput(classes)))
    connections = tuple(Connection(i, i + 1) for i in range(len(genes) - 1))
    return Genome(genes=tuple(genes), connections=connections)


def chest_like_image(rng, h=400, w=320):
    """Synthetic chest-x-ray-ish 8-bit image: dark border, bright torso, two
    mid-intensity lung fields."""
    img = rng.uniform(0, 30, (h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    torso = ((yy - h / 2) / (h * 0.45)) ** 2 + ((xx - w / 2) / (w * 0.42)) ** 2 < 1
    img[torso] = rng.uniform(200, 250, int(torso.sum()))
    for cx in (w * 0.33, w * 0.67):
        lung = ((yy - h * 0.45) / (h * 0.28)) ** 2 + ((xx - cx) / (w * 0.16)) ** 2 < 1
        img[lung] = rng.uniform(90, 160, int(lung.sum()))
    return np.clip(img, 0, 255).astype(np.uint8)


@pytest.fixture
def tiny_genome():
    return minimal_genome((32, 32, 1), 2)


@pytest.fixture
def conv_chain_genome():
    return chain_genome((32, 32, 1), [
        Conv(8, 3, 1, 1, GaussianFanAvg()),
        ReLU(),
        Pool(2, 2, MODE_MAX),
    ])
