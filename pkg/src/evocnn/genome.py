"""Direct graph encoding of CNN architectures.

A genome is a DAG of layer genes. Each gene carries the hyperparameters of
one network layer (kind, kernel size, stride, padding, weight init, ...);
connections carry dataflow. Genomes are immutable value objects: every
operation here is a pure function, so genomes can be copied and shipped
between concurrent evaluators freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from heapq import heapify, heappop, heappush

MODE_MAX = "max"
MODE_AVERAGE = "average"

# ---------------------------------------------------------------------------
# Weight initialization schemes


@dataclass(frozen=True, slots=True)
class Gaussian:
    """I.i.d. normal draws with a fixed standard deviation."""

    stddev: float = 0.01


@dataclass(frozen=True, slots=True)
class UniformFanIn:
    """Uniform draws in +-sqrt(3 / fan_in)."""


@dataclass(frozen=True, slots=True)
class GaussianFanAvg:
    """Normal draws with stddev sqrt(2 / (fan_in + fan_out))."""


InitScheme = Gaussian | UniformFanIn | GaussianFanAvg

DEFAULT_INIT = Gaussian(0.01)

# ---------------------------------------------------------------------------
# Layer kinds


@dataclass(frozen=True, slots=True)
class Input:
    height: int
    width: int
    channels: int


@dataclass(frozen=True, slots=True)
class Conv:
    filters: int
    kernel: int
    stride: int
    padding: int
    init: InitScheme = DEFAULT_INIT


@dataclass(frozen=True, slots=True)
class Pool:
    kernel: int
    stride: int
    mode: str = MODE_MAX  # MODE_MAX or MODE_AVERAGE


@dataclass(frozen=True, slots=True)
class ReLU:
    pass


@dataclass(frozen=True, slots=True)
class FullyConnected:
    units: int
    init: InitScheme = DEFAULT_INIT


@dataclass(frozen=True, slots=True)
class SoftmaxOutput:
    classes: int


LayerKind = Input | Conv | Pool | ReLU | FullyConnected | SoftmaxOutput


@dataclass(frozen=True, slots=True)
class LayerGene:
    id: int
    kind: LayerKind


@dataclass(frozen=True, slots=True)
class Connection:
    src: int
    dst: int


@dataclass(frozen=True, slots=True)
class Genome:
    """One encoded architecture: layer genes, connectivity, search metadata.

    ``fitness`` is None until an evaluator has trained and scored the
    compiled network; ``lineage`` is the generation the genome was born in.
    """

    genes: tuple[LayerGene, ...]
    connections: tuple[Connection, ...]
    fitness: float | None = None
    lineage: int = 0

    def gene_ids(self) -> list[int]:
        return [g.id for g in self.genes]

    def kind_of(self, gene_id: int) -> LayerKind:
        for g in self.genes:
            if g.id == gene_id:
                return g.kind
        raise KeyError(gene_id)

    def with_fitness(self, fitness: float | None) -> "Genome":
        return replace(self, fitness=fitness)

    def with_lineage(self, lineage: int) -> "Genome":
        return replace(self, lineage=lineage)


Shape = tuple[int, int, int]  # (height, width, channels)
ShapeMap = dict[int, Shape]

# ---------------------------------------------------------------------------
# Errors


class GenomeError(ValueError):
    """Base class for structural genome failures."""


class DuplicateId(GenomeError):
    pass


class MissingInput(GenomeError):
    pass


class MissingOutput(GenomeError):
    pass


class MissingEndpoint(GenomeError):
    pass


class DisconnectedGene(GenomeError):
    def __init__(self, gene_id: int, message: str = ""):
        super().__init__(message or f"gene {gene_id} is not on an input-to-output path")
        self.gene_id = gene_id


class CycleDetected(GenomeError):
    pass


class NonPositiveDimension(GenomeError):
    def __init__(self, gene_id: int, message: str = ""):
        super().__init__(message or f"gene {gene_id} produces a non-positive dimension")
        self.gene_id = gene_id


class ClassCountMismatch(GenomeError):
    """Softmax sink fed a flattened feature count different from its class count."""

    def __init__(self, gene_id: int, got: int, expected: int):
        super().__init__(
            f"softmax gene {gene_id} receives {got} features but declares {expected} classes"
        )
        self.gene_id = gene_id


class ShapeMergeMismatch(GenomeError):
    """A gene with several incoming edges received unequal shapes."""

    def __init__(self, gene_id: int):
        super().__init__(f"gene {gene_id} merges predecessors of unequal shapes")
        self.gene_id = gene_id


class ParseError(GenomeError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


# ---------------------------------------------------------------------------
# Construction


def minimal_genome(input_shape: Shape, classes: int) -> Genome:
    """Smallest legal architecture: Input -> FullyConnected(classes) -> Softmax."""
    h, w, c = input_shape
    genes = (
        LayerGene(0, Input(h, w, c)),
        LayerGene(1, FullyConnected(classes, DEFAULT_INIT)),
        LayerGene(2, SoftmaxOutput(classes)),
    )
    connections = (Connection(0, 1), Connection(1, 2))
    g = Genome(genes=genes, connections=connections, fitness=None, lineage=0)
    validate(g)
    return g


# ---------------------------------------------------------------------------
# Shape arithmetic

def conv_output_side(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def layer_output_shape(kind: LayerKind, in_shape: Shape) -> Shape | None:
    """Shape transition of a single layer; None when a dimension collapses below 1.

    FullyConnected flattens any input; SoftmaxOutput requires the flattened
    feature count to equal its class count (it carries no weights).
    """
    h, w, c = in_shape
    if isinstance(kind, Conv):
        oh = conv_output_side(h, kind.kernel, kind.stride, kind.padding)
        ow = conv_output_side(w, kind.kernel, kind.stride, kind.padding)
        if oh < 1 or ow < 1:
            return None
        return (oh, ow, kind.filters)
    if isinstance(kind, Pool):
        oh = conv_output_side(h, kind.kernel, kind.stride, 0)
        ow = conv_output_side(w, kind.kernel, kind.stride, 0)
        if oh < 1 or ow < 1:
            return None
        return (oh, ow, c)
    if isinstance(kind, ReLU):
        return in_shape
    if isinstance(kind, FullyConnected):
        return (1, 1, kind.units)
    if isinstance(kind, SoftmaxOutput):
        if h * w * c != kind.classes:
            return None
        return (1, 1, kind.classes)
    if isinstance(kind, Input):
        return (kind.height, kind.width, kind.channels)
    raise TypeError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Graph queries


def _adjacency(g: Genome) -> tuple[dict[int, list[int]], dict[int, list[int]]]:
    preds: dict[int, list[int]] = {gene.id: [] for gene in g.genes}
    succs: dict[int, list[int]] = {gene.id: [] for gene in g.genes}
    for c in g.connections:
        if c.src not in succs or c.dst not in preds:
            raise MissingEndpoint(f"connection {c.src}->{c.dst} references a missing gene")
        succs[c.src].append(c.dst)
        preds[c.dst].append(c.src)
    return preds, succs


def topo_order(g: Genome) -> list[int]:
    """Topological order of gene ids, ties broken by ascending id."""
    preds, succs = _adjacency(g)
    indeg = {gid: len(ps) for gid, ps in preds.items()}
    ready = [gid for gid, d in indeg.items() if d == 0]
    heapify(ready)
    order: list[int] = []
    while ready:
        gid = heappop(ready)
        order.append(gid)
        for nxt in succs[gid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heappush(ready, nxt)
    if len(order) != len(g.genes):
        raise CycleDetected("connection graph contains a cycle")
    return order


def infer_shapes(g: Genome) -> ShapeMap:
    """Propagate shapes from the input gene to every gene.

    Genes with several incoming edges require all predecessor shapes to be
    equal (the compiled network merges them by elementwise sum).
    """
    preds, _ = _adjacency(g)
    order = topo_order(g)
    kinds = {gene.id: gene.kind for gene in g.genes}
    shapes: ShapeMap = {}
    for gid in order:
        kind = kinds[gid]
        if isinstance(kind, Input):
            shapes[gid] = (kind.height, kind.width, kind.channels)
            continue
        ps = preds[gid]
        if not ps:
            raise DisconnectedGene(gid)
        first = shapes[ps[0]]
        for p in ps[1:]:
            if shapes[p] != first:
                raise ShapeMergeMismatch(gid)
        out = layer_output_shape(kind, first)
        if out is None:
            if isinstance(kind, SoftmaxOutput):
                h, w, c = first
                raise ClassCountMismatch(gid, h * w * c, kind.classes)
            raise NonPositiveDimension(gid)
        shapes[gid] = out
    return shapes


# ---------------------------------------------------------------------------
# Validation


def _check_kind_params(gene: LayerGene) -> None:
    kind = gene.kind
    bad = None
    if isinstance(kind, Input):
        if kind.height < 1 or kind.width < 1 or kind.channels < 1:
            bad = "input dimensions must be >= 1"
    elif isinstance(kind, Conv):
        if kind.kernel < 1 or kind.stride < 1 or kind.padding < 0 or kind.filters < 1:
            bad = "conv requires kernel >= 1, stride >= 1, padding >= 0, filters >= 1"
        elif isinstance(kind.init, Gaussian) and not kind.init.stddev > 0:
            bad = "gaussian init requires stddev > 0"
    elif isinstance(kind, Pool):
        if kind.kernel < 1 or kind.stride < 1:
            bad = "pool requires kernel >= 1 and stride >= 1"
        elif kind.mode not in (MODE_MAX, MODE_AVERAGE):
            bad = f"unknown pool mode {kind.mode!r}"
    elif isinstance(kind, FullyConnected):
        if kind.units < 1:
            bad = "fully-connected units must be >= 1"
        elif isinstance(kind.init, Gaussian) and not kind.init.stddev > 0:
            bad = "gaussian init requires stddev > 0"
    elif isinstance(kind, SoftmaxOutput):
        if kind.classes < 2:
            bad = "softmax must have >= 2 classes"
    if bad is not None:
        raise GenomeError(f"gene {gene.id}: {bad}")


def validate(g: Genome) -> None:
    """Check every genome invariant; raises a GenomeError subclass on failure.

    Accepts any single-input single-output DAG whose genes all lie on an
    input-to-output path and whose shape inference keeps every dimension
    positive. Never mutates its argument.
    """
    if not g.genes:
        raise MissingInput("genome has no genes")
    seen: set[int] = set()
    for gene in g.genes:
        if gene.id in seen:
            raise DuplicateId(f"gene id {gene.id} appears more than once")
        seen.add(gene.id)
        _check_kind_params(gene)
    if g.fitness is not None and not (0.0 <= g.fitness <= 1.0):
        raise GenomeError(f"fitness {g.fitness} outside [0, 1]")

    inputs = [gene for gene in g.genes if isinstance(gene.kind, Input)]
    outputs = [gene for gene in g.genes if isinstance(gene.kind, SoftmaxOutput)]
    if len(inputs) != 1:
        raise MissingInput(f"expected exactly one input gene, found {len(inputs)}")
    if len(outputs) != 1:
        raise MissingOutput(f"expected exactly one softmax gene, found {len(outputs)}")

    edge_set = set()
    for c in g.connections:
        if c.src == c.dst:
            raise CycleDetected(f"self-loop on gene {c.src}")
        if c.src not in seen or c.dst not in seen:
            raise MissingEndpoint(f"connection {c.src}->{c.dst} references a missing gene")
        if (c.src, c.dst) in edge_set:
            raise GenomeError(f"duplicate connection {c.src}->{c.dst}")
        edge_set.add((c.src, c.dst))

    preds, succs = _adjacency(g)
    input_id, output_id = inputs[0].id, outputs[0].id
    if preds[input_id]:
        raise GenomeError("input gene has incoming connections")
    if succs[output_id]:
        raise GenomeError("softmax gene has outgoing connections")

    topo_order(g)  # raises CycleDetected

    reachable = _reach(succs, input_id)
    coreachable = _reach(preds, output_id)
    for gene in g.genes:
        if gene.id not in reachable or gene.id not in coreachable:
            raise DisconnectedGene(gene.id)

    infer_shapes(g)


def is_valid(g: Genome) -> bool:
    try:
        validate(g)
        return True
    except GenomeError:
        return False


def _reach(adj: dict[int, list[int]], start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        for nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


# ---------------------------------------------------------------------------
# Serialization (genome descriptor files)

_KIND_TAGS = {
    Input: "input",
    Conv: "conv",
    Pool: "pool",
    ReLU: "relu",
    FullyConnected: "fc",
    SoftmaxOutput: "softmax",
}

_INIT_TAGS = {
    Gaussian: "gaussian",
    UniformFanIn: "uniform_fan_in",
    GaussianFanAvg: "gaussian_fan_avg",
}


def _init_to_obj(init: InitScheme) -> dict:
    if isinstance(init, Gaussian):
        return {"scheme": "gaussian", "stddev": init.stddev}
    return {"scheme": _INIT_TAGS[type(init)]}


def _kind_to_obj(kind: LayerKind) -> tuple[str, dict]:
    if isinstance(kind, Input):
        return "input", {"height": kind.height, "width": kind.width, "channels": kind.channels}
    if isinstance(kind, Conv):
        return "conv", {
            "filters": kind.filters,
            "kernel": kind.kernel,
            "stride": kind.stride,
            "padding": kind.padding,
            "init": _init_to_obj(kind.init),
        }
    if isinstance(kind, Pool):
        return "pool", {"kernel": kind.kernel, "stride": kind.stride, "mode": kind.mode}
    if isinstance(kind, ReLU):
        return "relu", {}
    if isinstance(kind, FullyConnected):
        return "fc", {"units": kind.units, "init": _init_to_obj(kind.init)}
    if isinstance(kind, SoftmaxOutput):
        return "softmax", {"classes": kind.classes}
    raise TypeError(f"unknown layer kind {kind!r}")


def serialize(g: Genome) -> str:
    """Canonical JSON text of a valid genome; bit-stable for equal genomes."""
    validate(g)
    doc = {
        "genes": [
            {"id": gene.id, "kind": _kind_to_obj(gene.kind)[0], "params": _kind_to_obj(gene.kind)[1]}
            for gene in g.genes
        ],
        "connections": [{"from": c.src, "to": c.dst} for c in g.connections],
        "fitness": g.fitness,
        "lineage": g.lineage,
    }
    return json.dumps(doc, indent=2) + "\n"


def _require_int(obj, key: str, ctx: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(0, f"{ctx}: field {key!r} must be an integer")
    return v


def _require_keys(obj: dict, keys: set[str], ctx: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(0, f"{ctx}: expected an object")
    extra = set(obj) - keys
    if extra:
        raise ParseError(0, f"{ctx}: unknown fields {sorted(extra)}")
    missing = keys - set(obj)
    if missing:
        raise ParseError(0, f"{ctx}: missing fields {sorted(missing)}")


def _init_from_obj(obj, ctx: str) -> InitScheme:
    if not isinstance(obj, dict) or "scheme" not in obj:
        raise ParseError(0, f"{ctx}: init must be an object with a 'scheme' field")
    scheme = obj["scheme"]
    if scheme == "gaussian":
        _require_keys(obj, {"scheme", "stddev"}, ctx)
        stddev = obj["stddev"]
        if isinstance(stddev, bool) or not isinstance(stddev, (int, float)):
            raise ParseError(0, f"{ctx}: stddev must be a number")
        return Gaussian(float(stddev))
    if scheme == "uniform_fan_in":
        _require_keys(obj, {"scheme"}, ctx)
        return UniformFanIn()
    if scheme == "gaussian_fan_avg":
        _require_keys(obj, {"scheme"}, ctx)
        return GaussianFanAvg()
    raise ParseError(0, f"{ctx}: unknown init scheme {scheme!r}")


def _kind_from_obj(tag: str, params, ctx: str) -> LayerKind:
    if not isinstance(params, dict):
        raise ParseError(0, f"{ctx}: params must be an object")
    if tag == "input":
        _require_keys(params, {"height", "width", "channels"}, ctx)
        return Input(
            _require_int(params, "height", ctx),
            _require_int(params, "width", ctx),
            _require_int(params, "channels", ctx),
        )
    if tag == "conv":
        _require_keys(params, {"filters", "kernel", "stride", "padding", "init"}, ctx)
        return Conv(
            _require_int(params, "filters", ctx),
            _require_int(params, "kernel", ctx),
            _require_int(params, "stride", ctx),
            _require_int(params, "padding", ctx),
            _init_from_obj(params["init"], ctx),
        )
    if tag == "pool":
        _require_keys(params, {"kernel", "stride", "mode"}, ctx)
        mode = params["mode"]
        if mode not in (MODE_MAX, MODE_AVERAGE):
            raise ParseError(0, f"{ctx}: unknown pool mode {mode!r}")
        return Pool(_require_int(params, "kernel", ctx), _require_int(params, "stride", ctx), mode)
    if tag == "relu":
        _require_keys(params, set(), ctx)
        return ReLU()
    if tag == "fc":
        _require_keys(params, {"units", "init"}, ctx)
        return FullyConnected(_require_int(params, "units", ctx), _init_from_obj(params["init"], ctx))
    if tag == "softmax":
        _require_keys(params, {"classes"}, ctx)
        return SoftmaxOutput(_require_int(params, "classes", ctx))
    raise ParseError(0, f"{ctx}: unknown layer kind {tag!r}")


def deserialize(text: str) -> Genome:
    """Parse a genome descriptor; re-runs full validation before returning."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, e.msg) from e
    _require_keys(doc, {"genes", "connections", "fitness", "lineage"}, "document")
    if not isinstance(doc["genes"], list) or not isinstance(doc["connections"], list):
        raise ParseError(0, "genes and connections must be arrays")

    genes = []
    for i, obj in enumerate(doc["genes"]):
        ctx = f"genes[{i}]"
        _require_keys(obj, {"id", "kind", "params"}, ctx)
        genes.append(LayerGene(_require_int(obj, "id", ctx), _kind_from_obj(obj["kind"], obj["params"], ctx)))

    connections = []
    for i, obj in enumerate(doc["connections"]):
        ctx = f"connections[{i}]"
        _require_keys(obj, {"from", "to"}, ctx)
        connections.append(Connection(_require_int(obj, "from", ctx), _require_int(obj, "to", ctx)))

    fitness = doc["fitness"]
    if fitness is not None and (isinstance(fitness, bool) or not isinstance(fitness, (int, float))):
        raise ParseError(0, "fitness must be a number or null")
    lineage = _require_int(doc, "lineage", "document")

    g = Genome(
        genes=tuple(genes),
        connections=tuple(connections),
        fitness=None if fitness is None else float(fitness),
        lineage=lineage,
    )
    validate(g)
    return g
