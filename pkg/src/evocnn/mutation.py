"""Structural mutations over genomes.

Five mutations are applied in a fixed order, each gated by its own rate:
inject a convolution, inject a pool, add a ReLU, point-mutate one
hyperparameter, inject a conv-ReLU-pool segment. Every mutation preserves
validity: when a drawn hyperparameter would collapse a spatial dimension
somewhere downstream, it is re-drawn from the subset of values that keep
the whole network valid, and when that subset is empty the mutation is a
no-op. Mutations never touch their argument; they return a fresh genome
with fitness cleared.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, fields, replace

from .genome import (
    Conv,
    Connection,
    FullyConnected,
    Gaussian,
    GaussianFanAvg,
    Genome,
    InitScheme,
    Input,
    LayerGene,
    LayerKind,
    layer_output_shape,
    MODE_AVERAGE,
    MODE_MAX,
    Pool,
    ReLU,
    Shape,
    UniformFanIn,
)

Rng = random.Random


@dataclass(frozen=True, slots=True)
class MutationRates:
    """Per-mutation firing probabilities, applied in field order."""

    inject_convolution: float = 0.50
    inject_pooling: float = 0.50
    add_relu: float = 0.30
    point_mutate: float = 0.45
    inject_segment: float = 0.15


@dataclass(frozen=True, slots=True)
class HyperparameterRanges:
    """Value pools for drawn hyperparameters; override per run to scale the search."""

    conv_kernels: tuple[int, ...] = (1, 3, 5, 7, 11)
    conv_strides: tuple[int, ...] = (1, 2, 4)
    conv_paddings: tuple[int, ...] = (0, 1, 2, 3)
    conv_filters: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    pool_kernels: tuple[int, ...] = (2, 3)
    pool_strides: tuple[int, ...] = (2, 3)
    pool_modes: tuple[str, ...] = (MODE_MAX, MODE_AVERAGE)
    fc_units: tuple[int, ...] = (64, 128, 256, 512, 1024)
    init_schemes: tuple[InitScheme, ...] = (Gaussian(0.01), UniformFanIn(), GaussianFanAvg())


DEFAULT_RATES = MutationRates()
DEFAULT_RANGES = HyperparameterRanges()


class _Workspace:
    """Mutable scratch view of a genome for one mutation pass."""

    __slots__ = ("gene_objs", "gene_order", "kinds", "edges", "preds", "succs",
                 "order", "pos", "shapes", "next_id", "lineage")

    def __init__(self, g: Genome):
        self.gene_objs = {gene.id: gene for gene in g.genes}
        self.gene_order = [gene.id for gene in g.genes]
        self.kinds = {gene.id: gene.kind for gene in g.genes}
        self.edges = [[c.src, c.dst] for c in g.connections]
        preds: dict[int, list[int]] = {gid: [] for gid in self.kinds}
        succs: dict[int, list[int]] = {gid: [] for gid in self.kinds}
        for src, dst in self.edges:
            succs[src].append(dst)
            preds[dst].append(src)
        self.preds = preds
        self.succs = succs
        # plain Kahn order; deterministic for a given genome
        indeg = {gid: len(ps) for gid, ps in preds.items()}
        stack = [gid for gid in self.gene_order if indeg[gid] == 0]
        order: list[int] = []
        while stack:
            gid = stack.pop()
            order.append(gid)
            for nxt in succs[gid]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    stack.append(nxt)
        self.order = order
        self.pos = {gid: i for i, gid in enumerate(order)}
        shapes: dict[int, Shape] = {}
        for gid in order:
            kind = self.kinds[gid]
            if type(kind) is Input:
                shapes[gid] = (kind.height, kind.width, kind.channels)
            else:
                shapes[gid] = layer_output_shape(kind, shapes[preds[gid][0]])
        self.shapes = shapes
        self.next_id = max(self.kinds) + 1
        self.lineage = g.lineage

    def to_genome(self) -> Genome:
        genes = tuple(self.gene_objs[gid] for gid in self.gene_order)
        connections = tuple(Connection(src, dst) for src, dst in self.edges)
        return Genome(genes=genes, connections=connections, fitness=None, lineage=self.lineage)

    # -- validity probes ----------------------------------------------------

    def downstream_ok(self, node: int, new_out: Shape) -> bool:
        """Would changing `node`'s output shape keep everything after it valid?"""
        shapes = self.shapes
        if new_out == shapes[node]:
            return True
        overrides = {node: new_out}
        order = self.order
        for i in range(self.pos[node] + 1, len(order)):
            if not overrides:
                return True
            w = order[i]
            ps = self.preds[w]
            hit = False
            for p in ps:
                if p in overrides:
                    hit = True
                    break
            if not hit:
                continue
            first = overrides.get(ps[0], shapes[ps[0]])
            for p in ps[1:]:
                if overrides.get(p, shapes[p]) != first:
                    return False
            out = layer_output_shape(self.kinds[w], first)
            if out is None:
                return False
            if out != shapes[w]:
                overrides[w] = out
        return True

    def insertion_ok(self, u: int, v: int, exit_shape: Shape) -> bool:
        """Would rerouting edge (u, v) through a chain ending at `exit_shape` stay valid?"""
        for p in self.preds[v]:
            if p != u and self.shapes[p] != exit_shape:
                return False
        out_v = layer_output_shape(self.kinds[v], exit_shape)
        if out_v is None:
            return False
        return self.downstream_ok(v, out_v)

    # -- commits ------------------------------------------------------------

    def commit_insertion(self, edge_idx: int, kinds: list[LayerKind]) -> None:
        u, v = self.edges[edge_idx]
        ids = []
        for kind in kinds:
            gid = self.next_id
            self.next_id += 1
            ids.append(gid)
            self.gene_objs[gid] = LayerGene(gid, kind)
            self.gene_order.append(gid)
            self.kinds[gid] = kind
        self.edges[edge_idx] = [u, ids[0]]
        for a, b in zip(ids, ids[1:]):
            self.edges.append([a, b])
        self.edges.append([ids[-1], v])
        self.succs[u][self.succs[u].index(v)] = ids[0]
        self.preds[v][self.preds[v].index(u)] = ids[-1]
        chain = [u] + ids + [v]
        for i, gid in enumerate(ids, start=1):
            self.preds[gid] = [chain[i - 1]]
            self.succs[gid] = [chain[i + 1]]
        at = self.pos[v]
        self.order[at:at] = ids
        self.pos = {gid: i for i, gid in enumerate(self.order)}
        self.refresh_shapes_from(ids[0])

    def commit_point(self, gid: int, kind: LayerKind) -> None:
        self.kinds[gid] = kind
        self.gene_objs[gid] = LayerGene(gid, kind)
        self.refresh_shapes_from(gid)

    def refresh_shapes_from(self, node: int) -> None:
        for i in range(self.pos[node], len(self.order)):
            gid = self.order[i]
            kind = self.kinds[gid]
            if type(kind) is Input:
                continue
            self.shapes[gid] = layer_output_shape(kind, self.shapes[self.preds[gid][0]])


# ---------------------------------------------------------------------------
# Candidate draws and validity-repair enumeration
#
# Repair works on the spatial fields only at first (kernel/stride/padding),
# matching the failure mode being repaired; filter counts are included in a
# second enumeration pass for the rare genomes where channel counts are
# pinned by the sink.


def _draw_conv(rng: Rng, ranges: HyperparameterRanges) -> Conv:
    return Conv(
        filters=rng.choice(ranges.conv_filters),
        kernel=rng.choice(ranges.conv_kernels),
        stride=rng.choice(ranges.conv_strides),
        padding=rng.choice(ranges.conv_paddings),
        init=rng.choice(ranges.init_schemes),
    )


def _draw_pool(rng: Rng, ranges: HyperparameterRanges) -> Pool:
    return Pool(
        kernel=rng.choice(ranges.pool_kernels),
        stride=rng.choice(ranges.pool_strides),
        mode=rng.choice(ranges.pool_modes),
    )


def _conv_exit(in_shape: Shape, kernel: int, stride: int, padding: int,
               filters: int) -> Shape | None:
    """Conv placement rule for drawn nodes: the output must stay positive and
    must not exceed the input spatially (no padding-driven expansion)."""
    h, w, _ = in_shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1 or oh > h or ow > w:
        return None
    return (oh, ow, filters)


def _conv_exits(in_shape: Shape, ranges: HyperparameterRanges, filters: tuple[int, ...]):
    """All (kernel, stride, padding, filters, exit_shape) conv placements."""
    for k in ranges.conv_kernels:
        for s in ranges.conv_strides:
            for p in ranges.conv_paddings:
                exit_shape = _conv_exit(in_shape, k, s, p, 0)
                if exit_shape is None:
                    continue
                oh, ow, _ = exit_shape
                for f in filters:
                    yield k, s, p, f, (oh, ow, f)


def _pool_exits(in_shape: Shape, ranges: HyperparameterRanges):
    h, w, c = in_shape
    for k in ranges.pool_kernels:
        for s in ranges.pool_strides:
            oh = (h - k) // s + 1
            ow = (w - k) // s + 1
            if oh >= 1 and ow >= 1:
                yield k, s, (oh, ow, c)


def _apply_inject_node(ws: _Workspace, kind_choice: str, rng: Rng,
                       ranges: HyperparameterRanges) -> None:
    edge_idx = rng.randrange(len(ws.edges))
    u, v = ws.edges[edge_idx]
    in_shape = ws.shapes[u]

    if kind_choice == "relu":
        # shape-preserving, always valid
        ws.commit_insertion(edge_idx, [ReLU()])
        return

    memo: dict[Shape, bool] = {}

    def exit_ok(exit_shape: Shape) -> bool:
        flag = memo.get(exit_shape)
        if flag is None:
            flag = ws.insertion_ok(u, v, exit_shape)
            memo[exit_shape] = flag
        return flag

    if kind_choice == "conv":
        cand = _draw_conv(rng, ranges)
        exit_shape = _conv_exit(in_shape, cand.kernel, cand.stride, cand.padding, cand.filters)
        if exit_shape is not None and exit_ok(exit_shape):
            ws.commit_insertion(edge_idx, [cand])
            return
        for filters in ((cand.filters,), ranges.conv_filters):
            valid = [Conv(f, k, s, p, cand.init)
                     for k, s, p, f, ex in _conv_exits(in_shape, ranges, filters)
                     if exit_ok(ex)]
            if valid:
                ws.commit_insertion(edge_idx, [rng.choice(valid)])
                return
        return

    if kind_choice == "pool":
        cand = _draw_pool(rng, ranges)
        exit_shape = layer_output_shape(cand, in_shape)
        if exit_shape is not None and exit_ok(exit_shape):
            ws.commit_insertion(edge_idx, [cand])
            return
        valid = [Pool(k, s, cand.mode)
                 for k, s, ex in _pool_exits(in_shape, ranges)
                 if exit_ok(ex)]
        if valid:
            ws.commit_insertion(edge_idx, [rng.choice(valid)])
        return

    raise ValueError(f"unknown node kind {kind_choice!r}")


def _apply_inject_segment(ws: _Workspace, rng: Rng, ranges: HyperparameterRanges) -> None:
    edge_idx = rng.randrange(len(ws.edges))
    u, v = ws.edges[edge_idx]
    in_shape = ws.shapes[u]
    conv = _draw_conv(rng, ranges)
    pool = _draw_pool(rng, ranges)

    memo: dict[Shape, bool] = {}

    def exit_ok(exit_shape: Shape) -> bool:
        flag = memo.get(exit_shape)
        if flag is None:
            flag = ws.insertion_ok(u, v, exit_shape)
            memo[exit_shape] = flag
        return flag

    cshape = _conv_exit(in_shape, conv.kernel, conv.stride, conv.padding, conv.filters)
    if cshape is not None:
        pshape = layer_output_shape(pool, cshape)
        if pshape is not None and exit_ok(pshape):
            ws.commit_insertion(edge_idx, [conv, ReLU(), pool])
            return

    for filters in ((conv.filters,), ranges.conv_filters):
        valid: list[tuple[Conv, Pool]] = []
        pools_by_shape: dict[Shape, list[tuple[int, int]]] = {}
        for k, s, p, f, cshape in _conv_exits(in_shape, ranges, filters):
            pools = pools_by_shape.get(cshape)
            if pools is None:
                pools = [(pk, ps) for pk, ps, ex in _pool_exits(cshape, ranges) if exit_ok(ex)]
                pools_by_shape[cshape] = pools
            if pools:
                c = Conv(f, k, s, p, conv.init)
                valid.extend((c, Pool(pk, ps, pool.mode)) for pk, ps in pools)
        if valid:
            chosen_conv, chosen_pool = rng.choice(valid)
            ws.commit_insertion(edge_idx, [chosen_conv, ReLU(), chosen_pool])
            return


_POINT_FIELDS = {
    Conv: ("kernel", "stride", "padding", "filters", "init"),
    Pool: ("kernel", "stride", "mode"),
    FullyConnected: ("units", "init"),
}

_FIELD_POOLS = {
    (Conv, "kernel"): "conv_kernels",
    (Conv, "stride"): "conv_strides",
    (Conv, "padding"): "conv_paddings",
    (Conv, "filters"): "conv_filters",
    (Conv, "init"): "init_schemes",
    (Pool, "kernel"): "pool_kernels",
    (Pool, "stride"): "pool_strides",
    (Pool, "mode"): "pool_modes",
    (FullyConnected, "units"): "fc_units",
    (FullyConnected, "init"): "init_schemes",
}


def _replace_field(kind: LayerKind, field_name: str, value) -> LayerKind:
    vals = {f.name: getattr(kind, f.name) for f in fields(kind)}
    vals[field_name] = value
    return type(kind)(**vals)


def _apply_point_mutate(ws: _Workspace, rng: Rng, ranges: HyperparameterRanges) -> None:
    candidates = [gid for gid in ws.order
                  if type(ws.kinds[gid]) in (Conv, Pool, FullyConnected)]
    if not candidates:
        return
    gid = rng.choice(candidates)
    kind = ws.kinds[gid]
    field_name = rng.choice(_POINT_FIELDS[type(kind)])
    pool = getattr(ranges, _FIELD_POOLS[(type(kind), field_name)])
    in_shape = ws.shapes[ws.preds[gid][0]]

    def ok(new_kind: LayerKind) -> bool:
        if isinstance(new_kind, Conv):
            out = _conv_exit(in_shape, new_kind.kernel, new_kind.stride,
                             new_kind.padding, new_kind.filters)
        else:
            out = layer_output_shape(new_kind, in_shape)
        return out is not None and ws.downstream_ok(gid, out)

    candidate = _replace_field(kind, field_name, rng.choice(pool))
    if ok(candidate):
        ws.commit_point(gid, candidate)
        return
    valid = [v for v in pool if ok(_replace_field(kind, field_name, v))]
    if valid:
        ws.commit_point(gid, _replace_field(kind, field_name, rng.choice(valid)))


# ---------------------------------------------------------------------------
# Public operations


def inject_node(g: Genome, kind_choice: str, rng: Rng,
                ranges: HyperparameterRanges = DEFAULT_RANGES) -> Genome:
    """Insert one conv/pool/relu node into a random existing connection."""
    ws = _Workspace(g)
    _apply_inject_node(ws, kind_choice, rng, ranges)
    return ws.to_genome()


def inject_segment(g: Genome, rng: Rng,
                   ranges: HyperparameterRanges = DEFAULT_RANGES) -> Genome:
    """Insert a conv -> ReLU -> pool unit into a random existing connection."""
    ws = _Workspace(g)
    _apply_inject_segment(ws, rng, ranges)
    return ws.to_genome()


def point_mutate(g: Genome, rng: Rng,
                 ranges: HyperparameterRanges = DEFAULT_RANGES) -> Genome:
    """Re-draw exactly one hyperparameter field of one random non-terminal gene."""
    ws = _Workspace(g)
    _apply_point_mutate(ws, rng, ranges)
    return ws.to_genome()


def mutate(g: Genome, rates: MutationRates, rng: Rng,
           ranges: HyperparameterRanges = DEFAULT_RANGES) -> Genome:
    """Run the full mutation pass: each mutation fires independently when its
    epsilon draw falls at or below its rate (a rate of zero never fires).
    Always returns a valid genome with fitness unset; the input genome is
    never modified."""
    rnd = rng.random
    fire_conv = rates.inject_convolution > 0.0 and rnd() <= rates.inject_convolution
    ws = None
    if fire_conv:
        ws = _Workspace(g)
        _apply_inject_node(ws, "conv", rng, ranges)
    if rates.inject_pooling > 0.0 and rnd() <= rates.inject_pooling:
        ws = ws or _Workspace(g)
        _apply_inject_node(ws, "pool", rng, ranges)
    if rates.add_relu > 0.0 and rnd() <= rates.add_relu:
        ws = ws or _Workspace(g)
        _apply_inject_node(ws, "relu", rng, ranges)
    if rates.point_mutate > 0.0 and rnd() <= rates.point_mutate:
        ws = ws or _Workspace(g)
        _apply_point_mutate(ws, rng, ranges)
    if rates.inject_segment > 0.0 and rnd() <= rates.inject_segment:
        ws = ws or _Workspace(g)
        _apply_inject_segment(ws, rng, ranges)
    if ws is None:
        return replace(g, fitness=None)
    return ws.to_genome()
