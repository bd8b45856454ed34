"""Computation DAG of a model and its partition into sequential groups.

A :class:`CompGraph` holds linear, BGEMM and opaque vertices. Linear and
BGEMM vertices are the quantizable layers; opaque vertices (norms,
activations, softmax, residual adds, ...) are carried along only so the
graph topology is right.

:func:`partition_sequential` walks the graph from a virtual start vertex and
cuts it into single-entry/single-exit regions whose execution times add up.
Each region, stripped of its opaque vertices, becomes a :class:`Group`.
"""

from __future__ import annotations

import heapq
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Union

from .errors import (
    CycleDetected,
    DanglingEdge,
    EmptyGraph,
    GraphError,
    GroupTooLarge,
    IndexOutOfRange,
    MultipleSinks,
    NonConvergingFrontier,
    SchemaError,
)

SCHEMA_VERSION = 1

#: Id of the synthetic start vertex; never a real vertex id.
START = -1

DEFAULT_MAX_GROUP_SIZE = 12


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    has_bias: bool = False

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise GraphError(f"linear dims must be >= 1, got {self.in_features}x{self.out_features}")


@dataclass(frozen=True)
class Bgemm:
    """Product of two activation operands.

    ``transpose_rhs`` selects ``X0 @ X1.T`` (score-style, the default) or
    ``X0 @ X1`` (value-style). Only the toy executor looks at it.
    """

    dim: int
    transpose_rhs: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise GraphError(f"bgemm dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class Opaque:
    tag: str


VertexKind = Union[Linear, Bgemm, Opaque]


def is_quantizable(kind: VertexKind) -> bool:
    return isinstance(kind, (Linear, Bgemm))


@dataclass(frozen=True)
class Vertex:
    id: int
    name: str
    kind: VertexKind


class CompGraph:
    """Validated, immutable DAG with a single sink.

    Predecessor lists keep edge-file order, which fixes operand order for
    multi-input vertices (BGEMM, add, mul).
    """

    def __init__(self, vertices: Sequence[Vertex], edges: Sequence[tuple[int, int]]):
        if not vertices:
            raise EmptyGraph("graph has no vertices")
        by_id: dict[int, Vertex] = {}
        for v in vertices:
            if v.id < 0:
                raise GraphError(f"vertex ids must be non-negative, got {v.id}")
            if v.id in by_id:
                raise GraphError(f"duplicate vertex id {v.id}")
            by_id[v.id] = v
        names = [v.name for v in vertices]
        if len(set(names)) != len(names):
            raise GraphError("vertex names must be unique")

        succ: dict[int, list[int]] = {i: [] for i in by_id}
        pred: dict[int, list[int]] = {i: [] for i in by_id}
        seen: set[tuple[int, int]] = set()
        for src, dst in edges:
            if src not in by_id or dst not in by_id:
                raise DanglingEdge(f"edge ({src}, {dst}) references a missing vertex")
            if src == dst:
                raise CycleDetected(f"self-loop on vertex {src}")
            if (src, dst) in seen:
                raise GraphError(f"duplicate edge ({src}, {dst})")
            seen.add((src, dst))
            succ[src].append(dst)
            pred[dst].append(src)

        self._vertices = by_id
        self._succ = {k: tuple(v) for k, v in succ.items()}
        self._pred = {k: tuple(v) for k, v in pred.items()}
        self._edges = tuple((int(s), int(d)) for s, d in edges)
        self._topo = self._toposort()
        sinks = [i for i in sorted(by_id) if not succ[i]]
        if len(sinks) != 1:
            names = [by_id[i].name for i in sinks]
            raise MultipleSinks(f"graph must have exactly one sink, found {len(sinks)}: {names}")
        self._sink = sinks[0]

    def _toposort(self) -> tuple[int, ...]:
        indeg = {i: len(p) for i, p in self._pred.items()}
        heap = [i for i, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            u = heapq.heappop(heap)
            order.append(u)
            for v in self._succ[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(heap, v)
        if len(order) != len(self._vertices):
            stuck = sorted(self._vertices[i].name for i, d in indeg.items() if d > 0)
            raise CycleDetected(f"graph contains a cycle through {stuck}")
        return tuple(order)

    @property
    def sink(self) -> int:
        return self._sink

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return self._edges

    @property
    def topo_order(self) -> tuple[int, ...]:
        return self._topo

    @property
    def vertex_ids(self) -> list[int]:
        return sorted(self._vertices)

    def __len__(self) -> int:
        return len(self._vertices)

    def __contains__(self, vid: int) -> bool:
        return vid in self._vertices

    def vertex(self, vid: int) -> Vertex:
        return self._vertices[vid]

    def kind(self, vid: int) -> VertexKind:
        return self._vertices[vid].kind

    def name(self, vid: int) -> str:
        return self._vertices[vid].name

    def successors(self, vid: int) -> tuple[int, ...]:
        if vid == START:
            return self.sources()
        return self._succ[vid]

    def predecessors(self, vid: int) -> tuple[int, ...]:
        return self._pred[vid]

    def sources(self) -> tuple[int, ...]:
        return tuple(i for i in sorted(self._vertices) if not self._pred[i])

    def quantizable(self) -> list[int]:
        """Quantizable vertex ids in topological order."""
        return [i for i in self._topo if is_quantizable(self._vertices[i].kind)]

    def id_by_name(self, name: str) -> int:
        for v in self._vertices.values():
            if v.name == name:
                return v.id
        raise KeyError(name)


def build_graph(spec: Mapping[str, Any]) -> CompGraph:
    """Build a :class:`CompGraph` from its JSON-style description."""
    version = spec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"graph schema_version {version} != {SCHEMA_VERSION}")
    vertices = []
    for raw in spec.get("vertices", []):
        vid = int(raw["id"])
        name = str(raw.get("name", f"v{vid}"))
        kind = raw["kind"]
        if kind == "linear":
            vk: VertexKind = Linear(
                int(raw["in_features"]), int(raw["out_features"]), bool(raw.get("has_bias", False))
            )
        elif kind == "bgemm":
            vk = Bgemm(int(raw["dim"]), bool(raw.get("transpose_rhs", True)))
        elif kind == "opaque":
            vk = Opaque(str(raw.get("tag", name)))
        else:
            raise GraphError(f"vertex {vid}: unknown kind {kind!r}")
        vertices.append(Vertex(vid, name, vk))
    edges = [(int(s), int(d)) for s, d in spec.get("edges", [])]
    g = CompGraph(vertices, edges)
    if "sink" in spec and int(spec["sink"]) != g.sink:
        raise MultipleSinks(f"declared sink {spec['sink']} but the graph's sink is {g.sink}")
    return g


def graph_to_dict(g: CompGraph) -> dict[str, Any]:
    out = []
    for vid in g.vertex_ids:
        v = g.vertex(vid)
        d: dict[str, Any] = {"id": vid, "name": v.name}
        k = v.kind
        if isinstance(k, Linear):
            d.update(kind="linear", in_features=k.in_features, out_features=k.out_features, has_bias=k.has_bias)
        elif isinstance(k, Bgemm):
            d.update(kind="bgemm", dim=k.dim)
            if not k.transpose_rhs:
                d["transpose_rhs"] = False
        else:
            d.update(kind="opaque", tag=k.tag)
        out.append(d)
    return {"schema_version": SCHEMA_VERSION, "vertices": out, "edges": [list(e) for e in g.edges]}


def longest_path_lengths(g: CompGraph) -> dict[int, int]:
    """Longest path (in edges) from the virtual start vertex to every vertex."""
    length: dict[int, int] = {}
    for v in g.topo_order:
        preds = g.predecessors(v)
        length[v] = 1 + max((length[p] for p in preds), default=0)
    return length


@dataclass(frozen=True)
class Group:
    j: int
    layers: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class Region:
    """A region before opaque removal; ``exit`` is the convergence vertex."""

    members: tuple[int, ...]
    exit: int
    removed: tuple[int, ...] = field(default=())


def partition_regions(g: CompGraph) -> list[Region]:
    """Cut the graph into single-entry/single-exit regions, in execution order."""
    path_len = longest_path_lengths(g)
    path_len[START] = 0
    regions: list[Region] = []
    vertex = START
    budget = len(g) + 1
    while vertex != g.sink:
        members: list[int] = []
        cur_len = path_len[vertex] + 1
        frontier = set(g.successors(vertex))
        if not frontier:
            raise NonConvergingFrontier(f"vertex {vertex} has no successors before the sink")
        while len(frontier) > 1:
            if cur_len > budget:
                raise NonConvergingFrontier(
                    f"frontier {sorted(frontier)} never converged after vertex {vertex}"
                )
            for v in sorted(frontier):
                if path_len[v] <= cur_len:
                    frontier.discard(v)
                    members.append(v)
                    frontier.update(g.successors(v))
            cur_len += 1
        (vertex,) = frontier
        members.append(vertex)
        removed = tuple(v for v in members if not is_quantizable(g.kind(v)))
        regions.append(Region(tuple(members), vertex, removed))
    return regions


def partition_sequential(g: CompGraph, max_group_size: int = DEFAULT_MAX_GROUP_SIZE) -> list[Group]:
    """Sequential groups of quantizable layers, in execution order.

    Within a group, layers are listed in the graph's topological order; that
    order defines position ``l`` in the config encoding.
    """
    topo_pos = {v: i for i, v in enumerate(g.topo_order)}
    groups: list[Group] = []
    for region in partition_regions(g):
        layers = sorted((v for v in region.members if is_quantizable(g.kind(v))), key=topo_pos.__getitem__)
        if not layers:
            continue
        if len(layers) > max_group_size:
            names = [g.name(v) for v in layers]
            raise GroupTooLarge(
                f"group of {len(layers)} layers exceeds the cap of {max_group_size}: {names}; "
                "mark some of these layers non-quantizable or reduce the number of formats"
            )
        groups.append(Group(len(groups), tuple(layers)))
    return groups


def removed_opaque(g: CompGraph) -> dict[int, tuple[int, ...]]:
    """Region index -> opaque vertex ids dropped from it (diagnostics only)."""
    return {i: r.removed for i, r in enumerate(partition_regions(g)) if r.removed}


def config_format(group: Group | int, p: int, l: int, n_formats: int) -> int:
    """Format index of position ``l`` under config ``p``: digit ``l`` of ``p`` in base F."""
    size = group if isinstance(group, int) else len(group)
    if n_formats < 1:
        raise IndexOutOfRange(f"format count must be >= 1, got {n_formats}")
    if not 0 <= l < size:
        raise IndexOutOfRange(f"position {l} outside group of size {size}")
    if not 0 <= p < n_formats**size:
        raise IndexOutOfRange(f"config {p} outside [0, {n_formats ** size})")
    return (p // n_formats**l) % n_formats


def config_digits(p: int, size: int, n_formats: int) -> tuple[int, ...]:
    if not 0 <= p < n_formats**size:
        raise IndexOutOfRange(f"config {p} outside [0, {n_formats ** size})")
    out = []
    for _ in range(size):
        p, d = divmod(p, n_formats)
        out.append(d)
    return tuple(out)


def config_index(digits: Iterable[int], n_formats: int) -> int:
    p = 0
    for l, d in enumerate(digits):
        if not 0 <= d < n_formats:
            raise IndexOutOfRange(f"format index {d} outside [0, {n_formats})")
        p += d * n_formats**l
    return p


def groups_to_dict(groups: Sequence[Group], g: CompGraph | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    items = []
    for grp in groups:
        item: dict[str, Any] = {"j": grp.j, "layers": list(grp.layers)}
        if g is not None:
            item["names"] = [g.name(v) for v in grp.layers]
        items.append(item)
    out["groups"] = items
    return out


def groups_from_dict(d: Mapping[str, Any]) -> list[Group]:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"groups file schema_version {d.get('schema_version')!r} != {SCHEMA_VERSION}")
    groups = [Group(int(x["j"]), tuple(int(v) for v in x["layers"])) for x in d["groups"]]
    if [grp.j for grp in groups] != list(range(len(groups))):
        raise SchemaError("group indices must be 0..J-1 in order")
    return groups


def to_dot(g: CompGraph, groups: Sequence[Group] = ()) -> str:
    lines = ["digraph model {", "  rankdir=TB;"]
    for vid in g.vertex_ids:
        k = g.kind(vid)
        shape = "box" if is_quantizable(k) else "ellipse"
        lines.append(f'  v{vid} [label="{g.name(vid)}", shape={shape}];')
    for grp in groups:
        lines.append(f"  subgraph cluster_{grp.j} {{")
        lines.append(f'    label="V{grp.j}"; style=dashed; color=blue;')
        lines.append("    " + " ".join(f"v{v};" for v in grp.layers))
        lines.append("  }")
    for s, d in g.edges:
        lines.append(f"  v{s} -> v{d};")
    lines.append("}")
    return "\n".join(lines) + "\n"
