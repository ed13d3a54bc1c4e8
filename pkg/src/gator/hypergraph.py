"""Channel-dependency hypergraph.

Vertices are the input and output channel sets of every conv and
fully-connected layer, plus two terminal vertices: the image channels
(``input``, an out-vertex) and the logits consumed by the ``output`` layer
(an in-vertex). Dependency edges are the connected groups under

* a producer's out-vertex joins the in-vertex of every consumer it feeds,
* relu / batchnorm / pooling pass channels through unchanged,
* ``add`` merges all of its operands into one group,
* a conv never joins its own in- and out-vertex.
"""
from __future__ import annotations

from dataclasses import dataclass

from gator.ir import ADD, CONV, FC, INPUT, OUTPUT, IRError, NetworkGraph

IN, OUT = "in", "out"


class UnionFind:
    """Disjoint sets over hashable items with path compression and union by size."""

    def __init__(self):
        self._parent: dict = {}
        self._size: dict = {}

    def add(self, item) -> None:
        if item not in self._parent:
            self._parent[item] = item
            self._size[item] = 1

    def find(self, item):
        root = item
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[item] != root:
            self._parent[item], item = root, self._parent[item]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self._size[ra] < self._size[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        self._size[ra] += self._size[rb]
        return ra

    def groups(self) -> dict:
        out: dict = {}
        for item in self._parent:
            out.setdefault(self.find(item), []).append(item)
        return out


@dataclass(frozen=True)
class ChannelVertex:
    layer: str
    side: str  # "in" | "out"
    channel_count: int

    def __str__(self) -> str:
        return f"{self.layer}.{self.side}"


@dataclass(frozen=True)
class DependencyEdge:
    id: int
    out_vertices: tuple[ChannelVertex, ...]
    in_vertices: tuple[ChannelVertex, ...]
    channel_count: int
    frozen: bool

    @property
    def out_layers(self) -> tuple[str, ...]:
        return tuple(v.layer for v in self.out_vertices)

    @property
    def in_layers(self) -> tuple[str, ...]:
        return tuple(v.layer for v in self.in_vertices)

    @property
    def vertices(self) -> tuple[ChannelVertex, ...]:
        return self.out_vertices + self.in_vertices

    @property
    def trivial(self) -> bool:
        return len(self.out_vertices) == 1 and len(self.in_vertices) == 1


@dataclass
class DependencyHypergraph:
    graph: NetworkGraph
    edges: tuple[DependencyEdge, ...]
    vertex_edge: dict[tuple[str, str], int]
    # edge id of the channels carried by each layer's output
    tensor_edge: dict[str, int]

    @property
    def m(self) -> int:
        return len(self.edges)

    def edge_of(self, layer: str | ChannelVertex, side: str | None = None) -> int:
        if isinstance(layer, ChannelVertex):
            layer, side = layer.layer, layer.side
        try:
            return self.vertex_edge[(layer, side)]
        except KeyError:
            raise KeyError(f"unknown vertex {layer}.{side}") from None

    def prunable_edges(self) -> list[int]:
        return [e.id for e in self.edges if not e.frozen]

    def in_edge(self, layer: str) -> int:
        return self.vertex_edge[(layer, IN)]

    def out_edge(self, layer: str) -> int:
        return self.vertex_edge[(layer, OUT)]

    def vertices(self) -> list[ChannelVertex]:
        return [v for e in self.edges for v in e.vertices]


def build_hypergraph(g: NetworkGraph) -> DependencyHypergraph:
    uf = UnionFind()
    counts: dict[tuple[str, str], int] = {}
    carrier: dict[str, tuple[str, str]] = {}  # layer -> vertex its output channels belong to

    def vertex(layer: str, side: str, count: int) -> tuple[str, str]:
        key = (layer, side)
        uf.add(key)
        counts[key] = count
        return key

    def join(a, b, where: str) -> None:
        ra, rb = uf.find(a), uf.find(b)
        if ra != rb and counts[ra] != counts[rb]:
            raise IRError(
                f"dependency group conflict: {a[0]}.{a[1]} has {counts[ra]} channels, "
                f"{b[0]}.{b[1]} has {counts[rb]}", where)
        root = uf.union(a, b)
        counts[root] = counts[a]

    for l in g.layers:
        if l.kind == INPUT:
            carrier[l.id] = vertex(l.id, OUT, l.channels)
        elif l.kind in (CONV, FC):
            vin = vertex(l.id, IN, l.in_channels)
            join(vin, carrier[l.inputs[0]], l.id)
            carrier[l.id] = vertex(l.id, OUT, l.out_channels)
        elif l.kind == ADD:
            first = carrier[l.inputs[0]]
            for src in l.inputs[1:]:
                join(first, carrier[src], l.id)
            carrier[l.id] = first
        elif l.kind == OUTPUT:
            vin = vertex(l.id, IN, g.channels[l.inputs[0]])
            join(vin, carrier[l.inputs[0]], l.id)
            carrier[l.id] = vin
        else:
            carrier[l.id] = carrier[l.inputs[0]]

    order = g.index
    groups = list(uf.groups().values())
    for grp in groups:
        grp.sort(key=lambda v: (order[v[0]], v[1]))
    groups.sort(key=lambda grp: (order[grp[0][0]], grp[0][1]))

    input_id, output_id = g.input_layer.id, g.output_layer.id
    edges = []
    vertex_edge: dict[tuple[str, str], int] = {}
    for j, grp in enumerate(groups):
        outs = tuple(ChannelVertex(v[0], v[1], counts[v]) for v in grp if v[1] == OUT)
        ins = tuple(ChannelVertex(v[0], v[1], counts[v]) for v in grp if v[1] == IN)
        frozen = any(v[0] in (input_id, output_id) for v in grp)
        edges.append(DependencyEdge(j, outs, ins, counts[grp[0]], frozen))
        for v in grp:
            vertex_edge[v] = j
    tensor_edge = {lid: vertex_edge[v] for lid, v in carrier.items()}
    return DependencyHypergraph(g, tuple(edges), vertex_edge, tensor_edge)


def edge_of(h: DependencyHypergraph, v: ChannelVertex | tuple[str, str]) -> int:
    if isinstance(v, tuple):
        return h.edge_of(*v)
    return h.edge_of(v)


def prunable_edges(h: DependencyHypergraph) -> list[int]:
    return h.prunable_edges()


def zero_allowed_edges(h: DependencyHypergraph) -> set[int]:
    """Prunable edges that may lose every channel without cutting the network.

    An edge qualifies when the input still reaches the output after deleting
    every layer whose output carries the edge's channels (for example the
    inner edges of a residual branch that runs parallel to a shortcut).
    """
    g = h.graph
    allowed = set()
    for j in h.prunable_edges():
        dead = {lid for lid, e in h.tensor_edge.items() if e == j}
        reach = {g.input_layer.id}
        for l in g.layers:
            if l.id in dead or l.kind == INPUT:
                continue
            if l.kind == ADD:
                ok = any(s in reach for s in l.inputs)
            else:
                ok = all(s in reach for s in l.inputs)
            if ok:
                reach.add(l.id)
        if g.output_layer.id in reach:
            allowed.add(j)
    return allowed


def format_table(h: DependencyHypergraph) -> str:
    rows = [("edge", "output layers", "input layers", "channels", "frozen")]
    for e in h.edges:
        rows.append((str(e.id), ", ".join(e.out_layers), ", ".join(e.in_layers),
                     str(e.channel_count), "yes" if e.frozen else "no"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


def to_records(h: DependencyHypergraph) -> list[dict]:
    return [
        {"id": e.id, "out": list(e.out_layers), "in": list(e.in_layers),
         "channels": e.channel_count, "frozen": e.frozen}
        for e in h.edges
    ]
