"""Turn learned gates into a structurally smaller network."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from gator.executor import forward
from gator.hypergraph import DependencyHypergraph, build_hypergraph, zero_allowed_edges
from gator.ir import ADD, BATCHNORM, CONV, FC, INPUT, NetworkGraph, count_flops, count_params


class PlanError(ValueError):
    pass


class BranchNotCollapsible(ValueError):
    """A residual branch lost all channels on an inner edge but still outputs non-zero values."""

    def __init__(self, add: str, branch_input: str, magnitude: float):
        super().__init__(f"branch {branch_input!r} into {add!r} is empty but outputs values up to {magnitude:.3g}")
        self.add = add
        self.branch_input = branch_input


@dataclass
class PruningPlan:
    """Surviving channel indices (ascending) for every dependency edge."""

    survivors: dict[int, list[int]]

    def validate(self, h: DependencyHypergraph, check_floor: bool = True) -> None:
        if set(self.survivors) != set(range(h.m)):
            raise PlanError(f"plan covers edges {sorted(self.survivors)}, hypergraph has {h.m}")
        legal_zero = zero_allowed_edges(h) if check_floor else set()
        for e in h.edges:
            s = self.survivors[e.id]
            if list(s) != sorted(set(s)) or (s and (s[0] < 0 or s[-1] >= e.channel_count)):
                raise PlanError(f"edge {e.id}: survivors must be ascending unique indices in [0, {e.channel_count})")
            if e.frozen and len(s) != e.channel_count:
                raise PlanError(f"edge {e.id} is frozen and must keep all channels")
            if check_floor and not s and e.id not in legal_zero:
                raise PlanError(f"edge {e.id} cannot lose every channel without disconnecting the network")

    def counts(self) -> np.ndarray:
        return np.array([len(self.survivors[j]) for j in sorted(self.survivors)], dtype=np.int64)

    def masks(self, h: DependencyHypergraph) -> dict[int, np.ndarray]:
        out = {}
        for j in h.prunable_edges():
            m = np.zeros(h.edges[j].channel_count)
            m[self.survivors[j]] = 1.0
            out[j] = m
        return out

    def dumps(self) -> str:
        return json.dumps({"survivors": {str(j): list(map(int, s)) for j, s in sorted(self.survivors.items())}},
                          indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PruningPlan":
        doc = json.loads(text)
        return cls({int(j): list(s) for j, s in doc["survivors"].items()})

    @classmethod
    def identity(cls, h: DependencyHypergraph) -> "PruningPlan":
        return cls({e.id: list(range(e.channel_count)) for e in h.edges})


@dataclass
class PrunedNetwork:
    graph: NetworkGraph
    weights: dict[str, np.ndarray]
    # edge id of the original hypergraph -> surviving original channel indices
    provenance: dict[int, list[int]]
    collapsed: list[str] = field(default_factory=list)
    not_collapsed: list[str] = field(default_factory=list)


def extract_plan(gates, h: DependencyHypergraph) -> PruningPlan:
    survivors = {}
    for e in h.edges:
        if e.frozen or e.id not in gates.pruned:
            survivors[e.id] = list(range(e.channel_count))
        else:
            survivors[e.id] = [int(i) for i in np.flatnonzero(~gates.pruned[e.id])]
    return PruningPlan(survivors)


def effective_graph(g: NetworkGraph, h: DependencyHypergraph, counts) -> NetworkGraph:
    """Graph with every conv/fc resized to the per-edge channel ``counts``."""
    layers = []
    for l in g.layers:
        if l.kind in (CONV, FC):
            l = replace(l, in_channels=int(counts[h.in_edge(l.id)]),
                        out_channels=int(counts[h.out_edge(l.id)]))
        layers.append(l)
    return g.with_layers(layers)


def apply_pruning(g: NetworkGraph, w: dict[str, np.ndarray], plan: PruningPlan,
                  h: DependencyHypergraph | None = None) -> PrunedNetwork:
    h = h or build_hypergraph(g)
    plan.validate(h, check_floor=False)
    idx = {j: np.asarray(s, dtype=np.int64) for j, s in plan.survivors.items()}
    pruned_graph = effective_graph(g, h, plan.counts())
    out: dict[str, np.ndarray] = {}
    for l in g.layers:
        if l.kind in (CONV, FC):
            rows, cols = idx[h.out_edge(l.id)], idx[h.in_edge(l.id)]
            out[f"{l.id}.weight"] = w[f"{l.id}.weight"][rows][:, cols].copy()
            if l.bias:
                out[f"{l.id}.bias"] = w[f"{l.id}.bias"][rows].copy()
        elif l.kind == BATCHNORM:
            keep = idx[h.tensor_edge[l.id]]
            for p in ("scale", "shift", "running_mean", "running_var"):
                out[f"{l.id}.{p}"] = w[f"{l.id}.{p}"][keep].copy()
    return PrunedNetwork(pruned_graph, out, {j: list(s) for j, s in plan.survivors.items()})


def _ancestors(g: NetworkGraph, lid: str) -> set[str]:
    seen, stack = {lid}, [lid]
    while stack:
        for s in g[stack.pop()].inputs:
            if s not in seen:
                seen.add(s)
                stack.append(s)
    return seen


def _branch(g: NetworkGraph, add_id: str, i: int) -> set[str] | None:
    """Layers feeding only operand ``i`` of ``add_id``, or None if shared elsewhere."""
    add = g[add_id]
    own = _ancestors(g, add.inputs[i])
    others = set().union(*(_ancestors(g, s) for k, s in enumerate(add.inputs) if k != i))
    branch = own - others
    if not branch or any(g[b].kind == INPUT for b in branch):
        return None
    for b in branch:
        for c in g.consumers[b]:
            if c not in branch and c != add_id:
                return None
    return branch


def collapse_empty_blocks(net: PrunedNetwork, strict: bool = True) -> PrunedNetwork:
    """Delete residual branches that lost every channel on some inner edge.

    The branch must contribute exactly zero to its ``add``; otherwise a
    :class:`BranchNotCollapsible` is raised (``strict``) or the branch is kept
    and listed in ``not_collapsed``.
    """
    g, w = net.graph, dict(net.weights)
    collapsed, kept = list(net.collapsed), list(net.not_collapsed)
    probe = np.random.default_rng(0).standard_normal((2, *g.input_shape))
    while True:
        target = None
        for l in g.layers:
            if l.kind != ADD:
                continue
            for i, src in enumerate(l.inputs):
                branch = _branch(g, l.id, i)
                if branch is None or f"{l.id}:{src}" in kept:
                    continue
                if any(g[b].kind in (CONV, FC) and g.channels[b] == 0 for b in branch):
                    target = (l, i, branch)
                    break
            if target:
                break
        if target is None:
            break
        add, i, branch = target
        src = add.inputs[i]
        _, trace = forward(g, w, probe, "eval", record=True)
        magnitude = float(np.max(np.abs(trace.acts[src]), initial=0.0))
        if magnitude != 0.0:
            if strict:
                raise BranchNotCollapsible(add.id, src, magnitude)
            kept.append(f"{add.id}:{src}")
            continue
        remaining = [s for k, s in enumerate(add.inputs) if k != i]
        layers = []
        for l in g.layers:
            if l.id in branch:
                continue
            if l.id == add.id:
                if len(remaining) >= 2:
                    layers.append(replace(l, inputs=tuple(remaining)))
                continue
            if len(remaining) == 1 and add.id in l.inputs:
                l = replace(l, inputs=tuple(remaining[0] if s == add.id else s for s in l.inputs))
            layers.append(l)
        removed = set(branch) | ({add.id} if len(remaining) == 1 else set())
        w = {k: v for k, v in w.items() if k.rsplit(".", 1)[0] not in removed}
        g = g.with_layers(layers)
        collapsed.extend(sorted(branch, key=net.graph.index.__getitem__))
    return PrunedNetwork(g, w, net.provenance, collapsed, kept)


def report(original: NetworkGraph, pruned: NetworkGraph | PrunedNetwork, input_hw=None) -> dict:
    """Reduction metrics recomputed from the emitted graph."""
    p = pruned.graph if isinstance(pruned, PrunedNetwork) else pruned
    h = build_hypergraph(original)
    f0, f1 = count_flops(original, input_hw), count_flops(p, input_hw)
    m0, m1 = count_params(original), count_params(p)
    survivors = {}
    for e in h.edges:
        count = 0
        for v in e.vertices:
            if v.layer in p:
                l = p[v.layer]
                if l.kind in (CONV, FC):
                    count = l.in_channels if v.side == "in" else l.out_channels
                else:
                    count = p.channels[l.id] if v.side == "out" else p.channels[l.inputs[0]]
                break
        survivors[e.id] = {"kept": count, "total": e.channel_count}
    return {
        "flops_original": f0,
        "flops_pruned": f1,
        "flops_reduction_pct": 100.0 * (1 - f1 / f0) if f0 else 0.0,
        "params_original": m0,
        "params_pruned": m1,
        "memory_reduction_pct": 100.0 * (1 - m1 / m0) if m0 else 0.0,
        "layers_original": len(original),
        "layers_pruned": len(p),
        "layer_count_delta": len(p) - len(original),
        "edges": survivors,
    }
