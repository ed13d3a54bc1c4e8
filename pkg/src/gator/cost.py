"""Per-channel cost factors and the normalized computational loss.

For an edge ``j`` the cost of one of its channels is the number of weights
(memory), or weights scaled by each layer's output-pixel ratio (FLOPs per
input pixel), attached to that channel in every member layer:

    lam_j = sum_{q consumes j} k_h k_w c_out_q + sum_{q produces j} k_h k_w c_in_q

where the other dimension of each member is its *current* channel count.
Latency factors come from a measured :class:`LatencyTable` instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gator.hypergraph import IN, OUT, DependencyHypergraph
from gator.ir import CONV, FC, NetworkGraph

OBJECTIVES = ("memory", "flops", "latency")


@dataclass
class LatencyTable:
    """Measured forward latency of the full network and of per-edge half-pruned variants."""

    t_orig: float
    t_half: dict[int, float]
    channels: dict[int, int]

    def __post_init__(self):
        if not self.t_orig > 0 or any(not t > 0 for t in self.t_half.values()):
            raise ValueError("latency timings must be positive")

    def factor(self, j: int) -> float:
        """Seconds per channel; negative differences (timing noise) clamp to 0."""
        if j not in self.t_half:
            raise KeyError(f"latency table has no entry for edge {j}")
        return max(0.0, self.t_orig - self.t_half[j]) / (self.channels[j] / 2)

    def dumps(self) -> str:
        lines = ["# edge\tt_orig_s\tt_half_s\tchannels\tlambda_s_per_channel"]
        for j in sorted(self.t_half):
            lines.append(f"{j}\t{self.t_orig!r}\t{self.t_half[j]!r}\t{self.channels[j]}\t{self.factor(j)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "LatencyTable":
        t_orig = None
        t_half, channels = {}, {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"latency table line {n}: expected 5 tab-separated fields")
            j = int(parts[0])
            if t_orig is not None and float(parts[1]) != t_orig:
                raise ValueError(f"latency table line {n}: inconsistent t_orig")
            t_orig = float(parts[1])
            t_half[j] = float(parts[2])
            channels[j] = int(parts[3])
        if t_orig is None:
            raise ValueError("latency table is empty")
        return cls(t_orig, t_half, channels)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "LatencyTable":
        return cls.loads(Path(path).read_text())


@dataclass
class CostObjective:
    kind: str
    table: LatencyTable | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.kind!r}")
        if self.kind == "latency" and self.table is None:
            raise ValueError("latency objective needs a LatencyTable")

    def check_covers(self, h: DependencyHypergraph) -> None:
        if self.kind == "latency":
            missing = [j for j in h.prunable_edges() if j not in self.table.t_half]
            if missing:
                raise ValueError(f"latency table misses prunable edges {missing}")


@dataclass
class CostFactors:
    """Raw per-channel factors ``lam`` and the frozen initial denominator."""

    edges: list[int]
    lam: dict[int, float]
    denominator: float
    kind: str = "memory"
    normalized: dict[int, float] = field(init=False)

    def __post_init__(self):
        if not self.denominator > 0:
            raise ValueError("cost denominator must be positive")
        self.normalized = {j: self.lam[j] / self.denominator for j in self.edges}


def full_counts(h: DependencyHypergraph) -> np.ndarray:
    return np.array([e.channel_count for e in h.edges], dtype=np.int64)


def _member_kernel(l) -> int:
    return l.kernel[0] * l.kernel[1] if l.kind == CONV else 1


def _edge_terms(g: NetworkGraph, h: DependencyHypergraph, counts, j: int, scale_by_downsample: bool) -> float:
    if not 0 <= j < h.m:
        raise KeyError(f"unknown edge {j}")
    e = h.edges[j]
    total = 0.0
    for v in e.in_vertices:
        l = g[v.layer]
        if l.kind not in (CONV, FC):
            continue
        d = g.downsample[l.id] if scale_by_downsample else 1.0
        total += d * _member_kernel(l) * counts[h.vertex_edge[(l.id, OUT)]]
    for v in e.out_vertices:
        l = g[v.layer]
        if l.kind not in (CONV, FC):
            continue
        d = g.downsample[l.id] if scale_by_downsample else 1.0
        total += d * _member_kernel(l) * counts[h.vertex_edge[(l.id, IN)]]
    return total


def memory_cost(g: NetworkGraph, h: DependencyHypergraph, counts, j: int) -> float:
    return _edge_terms(g, h, counts, j, scale_by_downsample=False)


def flops_cost(g: NetworkGraph, h: DependencyHypergraph, counts, j: int) -> float:
    """FLOPs per input-image pixel attributable to one channel of edge ``j``."""
    return _edge_terms(g, h, counts, j, scale_by_downsample=True)


def latency_cost(table: LatencyTable, j: int) -> float:
    return table.factor(j)


def edge_cost(objective: CostObjective, g, h, counts, j: int) -> float:
    if objective.kind == "memory":
        return memory_cost(g, h, counts, j)
    if objective.kind == "flops":
        return flops_cost(g, h, counts, j)
    return latency_cost(objective.table, j)


def cost_factors(objective: CostObjective, g, h, counts=None, denominator: float | None = None) -> CostFactors:
    """Factors at the given channel ``counts`` (default: unpruned network).

    With ``denominator=None`` the denominator is computed from the unpruned
    network, i.e. this is the t=0 normalization.
    """
    objective.check_covers(h)
    edges = h.prunable_edges()
    if counts is None:
        counts = full_counts(h)
    lam = {j: edge_cost(objective, g, h, counts, j) for j in edges}
    if denominator is None:
        full = full_counts(h)
        lam0 = lam if counts is full or np.array_equal(counts, full) else {
            j: edge_cost(objective, g, h, full, j) for j in edges}
        denominator = sum(h.edges[j].channel_count * lam0[j] for j in edges)
    return CostFactors(edges, lam, denominator, objective.kind)


def computational_loss(gate_sums: dict[int, float], factors: CostFactors) -> float:
    """sum_j c_j(t) * lam_j(t) / D.

    The derivative with respect to any single gate of edge ``j`` is
    ``factors.normalized[j]``.
    """
    if set(gate_sums) != set(factors.edges):
        raise ValueError(
            f"gate sums cover edges {sorted(gate_sums)}, factors cover {sorted(factors.edges)}")
    return math.fsum(gate_sums[j] * factors.lam[j] for j in factors.edges) / factors.denominator


def predict_removal(g: NetworkGraph, h: DependencyHypergraph, survivors: dict[int, int], kind: str) -> int:
    """Total weights (or FLOPs) removed when pruning down to ``survivors``.

    Channels are removed one at a time, edge by edge, re-evaluating the
    per-channel factor at the current counts before every removal.
    """
    counts = full_counts(h)
    pixels = g.input_shape[1] * g.input_shape[2]
    removed = 0
    for j in sorted(survivors):
        while counts[j] > survivors[j]:
            if kind == "memory":
                removed += round(memory_cost(g, h, counts, j))
            else:
                removed += round(flops_cost(g, h, counts, j) * pixels)
            counts[j] -= 1
    return removed
