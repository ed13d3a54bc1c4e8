"""Stochastic hard channel gates.

Each prunable edge ``j`` owns one logit per channel. A gate is open when
``theta + x >= 0`` with ``x ~ Logistic(0, 1)``, so ``P(open) = sigmoid(theta)``.
The backward pass uses ``sigmoid'((theta + x) / tau) / tau`` as the derivative
of the gate with respect to its logit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gator.hypergraph import DependencyHypergraph, zero_allowed_edges
from gator.ir import BATCHNORM, CONV, FC, GAP, MAXPOOL, RELU, ADD, OUTPUT

GRANULARITIES = ("per-sample", "per-batch")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sigmoid_grad(z):
    s = sigmoid(z)
    return s * (1.0 - s)


@dataclass
class GateState:
    theta: dict[int, np.ndarray]
    pruned: dict[int, np.ndarray]
    # minimum number of surviving channels per edge (0 or 1)
    floor: dict[int, int]
    tau: float = 1.0

    @property
    def edges(self) -> list[int]:
        return sorted(self.theta)

    def survival_probability(self, j: int) -> np.ndarray:
        return sigmoid(self.theta[j])

    def open_counts(self) -> dict[int, int]:
        """Channels not permanently pruned with survival probability >= 0.5."""
        return {j: int(np.count_nonzero(~self.pruned[j] & (self.theta[j] >= 0))) for j in self.edges}

    def alive_counts(self) -> dict[int, int]:
        return {j: int(np.count_nonzero(~self.pruned[j])) for j in self.edges}

    def total_pruned(self) -> int:
        return int(sum(p.sum() for p in self.pruned.values()))

    def total_channels(self) -> int:
        return int(sum(p.size for p in self.pruned.values()))

    def copy(self) -> "GateState":
        return GateState({j: t.copy() for j, t in self.theta.items()},
                         {j: p.copy() for j, p in self.pruned.items()}, dict(self.floor), self.tau)

    def fixed_masks(self) -> dict[int, np.ndarray]:
        """Deterministic masks: pruned channels closed, everything else open."""
        return {j: (~self.pruned[j]).astype(np.float64) for j in self.edges}


@dataclass
class GateDraw:
    """Sampled gates ``g`` and the noise ``x`` that produced them.

    Arrays are [c_j] for a per-batch draw or [N, c_j] for a per-sample draw.
    """

    g: dict[int, np.ndarray]
    x: dict[int, np.ndarray]

    @property
    def per_sample(self) -> bool:
        return any(v.ndim == 2 for v in self.g.values())

    def sums(self) -> dict[int, float]:
        """Open channels per edge, averaged over samples for per-sample draws."""
        out = {}
        for j, gj in self.g.items():
            out[j] = float(gj.sum(axis=-1).mean()) if gj.ndim == 2 else float(gj.sum())
        return out


def logit_for_probability(p_gate: float) -> float:
    if not 0.0 < p_gate < 0.5:
        raise ValueError(f"initial closed-gate probability must lie in (0, 0.5), got {p_gate}")
    return math.log((1.0 - p_gate) / p_gate)


def init_gates(h: DependencyHypergraph, p_gate: float = 0.005, tau: float = 1.0) -> GateState:
    """All prunable channels start with closed-gate probability ``p_gate``."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    theta0 = logit_for_probability(p_gate)
    legal_zero = zero_allowed_edges(h)
    theta, pruned, floor = {}, {}, {}
    for j in h.prunable_edges():
        c = h.edges[j].channel_count
        theta[j] = np.full(c, theta0)
        pruned[j] = np.zeros(c, dtype=bool)
        floor[j] = 0 if j in legal_zero else 1
    return GateState(theta, pruned, floor, tau)


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Inverse-CDF sample: x = ln(u / (1 - u)), u ~ U(0, 1)."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, None)
    return np.log(u) - np.log1p(-u)


def sample_gates(state: GateState, rng: np.random.Generator, batch_size: int | None = None) -> GateDraw:
    """Draw gates for every edge; ``batch_size`` gives one row per sample."""
    g, x = {}, {}
    for j in state.edges:
        theta = state.theta[j]
        shape = theta.shape if batch_size is None else (batch_size, theta.size)
        noise = logistic_noise(rng, shape)
        noise[..., state.pruned[j]] = 0.0
        gate = (theta + noise >= 0).astype(np.float64)
        gate[..., state.pruned[j]] = 0.0
        g[j], x[j] = gate, noise
    return GateDraw(g, x)


def gate_forward(activations: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """Multiply channel ``i`` of ``activations`` [N, C, ...] by ``gates[..., i]``."""
    if gates.shape[-1] != activations.shape[1] or (gates.ndim == 2 and gates.shape[0] != activations.shape[0]):
        raise ValueError(f"gates {gates.shape} do not match activations {activations.shape}")
    m = gates if gates.ndim == 2 else gates[None, :]
    return activations * m.reshape(m.shape + (1,) * (activations.ndim - 2))


def theta_grad(gate_grad: np.ndarray, noise: np.ndarray, theta: np.ndarray, tau: float,
               pruned: np.ndarray | None = None) -> np.ndarray:
    """dL/dtheta from dL/dg using the sigmoid surrogate at the retained noise."""
    surrogate = sigmoid_grad((theta + noise) / tau) / tau
    out = gate_grad * surrogate
    if out.ndim == 2:
        out = out.sum(axis=0)
    if pruned is not None:
        out = np.where(pruned, 0.0, out)
    return out


def gate_backward(upstream, activations, gates, noise, theta, tau: float = 1.0, pruned=None):
    """Returns (dL/d activations, dL/d theta) for ``gate_forward``."""
    if upstream.shape != activations.shape:
        raise ValueError(f"upstream {upstream.shape} does not match activations {activations.shape}")
    grad_act = gate_forward(upstream, gates)
    prod = upstream * activations
    if prod.ndim > 2:
        prod = prod.sum(axis=tuple(range(2, prod.ndim)))
    gate_grad = prod if gates.ndim == 2 else prod.sum(axis=0)
    return grad_act, theta_grad(gate_grad, noise, theta, tau, pruned)


def prune_check(state: GateState) -> list[tuple[int, int]]:
    """Permanently prune channels whose closed probability reached 0.5 (theta <= 0).

    Edges with a floor of 1 keep their highest-logit channel (lowest index on
    ties). Returns the newly pruned (edge, channel) pairs.
    """
    newly = []
    for j in state.edges:
        theta, pruned = state.theta[j], state.pruned[j]
        candidates = ~pruned & (theta <= 0)
        if not candidates.any():
            continue
        alive = ~pruned
        if state.floor[j] and candidates.sum() >= alive.sum():
            idx = np.flatnonzero(alive)
            keep = idx[np.argmax(theta[idx])]
            candidates[keep] = False
        for i in np.flatnonzero(candidates):
            pruned[i] = True
            newly.append((j, int(i)))
    return newly


# -- placement -----------------------------------------------------------------

_ZERO_PRESERVING = (RELU, ADD, MAXPOOL, GAP)


@dataclass
class GatePlacement:
    """Layers whose outputs carry each edge's gate mask."""

    sites: dict[int, list[str]] = field(default_factory=dict)

    def site_masks(self, masks: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for j, mask in masks.items():
            for lid in self.sites.get(j, []):
                out[lid] = mask
        return out

    def edge_grads(self, mask_grads: dict[str, np.ndarray]) -> dict[int, np.ndarray]:
        out = {}
        for j, lids in self.sites.items():
            acc = None
            for lid in lids:
                if lid in mask_grads:
                    acc = mask_grads[lid] if acc is None else acc + mask_grads[lid]
            if acc is not None:
                out[j] = acc
        return out


def place_gates(h: DependencyHypergraph) -> GatePlacement:
    """One shared mask per edge, applied after each producing layer.

    A producer whose only consumer is a batchnorm is gated after the
    batchnorm, so a closed channel is exactly zero downstream. Every path from
    a gate site to the edge's consuming layers must be zero-preserving
    (relu / add / pooling); anything else is rejected.
    """
    g = h.graph
    placement = GatePlacement()
    for j in h.prunable_edges():
        sites = []
        for v in h.edges[j].out_vertices:
            lid = v.layer
            cons = g.consumers[lid]
            if len(cons) == 1 and g[cons[0]].kind == BATCHNORM:
                lid = cons[0]
            sites.append(lid)
        placement.sites[j] = sites
        site_set = set(sites)
        for lid, e in h.tensor_edge.items():
            l = g[lid]
            if e != j or lid in site_set or l.kind in (CONV, FC):
                continue
            if l.kind not in _ZERO_PRESERVING and l.kind != OUTPUT:
                raise NotImplementedError(
                    f"layer {lid!r} ({l.kind}) sits between gate sites and consumers of edge {j}")
    return placement
