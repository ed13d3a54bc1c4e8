"""Wall-clock latency of the reference executor, per prunable edge."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from gator.cost import LatencyTable
from gator.executor import forward, init_weights
from gator.hypergraph import build_hypergraph
from gator.ir import NetworkGraph
from gator.pruning import PruningPlan, apply_pruning


@dataclass
class ProfileConfig:
    warmup: int = 2
    repeats: int = 5
    batch_size: int = 8
    input_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.repeats < 5:
            raise ValueError(f"repeats must be >= 5, got {self.repeats}")
        if self.warmup < 2:
            raise ValueError(f"warmup must be >= 2, got {self.warmup}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def time_forward(g: NetworkGraph, w, x, config: ProfileConfig) -> float:
    """Median seconds per forward pass."""
    for _ in range(config.warmup):
        forward(g, w, x, "eval")
    samples = []
    for _ in range(config.repeats):
        t0 = time.perf_counter()
        forward(g, w, x, "eval")
        samples.append(time.perf_counter() - t0)
    t = statistics.median(samples)
    if not t > 0:
        raise RuntimeError("timer returned a non-positive duration")
    return t


def half_plan(h, j: int) -> PruningPlan:
    """Keep the lowest ceil(c_j / 2) channels of edge ``j``; everything else intact."""
    plan = PruningPlan.identity(h)
    plan.survivors[j] = list(range(math.ceil(h.edges[j].channel_count / 2)))
    return plan


def profile_latency(g: NetworkGraph, config: ProfileConfig | None = None, w=None, seed: int = 0) -> LatencyTable:
    config = config or ProfileConfig()
    if config.input_hw is not None:
        g = g.with_input_size(*config.input_hw)
    h = build_hypergraph(g)
    rng = np.random.default_rng(seed)
    w = w if w is not None else init_weights(g, rng)
    x = rng.standard_normal((config.batch_size, *g.input_shape))
    t_orig = time_forward(g, w, x, config)
    t_half, channels = {}, {}
    for j in h.prunable_edges():
        net = apply_pruning(g, w, half_plan(h, j), h)
        t_half[j] = time_forward(net.graph, net.weights, x, config)
        channels[j] = h.edges[j].channel_count
    return LatencyTable(t_orig, t_half, channels)
