import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gator.cost import (CostObjective, LatencyTable, computational_loss, cost_factors, flops_cost, full_counts,
                        memory_cost, predict_removal)
from gator.hypergraph import build_hypergraph
from gator.ir import count_flops, count_params, parse_network
from gator.pruning import effective_graph


def two_conv(cin=3, mid=8, cout=32, stride2=1, hw=8):
    return parse_network({"name": "ab", "layers": [
        {"id": "input", "kind": "input", "channels": cin, "height": hw, "width": hw},
        {"id": "A", "kind": "conv", "inputs": ["input"], "in_channels": cin, "out_channels": mid, "kernel": [3, 3]},
        {"id": "B", "kind": "conv", "inputs": ["A"], "in_channels": mid, "out_channels": cout, "kernel": [3, 3],
         "stride": stride2},
        {"id": "output", "kind": "output", "inputs": ["B"]},
    ]})


class TestMemory:
    def test_pair(self):
        g = two_conv()
        h = build_hypergraph(g)
        assert memory_cost(g, h, full_counts(h), 1) == 315

    def test_after_pruning_consumer(self):
        g = two_conv()
        h = build_hypergraph(g)
        counts = full_counts(h)
        counts[h.out_edge("B")] = 16
        assert memory_cost(g, h, counts, 1) == 171

    def test_pointwise_single_member(self):
        g = parse_network({"name": "p", "layers": [
            {"id": "input", "kind": "input", "channels": 2, "height": 2, "width": 2},
            {"id": "a", "kind": "conv", "inputs": ["input"], "in_channels": 2, "out_channels": 4, "kernel": [1, 1]},
            {"id": "gap", "kind": "global-avg-pool", "inputs": ["a"]},
            {"id": "fc", "kind": "fully-connected", "inputs": ["gap"], "in_features": 4, "out_features": 1},
            {"id": "output", "kind": "output", "inputs": ["fc"]}]})
        h = build_hypergraph(g)
        counts = full_counts(h)
        # edge a.out -> fc.in: a contributes 1*1*c_in=2, fc contributes 1*c_out=1
        assert memory_cost(g, h, counts, 1) == 3

    def test_unknown_edge(self):
        g = two_conv()
        with pytest.raises(KeyError):
            memory_cost(g, build_hypergraph(g), full_counts(build_hypergraph(g)), 7)


class TestFlops:
    def test_downsampled_consumer(self):
        g = two_conv(stride2=2)
        h = build_hypergraph(g)
        assert flops_cost(g, h, full_counts(h), 1) == 99

    def test_equals_memory_without_downsampling(self):
        g = two_conv()
        h = build_hypergraph(g)
        assert flops_cost(g, h, full_counts(h), 1) == memory_cost(g, h, full_counts(h), 1)

    def test_deeper_edges_cheaper(self, toy):
        h = build_hypergraph(toy)
        counts = full_counts(h)
        first, last = h.out_edge("l1b1c1"), h.out_edge("l3b2c1")
        assert memory_cost(toy, h, counts, last) > memory_cost(toy, h, counts, first)
        assert flops_cost(toy, h, counts, last) < flops_cost(toy, h, counts, first)

    def test_matches_counter_difference(self, toy):
        """Removing one channel of an edge changes count_flops by flops_cost * pixels."""
        h = build_hypergraph(toy)
        full = full_counts(h)
        pixels = 16 * 16
        for j in h.prunable_edges():
            counts = full.copy()
            counts[j] -= 1
            delta = count_flops(toy) - count_flops(effective_graph(toy, h, counts))
            assert delta == flops_cost(toy, h, full, j) * pixels
            delta = count_params(toy) - count_params(effective_graph(toy, h, counts))
            assert delta == memory_cost(toy, h, full, j)


class TestLatency:
    def test_factor(self):
        t = LatencyTable(0.100, {1: 0.090}, {1: 64})
        assert t.factor(1) == pytest.approx(0.010 / 32)

    def test_clamp(self):
        assert LatencyTable(0.100, {1: 0.101}, {1: 64}).factor(1) == 0.0

    def test_missing_entry(self):
        with pytest.raises(KeyError):
            LatencyTable(0.1, {1: 0.09}, {1: 4}).factor(2)

    def test_round_trip(self):
        t = LatencyTable(0.1234, {1: 0.1, 3: 0.2}, {1: 8, 3: 16})
        again = LatencyTable.loads(t.dumps())
        assert again.t_orig == t.t_orig and again.t_half == t.t_half and again.channels == t.channels

    def test_non_positive_rejected(self):
        with pytest.raises(ValueError):
            LatencyTable(0.0, {1: 0.1}, {1: 2})

    def test_objective_needs_coverage(self, toy):
        obj = CostObjective("latency", LatencyTable(0.1, {1: 0.09}, {1: 8}))
        with pytest.raises(ValueError, match="misses"):
            obj.check_covers(build_hypergraph(toy))


class TestComputationalLoss:
    @pytest.mark.parametrize("kind", ["memory", "flops"])
    def test_initial_loss_is_one(self, toy, kind):
        h = build_hypergraph(toy)
        f = cost_factors(CostObjective(kind), toy, h)
        sums = {j: float(h.edges[j].channel_count) for j in f.edges}
        assert abs(computational_loss(sums, f) - 1.0) <= 1e-12

    def test_all_closed(self, toy):
        h = build_hypergraph(toy)
        f = cost_factors(CostObjective("memory"), toy, h)
        assert computational_loss({j: 0.0 for j in f.edges}, f) == 0.0

    def test_half_edge_closed(self, toy):
        h = build_hypergraph(toy)
        f = cost_factors(CostObjective("memory"), toy, h)
        j = h.out_edge("l2b1c1")  # 16 channels between l2b1c1 (3x3, 8 in) and l2b1c2 (3x3, 16 out)
        sums = {k: float(h.edges[k].channel_count) for k in f.edges}
        sums[j] = 8.0
        assert f.lam[j] == 9 * 8 + 9 * 16
        expected = 1.0 - 8 * (9 * 8 + 9 * 16) / f.denominator
        assert computational_loss(sums, f) == pytest.approx(expected, abs=1e-15)
        # the denominator counts each conv twice: once per side
        assert f.denominator == 2 * (count_params(toy) - 3 * 8 * 9 - 32 * 10) + 3 * 8 * 9 + 32 * 10

    def test_mismatch(self, toy):
        h = build_hypergraph(toy)
        f = cost_factors(CostObjective("memory"), toy, h)
        with pytest.raises(ValueError):
            computational_loss({1: 1.0}, f)

    def test_gradient_is_normalized_factor(self, toy):
        h = build_hypergraph(toy)
        f = cost_factors(CostObjective("flops"), toy, h)
        sums = {j: float(h.edges[j].channel_count) for j in f.edges}
        for j in f.edges:
            up = dict(sums)
            up[j] += 1.0
            assert computational_loss(up, f) - computational_loss(sums, f) == pytest.approx(f.normalized[j], rel=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.data())
    def test_closing_gate_never_increases(self, toy, data):
        h = build_hypergraph(toy)
        f = cost_factors(CostObjective("memory"), toy, h)
        sums = {j: float(data.draw(st.integers(1, h.edges[j].channel_count))) for j in f.edges}
        j = data.draw(st.sampled_from(f.edges))
        closed = dict(sums)
        closed[j] -= 1
        assert computational_loss(closed, f) <= computational_loss(sums, f)


class TestRemovalOracle:
    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_incremental_prediction_exact(self, toy, data):
        h = build_hypergraph(toy)
        survivors = {j: data.draw(st.integers(1, h.edges[j].channel_count)) for j in h.prunable_edges()}
        counts = full_counts(h)
        for j, s in survivors.items():
            counts[j] = s
        pruned = effective_graph(toy, h, counts)
        assert predict_removal(toy, h, survivors, "memory") == count_params(toy) - count_params(pruned)
        assert predict_removal(toy, h, survivors, "flops") == count_flops(toy) - count_flops(pruned)
