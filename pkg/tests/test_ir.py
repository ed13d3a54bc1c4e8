import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gator.builtin import builtin_graph
from gator.executor import forward, init_weights
from gator.ir import CONV, FC, IRError, count_flops, count_params, dumps, parse_network

from conftest import chain_doc, chain_graph


def minimal(cin=3, cout=8, hw=4):
    return {"name": "m", "layers": [
        {"id": "input", "kind": "input", "channels": cin, "height": hw, "width": hw},
        {"id": "c", "kind": "conv", "inputs": ["input"], "in_channels": cin, "out_channels": cout, "kernel": [3, 3]},
        {"id": "output", "kind": "output", "inputs": ["c"]},
    ]}


def brute_flops(g):
    """Independent counter: one MAC per loop iteration of a direct convolution."""
    total = 0
    for l in g.layers:
        if l.kind == CONV:
            ho, wo = g.spatial[l.id]
            total += l.out_channels * ho * wo * l.in_channels * l.kernel[0] * l.kernel[1]
        elif l.kind == FC:
            total += l.in_channels * l.out_channels
    return total


class TestParse:
    def test_minimal_graph(self):
        g = parse_network(minimal())
        assert len(g) == 3
        assert g.downsample["c"] == 1.0

    def test_channel_mismatch_names_both_layers(self):
        doc = minimal()
        doc["layers"][1]["in_channels"] = 16
        with pytest.raises(IRError) as err:
            parse_network(doc)
        assert "input" in str(err.value) and "'c'" in str(err.value)

    def test_cycle_detected(self):
        doc = chain_doc((3, 4, 4))
        doc["layers"][1]["inputs"] = ["conv2_relu"]
        with pytest.raises(IRError, match="cycle"):
            parse_network(doc)

    def test_unknown_kind(self):
        doc = minimal()
        doc["layers"][1]["kind"] = "deconv"
        with pytest.raises(IRError, match="deconv"):
            parse_network(doc)

    def test_dangling_input(self):
        doc = minimal()
        doc["layers"][2]["inputs"] = ["nope"]
        with pytest.raises(IRError) as err:
            parse_network(doc)
        assert err.value.layer == "output"

    def test_bad_stride(self):
        doc = minimal()
        doc["layers"][1]["stride"] = 3
        with pytest.raises(IRError, match="stride"):
            parse_network(doc)

    def test_add_mismatch(self):
        doc = chain_doc((3, 4, 8))
        doc["layers"].insert(-1, {"id": "sum", "kind": "add", "inputs": ["conv1_relu", "conv2_relu"]})
        doc["layers"][-1]["inputs"] = ["sum"]
        with pytest.raises(IRError, match="sum"):
            parse_network(doc)

    def test_layers_sorted_topologically(self):
        doc = chain_doc((3, 4, 4))
        doc["layers"].reverse()
        g = parse_network(doc)
        seen = set()
        for l in g.layers:
            assert all(s in seen for s in l.inputs)
            seen.add(l.id)

    def test_round_trip(self, toy):
        again = parse_network(dumps(toy))
        assert dumps(again) == dumps(toy)
        assert again.layers == toy.layers

    def test_json_text_and_bytes(self):
        text = json.dumps(minimal())
        assert parse_network(text).layers == parse_network(text.encode()).layers


class TestBuiltin:
    def test_resnet50_layers(self, resnet50):
        convs = [l.id for l in resnet50.layers if l.kind == CONV]
        assert len(convs) == 53
        assert sum(l.kind == FC for l in resnet50.layers) == 1
        for name in ["c0", "l1b1c1", "l4b3c3", "l1b1d", "l2b1d", "l3b1d", "l4b1d", "fc"]:
            assert name in resnet50

    def test_toy_resnet(self, toy):
        convs = [l for l in toy.layers if l.kind == CONV]
        block = [l for l in convs if l.id[0] == "l" and not l.id.endswith("d")]
        assert len(block) == 12
        assert sorted(l.id for l in convs if l.id.endswith("d")) == ["l2b1d", "l3b1d"]
        assert toy.downsample["l3b2c2"] == 1 / 16
        assert toy.num_classes == 10

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="vgg99"):
            builtin_graph("vgg99")

    def test_deterministic(self):
        assert dumps(builtin_graph("toy-resnet")) == dumps(builtin_graph("toy-resnet"))


class TestCounters:
    def test_single_conv_flops(self):
        doc = minimal(16, 32, 8)
        g = parse_network(doc)
        assert count_flops(g) == 294_912
        assert count_params(g) == 4608

    def test_pointwise(self):
        doc = minimal(2, 3, 1)
        doc["layers"][1]["kernel"] = [1, 1]
        assert count_flops(parse_network(doc)) == 6

    def test_empty_channel_conv(self):
        doc = minimal(3, 0, 4)
        assert count_params(parse_network(doc)) == 0

    def test_against_brute_force(self, toy, resnet50):
        assert count_flops(toy) == brute_flops(toy) == 1_694_016
        assert count_flops(resnet50) == brute_flops(resnet50)

    def test_resnet50_params(self, resnet50):
        # 25,557,032 trainable parameters minus biases (1000) and batchnorm (53,120)
        assert count_params(resnet50) == 25_502_912

    def test_input_size_override(self, toy):
        assert count_flops(toy, (32, 32)) == 4 * count_flops(toy) - 3 * 32 * 10


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


class TestForward:
    def test_identity_pointwise(self, rng):
        doc = minimal(4, 4, 5)
        doc["layers"][1]["kernel"] = [1, 1]
        g = parse_network(doc)
        x = rng.standard_normal((2, 4, 5, 5))
        np.testing.assert_array_equal(forward(g, {"c.weight": np.eye(4).reshape(4, 4, 1, 1)}, x), x)

    def test_zero_weights(self, toy, rng):
        w = {k: np.zeros_like(v) for k, v in init_weights(toy, rng).items()}
        for k in w:
            if k.endswith("running_var"):
                w[k] += 1
        out = forward(toy, w, rng.standard_normal((3, 3, 16, 16)))
        np.testing.assert_array_equal(out, 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]),
           st.integers(5, 9), st.integers(0, 2**31 - 1))
    def test_conv_matches_nested_loops(self, cin, cout, k, stride, hw, seed):
        r = np.random.default_rng(seed)
        doc = minimal(cin, cout, hw)
        doc["layers"][1].update(kernel=[k, k], stride=stride)
        g = parse_network(doc)
        w = {"c.weight": r.standard_normal((cout, cin, k, k))}
        x = r.standard_normal((2, cin, hw, hw))
        np.testing.assert_allclose(forward(g, w, x), naive_conv(x, w["c.weight"], stride, (k - 1) // 2), atol=1e-12)

    def test_toy_resnet_against_oracle(self, toy, rng):
        """Whole-network oracle with nested-loop convolutions and explicit layer rules."""
        w = init_weights(toy, rng)
        for k in w:
            if k.endswith(("running_mean", "shift")):
                w[k] = w[k] + 0.1 * rng.standard_normal(w[k].shape)
            if k.endswith("running_var"):
                w[k] = w[k] + rng.random(w[k].shape)
        x = rng.standard_normal((2, 3, 16, 16))
        acts = {}
        for l in toy.layers:
            a = [acts[s] for s in l.inputs]
            if l.kind == "input":
                y = x
            elif l.kind == CONV:
                y = naive_conv(a[0], w[f"{l.id}.weight"], l.stride, l.padding)
            elif l.kind == "batchnorm":
                m, v = w[f"{l.id}.running_mean"], w[f"{l.id}.running_var"]
                y = (a[0] - m[:, None, None]) / np.sqrt(v[:, None, None] + 1e-5)
                y = y * w[f"{l.id}.scale"][:, None, None] + w[f"{l.id}.shift"][:, None, None]
            elif l.kind == "relu":
                y = np.maximum(a[0], 0)
            elif l.kind == "add":
                y = sum(a)
            elif l.kind == "global-avg-pool":
                y = a[0].mean(axis=(2, 3))
            elif l.kind == FC:
                y = a[0] @ w[f"{l.id}.weight"].T + w[f"{l.id}.bias"]
            else:
                y = a[0]
            acts[l.id] = y
        np.testing.assert_allclose(forward(toy, w, x), acts["output"], atol=1e-5)

    def test_deterministic(self, toy, rng):
        w = init_weights(toy, rng)
        x = rng.standard_normal((2, 3, 16, 16))
        np.testing.assert_array_equal(forward(toy, w, x), forward(toy, w, x))

    def test_shape_mismatch(self, toy, rng):
        with pytest.raises(ValueError, match="shape"):
            forward(toy, init_weights(toy, rng), np.zeros((1, 3, 8, 8)))

    def test_train_mode_updates_running_stats(self, toy, rng):
        w = init_weights(toy, rng)
        before = w["c0_bn.running_mean"].copy()
        forward(toy, w, rng.standard_normal((4, 3, 16, 16)) + 1.0, "train")
        assert not np.array_equal(before, w["c0_bn.running_mean"])

    def test_maxpool(self, rng):
        doc = {"name": "p", "layers": [
            {"id": "input", "kind": "input", "channels": 2, "height": 4, "width": 4},
            {"id": "p", "kind": "max-pool", "inputs": ["input"], "kernel": 2, "stride": 2, "padding": 0},
            {"id": "output", "kind": "output", "inputs": ["p"]},
        ]}
        g = parse_network(doc)
        x = rng.standard_normal((1, 2, 4, 4))
        expected = x.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(forward(g, {}, x), expected)


class TestRandomDags:
    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 100), st.booleans()), min_size=1, max_size=8),
           st.integers(0, 2**31 - 1))
    def test_residual_dags_execute(self, spec, seed):
        """Random stacks of plain and residual blocks parse and run in topological order."""
        layers = [{"id": "input", "kind": "input", "channels": 4, "height": 6, "width": 6}]
        prev = "input"
        for i, (choice, residual) in enumerate(spec):
            cid = f"b{i}"
            layers.append({"id": f"{cid}c", "kind": "conv", "inputs": [prev], "in_channels": 4,
                           "out_channels": 4, "kernel": [1 + 2 * (choice % 2)] * 2})
            out = f"{cid}c"
            if residual:
                layers.append({"id": f"{cid}a", "kind": "add", "inputs": [prev, out]})
                out = f"{cid}a"
            layers.append({"id": f"{cid}r", "kind": "relu", "inputs": [out]})
            prev = f"{cid}r"
        layers.append({"id": "output", "kind": "output", "inputs": [prev]})
        r = np.random.default_rng(seed)
        r.shuffle(layers)
        g = parse_network({"name": "dag", "layers": layers})
        w = init_weights(g, r)
        out = forward(g, w, r.standard_normal((1, 4, 6, 6)))
        assert out.shape == (1, 4, 6, 6)
