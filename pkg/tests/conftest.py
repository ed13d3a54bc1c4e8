import numpy as np
import pytest

from gator.builtin import builtin_graph
from gator.ir import parse_network


def chain_doc(widths=(3, 8, 8, 4), kernels=None, strides=None, hw=8, bn=False):
    """input -> conv -> ... -> gap -> fc -> output, optionally with batchnorm after each conv."""
    kernels = kernels or [3] * (len(widths) - 1)
    strides = strides or [1] * (len(widths) - 1)
    layers = [{"id": "input", "kind": "input", "channels": widths[0], "height": hw, "width": hw}]
    prev = "input"
    for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
        cid = f"conv{i + 1}"
        layers.append({"id": cid, "kind": "conv", "inputs": [prev], "in_channels": cin, "out_channels": cout,
                       "kernel": [kernels[i], kernels[i]], "stride": strides[i]})
        prev = cid
        if bn:
            layers.append({"id": f"{cid}_bn", "kind": "batchnorm", "inputs": [prev]})
            prev = f"{cid}_bn"
        layers.append({"id": f"{cid}_relu", "kind": "relu", "inputs": [prev]})
        prev = f"{cid}_relu"
    layers.append({"id": "output", "kind": "output", "inputs": [prev]})
    return {"name": "chain", "layers": layers}


def chain_graph(widths=(3, 8, 8, 4), **kw):
    return parse_network(chain_doc(widths, **kw))


def conv_chain_graph(widths=(3, 8, 8, 4), **kw):
    """Conv chain closed by global-avg-pool and a 5-way classifier."""
    doc = chain_doc(widths, **kw)
    out = doc["layers"].pop()
    last = doc["layers"][-1]["id"]
    doc["layers"] += [
        {"id": "gap", "kind": "global-avg-pool", "inputs": [last]},
        {"id": "fc", "kind": "fully-connected", "inputs": ["gap"], "in_features": widths[-1], "out_features": 5},
        {"id": "output", "kind": "output", "inputs": ["fc"]},
    ]
    return parse_network(doc)


@pytest.fixture(scope="session")
def toy():
    return builtin_graph("toy-resnet")


@pytest.fixture(scope="session")
def resnet50():
    return builtin_graph("resnet50")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
