"""Bundled architectures.

The JSON files under ``gator/data`` are generated by the description
builders below (``python -m gator.builtin`` rewrites them); ``builtin_graph``
always parses the bundled file so it goes through the same validation as a
user-supplied description.
"""
from __future__ import annotations

import json
from importlib import resources

from gator.ir import NetworkGraph, parse_network

BUILTINS = {"resnet50": "resnet50.json", "toy-resnet": "toy_resnet.json"}


class _Builder:
    def __init__(self, name: str):
        self.name = name
        self.layers: list[dict] = []

    def add(self, lid: str, kind: str, inputs: list[str], **params) -> str:
        self.layers.append({"id": lid, "kind": kind, "inputs": inputs, **params})
        return lid

    def conv_bn(self, lid: str, src: str, cin: int, cout: int, k: int, stride: int, relu: bool = True) -> str:
        self.add(lid, "conv", [src], in_channels=cin, out_channels=cout, kernel=[k, k],
                 stride=stride, padding=(k - 1) // 2, bias=False)
        out = self.add(f"{lid}_bn", "batchnorm", [lid])
        if relu:
            out = self.add(f"{lid}_relu", "relu", [out])
        return out

    def doc(self) -> dict:
        return {"name": self.name, "layers": self.layers}


def resnet50_description(num_classes: int = 1000, size: int = 224) -> dict:
    b = _Builder("resnet50")
    x = b.add("input", "input", [], channels=3, height=size, width=size)
    x = b.conv_bn("c0", x, 3, 64, 7, 2)
    x = b.add("maxpool", "max-pool", [x], kernel=3, stride=2, padding=1)
    cin = 64
    for stage, (blocks, width) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512)), start=1):
        cout = width * 4
        for blk in range(1, blocks + 1):
            p = f"l{stage}b{blk}"
            stride = 2 if blk == 1 and stage > 1 else 1
            y = b.conv_bn(f"{p}c1", x, cin, width, 1, 1)
            y = b.conv_bn(f"{p}c2", y, width, width, 3, stride)
            y = b.conv_bn(f"{p}c3", y, width, cout, 1, 1, relu=False)
            shortcut = x
            if blk == 1:
                shortcut = b.conv_bn(f"{p}d", x, cin, cout, 1, stride, relu=False)
            s = b.add(f"{p}_add", "add", [y, shortcut])
            x = b.add(f"{p}_relu", "relu", [s])
            cin = cout
    x = b.add("gap", "global-avg-pool", [x])
    x = b.add("fc", "fully-connected", [x], in_features=cin, out_features=num_classes, bias=True)
    b.add("output", "output", [x])
    return b.doc()


def toy_resnet_description(num_classes: int = 10, size: int = 16) -> dict:
    """Stem conv plus 3 stages x 2 basic blocks at widths 8/16/32."""
    b = _Builder("toy-resnet")
    x = b.add("input", "input", [], channels=3, height=size, width=size)
    x = b.conv_bn("c0", x, 3, 8, 3, 1)
    cin = 8
    for stage, width in enumerate((8, 16, 32), start=1):
        for blk in (1, 2):
            p = f"l{stage}b{blk}"
            stride = 2 if blk == 1 and stage > 1 else 1
            y = b.conv_bn(f"{p}c1", x, cin, width, 3, stride)
            y = b.conv_bn(f"{p}c2", y, width, width, 3, 1, relu=False)
            shortcut = x
            if cin != width or stride != 1:
                shortcut = b.conv_bn(f"{p}d", x, cin, width, 1, stride, relu=False)
            s = b.add(f"{p}_add", "add", [y, shortcut])
            x = b.add(f"{p}_relu", "relu", [s])
            cin = width
    x = b.add("gap", "global-avg-pool", [x])
    x = b.add("fc", "fully-connected", [x], in_features=cin, out_features=num_classes, bias=True)
    b.add("output", "output", [x])
    return b.doc()


GENERATORS = {"resnet50": resnet50_description, "toy-resnet": toy_resnet_description}


def bundled_text(name: str) -> str:
    if name not in BUILTINS:
        raise ValueError(f"unknown builtin network {name!r}; choose from {sorted(BUILTINS)}")
    return resources.files("gator").joinpath("data").joinpath(BUILTINS[name]).read_text()


def builtin_graph(name: str) -> NetworkGraph:
    return parse_network(bundled_text(name))


def _write_bundled() -> None:
    from pathlib import Path

    root = Path(__file__).parent / "data"
    for name, fn in GENERATORS.items():
        (root / BUILTINS[name]).write_text(json.dumps(fn(), indent=1) + "\n")


if __name__ == "__main__":
    _write_bundled()
