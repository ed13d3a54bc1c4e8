"""Architecture description: layer specs, validation, and exact cost counters.

A network is a DAG of typed layers stored in topological order. The
document form is JSON with a single ``layers`` list; see ``docs/formats.md``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

CONV = "conv"
FC = "fully-connected"
RELU = "relu"
BATCHNORM = "batchnorm"
ADD = "add"
GAP = "global-avg-pool"
MAXPOOL = "max-pool"
INPUT = "input"
OUTPUT = "output"

KINDS = (CONV, FC, RELU, BATCHNORM, ADD, GAP, MAXPOOL, INPUT, OUTPUT)
# Layers whose output channels are the input channels, unchanged.
CHANNEL_PRESERVING = (RELU, BATCHNORM, GAP, MAXPOOL, OUTPUT)


class IRError(ValueError):
    """Invalid network description. ``layer`` names the offending layer."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"layer {layer!r}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    # input layer
    channels: int = 0
    height: int = 0
    width: int = 0
    # conv / fully-connected (fc uses in/out channels as features)
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)  # (k_h, k_w)
    stride: int = 1
    padding: int = 0
    bias: bool = False

    @property
    def has_weights(self) -> bool:
        return self.kind in (CONV, FC)


@dataclass
class NetworkGraph:
    """Validated layer DAG with per-layer shape bookkeeping.

    ``channels[id]`` is the output channel count, ``spatial[id]`` the output
    (H, W) or ``None`` once pooled to a vector, ``downsample_exp[id]`` the
    number of stride-2 operations on the path from the input and
    ``downsample[id]`` the ratio of output pixels to input-image pixels.
    """

    name: str
    layers: tuple[LayerSpec, ...]
    channels: dict[str, int] = field(default_factory=dict)
    spatial: dict[str, tuple[int, int] | None] = field(default_factory=dict)
    downsample_exp: dict[str, int] = field(default_factory=dict)
    downsample: dict[str, float] = field(default_factory=dict)
    consumers: dict[str, tuple[str, ...]] = field(default_factory=dict)
    index: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, layer_id: str) -> LayerSpec:
        return self.layers[self.index[layer_id]]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.index

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def input_layer(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind == INPUT)

    @property
    def output_layer(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind == OUTPUT)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        l = self.input_layer
        return (l.channels, l.height, l.width)

    @property
    def num_classes(self) -> int:
        return self.channels[self.output_layer.id]

    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == CONV]

    def weighted(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_weights]

    def with_layers(self, layers: Iterable[LayerSpec], name: str | None = None) -> "NetworkGraph":
        return build_graph(list(layers), name or self.name)

    def with_input_size(self, height: int, width: int) -> "NetworkGraph":
        layers = [replace(l, height=height, width=width) if l.kind == INPUT else l for l in self.layers]
        return build_graph(layers, self.name)


# -- parsing -----------------------------------------------------------------

def _as_int(doc: dict, key: str, layer_id: str, default: int | None = None) -> int:
    if key not in doc:
        if default is None:
            raise IRError(f"missing field {key!r}", layer_id)
        return default
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise IRError(f"field {key!r} must be an integer, got {value!r}", layer_id)
    return value


def _layer_from_doc(doc: dict) -> LayerSpec:
    if not isinstance(doc, dict) or "id" not in doc:
        raise IRError(f"layer entry without id: {doc!r}")
    lid = str(doc["id"])
    kind = doc.get("kind")
    if kind not in KINDS:
        raise IRError(f"unknown layer kind {kind!r}", lid)
    inputs = doc.get("inputs", [])
    if isinstance(inputs, str) or not isinstance(inputs, list):
        raise IRError("inputs must be a list of layer ids", lid)
    spec = LayerSpec(id=lid, kind=kind, inputs=tuple(str(i) for i in inputs))
    if kind == INPUT:
        return replace(
            spec,
            channels=_as_int(doc, "channels", lid),
            height=_as_int(doc, "height", lid),
            width=_as_int(doc, "width", lid),
        )
    if kind == CONV:
        kernel = doc.get("kernel", [1, 1])
        if isinstance(kernel, int):
            kernel = [kernel, kernel]
        if len(kernel) != 2 or not all(isinstance(k, int) and not isinstance(k, bool) for k in kernel):
            raise IRError(f"kernel must be [k_h, k_w], got {kernel!r}", lid)
        kh, kw = kernel
        return replace(
            spec,
            in_channels=_as_int(doc, "in_channels", lid),
            out_channels=_as_int(doc, "out_channels", lid),
            kernel=(kh, kw),
            stride=_as_int(doc, "stride", lid, 1),
            padding=_as_int(doc, "padding", lid, (max(kh, kw) - 1) // 2),
            bias=bool(doc.get("bias", False)),
        )
    if kind == FC:
        return replace(
            spec,
            in_channels=_as_int(doc, "in_features", lid),
            out_channels=_as_int(doc, "out_features", lid),
            bias=bool(doc.get("bias", True)),
        )
    if kind == MAXPOOL:
        k = _as_int(doc, "kernel", lid)
        return replace(
            spec,
            kernel=(k, k),
            stride=_as_int(doc, "stride", lid, k),
            padding=_as_int(doc, "padding", lid, 0),
        )
    return spec


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _toposort(layers: list[LayerSpec]) -> list[LayerSpec]:
    by_id: dict[str, LayerSpec] = {}
    for l in layers:
        if l.id in by_id:
            raise IRError("duplicate layer id", l.id)
        by_id[l.id] = l
    for l in layers:
        for src in l.inputs:
            if src not in by_id:
                raise IRError(f"dangling input reference {src!r}", l.id)
    pending = {l.id: len(l.inputs) for l in layers}
    users: dict[str, list[str]] = {l.id: [] for l in layers}
    for l in layers:
        for src in l.inputs:
            users[src].append(l.id)
    # Kahn's algorithm, stable with respect to document order.
    order_pos = {l.id: i for i, l in enumerate(layers)}
    ready = sorted((lid for lid, n in pending.items() if n == 0), key=order_pos.__getitem__)
    out: list[LayerSpec] = []
    while ready:
        lid = ready.pop(0)
        out.append(by_id[lid])
        newly = []
        for u in users[lid]:
            pending[u] -= 1
            if pending[u] == 0:
                newly.append(u)
        ready = sorted(ready + newly, key=order_pos.__getitem__)
    if len(out) != len(layers):
        stuck = sorted((lid for lid, n in pending.items() if n > 0), key=order_pos.__getitem__)
        raise IRError("cycle detected", stuck[0])
    return out


def build_graph(layers: list[LayerSpec], name: str = "network") -> NetworkGraph:
    """Validate ``layers`` and compute topological order and shapes."""
    ordered = _toposort(layers)
    kinds = [l.kind for l in ordered]
    if kinds.count(INPUT) != 1:
        raise IRError(f"expected exactly one input layer, found {kinds.count(INPUT)}")
    if kinds.count(OUTPUT) != 1:
        raise IRError(f"expected exactly one output layer, found {kinds.count(OUTPUT)}")

    g = NetworkGraph(name=name, layers=tuple(ordered))
    g.index = {l.id: i for i, l in enumerate(ordered)}
    users: dict[str, list[str]] = {l.id: [] for l in ordered}
    for l in ordered:
        for src in l.inputs:
            users[src].append(l.id)
    g.consumers = {k: tuple(v) for k, v in users.items()}

    inp = g.input_layer
    if inp.channels < 1 or inp.height < 1 or inp.width < 1:
        raise IRError("input channels and size must be >= 1", inp.id)
    in_pixels = inp.height * inp.width

    for l in ordered:
        n_in = len(l.inputs)
        if l.kind == INPUT:
            if n_in:
                raise IRError("input layer takes no inputs", l.id)
            g.channels[l.id] = l.channels
            g.spatial[l.id] = (l.height, l.width)
            g.downsample_exp[l.id] = 0
        elif l.kind == ADD:
            if n_in < 2:
                raise IRError("add needs at least 2 inputs", l.id)
            chans = {g.channels[s] for s in l.inputs}
            if len(chans) != 1:
                detail = ", ".join(f"{s}={g.channels[s]}" for s in l.inputs)
                raise IRError(f"channel mismatch between add inputs ({detail})", l.id)
            sizes = {g.spatial[s] for s in l.inputs}
            if len(sizes) != 1:
                raise IRError(f"spatial size mismatch between add inputs {sorted(map(str, sizes))}", l.id)
            exps = {g.downsample_exp[s] for s in l.inputs}
            if len(exps) != 1:
                raise IRError("add inputs differ in downsample factor", l.id)
            g.channels[l.id] = chans.pop()
            g.spatial[l.id] = sizes.pop()
            g.downsample_exp[l.id] = exps.pop()
        else:
            if n_in != 1:
                raise IRError(f"{l.kind} takes exactly one input, got {n_in}", l.id)
            src = l.inputs[0]
            c, hw, s = g.channels[src], g.spatial[src], g.downsample_exp[src]
            if l.kind == CONV:
                if hw is None:
                    raise IRError(f"conv input {src!r} is not spatial", l.id)
                if c != l.in_channels:
                    raise IRError(
                        f"channel mismatch: declares in_channels={l.in_channels} "
                        f"but {src!r} outputs {c}", l.id)
                if l.stride not in (1, 2):
                    raise IRError(f"stride must be 1 or 2, got {l.stride}", l.id)
                if min(l.kernel) < 1 or l.padding < 0:
                    raise IRError("kernel must be >= 1 and padding >= 0", l.id)
                if l.out_channels < 0:
                    raise IRError("out_channels must be >= 0", l.id)
                ho = _conv_out(hw[0], l.kernel[0], l.stride, l.padding)
                wo = _conv_out(hw[1], l.kernel[1], l.stride, l.padding)
                if ho < 1 or wo < 1:
                    raise IRError(f"output size {ho}x{wo} is empty", l.id)
                g.channels[l.id] = l.out_channels
                g.spatial[l.id] = (ho, wo)
                g.downsample_exp[l.id] = s + (l.stride == 2)
            elif l.kind == FC:
                if hw is not None:
                    raise IRError(f"fully-connected input {src!r} is spatial; add a global-avg-pool", l.id)
                if c != l.in_channels:
                    raise IRError(
                        f"channel mismatch: declares in_features={l.in_channels} "
                        f"but {src!r} outputs {c}", l.id)
                if l.out_channels < 0:
                    raise IRError("out_features must be >= 0", l.id)
                g.channels[l.id] = l.out_channels
                g.spatial[l.id] = None
                g.downsample_exp[l.id] = s
            elif l.kind == MAXPOOL:
                if hw is None:
                    raise IRError("max-pool input is not spatial", l.id)
                if l.stride not in (1, 2):
                    raise IRError(f"stride must be 1 or 2, got {l.stride}", l.id)
                k = l.kernel[0]
                if k < 1 or l.padding < 0 or 2 * l.padding > k:
                    raise IRError("max-pool needs kernel >= 1 and padding <= kernel/2", l.id)
                g.channels[l.id] = c
                g.spatial[l.id] = (_conv_out(hw[0], k, l.stride, l.padding),
                                   _conv_out(hw[1], k, l.stride, l.padding))
                g.downsample_exp[l.id] = s + (l.stride == 2)
            elif l.kind == GAP:
                if hw is None:
                    raise IRError("global-avg-pool input is not spatial", l.id)
                g.channels[l.id] = c
                g.spatial[l.id] = None
                g.downsample_exp[l.id] = s
            elif l.kind == BATCHNORM:
                if hw is None:
                    raise IRError("batchnorm input must be spatial", l.id)
                g.channels[l.id] = c
                g.spatial[l.id] = hw
                g.downsample_exp[l.id] = s
            elif l.kind in (RELU, OUTPUT):
                g.channels[l.id] = c
                g.spatial[l.id] = hw
                g.downsample_exp[l.id] = s
        hw = g.spatial[l.id]
        g.downsample[l.id] = (hw[0] * hw[1] if hw is not None else 1) / in_pixels

    for l in ordered:
        if l.kind != OUTPUT and not g.consumers[l.id]:
            raise IRError("layer output is never used", l.id)
    return g


def parse_network(source: str | bytes | dict | Path) -> NetworkGraph:
    """Parse a JSON network description (text, mapping, or file path)."""
    if isinstance(source, Path):
        source = source.read_text()
    if isinstance(source, (str, bytes)):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise IRError(f"not valid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise IRError("document must be an object with a 'layers' list")
    layers = [_layer_from_doc(d) for d in doc["layers"]]
    return build_graph(layers, str(doc.get("name", "network")))


def load_network(path: str | Path) -> NetworkGraph:
    return parse_network(Path(path))


def layer_to_doc(l: LayerSpec) -> dict[str, Any]:
    doc: dict[str, Any] = {"id": l.id, "kind": l.kind, "inputs": list(l.inputs)}
    if l.kind == INPUT:
        doc.update(channels=l.channels, height=l.height, width=l.width)
    elif l.kind == CONV:
        doc.update(in_channels=l.in_channels, out_channels=l.out_channels,
                   kernel=list(l.kernel), stride=l.stride, padding=l.padding, bias=l.bias)
    elif l.kind == FC:
        doc.update(in_features=l.in_channels, out_features=l.out_channels, bias=l.bias)
    elif l.kind == MAXPOOL:
        doc.update(kernel=l.kernel[0], stride=l.stride, padding=l.padding)
    return doc


def to_doc(g: NetworkGraph) -> dict[str, Any]:
    return {"name": g.name, "layers": [layer_to_doc(l) for l in g.layers]}


def dumps(g: NetworkGraph) -> str:
    """Deterministic JSON text for ``g`` (round-trips through parse_network)."""
    return json.dumps(to_doc(g), indent=1, sort_keys=True) + "\n"


# -- counters ----------------------------------------------------------------

def count_params(g: NetworkGraph) -> int:
    """Weights of convs (k_h*k_w*c_in*c_out) and fc layers (in*out); no biases."""
    total = 0
    for l in g.weighted():
        kh, kw = l.kernel if l.kind == CONV else (1, 1)
        total += kh * kw * l.in_channels * l.out_channels
    return total


def count_flops(g: NetworkGraph, input_hw: tuple[int, int] | None = None) -> int:
    """Multiply-accumulate count of one forward pass for a single image."""
    if input_hw is not None and tuple(input_hw) != g.input_shape[1:]:
        g = g.with_input_size(*input_hw)
    total = 0
    for l in g.weighted():
        if l.kind == CONV:
            ho, wo = g.spatial[l.id]
            total += l.kernel[0] * l.kernel[1] * l.in_channels * l.out_channels * ho * wo
        else:
            total += l.in_channels * l.out_channels
    return total
