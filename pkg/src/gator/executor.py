"""Reference executor: numpy forward pass and reverse-mode backward pass.

Weights live in a flat ``dict`` keyed ``"<layer>.<param>"``:

* conv: ``weight`` [c_out, c_in, k_h, k_w] (+ ``bias`` [c_out])
* fully-connected: ``weight`` [out, in] (+ ``bias`` [out])
* batchnorm: ``scale``, ``shift``, ``running_mean``, ``running_var`` [c]

Channel masks can be attached to layer outputs (``site_masks``); a mask is
either [C] (shared by the batch) or [N, C] (one row per sample). The
backward pass returns the gradient with respect to each mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gator import kernels
from gator.ir import ADD, BATCHNORM, CONV, FC, GAP, INPUT, MAXPOOL, OUTPUT, RELU, NetworkGraph

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
TRAINABLE = ("weight", "bias", "scale", "shift")


def init_weights(g: NetworkGraph, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal convs, 1/sqrt(fan_in) fc, identity batchnorm."""
    w: dict[str, np.ndarray] = {}
    for l in g.layers:
        if l.kind == CONV:
            fan_in = max(1, l.in_channels * l.kernel[0] * l.kernel[1])
            shape = (l.out_channels, l.in_channels, *l.kernel)
            w[f"{l.id}.weight"] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if l.bias:
                w[f"{l.id}.bias"] = np.zeros(l.out_channels)
        elif l.kind == FC:
            fan_in = max(1, l.in_channels)
            w[f"{l.id}.weight"] = rng.standard_normal((l.out_channels, l.in_channels)) / np.sqrt(fan_in)
            if l.bias:
                w[f"{l.id}.bias"] = np.zeros(l.out_channels)
        elif l.kind == BATCHNORM:
            c = g.channels[l.id]
            w[f"{l.id}.scale"] = np.ones(c)
            w[f"{l.id}.shift"] = np.zeros(c)
            w[f"{l.id}.running_mean"] = np.zeros(c)
            w[f"{l.id}.running_var"] = np.ones(c)
    return w


def weight_shapes(g: NetworkGraph) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for l in g.layers:
        if l.kind == CONV:
            shapes[f"{l.id}.weight"] = (l.out_channels, l.in_channels, *l.kernel)
        elif l.kind == FC:
            shapes[f"{l.id}.weight"] = (l.out_channels, l.in_channels)
        elif l.kind == BATCHNORM:
            c = g.channels[l.id]
            for p in ("scale", "shift", "running_mean", "running_var"):
                shapes[f"{l.id}.{p}"] = (c,)
        if l.has_weights and l.bias:
            shapes[f"{l.id}.bias"] = (l.out_channels,)
    return shapes


def check_weights(g: NetworkGraph, w: dict[str, np.ndarray]) -> None:
    shapes = weight_shapes(g)
    missing = sorted(set(shapes) - set(w))
    extra = sorted(set(w) - set(shapes))
    if missing or extra:
        raise ValueError(f"weight store does not match graph (missing={missing[:5]}, unexpected={extra[:5]})")
    for name, shape in shapes.items():
        if tuple(w[name].shape) != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {tuple(w[name].shape)}")


def trainable_names(w: dict[str, np.ndarray]) -> list[str]:
    return [k for k in w if k.rsplit(".", 1)[1] in TRAINABLE]


@dataclass
class Trace:
    """Per-layer values retained by a recording forward pass."""

    mode: str
    acts: dict[str, np.ndarray] = field(default_factory=dict)
    cache: dict[str, tuple] = field(default_factory=dict)
    pre_mask: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)


def _expand(mask: np.ndarray, ndim: int) -> np.ndarray:
    m = mask if mask.ndim == 2 else mask[None, :]
    return m.reshape(m.shape + (1,) * (ndim - 2))


def _conv_forward(l, w, x):
    kh, kw = l.kernel
    n, c, h, wd = x.shape
    cols = kernels.im2col(x, kh, kw, l.stride, l.padding)
    wm = w[f"{l.id}.weight"].reshape(l.out_channels, l.in_channels * l.kernel[0] * l.kernel[1])
    ho = (h + 2 * l.padding - kh) // l.stride + 1
    wo = (wd + 2 * l.padding - kw) // l.stride + 1
    out = (wm @ cols).reshape(l.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if l.bias:
        out = out + w[f"{l.id}.bias"][None, :, None, None]
    return np.ascontiguousarray(out), cols


def _maxpool_forward(l, x):
    k = l.kernel[0]
    n, c, h, wd = x.shape
    ho = (h + 2 * l.padding - k) // l.stride + 1
    wo = (wd + 2 * l.padding - k) // l.stride + 1
    cols = kernels.im2col(x, k, k, l.stride, l.padding, -np.inf).reshape(c, k * k, n * ho * wo)
    arg = cols.argmax(axis=1)
    out = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :]
    return np.ascontiguousarray(out.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)), arg


def forward(
    g: NetworkGraph,
    w: dict[str, np.ndarray],
    x: np.ndarray,
    mode: str = "eval",
    site_masks: dict[str, np.ndarray] | None = None,
    record: bool = False,
    update_stats: bool = True,
    resume: tuple[Trace, int] | None = None,
):
    """Run the network on ``x`` [N, C, H, W]; returns logits (and a Trace if ``record``).

    ``mode="train"`` normalizes with batch statistics and, when
    ``update_stats``, updates the running statistics in ``w``.
    ``resume=(trace, i)`` restarts from layer index ``i`` reusing the
    recorded activations of earlier layers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    site_masks = site_masks or {}
    if resume is None:
        expected = g.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"input batch shape {x.shape} does not match network input [N, {expected}]")
        start = 0
        trace = Trace(mode=mode)
    else:
        old, start = resume
        trace = Trace(mode=mode, masks=old.masks)
        for l in g.layers[:start]:
            trace.acts[l.id] = old.acts[l.id]
            if l.id in old.cache:
                trace.cache[l.id] = old.cache[l.id]
            if l.id in old.pre_mask:
                trace.pre_mask[l.id] = old.pre_mask[l.id]
    acts = trace.acts
    remaining = None
    if not record:
        remaining = {l.id: len(g.consumers[l.id]) for l in g.layers}

    for l in g.layers[start:]:
        ins = [acts[s] for s in l.inputs]
        cache: tuple = ()
        if l.kind == INPUT:
            out = x
        elif l.kind == CONV:
            out, cols = _conv_forward(l, w, ins[0])
            cache = (cols,) if record else ()
        elif l.kind == FC:
            out = ins[0] @ w[f"{l.id}.weight"].T
            if l.bias:
                out = out + w[f"{l.id}.bias"]
        elif l.kind == BATCHNORM:
            xin = ins[0]
            scale, shift = w[f"{l.id}.scale"], w[f"{l.id}.shift"]
            if mode == "train":
                mean = xin.mean(axis=(0, 2, 3))
                var = xin.var(axis=(0, 2, 3))
                if update_stats:
                    m = xin.shape[0] * xin.shape[2] * xin.shape[3]
                    unbiased = var * m / max(m - 1, 1)
                    rm, rv = f"{l.id}.running_mean", f"{l.id}.running_var"
                    w[rm] = (1 - BN_MOMENTUM) * w[rm] + BN_MOMENTUM * mean
                    w[rv] = (1 - BN_MOMENTUM) * w[rv] + BN_MOMENTUM * unbiased
            else:
                mean, var = w[f"{l.id}.running_mean"], w[f"{l.id}.running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (xin - mean[None, :, None, None]) * inv_std[None, :, None, None]
            out = xhat * scale[None, :, None, None] + shift[None, :, None, None]
            cache = (xhat, inv_std) if record else ()
        elif l.kind == RELU:
            out = np.maximum(ins[0], 0.0)
        elif l.kind == ADD:
            out = ins[0]
            for other in ins[1:]:
                out = out + other
        elif l.kind == GAP:
            out = ins[0].mean(axis=(2, 3))
        elif l.kind == MAXPOOL:
            out, arg = _maxpool_forward(l, ins[0])
            cache = (arg,) if record else ()
        elif l.kind == OUTPUT:
            out = ins[0]
        else:  # pragma: no cover - parse_network rejects unknown kinds
            raise ValueError(f"unsupported layer kind {l.kind}")

        mask = site_masks.get(l.id)
        if mask is not None:
            if mask.shape[-1] != out.shape[1] or (mask.ndim == 2 and mask.shape[0] != out.shape[0]):
                raise ValueError(f"mask for {l.id} has shape {mask.shape}, activations {out.shape}")
            if record:
                trace.pre_mask[l.id] = out
                trace.masks[l.id] = mask
            out = out * _expand(mask, out.ndim)
        acts[l.id] = out
        if record:
            trace.cache[l.id] = cache
        else:
            for s in l.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s != l.id:
                    del acts[s]

    logits = acts[g.output_layer.id]
    return (logits, trace) if record else logits


def backward(g: NetworkGraph, w: dict[str, np.ndarray], trace: Trace, dlogits: np.ndarray):
    """Reverse pass over a recorded forward.

    Returns ``(grads, mask_grads)``: gradients for every trainable weight and
    for every attached mask (same shape as the mask).
    """
    grads: dict[str, np.ndarray] = {}
    mask_grads: dict[str, np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {g.output_layer.id: np.asarray(dlogits, dtype=np.float64)}
    acts = trace.acts

    def send(src: str, grad: np.ndarray) -> None:
        if src in upstream:
            upstream[src] = upstream[src] + grad
        else:
            upstream[src] = grad

    for l in reversed(g.layers):
        dout = upstream.pop(l.id, None)
        if dout is None:
            dout = np.zeros_like(acts[l.id])
        if l.id in trace.masks:
            mask = trace.masks[l.id]
            pre = trace.pre_mask[l.id]
            prod = dout * pre
            if prod.ndim == 4:
                prod = prod.sum(axis=(2, 3))
            mask_grads[l.id] = prod if mask.ndim == 2 else prod.sum(axis=0)
            dout = dout * _expand(mask, dout.ndim)
        cache = trace.cache.get(l.id, ())
        if l.kind == INPUT:
            continue
        if l.kind == CONV:
            xin = acts[l.inputs[0]]
            (cols,) = cache
            n, c, h, wd = xin.shape
            d2 = dout.transpose(1, 0, 2, 3).reshape(l.out_channels, dout.shape[0] * dout.shape[2] * dout.shape[3])
            wm = w[f"{l.id}.weight"].reshape(l.out_channels, l.in_channels * l.kernel[0] * l.kernel[1])
            grads[f"{l.id}.weight"] = (d2 @ cols.T).reshape(w[f"{l.id}.weight"].shape)
            if l.bias:
                grads[f"{l.id}.bias"] = dout.sum(axis=(0, 2, 3))
            send(l.inputs[0], kernels.col2im(wm.T @ d2, n, c, h, wd, *l.kernel, l.stride, l.padding))
        elif l.kind == FC:
            xin = acts[l.inputs[0]]
            grads[f"{l.id}.weight"] = dout.T @ xin
            if l.bias:
                grads[f"{l.id}.bias"] = dout.sum(axis=0)
            send(l.inputs[0], dout @ w[f"{l.id}.weight"])
        elif l.kind == BATCHNORM:
            xhat, inv_std = cache
            scale = w[f"{l.id}.scale"]
            grads[f"{l.id}.scale"] = (dout * xhat).sum(axis=(0, 2, 3))
            grads[f"{l.id}.shift"] = dout.sum(axis=(0, 2, 3))
            dxhat = dout * scale[None, :, None, None]
            if trace.mode == "train":
                m = dout.shape[0] * dout.shape[2] * dout.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None, None]
            send(l.inputs[0], dx)
        elif l.kind == RELU:
            send(l.inputs[0], dout * (acts[l.inputs[0]] > 0))
        elif l.kind == ADD:
            for s in l.inputs:
                send(s, dout)
        elif l.kind == GAP:
            xin = acts[l.inputs[0]]
            hw = xin.shape[2] * xin.shape[3]
            send(l.inputs[0], np.broadcast_to(dout[:, :, None, None] / hw, xin.shape).copy())
        elif l.kind == MAXPOOL:
            xin = acts[l.inputs[0]]
            (arg,) = cache
            n, c, h, wd = xin.shape
            k = l.kernel[0]
            dcols = np.zeros((c, k * k, arg.shape[-1]))
            d2 = dout.transpose(1, 0, 2, 3).reshape(c, 1, -1)
            np.put_along_axis(dcols, arg[:, None, :], d2, axis=1)
            send(l.inputs[0], kernels.col2im(dcols.reshape(c * k * k, -1), n, c, h, wd,
                                             k, k, l.stride, l.padding))
        elif l.kind == OUTPUT:
            send(l.inputs[0], dout)
    return grads, mask_grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def predict(g, w, x, site_masks=None, batch_size: int = 256) -> np.ndarray:
    preds = [forward(g, w, x[i:i + batch_size], "eval", site_masks=site_masks).argmax(axis=1)
             for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)
