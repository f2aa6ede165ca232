"""Model family descriptions: immutable graphs of conv-bn-relu blocks.

A graph is data only (no arrays): an ordered tuple of layer specs plus the
input shape and class count. Weight allocation, initialization and execution
live elsewhere and all walk the same ``tensor_specs`` enumeration, so the
set of tensors belonging to a graph is defined in exactly one place.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

CONV_BN_RELU = "conv_bn_relu"
MAXPOOL = "maxpool"
GLOBAL_AVGPOOL = "global_avgpool"
DENSE_HEAD = "dense_head"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel_size: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (H, W, C)
    num_classes: int
    variant_tag: str


# kernel size, conv widths, indices of convs followed by a 3x3/2 maxpool
_VARIANTS = {
    "cbr-large-t": (7, (32, 64, 128, 256, 512), (0, 1, 2, 3)),
    "cbr-large-w": (7, (64, 128, 256, 512), (0, 1, 2, 3)),
    "cbr-small": (7, (32, 64, 128, 256), (0, 1, 2, 3)),
    "cbr-tiny": (5, (64, 128, 256, 512), (0, 1, 2, 3)),
    # quarter-width desk variants of Small/Tiny for 64x64 inputs
    "cbr-small-desk": (7, (8, 16, 32, 64), (0, 1, 2, 3)),
    "cbr-tiny-desk": (5, (16, 32, 64, 128), (0, 1, 2, 3)),
}

_ALIASES = {
    "larget": "cbr-large-t",
    "largew": "cbr-large-w",
    "small": "cbr-small",
    "tiny": "cbr-tiny",
    "smalldesk": "cbr-small-desk",
    "tinydesk": "cbr-tiny-desk",
}


def canonical_variant(name: str) -> str:
    key = "".join(ch for ch in name.lower() if ch.isalnum())
    key = key.removeprefix("cbr")
    if key not in _ALIASES:
        raise ValueError(f"unknown model variant {name!r}; known: {sorted(_ALIASES)}")
    return _ALIASES[key]


def build_cbr(variant: str, input_shape: tuple[int, int, int], num_classes: int) -> ModelGraph:
    """Build one of the fixed CBR variants for the given input and classes."""
    tag = canonical_variant(variant)
    kernel, widths, pooled = _VARIANTS[tag]
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if len(input_shape) != 3 or any(int(s) < 1 for s in input_shape):
        raise ValueError(f"input_shape must be (H, W, C), got {input_shape}")
    layers = []
    for i, width in enumerate(widths):
        layers.append(LayerSpec(CONV_BN_RELU, f"conv{i + 1}", kernel, width))
        if i in pooled:
            layers.append(LayerSpec(MAXPOOL, f"pool{i + 1}"))
    layers.append(LayerSpec(GLOBAL_AVGPOOL, "gap"))
    layers.append(LayerSpec(DENSE_HEAD, "head", out_channels=num_classes))
    graph = ModelGraph(
        layers=tuple(layers),
        input_shape=tuple(int(s) for s in input_shape),
        num_classes=int(num_classes),
        variant_tag=tag,
    )
    validate_graph(graph)
    return graph


def layer_shapes(graph: ModelGraph) -> list[tuple[str, tuple[int, int, int]]]:
    """Post-layer activation shapes (H, W, C); the head reports (1, 1, K)."""
    h, w, c = graph.input_shape
    out = []
    for layer in graph.layers:
        if layer.kind == CONV_BN_RELU:
            c = layer.out_channels
        elif layer.kind == MAXPOOL:
            if h < 3 or w < 3:
                raise ValueError(
                    f"{graph.variant_tag}: spatial dims {h}x{w} before {layer.name} "
                    "are below the 3x3 pool window; input too small"
                )
            h, w = (h + 1) // 2, (w + 1) // 2
        elif layer.kind == GLOBAL_AVGPOOL:
            if h < 3 or w < 3:
                raise ValueError(
                    f"{graph.variant_tag}: final feature map {h}x{w} smaller than 3x3"
                )
            h, w = 1, 1
        elif layer.kind == DENSE_HEAD:
            c = layer.out_channels
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        out.append((layer.name, (h, w, c)))
    return out


def validate_graph(graph: ModelGraph) -> None:
    names = [layer.name for layer in graph.layers]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique")
    for layer in graph.layers:
        if layer.kind == CONV_BN_RELU:
            if layer.kernel_size % 2 == 0 or layer.kernel_size < 1:
                raise ValueError(f"{layer.name}: kernel size must be odd, got {layer.kernel_size}")
            if layer.out_channels < 1:
                raise ValueError(f"{layer.name}: out_channels must be >= 1")
    if graph.layers[-1].kind != DENSE_HEAD:
        raise ValueError("graph must end in a dense head")
    layer_shapes(graph)  # walks pool constraints


def conv_layer_names(graph: ModelGraph) -> list[str]:
    return [l.name for l in graph.layers if l.kind == CONV_BN_RELU]


def tensor_specs(graph: ModelGraph) -> list[tuple[str, tuple[int, ...], str]]:
    """Canonical (name, shape, role) enumeration in layer order.

    Roles: kernel, gamma, beta, moving_mean, moving_var, dense_weight,
    dense_bias. Conv layers carry no bias (batch norm beta follows).
    """
    specs = []
    c_in = graph.input_shape[2]
    for layer in graph.layers:
        if layer.kind == CONV_BN_RELU:
            k, c_out = layer.kernel_size, layer.out_channels
            specs.append((f"{layer.name}/kernel", (k, k, c_in, c_out), "kernel"))
            specs.append((f"{layer.name}/gamma", (c_out,), "gamma"))
            specs.append((f"{layer.name}/beta", (c_out,), "beta"))
            specs.append((f"{layer.name}/moving_mean", (c_out,), "moving_mean"))
            specs.append((f"{layer.name}/moving_var", (c_out,), "moving_var"))
            c_in = c_out
        elif layer.kind == DENSE_HEAD:
            specs.append((f"{layer.name}/weight", (c_in, layer.out_channels), "dense_weight"))
            specs.append((f"{layer.name}/bias", (layer.out_channels,), "dense_bias"))
    return specs


def param_count(graph: ModelGraph) -> int:
    """Trainable parameters; moving statistics are state, not parameters."""
    total = 0
    for _, shape, role in tensor_specs(graph):
        if role in ("moving_mean", "moving_var"):
            continue
        total += math.prod(shape)
    return total


def slim(graph: ModelGraph, from_layer: str, width_factor: float = 0.5) -> ModelGraph:
    """Halve (by default) every conv width at and after ``from_layer``.

    The head keeps its class count; its input width follows the last conv.
    """
    if not 0.0 < width_factor <= 1.0:
        raise ValueError(f"width_factor must be in (0, 1], got {width_factor}")
    names = [l.name for l in graph.layers]
    if from_layer not in names:
        raise ValueError(f"unknown layer {from_layer!r}")
    start = names.index(from_layer)
    layers = []
    for i, layer in enumerate(graph.layers):
        if layer.kind == CONV_BN_RELU and i >= start:
            width = max(1, int(layer.out_channels * width_factor))
            layers.append(replace(layer, out_channels=width))
        else:
            layers.append(layer)
    slimmed = ModelGraph(
        layers=tuple(layers),
        input_shape=graph.input_shape,
        num_classes=graph.num_classes,
        variant_tag=f"{graph.variant_tag}-slim-{from_layer}-{width_factor:g}",
    )
    validate_graph(slimmed)
    return slimmed


def graph_to_json(graph: ModelGraph) -> str:
    return json.dumps(
        {
            "layers": [
                [l.kind, l.name, l.kernel_size, l.out_channels] for l in graph.layers
            ],
            "input_shape": list(graph.input_shape),
            "num_classes": graph.num_classes,
            "variant_tag": graph.variant_tag,
        }
    )


def graph_from_json(text: str) -> ModelGraph:
    obj = json.loads(text)
    graph = ModelGraph(
        layers=tuple(LayerSpec(k, n, int(ks), int(oc)) for k, n, ks, oc in obj["layers"]),
        input_shape=tuple(int(s) for s in obj["input_shape"]),
        num_classes=int(obj["num_classes"]),
        variant_tag=obj["variant_tag"],
    )
    validate_graph(graph)
    return graph


def graph_fingerprint(graph: ModelGraph) -> str:
    """Digest of the structure only; the variant tag is a label, not shape."""
    payload = json.dumps(
        {
            "layers": [
                [l.kind, l.name, l.kernel_size, l.out_channels] for l in graph.layers
            ],
            "input_shape": list(graph.input_shape),
            "num_classes": graph.num_classes,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
