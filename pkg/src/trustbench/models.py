"""Builders for the two classifier architectures.

Both take 1024x2x1 I/Q frames and emit 7 class probabilities.  The
convolutional classifier is pinned to its published 555,287-parameter
layout; the residual classifier follows the published unit/skip counts
with width and kernel frozen from a constrained search (see
scripts/search_resnet_config.py).
"""

from __future__ import annotations

from .engine import LayerSpec, ModelGraph, count_params, infer_shapes

INPUT_SHAPE = (1024, 2, 1)
N_CLASSES = 7

CNN_PARAM_COUNT = 555_287

# Residual config frozen from the constrained search over
# filters in 16..48, kernel in {3,5,7}x1: (19, 7x1) lands at 159,549,
# the closest achievable to the reported 159,015 (delta +534).
RESNET_FILTERS = 19
RESNET_KERNEL = (7, 1)
RESNET_PARAM_COUNT = 159_549
RESNET_REPORTED_PARAM_COUNT = 159_015


def _dense_head(layers: list, groups=("D1", "D2", "D3")) -> None:
    layers += [
        LayerSpec("Flatten", "flatten"),
        LayerSpec("Dense", "dense1", units=128, group=groups[0]),
        LayerSpec("SeLU", "selu1"),
        LayerSpec("AlphaDropout", "drop1", rate=0.1),
        LayerSpec("Dense", "dense2", units=128, group=groups[1]),
        LayerSpec("SeLU", "selu2"),
        LayerSpec("AlphaDropout", "drop2", rate=0.1),
        LayerSpec("Dense", "dense3", units=N_CLASSES, group=groups[2]),
        LayerSpec("Softmax", "softmax"),
    ]


def build_cnn() -> ModelGraph:
    """Three conv/BN/ReLU/pool stages (64, 32, 16 filters, 5x1 kernels)
    followed by a 128/128/7 dense head with SeLU and alpha dropout."""
    layers = []
    for i, filters in enumerate((64, 32, 16), start=1):
        group = f"C{i}"
        layers += [
            LayerSpec("Conv2D", f"conv{i}", filters=filters, kernel=(5, 1), group=group),
            LayerSpec("BatchNorm", f"bn{i}", group=group),
            LayerSpec("ReLU", f"relu{i}"),
            LayerSpec("MaxPool", f"pool{i}", pool=(2, 1)),
        ]
    _dense_head(layers)
    return ModelGraph(tuple(layers), INPUT_SHAPE, N_CLASSES)


def build_resnet() -> ModelGraph:
    """Six residual stacks, each: 1x1 width-unifying conv + BN, two
    residual units (conv/BN/ReLU, conv/BN, add skip, ReLU), then a 2x1
    max pool; finished by the same dense head as the conv classifier."""
    f = RESNET_FILTERS
    k = RESNET_KERNEL
    layers = []
    for s in range(1, 7):
        def rname(tag):
            return f"s{s}_{tag}"

        layers += [
            LayerSpec("Conv2D", rname("in"), filters=f, kernel=(1, 1), group="CONV"),
            LayerSpec("BatchNorm", rname("in_bn"), group="CONV"),
        ]
        for u in (1, 2):
            entry = layers[-1].name
            layers += [
                LayerSpec("Conv2D", rname(f"u{u}_conv1"), filters=f, kernel=k, group="RES"),
                LayerSpec("BatchNorm", rname(f"u{u}_bn1"), group="RES"),
                LayerSpec("ReLU", rname(f"u{u}_relu1")),
                LayerSpec("Conv2D", rname(f"u{u}_conv2"), filters=f, kernel=k, group="RES"),
                LayerSpec("BatchNorm", rname(f"u{u}_bn2"), group="RES"),
                LayerSpec("ResidualAdd", rname(f"u{u}_add"), skip_from=entry),
                LayerSpec("ReLU", rname(f"u{u}_relu2")),
            ]
        layers.append(LayerSpec("MaxPool", rname("pool"), pool=(2, 1)))
    _dense_head(layers, groups=("DENSE", "DENSE", "DENSE"))
    return ModelGraph(tuple(layers), INPUT_SHAPE, N_CLASSES)


def build_model(name: str) -> ModelGraph:
    name = name.lower()
    if name == "cnn":
        return build_cnn()
    if name == "resnet":
        return build_resnet()
    raise ValueError(f"unknown model {name!r} (choose cnn or resnet)")


def table_rows(graph: ModelGraph) -> list:
    """Coarse layout rows (block label, output shape) for reporting.

    Conv/BN/activation runs collapse into one row; pooling, dense blocks
    and the softmax get their own rows, mirroring the usual layout tables.
    """
    shapes = infer_shapes(graph)
    rows = [("Input", graph.input_shape)]
    i = 0
    layers = graph.layers
    while i < len(layers):
        kind = layers[i].kind
        if kind == "Conv2D":
            j = i
            label = ["Conv2D"]
            while j + 1 < len(layers) and layers[j + 1].kind in ("BatchNorm", "ReLU"):
                j += 1
                label.append("BN" if layers[j].kind == "BatchNorm" else "ReLU")
            rows.append((" + ".join(label), shapes[j]))
            i = j + 1
        elif kind == "MaxPool":
            rows.append(("Max Pooling", shapes[i]))
            i += 1
        elif kind == "Dense":
            j = i
            label = "FC"
            if j + 1 < len(layers) and layers[j + 1].kind in ("SeLU", "Softmax"):
                j += 1
                label = f"FC/{layers[j].kind}"
            rows.append((label, shapes[j]))
            i = j + 1
        else:
            i += 1
    return rows


def resnet_param_report() -> dict:
    """Actual vs reported parameter count for the residual classifier."""
    actual = count_params(build_resnet())
    return {
        "actual": actual,
        "reported": RESNET_REPORTED_PARAM_COUNT,
        "delta": actual - RESNET_REPORTED_PARAM_COUNT,
        "filters": RESNET_FILTERS,
        "kernel": list(RESNET_KERNEL),
    }
