"""Dense-tensor engine for the layer catalog the two classifiers need.

A model is an ordered chain of layers with optional additive skip edges;
running the chain composes the per-layer operations into the classifier.
Parameters are stored as binary32 arrays; computation happens in a caller
chosen dtype (binary64 by default), so gradient checks can run at full
accumulation precision while large runs use binary32 for speed.

Every operation is pure: batch-norm running statistics are returned as
pending updates rather than written in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError
from .rng import substream

DEFAULT_DTYPE = np.float64

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

KINDS = (
    "Conv2D",
    "BatchNorm",
    "ReLU",
    "SeLU",
    "MaxPool",
    "Dense",
    "Softmax",
    "AlphaDropout",
    "ResidualAdd",
    "Flatten",
)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the chain; unused hyperparameters stay at defaults."""

    kind: str
    name: str
    filters: int = 0
    kernel: tuple = (1, 1)
    pool: tuple = (2, 1)
    units: int = 0
    rate: float = 0.1
    momentum: float = 0.9
    eps: float = 1e-5
    skip_from: str = ""
    group: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        object.__setattr__(self, "pool", tuple(int(v) for v in self.pool))

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["kernel"] = tuple(d.get("kernel", (1, 1)))
        d["pool"] = tuple(d.get("pool", (2, 1)))
        return cls(**d)


@dataclass(frozen=True)
class ModelGraph:
    """Layer chain with explicit skip edges and a fixed input shape."""

    layers: tuple
    input_shape: tuple
    n_classes: int = 7

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate layer names in graph")
        seen = set()
        for l in self.layers:
            if l.kind == "ResidualAdd":
                if l.skip_from not in seen:
                    raise ValidationError(
                        f"skip source {l.skip_from!r} of {l.name!r} does not "
                        "precede it"
                    )
            seen.add(l.name)

    def index_of(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [l.to_json_dict() for l in self.layers],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelGraph":
        return cls(
            layers=tuple(LayerSpec.from_json_dict(ld) for ld in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            n_classes=int(d["n_classes"]),
        )


def _same_pad(kernel):
    kh, kw = kernel
    return (kh - 1) // 2, (kw - 1) // 2


@lru_cache(maxsize=64)
def infer_shapes(graph: ModelGraph) -> tuple:
    """Per-layer output shapes (sample shapes, batch dim excluded)."""
    shapes = []
    by_name = {}
    cur = graph.input_shape
    for spec in graph.layers:
        k = spec.kind
        if k == "Conv2D":
            if len(cur) != 3:
                raise ShapeError(f"{spec.name}: Conv2D needs rank-3 input, got {cur}")
            cur = (cur[0], cur[1], spec.filters)
        elif k == "MaxPool":
            if len(cur) != 3:
                raise ShapeError(f"{spec.name}: MaxPool needs rank-3 input, got {cur}")
            ph, pw = spec.pool
            if cur[0] % ph or cur[1] % pw:
                raise ShapeError(
                    f"{spec.name}: pool {spec.pool} does not divide input {cur}"
                )
            cur = (cur[0] // ph, cur[1] // pw, cur[2])
        elif k in ("BatchNorm", "ReLU", "SeLU", "AlphaDropout"):
            pass
        elif k == "Flatten":
            cur = (int(np.prod(cur)),)
        elif k == "Dense":
            if len(cur) != 1:
                raise ShapeError(f"{spec.name}: Dense needs flat input, got {cur}")
            cur = (spec.units,)
        elif k == "Softmax":
            if len(cur) != 1:
                raise ShapeError(f"{spec.name}: Softmax needs flat input, got {cur}")
        elif k == "ResidualAdd":
            src = by_name[spec.skip_from]
            if src != cur:
                raise ShapeError(
                    f"{spec.name}: skip shape {src} != branch shape {cur}"
                )
        shapes.append(cur)
        by_name[spec.name] = cur
    if shapes and shapes[-1] != (graph.n_classes,):
        raise ShapeError(
            f"graph output shape {shapes[-1]} != ({graph.n_classes},)"
        )
    return tuple(shapes)


def param_shapes(graph: ModelGraph) -> dict:
    """Tensor shapes every parameterized layer must provide."""
    out = {}
    cur = graph.input_shape
    for spec, shape in zip(graph.layers, infer_shapes(graph)):
        if spec.kind == "Conv2D":
            kh, kw = spec.kernel
            out[spec.name] = {
                "w": (kh, kw, cur[-1], spec.filters),
                "b": (spec.filters,),
            }
        elif spec.kind == "Dense":
            out[spec.name] = {"w": (cur[0], spec.units), "b": (spec.units,)}
        elif spec.kind == "BatchNorm":
            c = cur[-1]
            out[spec.name] = {
                "gamma": (c,),
                "beta": (c,),
                "running_mean": (c,),
                "running_var": (c,),
            }
        cur = shape
    return out


# batch-norm running statistics are state, not trained weights
TRAINABLE = {
    "Conv2D": ("w", "b"),
    "Dense": ("w", "b"),
    "BatchNorm": ("gamma", "beta"),
}


def count_params(graph: ModelGraph) -> int:
    """Trainable scalar count (conv/dense weights+biases, BN gamma/beta)."""
    total = 0
    shapes = param_shapes(graph)
    for spec in graph.layers:
        for tname in TRAINABLE.get(spec.kind, ()):
            total += int(np.prod(shapes[spec.name][tname]))
    return total


def init_params(graph: ModelGraph, seed: int) -> dict:
    """He-normal weights, zero biases, identity batch norm; binary32."""
    params = {}
    for lname, tensors in param_shapes(graph).items():
        layer = {}
        for tname, shape in tensors.items():
            if tname == "w":
                fan_in = int(np.prod(shape[:-1]))
                rng = substream(seed, "init", lname, tname)
                layer[tname] = (
                    rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
                ).astype(np.float32)
            elif tname in ("b", "beta", "running_mean"):
                layer[tname] = np.zeros(shape, dtype=np.float32)
            else:  # gamma, running_var
                layer[tname] = np.ones(shape, dtype=np.float32)
        params[lname] = layer
    return params


def validate_params(graph: ModelGraph, params: dict) -> None:
    want = param_shapes(graph)
    for lname, tensors in want.items():
        if lname not in params:
            raise ShapeError(f"missing parameters for layer {lname!r}")
        for tname, shape in tensors.items():
            arr = params[lname].get(tname)
            if arr is None or tuple(arr.shape) != tuple(shape):
                got = None if arr is None else tuple(arr.shape)
                raise ShapeError(
                    f"{lname}.{tname}: expected shape {shape}, got {got}"
                )


def zero_grads(graph: ModelGraph) -> dict:
    return {
        lname: {
            t: np.zeros(s) for t, s in tensors.items() if not t.startswith("running")
        }
        for lname, tensors in param_shapes(graph).items()
    }


# ---------------------------------------------------------------------------
# per-layer kernels


def _conv_cols(x, kernel):
    kh, kw = kernel
    ph, pw = _same_pad(kernel)
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N,H,W,C,kh,kw)
    n, h, w = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * h * w, -1), (n, h, w)


def _wall(w, dtype):
    """(kh,1,C,F) kernel as a (C, kh*F) matrix for the shift-sum path."""
    kh, _, c, f = w.shape
    return np.ascontiguousarray(w[:, 0].transpose(1, 0, 2)).reshape(c, kh * f).astype(dtype)


def _shift_sum(z, kh, ph, out):
    """out[:, i] += z[:, i + a - ph, :, a] for every tap a."""
    h = out.shape[1]
    for a in range(kh):
        s = a - ph
        if s >= 0:
            out[:, : h - s] += z[:, s:, :, a]
        else:
            out[:, -s:] += z[:, : h + s, :, a]
    return out


def _scatter_dz(dy, kh, ph, f):
    """dz[:, i', :, a] = dy[:, i' - a + ph]; inverse indexing of _shift_sum."""
    n, h, wd, _ = dy.shape
    dz = np.zeros((n, h, wd, kh, f), dtype=dy.dtype)
    for a in range(kh):
        s = a - ph
        if s >= 0:
            dz[:, s:, :, a] = dy[:, : h - s]
        else:
            dz[:, : h + s, :, a] = dy[:, -s:]
    return dz


def _conv_forward(spec, lp, x, dtype):
    w = lp["w"].astype(dtype)
    b = lp["b"].astype(dtype)
    kh, kw = spec.kernel
    n, h, wd, c = x.shape
    f = spec.filters
    cache = {"in_shape": x.shape, "x": x}
    if kw == 1 and kh == 1:
        y = x.reshape(-1, c) @ w.reshape(c, f) + b
        cache["path"] = "1x1"
        return y.reshape(n, h, wd, f), cache
    if kw == 1 and c > f:
        # one GEMM on the raw input, then sum the tap-shifted slices
        ph = (kh - 1) // 2
        z = (x.reshape(-1, c) @ _wall(w, dtype)).reshape(n, h, wd, kh, f)
        y = np.empty((n, h, wd, f), dtype=dtype)
        y[:] = b
        _shift_sum(z, kh, ph, y)
        cache["path"] = "z"
        return y, cache
    cols, _ = _conv_cols(x, spec.kernel)
    y = cols @ w.reshape(-1, f) + b
    cache["path"] = "cols"
    cache["cols"] = cols
    return y.reshape(n, h, wd, f), cache


def _conv_backward(spec, lp, cache, dy, dtype, need_param_grads, need_dx):
    w = lp["w"].astype(dtype)
    kh, kw = spec.kernel
    n, h, wd, f = dy.shape
    c = cache["in_shape"][-1]
    dy2 = dy.reshape(-1, f)
    grads = None
    dx = None
    if cache["path"] == "1x1":
        if need_param_grads:
            grads = {
                "w": (cache["x"].reshape(-1, c).T @ dy2).reshape(w.shape),
                "b": dy2.sum(axis=0),
            }
        if need_dx:
            dx = (dy2 @ w.reshape(c, f).T).reshape(cache["in_shape"])
        return dx, grads

    ph = (kh - 1) // 2
    if kw == 1:
        dz2 = None
        if cache["path"] == "z" or need_dx:
            dz2 = _scatter_dz(dy, kh, ph, f).reshape(-1, kh * f)
        if need_param_grads:
            if cache["path"] == "cols":
                dw = (cache["cols"].T @ dy2).reshape(w.shape)
            else:
                dwall = cache["x"].reshape(-1, c).T @ dz2  # (C, kh*F)
                dw = dwall.reshape(c, kh, f).transpose(1, 0, 2)[:, None]
            grads = {"w": dw, "b": dy2.sum(axis=0)}
        if need_dx:
            dx = (dz2 @ _wall(w, dtype).T).reshape(cache["in_shape"])
        return dx, grads

    # general kernel: gather columns from the padded upstream gradient
    pw = (kw - 1) // 2
    if need_param_grads:
        dw = (cache["cols"].T @ dy2).reshape(w.shape)
        grads = {"w": dw, "b": dy2.sum(axis=0)}
    if need_dx:
        dyp = np.pad(dy, ((0, 0), (kh - 1 - ph, ph), (kw - 1 - pw, pw), (0, 0)))
        win = sliding_window_view(dyp, (kh, kw), axis=(1, 2))
        cols2 = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
            n * h * wd, -1
        )
        wflip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(
            -1, c
        )
        dx = (cols2 @ wflip).reshape(cache["in_shape"])
    return dx, grads


def _bn_axes(x):
    return (0, 1, 2) if x.ndim == 4 else (0,)


def _channel_dot(a, b):
    """sum over all but the channel axis of a*b, without a temporary."""
    spec = "nhwc,nhwc->c" if a.ndim == 4 else "nc,nc->c"
    return np.einsum(spec, a, b)


def _bn_forward(spec, lp, x, mode, dtype):
    axes = _bn_axes(x)
    gamma = lp["gamma"].astype(dtype)
    beta = lp["beta"].astype(dtype)
    if mode == "train":
        m = float(np.prod([x.shape[a] for a in axes]))
        mu = x.mean(axis=axes)
        xc = x - mu
        var = _channel_dot(xc, xc) / m
        updates = {
            "running_mean": spec.momentum * lp["running_mean"].astype(dtype)
            + (1 - spec.momentum) * mu,
            "running_var": spec.momentum * lp["running_var"].astype(dtype)
            + (1 - spec.momentum) * var,
        }
        inv_std = 1.0 / np.sqrt(var + spec.eps)
        y = xc * (gamma * inv_std)
        y += beta
        cache = {"xc": xc, "inv_std": inv_std, "axes": axes, "mode": mode, "m": m}
        return y, cache, updates
    mu = lp["running_mean"].astype(dtype)
    var = lp["running_var"].astype(dtype)
    inv_std = 1.0 / np.sqrt(var + spec.eps)
    scale = gamma * inv_std
    y = x * scale
    y += beta - mu * scale
    cache = {
        "x": x, "mu": mu, "inv_std": inv_std, "axes": axes, "mode": mode,
        "scale": scale,
    }
    return y, cache, None


def _bn_backward(spec, lp, cache, dy, dtype, need_param_grads):
    gamma = lp["gamma"].astype(dtype)
    axes = cache["axes"]
    inv_std = cache["inv_std"]
    grads = None
    if cache["mode"] == "train":
        xc, m = cache["xc"], cache["m"]
        s1 = dy.sum(axis=axes)
        s2 = _channel_dot(dy, xc) * inv_std  # = sum(dy * xhat)
        if need_param_grads:
            grads = {"gamma": s2, "beta": s1}
        scale = gamma * inv_std
        dx = dy * scale
        dx -= xc * (scale * inv_std * (s2 / m))
        dx -= scale * (s1 / m)
        return dx, grads
    if need_param_grads:
        s1 = dy.sum(axis=axes)
        # xhat recovered lazily from the cached input reference
        s2 = (_channel_dot(dy, cache["x"]) - cache["mu"] * s1) * inv_std
        grads = {"gamma": s2, "beta": s1}
    return dy * cache["scale"], grads


def _pool_forward(spec, x):
    ph, pw = spec.pool
    n, h, w, c = x.shape
    if pw == 1 and ph == 2:
        xr = x.reshape(n, h // 2, 2, w, c)
        a, b = xr[:, :, 0], xr[:, :, 1]
        mask = a >= b  # first window element wins ties
        y = np.where(mask, a, b)
        return y, {"mask2": mask, "in_shape": x.shape}
    xr = x.reshape(n, h // ph, ph, w // pw, pw, c)
    xf = np.ascontiguousarray(xr.transpose(0, 1, 3, 5, 2, 4)).reshape(
        n, h // ph, w // pw, c, ph * pw
    )
    am = np.argmax(xf, axis=-1).astype(np.uint8)
    y = np.take_along_axis(xf, am[..., None].astype(np.int64), axis=-1)[..., 0]
    return y, {"am": am, "in_shape": x.shape}


def _pool_backward(spec, cache, dy):
    ph, pw = spec.pool
    n, h, w, c = cache["in_shape"]
    if "mask2" in cache:
        mask = cache["mask2"]
        dx = np.zeros((n, h, w, c), dtype=dy.dtype)
        dxr = dx.reshape(n, h // 2, 2, w, c)
        dxr[:, :, 0] = dy * mask
        dxr[:, :, 1] = dy * ~mask
        return dx
    am = cache["am"].astype(np.int64)
    dxf = np.zeros((n, h // ph, w // pw, c, ph * pw), dtype=dy.dtype)
    np.put_along_axis(dxf, am[..., None], dy[..., None], axis=-1)
    dx = dxf.reshape(n, h // ph, w // pw, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(dx).reshape(n, h, w, c)


def _alpha_dropout_consts(rate):
    q = 1.0 - rate
    alpha_p = -SELU_LAMBDA * SELU_ALPHA
    a = (q + alpha_p**2 * q * (1 - q)) ** -0.5
    b = -a * (1 - q) * alpha_p
    return q, alpha_p, a, b


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# graph execution


def _check_batch(graph, x):
    if tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(
            f"input: batch shape {tuple(x.shape[1:])} != graph input "
            f"{tuple(graph.input_shape)}"
        )


def layer_forward(spec, lp, x, skip_x, mode, rng, dtype):
    """Run one layer; returns (y, cache, bn_updates)."""
    k = spec.kind
    if k == "Conv2D":
        y, cache = _conv_forward(spec, lp, x, dtype)
        return y, cache, None
    if k == "BatchNorm":
        return _bn_forward(spec, lp, x, mode, dtype)
    if k == "ReLU":
        mask = x > 0
        return x * mask, {"mask": mask}, None
    if k == "SeLU":
        neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
        y = SELU_LAMBDA * np.where(x > 0, x, neg)
        return y, {"x_pos": x > 0, "neg": neg}, None
    if k == "MaxPool":
        y, cache = _pool_forward(spec, x)
        return y, cache, None
    if k == "Dense":
        w = lp["w"].astype(dtype)
        b = lp["b"].astype(dtype)
        return x @ w + b, {"x": x}, None
    if k == "Softmax":
        p = _softmax(x)
        return p, {"probs": p, "logits": x}, None
    if k == "AlphaDropout":
        if mode != "train":
            return x, {"identity": True}, None
        if rng is None:
            raise ValidationError(
                f"{spec.name}: train-mode AlphaDropout needs an RNG stream"
            )
        q, alpha_p, a, b = _alpha_dropout_consts(spec.rate)
        mask = rng.random(x.shape) < q
        y = a * (np.where(mask, x, alpha_p)) + b
        return y, {"identity": False, "mask": mask, "a": a}, None
    if k == "ResidualAdd":
        return x + skip_x, {}, None
    if k == "Flatten":
        return x.reshape(x.shape[0], -1), {"in_shape": x.shape}, None
    raise ValidationError(f"unknown layer kind {k!r}")  # pragma: no cover


def run_forward(graph, params, batch, mode="infer", rng=None, dtype=DEFAULT_DTYPE):
    """Execute the chain; returns (activations, caches, bn_updates).

    activations[0] is the input batch; activations[i+1] the output of layer
    i.  bn_updates maps layer name -> pending running-statistics updates
    (train mode only).
    """
    x = np.asarray(batch, dtype=dtype)
    _check_batch(graph, x)
    shapes = infer_shapes(graph)
    acts = [x]
    caches = []
    bn_updates = {}
    for i, spec in enumerate(graph.layers):
        skip_x = None
        if spec.kind == "ResidualAdd":
            skip_x = acts[graph.index_of(spec.skip_from) + 1]
        y, cache, upd = layer_forward(
            spec, params.get(spec.name, {}), acts[-1], skip_x, mode, rng, dtype
        )
        if tuple(y.shape[1:]) != shapes[i]:
            raise ShapeError(
                f"{spec.name}: produced {tuple(y.shape[1:])}, expected {shapes[i]}"
            )
        if upd:
            bn_updates[spec.name] = upd
        acts.append(y)
        caches.append(cache)
    return acts, caches, bn_updates


def forward(graph, params, batch, mode="infer", rng=None, dtype=DEFAULT_DTYPE):
    """Class probabilities (batch x n_classes)."""
    acts, _, _ = run_forward(graph, params, batch, mode, rng, dtype)
    return acts[-1]


def layer_backward(spec, lp, cache, dy, dtype, need_param_grads, need_dx=True):
    """Gradient through one layer: (dx, param_grads, dskip)."""
    k = spec.kind
    if k == "Conv2D":
        dx, grads = _conv_backward(
            spec, lp, cache, dy, dtype, need_param_grads, need_dx
        )
        return dx, grads, None
    if k == "BatchNorm":
        dx, grads = _bn_backward(spec, lp, cache, dy, dtype, need_param_grads)
        return dx, grads, None
    if k == "ReLU":
        return dy * cache["mask"], None, None
    if k == "SeLU":
        d = np.where(cache["x_pos"], SELU_LAMBDA, SELU_LAMBDA * (cache["neg"] + SELU_ALPHA))
        return dy * d, None, None
    if k == "MaxPool":
        return _pool_backward(spec, cache, dy), None, None
    if k == "Dense":
        w = lp["w"].astype(dtype)
        grads = None
        if need_param_grads:
            grads = {"w": cache["x"].T @ dy, "b": dy.sum(axis=0)}
        dx = dy @ w.T if need_dx else None
        return dx, grads, None
    if k == "Softmax":
        p = cache["probs"]
        return p * (dy - (dy * p).sum(axis=1, keepdims=True)), None, None
    if k == "AlphaDropout":
        if cache["identity"]:
            return dy, None, None
        return dy * (cache["a"] * cache["mask"]), None, None
    if k == "ResidualAdd":
        return dy, None, dy
    if k == "Flatten":
        return dy.reshape(cache["in_shape"]), None, None
    raise ValidationError(f"unknown layer kind {k!r}")  # pragma: no cover


def _backprop_from(
    graph, params, acts, caches, seed_grad, seed_idx, dtype, need_param_grads,
    need_input_grad=True,
):
    """Reverse walk with the gradient seed at the OUTPUT of layer seed_idx-1.

    seed_idx == len(layers) seeds the final output; seed_idx == n seeds the
    input of layer n.  Returns (d input, param gradients).  The input
    gradient of the first layer is skipped when nobody needs it.
    """
    n_layers = len(graph.layers)
    out_grads = [None] * (n_layers + 1)
    out_grads[seed_idx] = seed_grad
    grads = {} if need_param_grads else None
    for i in range(seed_idx - 1, -1, -1):
        dy = out_grads[i + 1]
        if dy is None:
            continue
        spec = graph.layers[i]
        need_dx = i > 0 or need_input_grad
        dx, pgrads, dskip = layer_backward(
            spec, params.get(spec.name, {}), caches[i], dy, dtype,
            need_param_grads, need_dx,
        )
        out_grads[i + 1] = None  # free as we go
        if need_param_grads and pgrads:
            acc = grads.setdefault(spec.name, {})
            for t, g in pgrads.items():
                acc[t] = acc[t] + g if t in acc else g
        if dx is not None:
            if out_grads[i] is None:
                out_grads[i] = dx
            else:
                out_grads[i] = out_grads[i] + dx
        if dskip is not None:
            j = graph.index_of(spec.skip_from) + 1
            if out_grads[j] is None:
                out_grads[j] = dskip.copy()
            else:
                out_grads[j] = out_grads[j] + dskip
    return out_grads[0], grads


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy straight from logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def backward(
    graph,
    params,
    batch,
    labels,
    mode="train",
    rng=None,
    dtype=DEFAULT_DTYPE,
    need_param_grads=True,
):
    """Loss, parameter gradients, input gradient, and pending BN updates.

    Loss is categorical cross-entropy on the softmax output with batch-mean
    reduction.  The softmax/cross-entropy pair is differentiated jointly
    when the chain ends in Softmax.
    """
    labels = np.asarray(labels, dtype=np.int64)
    acts, caches, bn_updates = run_forward(graph, params, batch, mode, rng, dtype)
    probs = acts[-1]
    n = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0

    if graph.layers[-1].kind == "Softmax":
        loss = cross_entropy(caches[-1]["logits"], labels)
        dlogits = (probs - onehot) / n
        dx, grads = _backprop_from(
            graph, params, acts, caches, dlogits, len(graph.layers) - 1, dtype,
            need_param_grads,
        )
    else:
        eps = np.finfo(probs.dtype).tiny
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), labels], eps))))
        dprobs = -(onehot / np.maximum(probs, eps)) / n
        dx, grads = _backprop_from(
            graph, params, acts, caches, dprobs, len(graph.layers), dtype,
            need_param_grads,
        )
    return loss, grads, dx, bn_updates


def train_step(graph, params, batch, labels, rng, dtype=DEFAULT_DTYPE):
    """One train-mode forward/backward: (loss, probs, grads, bn_updates)."""
    labels = np.asarray(labels, dtype=np.int64)
    acts, caches, bn_updates = run_forward(graph, params, batch, "train", rng, dtype)
    probs = acts[-1]
    n = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    loss = cross_entropy(caches[-1]["logits"], labels)
    dlogits = (probs - onehot) / n
    _, grads = _backprop_from(
        graph, params, acts, caches, dlogits, len(graph.layers) - 1, dtype, True
    )
    return loss, probs, grads, bn_updates


def input_gradient_from_logits(
    graph, params, batch, dlogits, mode="infer", rng=None, dtype=DEFAULT_DTYPE
):
    """(logits, d input) for an arbitrary gradient seed on the logits.

    Needed by attacks that differentiate individual class scores rather
    than the training loss.  The seed may be a callable of the logits, so
    one forward pass serves seeds that depend on the scores themselves.
    The graph must end in Softmax.
    """
    if graph.layers[-1].kind != "Softmax":
        raise ValidationError("graph does not end in Softmax; no logits to seed")
    acts, caches, _ = run_forward(graph, params, batch, mode, rng, dtype)
    logits = caches[-1]["logits"]
    if callable(dlogits):
        dlogits = dlogits(logits)
    dx, _ = _backprop_from(
        graph, params, acts, caches, np.asarray(dlogits, dtype=dtype),
        len(graph.layers) - 1, dtype, need_param_grads=False,
    )
    return logits, dx


def per_class_input_grads(
    graph, params, batch, classes, mode="infer", rng=None, dtype=DEFAULT_DTYPE
):
    """(logits, grads) where grads[c] = d logit_c / d input, one forward.

    Reuses the forward caches across the per-class reverse walks, which
    boundary-search attacks lean on heavily.
    """
    if graph.layers[-1].kind != "Softmax":
        raise ValidationError("graph does not end in Softmax; no logits to seed")
    acts, caches, _ = run_forward(graph, params, batch, mode, rng, dtype)
    logits = caches[-1]["logits"]
    n = logits.shape[0]
    grads = []
    for c in classes:
        seed = np.zeros_like(logits)
        seed[:, c] = 1.0
        dx, _ = _backprop_from(
            graph, params, acts, caches, seed, len(graph.layers) - 1, dtype, False
        )
        grads.append(dx)
    return logits, np.stack(grads)
