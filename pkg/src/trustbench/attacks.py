"""Trust attribute 3: adversarial-example generation and the AER metric.

Eight attacks against unbounded real I/Q inputs (no pixel box, so budgets
are plain epsilon-balls).  White-box attacks differentiate through the
model context; the two black-box attacks run behind a query-counting
wrapper with no gradient channel.  AER is the fraction of attacked samples
still classified as their true label afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .engine import (
    backward,
    forward,
    input_gradient_from_logits,
    per_class_input_grads,
)
from .errors import BlackBoxViolation, ConfigError
from .rng import substream

WHITE_BOX_KINDS = ("fgm", "pgd", "deepfool", "newtonfool", "cw_l2", "cw_linf")
BLACK_BOX_KINDS = ("zoo", "hopskipjump")
ATTACK_KINDS = WHITE_BOX_KINDS + BLACK_BOX_KINDS

# Published AER percentages (CNN, ResNet) quoted beside measured values in
# reports; produced by an external toolbox with unknown settings, so they
# are context, not targets.
PAPER_AER_REFERENCE = {
    "fgm": (18.83, 22.12),
    "pgd": (6.11, 5.60),
    "newtonfool": (26.84, 28.50),
    "deepfool": (26.07, 15.43),
    "hopskipjump": (14.92, 8.04),
    "zoo": (26.57, 19.25),
    "cw_l2": (53.9, 59.25),
    "cw_linf": (21.57, 14.57),
}


class ModelContext:
    """White-box handle: probabilities plus input gradients at inference."""

    def __init__(self, ckpt: Checkpoint, dtype=np.float32):
        self.graph = ckpt.graph
        self.params = ckpt.params
        self.dtype = dtype

    def predict_probs(self, x) -> np.ndarray:
        return forward(self.graph, self.params, x, mode="infer", dtype=self.dtype)

    def predict_logits(self, x) -> np.ndarray:
        from .engine import run_forward

        _, caches, _ = run_forward(self.graph, self.params, x, "infer", dtype=self.dtype)
        return caches[-1]["logits"]

    def predict_labels(self, x) -> np.ndarray:
        return self.predict_probs(x).argmax(axis=1)

    def loss_input_grad(self, x, labels) -> np.ndarray:
        """Gradient of the summed per-sample cross-entropy wrt the input."""
        _, _, dx, _ = backward(
            self.graph, self.params, x, labels,
            mode="infer", dtype=self.dtype, need_param_grads=False,
        )
        return dx * len(labels)  # undo the batch-mean reduction

    def logits_and_grad(self, x, dlogits):
        """Logits plus input gradient for a logit seed (array or callable)."""
        return input_gradient_from_logits(
            self.graph, self.params, x, dlogits, mode="infer", dtype=self.dtype
        )

    def class_grads(self, x, classes):
        """Logits plus per-class input gradients, one shared forward."""
        return per_class_input_grads(
            self.graph, self.params, x, classes, mode="infer", dtype=self.dtype
        )


class BlackBoxModel:
    """Prediction-only facade that counts queries and traps gradient use."""

    def __init__(self, ctx: ModelContext):
        self._ctx = ctx
        self.query_count = 0
        self.gradient_accesses = 0

    def predict_probs(self, x) -> np.ndarray:
        self.query_count += int(np.asarray(x).shape[0])
        return self._ctx.predict_probs(x)

    def predict_labels(self, x) -> np.ndarray:
        return self.predict_probs(x).argmax(axis=1)

    def loss_input_grad(self, *args, **kwargs):
        self.gradient_accesses += 1
        raise BlackBoxViolation("black-box attack requested a loss gradient")

    def logits_and_grad(self, *args, **kwargs):
        self.gradient_accesses += 1
        raise BlackBoxViolation("black-box attack requested a logit gradient")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    eps: float = 0.0
    norm: str = "linf"
    step: float = 0.0
    iters: int = 10
    confidence: float = 0.0
    binary_search_steps: int = 5
    init_const: float = 0.1
    learning_rate: float = 0.01
    eta: float = 0.01
    coords_per_iter: int = 32
    fd_step: float = 1e-4
    init_eval: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.iters < 1:
            raise ConfigError("iterations must be >= 1")
        if self.kind in ("fgm", "pgd"):
            if self.eps < 0:
                raise ConfigError("eps must be >= 0")
            if self.norm not in ("l2", "linf"):
                raise ConfigError(f"norm must be l2 or linf, got {self.norm!r}")
        if self.kind == "pgd" and self.step <= 0:
            raise ConfigError("pgd needs a positive step size")
        if self.kind in ("cw_l2", "cw_linf", "zoo") and self.learning_rate <= 0:
            raise ConfigError(f"{self.kind} needs a positive learning rate")
        if self.kind == "newtonfool" and self.eta <= 0:
            raise ConfigError("newtonfool needs a positive eta")
        if self.kind == "zoo" and self.coords_per_iter < 1:
            raise ConfigError("zoo needs at least one coordinate per iteration")

    def to_json_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


@dataclass
class AttackResult:
    config: AttackConfig
    true_labels: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    queries: np.ndarray
    aer: float = field(init=False)

    def __post_init__(self):
        self.aer = aer(self.clean_pred, self.adv_pred, self.true_labels)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "aer": self.aer,
            "samples": [
                {
                    "true": int(t),
                    "clean_pred": int(c),
                    "adv_pred": int(a),
                    "l2": float(l2),
                    "linf": float(li),
                    "queries": int(q),
                }
                for t, c, a, l2, li, q in zip(
                    self.true_labels,
                    self.clean_pred,
                    self.adv_pred,
                    self.l2,
                    self.linf,
                    self.queries,
                )
            ],
        }


def aer(clean_predictions, adversarial_predictions, true_labels) -> float:
    """Fraction of attacked samples still predicted as their true label."""
    clean = np.asarray(clean_predictions)
    adv = np.asarray(adversarial_predictions)
    true = np.asarray(true_labels)
    if not (len(clean) == len(adv) == len(true)):
        raise ConfigError("prediction/label arrays differ in length")
    if len(true) == 0:
        raise ConfigError("no attacked samples")
    return float(np.mean(adv == true))


def _per_sample_l2(delta) -> np.ndarray:
    return np.sqrt((delta.reshape(len(delta), -1) ** 2).sum(axis=1))


def _per_sample_linf(delta) -> np.ndarray:
    return np.abs(delta.reshape(len(delta), -1)).max(axis=1)


def _normalize_rows(g):
    """Unit-L2 rows; zero rows stay zero."""
    flat = g.reshape(len(g), -1)
    norms = np.sqrt((flat**2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return (flat / safe[:, None]).reshape(g.shape), norms


def fgm(ctx: ModelContext, x, labels, eps: float, norm: str = "linf") -> np.ndarray:
    """Single loss-gradient step of size eps (sign step for L-inf)."""
    x = np.asarray(x, dtype=np.float64)
    g = ctx.loss_input_grad(x, labels)
    if norm == "linf":
        return x + eps * np.sign(g)
    direction, _ = _normalize_rows(g)
    return x + eps * direction


def _project(delta, eps: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(len(delta), -1)
    norms = np.sqrt((flat**2).sum(axis=1))
    factor = np.where(norms > eps, np.where(norms > 0, eps / np.maximum(norms, 1e-300), 1.0), 1.0)
    return (flat * factor[:, None]).reshape(delta.shape)


def pgd(
    ctx: ModelContext, x, labels, eps: float, step: float, iters: int,
    norm: str = "linf",
) -> np.ndarray:
    """Iterated FGM with projection onto the eps-ball after every step."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.zeros_like(x)
    for _ in range(iters):
        g = ctx.loss_input_grad(x + delta, labels)
        if norm == "linf":
            delta = delta + step * np.sign(g)
        else:
            direction, _ = _normalize_rows(g)
            delta = delta + step * direction
        delta = _project(delta, eps, norm)
    return x + delta


def deepfool(ctx: ModelContext, x, labels, iters: int = 50, overshoot: float = 0.02):
    """Minimal-norm linearized boundary steps until the prediction flips."""
    x = np.asarray(x, dtype=np.float64)
    n, k = len(x), ctx.graph.n_classes
    x_adv = x.copy()
    orig_pred = ctx.predict_labels(x)
    active = np.ones(n, dtype=bool)
    for _ in range(iters):
        if not active.any():
            break
        xa = x_adv[active]
        na = len(xa)
        logits, grads = ctx.class_grads(xa, range(k))
        ref = orig_pred[active]
        rows = np.arange(na)
        w = grads - grads[ref, rows][None, ...]  # (k, na, ...)
        f = logits.T - logits[rows, ref][None, :]  # (k, na)
        wnorm = np.sqrt((w.reshape(k, na, -1) ** 2).sum(axis=2))
        ratio = np.abs(f) / np.maximum(wnorm, 1e-12)
        ratio[ref, rows] = np.inf
        target = ratio.argmin(axis=0)
        r = (
            (np.abs(f[target, rows]) + 1e-6)
            / np.maximum(wnorm[target, rows] ** 2, 1e-12)
        )[(...,) + (None,) * (x.ndim - 1)] * w[target, rows]
        x_adv[active] = x_adv[active] + (1.0 + overshoot) * r
        now = ctx.predict_labels(x_adv[active])
        flipped = now != ref
        idx = np.flatnonzero(active)
        active[idx[flipped]] = False
    # samples that never flipped go back unperturbed (resistant)
    final_pred = ctx.predict_labels(x_adv)
    resisted = final_pred == orig_pred
    x_adv[resisted] = x[resisted]
    return x_adv


def newtonfool(ctx: ModelContext, x, labels, eta: float = 0.01, iters: int = 50):
    """Shrinks the true-class softmax score with Newton-scaled steps."""
    x = np.asarray(x, dtype=np.float64)
    n, k = len(x), ctx.graph.n_classes
    x_adv = x.copy()
    norm_x0 = np.sqrt((x.reshape(n, -1) ** 2).sum(axis=1))
    active = np.ones(n, dtype=bool)
    labels = np.asarray(labels)
    for _ in range(iters):
        if not active.any():
            break
        xa = x_adv[active]
        ya = labels[active]
        na = len(xa)
        rows = np.arange(na)

        def seed_fn(logits):
            # d p_true / d logits = p_true * (onehot - probs)
            z = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=1, keepdims=True)
            s = -probs * probs[rows, ya][:, None]
            s[rows, ya] += probs[rows, ya]
            return s

        logits, g = ctx.logits_and_grad(xa, seed_fn)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        p_true = probs[rows, ya]
        gnorm = np.sqrt((g.reshape(na, -1) ** 2).sum(axis=1))
        delta_star = np.minimum(eta * norm_x0[active] * gnorm, p_true - 1.0 / k)
        coef = np.where(gnorm > 0, delta_star / np.maximum(gnorm**2, 1e-300), 0.0)
        x_adv[active] = xa - coef[(...,) + (None,) * (x.ndim - 1)] * g
        still = ctx.predict_labels(x_adv[active]) == ya
        idx = np.flatnonzero(active)
        active[idx[~still]] = False
    final_pred = ctx.predict_labels(x_adv)
    resisted = final_pred == labels
    x_adv[resisted] = x[resisted]
    return x_adv


def _cw_margin_seed(logits, labels, confidence):
    """Gradient seed of max(z_true - max_other + kappa, 0) and its value."""
    n = len(labels)
    rows = np.arange(n)
    z = logits.copy()
    z_true = z[rows, labels]
    z[rows, labels] = -np.inf
    second = z.argmax(axis=1)
    margin = z_true - z[rows, second] + confidence
    seed = np.zeros_like(logits)
    live = margin > 0
    seed[rows[live], labels[live]] = 1.0
    seed[rows[live], second[live]] = -1.0
    return seed, margin


def cw_l2(
    ctx: ModelContext, x, labels, confidence: float = 0.0,
    binary_search_steps: int = 5, iters: int = 50, learning_rate: float = 0.01,
    init_const: float = 0.1,
):
    """Margin loss plus L2 penalty, binary search over the penalty constant.

    No change of variables: the input domain is unbounded, so plain Adam
    steps on the perturbation suffice.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    labels = np.asarray(labels)
    c = np.full(n, init_const)
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    for _ in range(binary_search_steps):
        delta = np.zeros_like(x)
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        found = np.zeros(n, dtype=bool)
        for t in range(1, iters + 1):
            logits, g_margin = ctx.logits_and_grad(
                x + delta, lambda z: _cw_margin_seed(z, labels, confidence)[0]
            )
            margin = _cw_margin_seed(logits, labels, confidence)[1]
            grad = 2.0 * delta + c[(...,) + (None,) * (x.ndim - 1)] * g_margin
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            delta = delta - learning_rate * mh / (np.sqrt(vh) + 1e-8)
            success = margin <= 0
            if success.any():
                l2_now = _per_sample_l2(delta)
                improve = success & (l2_now < best_l2)
                best[improve] = (x + delta)[improve]
                best_l2[improve] = l2_now[improve]
                found |= success
        upper = np.where(found, np.minimum(upper, c), upper)
        lower = np.where(found, lower, np.maximum(lower, c))
        c = np.where(
            np.isinf(upper), c * 10.0, (lower + upper) / 2.0
        )
    return best


def cw_linf(
    ctx: ModelContext, x, labels, confidence: float = 0.0, iters: int = 50,
    learning_rate: float = 0.01, init_const: float = 10.0, outer_steps: int = 8,
    tau_shrink: float = 0.9,
):
    """Penalty-and-clip variant: drive the margin down, then shrink the
    working L-inf radius tau while the attack keeps succeeding."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    labels = np.asarray(labels)
    best = x.copy()
    best_linf = np.full(n, np.inf)
    tau = np.full(n, 1.0)
    delta = np.zeros_like(x)
    for _ in range(outer_steps):
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        for t in range(1, iters + 1):
            logits, g_margin = ctx.logits_and_grad(
                x + delta, lambda z: _cw_margin_seed(z, labels, confidence)[0]
            )
            tau_b = tau[(...,) + (None,) * (x.ndim - 1)]
            grad = init_const * g_margin + np.sign(delta) * (np.abs(delta) > tau_b)
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            delta = delta - learning_rate * (m / (1 - 0.9**t)) / (
                np.sqrt(v / (1 - 0.999**t)) + 1e-8
            )
        logits_now = ctx.predict_logits(x + delta)
        margin_now = _cw_margin_seed(logits_now, labels, confidence)[1]
        success = margin_now <= 0
        linf_now = _per_sample_linf(delta)
        improve = success & (linf_now < best_linf)
        best[improve] = (x + delta)[improve]
        best_linf[improve] = linf_now[improve]
        tau = np.where(success, tau_shrink * np.minimum(tau, linf_now), tau)
    return best


def zoo(
    bb: BlackBoxModel, x, labels, iters: int = 30, coords_per_iter: int = 32,
    fd_step: float = 1e-4, learning_rate: float = 0.01, confidence: float = 0.0,
    seed: int = 0,
):
    """Coordinate-wise zeroth-order optimization from probability queries."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    out = x.copy()
    queries = np.zeros(len(x), dtype=np.int64)
    for i in range(len(x)):
        rng = substream(seed, "zoo", i)
        xi = x[i].ravel()
        dim = xi.size
        delta = np.zeros(dim)
        m = np.zeros(dim)
        v = np.zeros(dim)
        tcount = np.zeros(dim)
        q0 = bb.query_count

        def margin_of(batch_flat):
            probs = bb.predict_probs(batch_flat.reshape((-1,) + x.shape[1:]))
            logp = np.log(np.maximum(probs, 1e-12))
            rows = np.arange(len(logp))
            true = logp[rows, labels[i]]
            others = logp.copy()
            others[rows, labels[i]] = -np.inf
            return np.maximum(true - others.max(axis=1), -confidence)

        success = False
        for _ in range(iters):
            if margin_of((xi + delta)[None, :])[0] <= 0:
                success = True
                break
            coords = rng.choice(dim, size=min(coords_per_iter, dim), replace=False)
            probes = np.tile(xi + delta, (2 * len(coords), 1))
            for j, cidx in enumerate(coords):
                probes[2 * j, cidx] += fd_step
                probes[2 * j + 1, cidx] -= fd_step
            vals = margin_of(probes)
            g = (vals[0::2] - vals[1::2]) / (2 * fd_step)
            # coordinate-wise Adam
            tcount[coords] += 1
            m[coords] = 0.9 * m[coords] + 0.1 * g
            v[coords] = 0.999 * v[coords] + 0.001 * g * g
            mh = m[coords] / (1 - 0.9 ** tcount[coords])
            vh = v[coords] / (1 - 0.999 ** tcount[coords])
            delta[coords] -= learning_rate * mh / (np.sqrt(vh) + 1e-8)
        if not success:
            success = margin_of((xi + delta)[None, :])[0] <= 0
        if success:
            out[i] = (xi + delta).reshape(x.shape[1:])
        queries[i] = bb.query_count - q0
    return out, queries


def hopskipjump(
    bb: BlackBoxModel, x, labels, iters: int = 10, init_eval: int = 40,
    seed: int = 0,
):
    """Decision-boundary walk from label-only queries (L2 flavour)."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    out = x.copy()
    queries = np.zeros(len(x), dtype=np.int64)
    for i in range(len(x)):
        rng = substream(seed, "hsj", i)
        q0 = bb.query_count
        xi = x[i]

        def is_adv(batch):
            return bb.predict_labels(batch) != labels[i]

        # starting point: grow noise until the label flips
        x_tilde = None
        for scale in (0.1, 0.3, 1.0, 3.0, 10.0, 30.0):
            cand = xi[None] + scale * rng.standard_normal((10,) + xi.shape)
            hit = is_adv(cand)
            if hit.any():
                x_tilde = cand[np.argmax(hit)]
                break
        if x_tilde is None:
            queries[i] = bb.query_count - q0
            continue  # resistant: stays unperturbed

        def bin_search(lo_pt, hi_pt, steps=12):
            # lo_pt clean side, hi_pt adversarial side
            for _ in range(steps):
                mid = (lo_pt + hi_pt) / 2.0
                if is_adv(mid[None])[0]:
                    hi_pt = mid
                else:
                    lo_pt = mid
            return hi_pt

        x_tilde = bin_search(xi, x_tilde)
        for t in range(1, iters + 1):
            dist = np.sqrt(((x_tilde - xi) ** 2).sum())
            delta_t = dist / np.sqrt(t * xi.size) * xi.size**0.25
            nb = init_eval
            u = rng.standard_normal((nb,) + xi.shape)
            u /= np.sqrt((u.reshape(nb, -1) ** 2).sum(axis=1))[
                (...,) + (None,) * xi.ndim
            ]
            phi = np.where(is_adv(x_tilde[None] + delta_t * u), 1.0, -1.0)
            if np.all(phi == phi[0]):
                v = phi[0] * u.mean(axis=0)
            else:
                v = ((phi - phi.mean())[(...,) + (None,) * xi.ndim] * u).mean(axis=0)
            vn = np.sqrt((v**2).sum())
            if vn == 0:
                break
            v /= vn
            xi_step = dist / np.sqrt(t)
            cand = x_tilde + xi_step * v
            while not is_adv(cand[None])[0] and xi_step > 1e-9:
                xi_step /= 2.0
                cand = x_tilde + xi_step * v
            if is_adv(cand[None])[0]:
                x_tilde = bin_search(xi, cand)
        out[i] = x_tilde
        queries[i] = bb.query_count - q0
    return out, queries


def attack(model, x, labels, config: AttackConfig) -> AttackResult:
    """Dispatch one configured attack; returns predictions, norms, AER."""
    ctx = model if isinstance(model, ModelContext) else ModelContext(model)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    clean_pred = ctx.predict_labels(x)
    queries = np.zeros(len(x), dtype=np.int64)

    kind = config.kind
    if kind == "fgm":
        x_adv = fgm(ctx, x, labels, config.eps, config.norm)
    elif kind == "pgd":
        x_adv = pgd(ctx, x, labels, config.eps, config.step, config.iters, config.norm)
    elif kind == "deepfool":
        x_adv = deepfool(ctx, x, labels, config.iters)
    elif kind == "newtonfool":
        x_adv = newtonfool(ctx, x, labels, config.eta, config.iters)
    elif kind == "cw_l2":
        x_adv = cw_l2(
            ctx, x, labels, config.confidence, config.binary_search_steps,
            config.iters, config.learning_rate, config.init_const,
        )
    elif kind == "cw_linf":
        x_adv = cw_linf(
            ctx, x, labels, config.confidence, config.iters, config.learning_rate,
        )
    elif kind == "zoo":
        bb = BlackBoxModel(ctx)
        x_adv, queries = zoo(
            bb, x, labels, config.iters, config.coords_per_iter, config.fd_step,
            config.learning_rate, config.confidence, config.seed,
        )
        assert bb.gradient_accesses == 0
    elif kind == "hopskipjump":
        bb = BlackBoxModel(ctx)
        x_adv, queries = hopskipjump(
            bb, x, labels, config.iters, config.init_eval, config.seed
        )
        assert bb.gradient_accesses == 0
    else:  # pragma: no cover - config validation is upstream
        raise ConfigError(f"unknown attack kind {kind!r}")

    delta = x_adv - x
    return AttackResult(
        config=config,
        true_labels=labels,
        clean_pred=clean_pred,
        adv_pred=ctx.predict_labels(x_adv),
        l2=_per_sample_l2(delta),
        linf=_per_sample_linf(delta),
        queries=queries,
    )


def default_eps(x) -> float:
    """Signal-relative default budget: 0.05 x RMS of the clean batch."""
    x = np.asarray(x, dtype=np.float64)
    return 0.05 * float(np.sqrt(np.mean(x**2)))
