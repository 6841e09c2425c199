"""Stratified splitting, Adam training, and evaluation.

Splits are stratified per (scheme, snr) cell so every cell contributes the
same train count.  Training is bit-reproducible: shuffling, dropout, and
initialization all draw from counter-based substreams of the config seed,
and batches run sequentially with a fixed reduction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .dataset_io import DatasetView
from .engine import (
    DEFAULT_DTYPE,
    TRAINABLE,
    forward,
    init_params,
    train_step,
    validate_params,
)
from .errors import InvalidFraction, TrainingDiverged, ValidationError
from .rng import substream

N_CLASSES = 7


@dataclass(frozen=True)
class SplitPlan:
    """Deterministic per-cell train/test assignment."""

    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidFraction(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


def _cell_keys(view: DatasetView):
    labels = view.labels
    snr = view.snr_db
    cells = {}
    for code in np.unique(labels):
        for level in np.unique(snr):
            mask = (labels == code) & (snr == level)
            if np.any(mask):
                cells[(int(code), float(level))] = view.indices[mask]
    return cells


def split_dataset(dataset, plan: SplitPlan):
    """Stratified (train, test) views; per-cell counts are identical."""
    view = dataset.view() if not isinstance(dataset, DatasetView) else dataset
    cells = _cell_keys(view)
    sizes = {len(v) for v in cells.values()}
    if len(sizes) != 1:
        raise ValidationError(f"unbalanced cells: sizes {sorted(sizes)}")
    size = sizes.pop()
    n_train = int(plan.train_fraction * size)
    if n_train < 1 or n_train >= size:
        raise InvalidFraction(
            f"fraction {plan.train_fraction} leaves {n_train}/{size} train "
            "frames per cell"
        )
    train_idx, test_idx = [], []
    for (code, level), idx in sorted(cells.items()):
        rng = substream(plan.seed, "split", code, int(round(level * 1000)))
        perm = rng.permutation(idx)
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    ds = view.dataset
    return (
        DatasetView(ds, np.sort(np.concatenate(train_idx))),
        DatasetView(ds, np.sort(np.concatenate(test_idx))),
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    patience: int = 5
    val_fraction: float = 0.1
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("learning_rate, batch_size, epochs must be positive")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValidationError("Adam betas must lie in (0, 1)")

    @property
    def dtype(self):
        return np.dtype(self.compute_dtype).type

    def to_json_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "patience": self.patience,
            "val_fraction": self.val_fraction,
            "compute_dtype": self.compute_dtype,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adam with binary64 moments and update arithmetic; binary32 storage."""

    def __init__(self, graph, config: TrainConfig):
        self.cfg = config
        self.t = 0
        self.m = {}
        self.v = {}
        for spec in graph.layers:
            for tname in TRAINABLE.get(spec.kind, ()):
                self.m[(spec.name, tname)] = 0.0
                self.v[(spec.name, tname)] = 0.0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for (lname, tname), m in self.m.items():
            g = grads.get(lname, {}).get(tname)
            if g is None:
                continue
            g = g.astype(np.float64)
            m = c.beta1 * m + (1 - c.beta1) * g
            v = c.beta2 * self.v[(lname, tname)] + (1 - c.beta2) * g * g
            self.m[(lname, tname)] = m
            self.v[(lname, tname)] = v
            update = c.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + c.adam_eps)
            params[lname][tname] = (
                params[lname][tname].astype(np.float64) - update
            ).astype(np.float32)


def _val_split(train_view: DatasetView, config: TrainConfig):
    """Hold out a stratified validation slice of the train view."""
    cells = _cell_keys(train_view)
    ds = train_view.dataset
    fit_idx, val_idx = [], []
    for (code, level), idx in sorted(cells.items()):
        n_val = max(1, int(round(config.val_fraction * len(idx))))
        if n_val >= len(idx):
            n_val = len(idx) - 1
        rng = substream(config.seed, "val", code, int(round(level * 1000)))
        perm = rng.permutation(idx)
        val_idx.append(np.sort(perm[:n_val]))
        fit_idx.append(np.sort(perm[n_val:]))
    return (
        DatasetView(ds, np.sort(np.concatenate(fit_idx))),
        DatasetView(ds, np.sort(np.concatenate(val_idx))),
    )


def _eval_loss_acc(graph, params, view, batch_size, dtype):
    total, correct, loss_sum = 0, 0, 0.0
    for x, y, _ in view.batches(batch_size):
        probs = forward(graph, params, x, mode="infer", dtype=dtype)
        pred = probs.argmax(axis=1)
        correct += int((pred == y).sum())
        eps = np.finfo(np.float64).tiny
        loss_sum += float(
            -np.log(np.maximum(probs[np.arange(len(y)), y], eps)).sum()
        )
        total += len(y)
    return loss_sum / max(total, 1), correct / max(total, 1)


def train(graph, train_view: DatasetView, config: TrainConfig, extra_metadata=None):
    """Train from scratch; returns (best-validation Checkpoint, history).

    History rows carry epoch, train_loss, train_acc, val_loss, val_acc.
    Raises TrainingDiverged when the loss leaves the reals.
    """
    if config.batch_size > len(train_view):
        raise ValidationError(
            f"batch size {config.batch_size} exceeds train size {len(train_view)}"
        )
    dtype = config.dtype
    params = init_params(graph, config.seed)
    validate_params(graph, params)
    history = []
    metadata = {
        "seed": config.seed,
        "train_config": config.to_json_dict(),
        "epochs_run": 0,
        "best_epoch": -1,
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    if config.epochs == 0:
        return Checkpoint(graph, params, metadata), history

    fit_view, val_view = _val_split(train_view, config)
    opt = Adam(graph, config)
    best = {"val_acc": -1.0, "params": None, "epoch": -1}
    stale = 0
    for epoch in range(config.epochs):
        order = substream(config.seed, "shuffle", epoch).permutation(len(fit_view))
        idx = fit_view.indices[order]
        epoch_view = DatasetView(fit_view.dataset, idx)
        loss_sum, correct, seen = 0.0, 0, 0
        for step, (x, y, _) in enumerate(epoch_view.batches(config.batch_size)):
            rng = substream(config.seed, "dropout", epoch, step)
            loss, probs, grads, bn_upd = train_step(
                graph, params, x, y, rng, dtype=dtype
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(params, grads)
            for lname, upd in bn_upd.items():
                for tname, arr in upd.items():
                    params[lname][tname] = arr.astype(np.float32)
            loss_sum += loss * len(y)
            correct += int((probs.argmax(axis=1) == y).sum())
            seen += len(y)
        val_loss, val_acc = _eval_loss_acc(
            graph, params, val_view, config.batch_size, dtype
        )
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / seen,
                "train_acc": correct / seen,
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        if val_acc > best["val_acc"]:
            best = {
                "val_acc": val_acc,
                "params": {l: {t: a.copy() for t, a in te.items()} for l, te in params.items()},
                "epoch": epoch,
            }
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    metadata["epochs_run"] = len(history)
    metadata["best_epoch"] = best["epoch"]
    metadata["best_val_acc"] = best["val_acc"]
    return Checkpoint(graph, best["params"], metadata), history


@dataclass
class ConfusionMatrix:
    """True-class rows, predicted-class columns."""

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    )

    def add(self, y_true, y_pred):
        np.add.at(self.counts, (np.asarray(y_true), np.asarray(y_pred)), 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    def per_class_accuracy(self) -> np.ndarray:
        row = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = np.where(row > 0, np.diag(self.counts) / row, 0.0)
        return acc

    def largest_off_diagonal(self):
        """(true, predicted, count) of the biggest confusion cell."""
        c = self.counts.copy()
        np.fill_diagonal(c, -1)
        i, j = np.unravel_index(np.argmax(c), c.shape)
        return int(i), int(j), int(c[i, j])


@dataclass
class EvalResult:
    accuracy: float
    per_snr: dict  # snr_db -> (accuracy, count)
    confusion: ConfusionMatrix


def as_predictor(model, dtype=np.float32, batch_mode="infer"):
    """Normalize a Checkpoint or callable into f(X, idx) -> labels."""
    if isinstance(model, Checkpoint):

        def predict(x, idx):
            probs = forward(model.graph, model.params, x, mode=batch_mode, dtype=dtype)
            return probs.argmax(axis=1)

        return predict
    if callable(model):
        return model
    raise ValidationError(f"cannot evaluate object of type {type(model)!r}")


def evaluate(model, view: DatasetView, batch_size: int = 256, dtype=np.float32):
    """Accuracy, per-SNR accuracy map, and the full confusion matrix."""
    predict = as_predictor(model, dtype=dtype)
    confusion = ConfusionMatrix()
    snr_hits: dict = {}
    snr_tot: dict = {}
    for x, y, idx in view.batches(batch_size):
        pred = np.asarray(predict(x, idx))
        confusion.add(y, pred)
        for level in np.unique(view.dataset.snr_db[idx]):
            sel = view.dataset.snr_db[idx] == level
            snr_hits[level] = snr_hits.get(level, 0) + int((pred[sel] == y[sel]).sum())
            snr_tot[level] = snr_tot.get(level, 0) + int(sel.sum())
    per_snr = {
        float(level): (snr_hits[level] / snr_tot[level], snr_tot[level])
        for level in sorted(snr_tot)
    }
    return EvalResult(confusion.accuracy, per_snr, confusion)
