"""Trust attribute 2: single-bit flips in binary32 parameters at inference.

Campaigns pick a parameter location and a bit position per trial, score a
private patched copy of the checkpoint on a fixed evaluation subset, and
leave the source checkpoint bit-identical.  Clean activations of the
evaluation subset are cached once so each trial only recomputes the layers
downstream of the flip.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .dataset_io import DatasetView, worker_count
from .engine import layer_forward, param_shapes, run_forward
from .errors import (
    EmptyEvalSet,
    InvalidBit,
    InvalidTrialCount,
    ValidationError,
)
from .rng import substream

EXPONENT_BITS = range(23, 31)
MANTISSA_BITS = range(0, 23)
SIGN_BIT = 31


def flip_bit(value, bit: int):
    """XOR one bit of the IEEE-754 binary32 pattern; involutive.

    Works on the raw bit pattern, so NaN payloads and infinities survive
    exactly.
    """
    if not 0 <= int(bit) <= 31:
        raise InvalidBit(f"bit {bit} outside 0..31")
    v = np.asarray(value, dtype=np.float32)
    flipped = v.view(np.uint32) ^ np.uint32(1 << int(bit))
    out = flipped.view(np.float32)
    return out if out.ndim else np.float32(out[()])


def float_bits(value) -> int:
    """The binary32 pattern of a value as an unsigned integer."""
    return int(np.asarray(value, dtype=np.float32).view(np.uint32))


def bits_float(pattern: int) -> np.float32:
    return np.uint32(pattern).view(np.float32)


@dataclass(frozen=True)
class FaultTrial:
    trial: int
    layer: str
    tensor: str
    index: int
    bit: int
    orig_bits: int
    flipped_bits: int
    accuracy: float


def resolve_target(graph, selector: str, trainable_only: bool = False):
    """(layer, tensor, size) entries covered by a campaign selector.

    The selector is a campaign group label (e.g. C1, D2, RES, DENSE), a
    layer name, or "all".  Running statistics count as flippable binary32
    state unless trainable_only is set.
    """
    shapes = param_shapes(graph)
    entries = []
    for spec in graph.layers:
        if spec.name not in shapes:
            continue
        if selector != "all" and selector not in (spec.group, spec.name):
            continue
        for tname in sorted(shapes[spec.name]):
            if trainable_only and tname.startswith("running"):
                continue
            entries.append(
                (spec.name, tname, int(np.prod(shapes[spec.name][tname])))
            )
    if not entries:
        raise ValidationError(
            f"selector {selector!r} matches no parameterized layer"
        )
    return entries


class CachedEvaluator:
    """Scores parameter patches on a fixed subset with clean-prefix reuse.

    Clean activations are computed once; a trial that patches layer L only
    reruns layers L..end, reading untouched inputs and skip sources from
    the cache.
    """

    def __init__(self, ckpt: Checkpoint, eval_view: DatasetView, dtype=np.float32):
        if len(eval_view) == 0:
            raise EmptyEvalSet("fault campaign evaluation subset is empty")
        self.graph = ckpt.graph
        self.params = ckpt.params
        self.dtype = dtype
        self.labels = eval_view.labels
        x = eval_view.frames(dtype=dtype)
        acts, _, _ = run_forward(self.graph, self.params, x, "infer", dtype=dtype)
        self.acts = acts
        self.layer_index = {spec.name: i for i, spec in enumerate(self.graph.layers)}

    @property
    def baseline_accuracy(self) -> float:
        return float(np.mean(self.acts[-1].argmax(axis=1) == self.labels))

    def accuracy_with_patch(self, layer: str, tensor: str, patched: np.ndarray):
        start = self.layer_index[layer]
        new_acts = {}
        x = self.acts[start]
        for i in range(start, len(self.graph.layers)):
            spec = self.graph.layers[i]
            lp = self.params.get(spec.name, {})
            if spec.name == layer:
                lp = dict(lp)
                lp[tensor] = patched
            skip_x = None
            if spec.kind == "ResidualAdd":
                j = self.layer_index[spec.skip_from] + 1
                skip_x = new_acts[j] if j > start else self.acts[j]
            y, _, _ = layer_forward(spec, lp, x, skip_x, "infer", None, self.dtype)
            new_acts[i + 1] = y
            x = y
        probs = x
        return float(np.mean(probs.argmax(axis=1) == self.labels))


def run_campaign(
    ckpt: Checkpoint,
    eval_view: DatasetView,
    target: str,
    trials: int,
    seed: int,
    trainable_only: bool = False,
    layer_first: bool = False,
    dtype=np.float32,
    workers: int | None = None,
):
    """Randomized single-bit flip trials against one layer selector.

    Per trial the bit position is uniform over 0..31 and the parameter
    location uniform over the selector's flat space (or uniform over layers
    first when layer_first is set).  Deterministic given the seed; the
    source checkpoint is never modified.
    """
    if trials < 1:
        raise InvalidTrialCount(f"trials must be >= 1, got {trials}")
    entries = resolve_target(ckpt.graph, target, trainable_only)
    sizes = np.array([e[2] for e in entries], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    layer_names = sorted({e[0] for e in entries})
    by_layer = {
        ln: [e for e in entries if e[0] == ln] for ln in layer_names
    }
    evaluator = CachedEvaluator(ckpt, eval_view, dtype=dtype)

    def one_trial(t: int) -> FaultTrial:
        rng = substream(seed, "fault", t)
        if layer_first:
            lname = layer_names[int(rng.integers(0, len(layer_names)))]
            les = by_layer[lname]
            lsizes = np.array([e[2] for e in les], dtype=np.int64)
            loffs = np.concatenate([[0], np.cumsum(lsizes)])
            r = int(rng.integers(0, loffs[-1]))
            e_idx = int(np.searchsorted(loffs, r, side="right") - 1)
            layer, tensor, _ = les[e_idx]
            flat = r - int(loffs[e_idx])
        else:
            r = int(rng.integers(0, total))
            e_idx = int(np.searchsorted(offsets, r, side="right") - 1)
            layer, tensor, _ = entries[e_idx]
            flat = r - int(offsets[e_idx])
        bit = int(rng.integers(0, 32))
        orig = ckpt.params[layer][tensor]
        patched = orig.copy()
        view = patched.reshape(-1)
        before = int(view.view(np.uint32)[flat])
        view.view(np.uint32)[flat] = before ^ (1 << bit)
        after = int(view.view(np.uint32)[flat])
        acc = evaluator.accuracy_with_patch(layer, tensor, patched)
        return FaultTrial(
            trial=t,
            layer=layer,
            tensor=tensor,
            index=flat,
            bit=bit,
            orig_bits=before,
            flipped_bits=after,
            accuracy=acc,
        )

    if workers is None:
        workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one_trial, range(trials)))
    return [one_trial(t) for t in range(trials)]


@dataclass
class SensitivityReport:
    """Per (layer, bit) aggregation of campaign trials."""

    baseline_accuracy: float
    degradation_delta: float
    rows: dict  # (layer, bit) -> {"count", "mean_accuracy", "misclassification", "degradation"}

    @property
    def trial_total(self) -> int:
        return sum(r["count"] for r in self.rows.values())

    def events(self, kind: str) -> int:
        return sum(r[kind] for r in self.rows.values())

    def bits_with_misclassification(self):
        return sorted({bit for (_, bit), r in self.rows.items() if r["misclassification"]})


def classify_trials(
    trials, baseline_accuracy: float, degradation_delta: float = 0.01
) -> SensitivityReport:
    """Split trials into misclassification / degradation / benign.

    Misclassification: accuracy below 0.5 (unreliable classifier).
    Degradation: at least degradation_delta below baseline but still >= 0.5.
    """
    if not 0.0 <= baseline_accuracy <= 1.0:
        raise ValidationError(f"baseline accuracy {baseline_accuracy} outside [0,1]")
    rows: dict = {}
    for tr in trials:
        key = (tr.layer, tr.bit)
        row = rows.setdefault(
            key,
            {"count": 0, "acc_sum": 0.0, "misclassification": 0, "degradation": 0},
        )
        row["count"] += 1
        row["acc_sum"] += tr.accuracy
        if tr.accuracy < 0.5:
            row["misclassification"] += 1
        elif tr.accuracy < baseline_accuracy - degradation_delta:
            row["degradation"] += 1
    for row in rows.values():
        row["mean_accuracy"] = row.pop("acc_sum") / row["count"]
    return SensitivityReport(baseline_accuracy, degradation_delta, rows)


TRIAL_FIELDS = ("trial", "layer", "tensor", "index", "bit", "orig_hex", "flipped_hex", "accuracy")


def trials_to_csv(trials, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_FIELDS)
        for tr in trials:
            writer.writerow(
                [
                    tr.trial,
                    tr.layer,
                    tr.tensor,
                    tr.index,
                    tr.bit,
                    f"0x{tr.orig_bits:08x}",
                    f"0x{tr.flipped_bits:08x}",
                    repr(tr.accuracy),
                ]
            )


def trials_from_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                FaultTrial(
                    trial=int(row["trial"]),
                    layer=row["layer"],
                    tensor=row["tensor"],
                    index=int(row["index"]),
                    bit=int(row["bit"]),
                    orig_bits=int(row["orig_hex"], 16),
                    flipped_bits=int(row["flipped_hex"], 16),
                    accuracy=float(row["accuracy"]),
                )
            )
    return out
