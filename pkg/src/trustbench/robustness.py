"""Trust attribute 1: classification accuracy as a function of SNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .dataset_io import DatasetView
from .errors import MissingLevel, ValidationError
from .training import as_predictor


@dataclass
class SnrSweepResult:
    """Ordered (snr_db, accuracy, sample_count) triples."""

    snr_db: np.ndarray
    accuracy: np.ndarray
    counts: np.ndarray

    def rows(self):
        return list(zip(self.snr_db, self.accuracy, self.counts))

    def overall_accuracy(self) -> float:
        return float(np.sum(self.accuracy * self.counts) / np.sum(self.counts))

    def spearman_vs_snr(self, lo_db=-np.inf, hi_db=np.inf) -> float:
        keep = (self.snr_db >= lo_db) & (self.snr_db <= hi_db)
        rho = spearmanr(self.snr_db[keep], self.accuracy[keep]).statistic
        return float(rho)


def snr_sweep(model, view: DatasetView, batch_size: int = 256) -> SnrSweepResult:
    """Per-level accuracy over the view's SNR grid."""
    levels = view.levels()
    if levels.size < 2:
        raise ValidationError(
            f"sweep needs at least 2 SNR levels, view has {levels.size}"
        )
    predict = as_predictor(model)
    accs, counts = [], []
    for level in levels:
        sub = view.at_level(level)
        if len(sub) == 0:
            raise MissingLevel(f"no frames at {level} dB")
        hits = 0
        for x, y, idx in sub.batches(batch_size):
            hits += int((np.asarray(predict(x, idx)) == y).sum())
        accs.append(hits / len(sub))
        counts.append(len(sub))
    return SnrSweepResult(
        snr_db=np.asarray(levels, dtype=float),
        accuracy=np.asarray(accs, dtype=float),
        counts=np.asarray(counts, dtype=np.int64),
    )


@dataclass
class SweepComparison:
    snr_db: np.ndarray
    delta: np.ndarray  # accuracy(a) - accuracy(b) per level
    spearman_a: float
    spearman_b: float


def compare_sweeps(a: SnrSweepResult, b: SnrSweepResult) -> SweepComparison:
    """Per-level deltas plus each curve's rank correlation against SNR."""
    if not np.array_equal(a.snr_db, b.snr_db):
        raise ValidationError("sweeps cover different SNR grids")
    return SweepComparison(
        snr_db=a.snr_db.copy(),
        delta=a.accuracy - b.accuracy,
        spearman_a=a.spearman_vs_snr(),
        spearman_b=b.spearman_vs_snr(),
    )
