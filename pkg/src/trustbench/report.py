"""CSV artifacts and static SVG charts.

All output is deterministic: numbers go to CSV in shortest round-trip
decimal form (repr), SVG coordinates use fixed-width formatting, and every
iteration is explicitly ordered.
"""

from __future__ import annotations

import csv

import numpy as np

from .constellations import SCHEME_NAMES
from .errors import ValidationError
from .robustness import SnrSweepResult

# five-stop blue->green->yellow ramp, matplotlib-viridis flavoured
_STOPS = (
    (0.0, (68, 1, 84)),
    (0.25, (59, 82, 139)),
    (0.5, (33, 145, 140)),
    (0.75, (94, 201, 98)),
    (1.0, (253, 231, 37)),
)


def _color(v: float) -> str:
    v = min(max(float(v), 0.0), 1.0)
    for (x0, c0), (x1, c1) in zip(_STOPS, _STOPS[1:]):
        if v <= x1:
            t = (v - x0) / (x1 - x0) if x1 > x0 else 0.0
            rgb = tuple(round(a + t * (b - a)) for a, b in zip(c0, c1))
            return f"#{rgb[0]:02x}{rgb[1]:02x}{rgb[2]:02x}"
    return "#fde725"


def _svg(width, height, body) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">\n'
        '<rect width="100%" height="100%" fill="white"/>\n'
        + body
        + "</svg>\n"
    )


def _text(x, y, s, size=11, anchor="middle", rotate=None) -> str:
    extra = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate else ""
    return (
        f'<text x="{x:.1f}" y="{y:.1f}" font-family="sans-serif" '
        f'font-size="{size}" text-anchor="{anchor}"{extra}>{s}</text>\n'
    )


# ---------------------------------------------------------------------------
# sweep CSV + line chart

SWEEP_FIELDS = ("snr_db", "accuracy", "n")


def sweep_to_csv(result: SnrSweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for snr, acc, n in result.rows():
            w.writerow([repr(float(snr)), repr(float(acc)), int(n)])


def sweep_from_csv(path) -> SnrSweepResult:
    snr, acc, n = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            snr.append(float(row["snr_db"]))
            acc.append(float(row["accuracy"]))
            n.append(int(row["n"]))
    if not snr:
        raise ValidationError(f"sweep file {path} is empty")
    return SnrSweepResult(
        np.asarray(snr), np.asarray(acc), np.asarray(n, dtype=np.int64)
    )


def render_sweep_svg(curves: dict) -> str:
    """Accuracy-vs-SNR line chart; curves maps name -> SnrSweepResult."""
    if not curves:
        raise ValidationError("no sweep curves to render")
    width, height = 560, 360
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    lo = min(float(c.snr_db.min()) for c in curves.values())
    hi = max(float(c.snr_db.max()) for c in curves.values())
    span = hi - lo if hi > lo else 1.0

    def sx(v):
        return left + (v - lo) / span * pw

    def sy(a):
        return top + (1.0 - a) * ph

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>\n']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        body.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{left+pw}" y2="{y:.1f}" '
            'stroke="#dddddd"/>\n'
        )
        body.append(_text(left - 8, y + 4, f"{frac:.2f}", anchor="end"))
    for level in sorted({float(v) for c in curves.values() for v in c.snr_db}):
        body.append(_text(sx(level), top + ph + 16, f"{level:g}", size=9))
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    for i, (name, curve) in enumerate(sorted(curves.items())):
        color = palette[i % len(palette)]
        pts = " ".join(
            f"{sx(float(s)):.1f},{sy(float(a)):.1f}"
            for s, a in zip(curve.snr_db, curve.accuracy)
        )
        body.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            'stroke-width="2"/>\n'
        )
        body.append(_text(left + pw - 6, top + 16 + 14 * i, name, anchor="end"))
        body.append(
            f'<line x1="{left+pw-70}" y1="{top+12+14*i}" x2="{left+pw-56}" '
            f'y2="{top+12+14*i}" stroke="{color}" stroke-width="2"/>\n'
        )
    body.append(_text(left + pw / 2, height - 14, "SNR (dB)"))
    body.append(_text(16, top + ph / 2, "accuracy", rotate=-90))
    return _svg(width, height, "".join(body))


# ---------------------------------------------------------------------------
# confusion CSV + heatmap

def confusion_to_csv(counts: np.ndarray, path) -> None:
    counts = np.asarray(counts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + SCHEME_NAMES)
        for i, name in enumerate(SCHEME_NAMES):
            w.writerow([name] + [int(v) for v in counts[i]])


def confusion_from_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[1:] != SCHEME_NAMES:
            raise ValidationError(f"{path}: not a confusion matrix file")
        for row in reader:
            rows.append([int(v) for v in row[1:]])
    if len(rows) != len(SCHEME_NAMES):
        raise ValidationError(f"{path}: expected {len(SCHEME_NAMES)} rows")
    return np.asarray(rows, dtype=np.int64)


def render_confusion_svg(counts: np.ndarray) -> str:
    counts = np.asarray(counts, dtype=np.float64)
    n = len(SCHEME_NAMES)
    cell = 52
    left, top = 90, 60
    width = left + n * cell + 20
    height = top + n * cell + 30
    row_sum = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(row_sum > 0, counts / row_sum, 0.0)
    body = []
    for i in range(n):
        body.append(
            _text(left - 8, top + i * cell + cell / 2 + 4, SCHEME_NAMES[i], anchor="end")
        )
        body.append(
            _text(left + i * cell + cell / 2, top - 10, SCHEME_NAMES[i], size=10)
        )
        for j in range(n):
            x, y = left + j * cell, top + i * cell
            body.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_color(rate[i, j])}" stroke="#ffffff"/>\n'
            )
            shade = "#000000" if rate[i, j] > 0.5 else "#ffffff"
            body.append(
                f'<text x="{x + cell/2:.1f}" y="{y + cell/2 + 4:.1f}" '
                f'font-family="sans-serif" font-size="10" fill="{shade}" '
                f'text-anchor="middle">{rate[i, j]:.2f}</text>\n'
            )
    body.append(_text(left + n * cell / 2, height - 6, "predicted", size=11))
    return _svg(width, height, "".join(body))


# ---------------------------------------------------------------------------
# fault sensitivity heatmap (layer x bit, mean accuracy)

def render_sensitivity_svg(trials) -> str:
    if not trials:
        raise ValidationError("no fault trials to render")
    layers = sorted({t.layer for t in trials})
    acc: dict = {}
    cnt: dict = {}
    for t in trials:
        key = (t.layer, t.bit)
        acc[key] = acc.get(key, 0.0) + t.accuracy
        cnt[key] = cnt.get(key, 0) + 1
    cell_w, cell_h = 24, 26
    left, top = 110, 50
    width = left + 32 * cell_w + 20
    height = top + len(layers) * cell_h + 40
    body = []
    for b in range(32):
        body.append(_text(left + b * cell_w + cell_w / 2, top - 8, str(b), size=9))
    for i, layer in enumerate(layers):
        y = top + i * cell_h
        body.append(_text(left - 8, y + cell_h / 2 + 4, layer, anchor="end", size=10))
        for b in range(32):
            key = (layer, b)
            x = left + b * cell_w
            if key in acc:
                mean = acc[key] / cnt[key]
                body.append(
                    f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                    f'fill="{_color(mean)}" stroke="#ffffff"/>\n'
                )
            else:
                body.append(
                    f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                    'fill="#f0f0f0" stroke="#ffffff"/>\n'
                )
    body.append(
        _text(left + 16 * cell_w, height - 10, "bit position (mean accuracy colour)")
    )
    return _svg(width, height, "".join(body))


def sensitivity_report_to_csv(report, path) -> None:
    """(layer, bit) aggregation rows with event counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["layer", "bit", "count", "mean_accuracy", "misclassification", "degradation", "benign"]
        )
        for (layer, bit), row in sorted(report.rows.items()):
            benign = row["count"] - row["misclassification"] - row["degradation"]
            w.writerow(
                [
                    layer,
                    bit,
                    row["count"],
                    repr(row["mean_accuracy"]),
                    row["misclassification"],
                    row["degradation"],
                    benign,
                ]
            )


def history_to_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in history:
            w.writerow(
                [
                    row["epoch"],
                    repr(row["train_loss"]),
                    repr(row["train_acc"]),
                    repr(row["val_loss"]),
                    repr(row["val_acc"]),
                ]
            )
