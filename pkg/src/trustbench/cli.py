"""Command-line entry point: gen, train, eval, sweep, inject, attack, report.

Every run writes a manifest beside its outputs listing the inputs and
outputs with content hashes; the manifest digest covers only content, so
reruns with equal inputs and seeds produce equal digests regardless of
worker count or wall-clock.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .attacks import (
    ATTACK_KINDS,
    AttackConfig,
    ModelContext,
    attack,
    default_eps,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset_io import Dataset, file_sha256, generate_dataset
from .errors import TrustbenchError, IoError, ValidationError
from .faults import classify_trials, run_campaign, trials_from_csv, trials_to_csv
from .models import build_model, resnet_param_report
from .report import (
    confusion_from_csv,
    confusion_to_csv,
    history_to_csv,
    render_confusion_svg,
    render_sensitivity_svg,
    render_sweep_svg,
    sensitivity_report_to_csv,
    sweep_from_csv,
    sweep_to_csv,
)
from .robustness import snr_sweep
from .siggen import DatasetSpec
from .training import SplitPlan, TrainConfig, evaluate, split_dataset, train
from .attacks import PAPER_AER_REFERENCE


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors, as the contract requires."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_levels(text: str):
    """SNR grid syntax: 'lo:hi:step' or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"bad --levels {text!r}; use lo:hi:step or a,b,c")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0:
            raise ValidationError("--levels step must be positive")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return tuple(lo + i * step for i in range(n))
    return tuple(float(p) for p in text.split(","))


class RunManifest:
    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.t0 = time.time()

    def add_input(self, path):
        self.inputs[os.path.basename(str(path))] = file_sha256(path)

    def add_output(self, path):
        self.outputs[os.path.basename(str(path))] = file_sha256(path)

    def digest(self) -> str:
        stable = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        blob = json.dumps(stable, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def write(self, path) -> None:
        doc = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "digest": self.digest(),
            "tool_version": __version__,
            "wall_clock_s": time.time() - self.t0,
        }
        try:
            with open(path, "w") as fh:
                json.dump(doc, fh, sort_keys=True, indent=1)
                fh.write("\n")
        except OSError as exc:
            raise IoError(path, str(exc)) from exc


def _test_view(ds: Dataset, ckpt: Checkpoint, args):
    """Rebuild the test view a checkpoint was trained against."""
    fraction = getattr(args, "train_fraction", None)
    seed = getattr(args, "split_seed", None)
    meta = ckpt.metadata.get("split", {})
    if fraction is None:
        fraction = meta.get("train_fraction", 0.75)
    if seed is None:
        seed = meta.get("seed", 0)
    want_hash = ckpt.metadata.get("dataset_sha256")
    if want_hash and want_hash != ds.sha256():
        print(
            "warning: dataset hash differs from the one recorded at training time",
            file=sys.stderr,
        )
    _, test = split_dataset(ds, SplitPlan(train_fraction=fraction, seed=seed))
    return test


def _high_snr_slice(view, min_db: float = 10.0):
    """The >= min_db test slice; falls back to the top level if empty."""
    sliced = view.restrict_snr(min_db, np.inf)
    if len(sliced) == 0:
        top = float(view.levels().max())
        sliced = view.at_level(top)
    return sliced


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    spec = DatasetSpec(
        snr_grid_db=_parse_levels(args.levels),
        frames_per_cell=args.frames_per_cell,
        sps=args.sps,
        rrc_rolloff=args.rolloff,
        rrc_span_symbols=args.span,
        master_seed=args.seed,
    )
    manifest = RunManifest("gen", spec.to_json_dict())
    generate_dataset(spec, args.out)
    manifest.add_output(args.out)
    manifest.write(args.out + ".manifest.json")
    print(f"wrote {spec.frame_count} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    ds = Dataset(args.data)
    if args.config:
        try:
            with open(args.config) as fh:
                config = TrainConfig.from_json_dict(json.load(fh))
        except OSError as exc:
            raise IoError(args.config, str(exc)) from exc
    else:
        config = TrainConfig(epochs=args.epochs, seed=args.seed)
    plan = SplitPlan(train_fraction=args.train_fraction, seed=args.split_seed)
    manifest = RunManifest(
        "train",
        {
            "model": args.model,
            "train_config": config.to_json_dict(),
            "split": {"train_fraction": plan.train_fraction, "seed": plan.seed},
        },
    )
    manifest.add_input(args.data)
    graph = build_model(args.model)
    train_view, _ = split_dataset(ds, plan)
    extra = {
        "model": args.model,
        "dataset_sha256": ds.sha256(),
        "split": {"train_fraction": plan.train_fraction, "seed": plan.seed},
    }
    ckpt, history = train(graph, train_view, config, extra_metadata=extra)
    save_checkpoint(ckpt, args.out)
    history_path = args.out + ".history.csv"
    history_to_csv(history, history_path)
    manifest.add_output(args.out)
    manifest.add_output(history_path)
    manifest.write(args.out + ".manifest.json")
    if args.model == "resnet":
        rep = resnet_param_report()
        print(
            f"parameter count {rep['actual']} "
            f"(reported {rep['reported']}, delta {rep['delta']:+d})"
        )
    best = ckpt.metadata.get("best_val_acc")
    print(
        f"trained {args.model}: {ckpt.metadata['epochs_run']} epochs, "
        f"best val acc {best if best is not None else 'n/a'}"
    )
    return 0


def _cmd_eval(args) -> int:
    ds = Dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    manifest = RunManifest("eval", {"split": "test"})
    manifest.add_input(args.data)
    manifest.add_input(args.ckpt)
    view = _test_view(ds, ckpt, args)
    result = evaluate(ckpt, view)
    confusion_path = args.out + ".confusion.csv"
    confusion_to_csv(result.confusion.counts, confusion_path)
    doc = {
        "accuracy": result.accuracy,
        "per_snr": {repr(k): {"accuracy": v[0], "n": v[1]} for k, v in result.per_snr.items()},
        "n": result.confusion.total,
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    manifest.add_output(args.out)
    manifest.add_output(confusion_path)
    manifest.write(args.out + ".manifest.json")
    print(f"accuracy {result.accuracy:.4f} over {result.confusion.total} frames")
    return 0


def _cmd_sweep(args) -> int:
    ds = Dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    manifest = RunManifest("sweep", {})
    manifest.add_input(args.data)
    manifest.add_input(args.ckpt)
    view = _test_view(ds, ckpt, args)
    result = snr_sweep(ckpt, view)
    sweep_to_csv(result, args.out)
    manifest.add_output(args.out)
    if args.svg:
        with open(args.svg, "w") as fh:
            fh.write(render_sweep_svg({"model": result}))
        manifest.add_output(args.svg)
    manifest.write(args.out + ".manifest.json")
    print(f"swept {result.snr_db.size} levels; overall {result.overall_accuracy():.4f}")
    return 0


def _cmd_inject(args) -> int:
    ds = Dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    manifest = RunManifest(
        "inject",
        {
            "layer": args.layer,
            "trials": args.trials,
            "seed": args.seed,
            "eval_frames": args.eval_frames,
            "trainable_only": args.trainable_only,
            "layer_first": args.layer_first,
        },
    )
    manifest.add_input(args.data)
    manifest.add_input(args.ckpt)
    test = _test_view(ds, ckpt, args)
    eval_view = _high_snr_slice(test).subsample(
        per_class=max(1, args.eval_frames // 7), seed=args.seed
    )
    digest_before = ckpt.params_digest()
    trials = run_campaign(
        ckpt,
        eval_view,
        args.layer,
        args.trials,
        args.seed,
        trainable_only=args.trainable_only,
        layer_first=args.layer_first,
    )
    assert ckpt.params_digest() == digest_before
    trials_to_csv(trials, args.out)
    from .faults import CachedEvaluator

    baseline = CachedEvaluator(ckpt, eval_view).baseline_accuracy
    report = classify_trials(trials, baseline)
    report_path = args.out + ".report.csv"
    sensitivity_report_to_csv(report, report_path)
    manifest.add_output(args.out)
    manifest.add_output(report_path)
    manifest.write(args.out + ".manifest.json")
    print(
        f"{len(trials)} trials on {args.layer}: baseline {baseline:.4f}, "
        f"{report.events('misclassification')} misclassification / "
        f"{report.events('degradation')} degradation events"
    )
    return 0


def _cmd_attack(args) -> int:
    ds = Dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    test = _test_view(ds, ckpt, args)
    batch_view = _high_snr_slice(test).subsample(
        per_class=max(1, args.samples // 7), seed=args.seed
    )
    x = batch_view.frames(dtype=np.float64)
    y = batch_view.labels
    eps = args.eps if args.eps is not None else default_eps(x)
    step = args.step if args.step is not None else eps / 4.0
    config = AttackConfig(
        kind=args.attack,
        eps=eps,
        norm=args.norm,
        step=step,
        iters=args.iters,
        seed=args.seed,
    )
    manifest = RunManifest("attack", config.to_json_dict())
    manifest.add_input(args.data)
    manifest.add_input(args.ckpt)
    result = attack(ModelContext(ckpt), x, y, config)
    doc = result.to_json_dict()
    doc["clean_accuracy"] = float(np.mean(result.clean_pred == y))
    with open(args.out, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    manifest.add_output(args.out)
    manifest.write(args.out + ".manifest.json")
    print(f"{args.attack}: AER {result.aer:.4f} over {len(y)} samples")
    return 0


def _cmd_report(args) -> int:
    if not (args.sweep or args.confusion or args.trials or args.attack_result):
        raise ValidationError("report needs at least one input file")
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest("report", {})
    outputs = []
    if args.sweep:
        curves = {}
        for path in args.sweep:
            manifest.add_input(path)
            curves[os.path.splitext(os.path.basename(path))[0]] = sweep_from_csv(path)
        path = os.path.join(args.out, "sweep.svg")
        with open(path, "w") as fh:
            fh.write(render_sweep_svg(curves))
        outputs.append(path)
    if args.confusion:
        manifest.add_input(args.confusion)
        counts = confusion_from_csv(args.confusion)
        path = os.path.join(args.out, "confusion.svg")
        with open(path, "w") as fh:
            fh.write(render_confusion_svg(counts))
        outputs.append(path)
    if args.trials:
        manifest.add_input(args.trials)
        trials = trials_from_csv(args.trials)
        if not trials:
            raise ValidationError(f"{args.trials}: no trials")
        path = os.path.join(args.out, "sensitivity.svg")
        with open(path, "w") as fh:
            fh.write(render_sensitivity_svg(trials))
        outputs.append(path)
    if args.attack_result:
        import csv as _csv

        path = os.path.join(args.out, "aer_comparison.csv")
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(
                ["attack", "measured_aer", "reference_cnn_pct", "reference_resnet_pct"]
            )
            for rpath in args.attack_result:
                manifest.add_input(rpath)
                with open(rpath) as rf:
                    doc = json.load(rf)
                kind = doc["config"]["kind"]
                ref = PAPER_AER_REFERENCE.get(kind, ("", ""))
                w.writerow([kind, repr(doc["aer"]), ref[0], ref[1]])
        outputs.append(path)
    for path in outputs:
        manifest.add_output(path)
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(f"report written to {args.out} ({len(outputs)} artifacts)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="trustbench", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a dataset file")
    g.add_argument("--levels", default="-20:30:2", help="SNR grid: lo:hi:step or list")
    g.add_argument("--frames-per-cell", type=int, default=4096)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sps", type=int, default=8)
    g.add_argument("--rolloff", type=float, default=0.35)
    g.add_argument("--span", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train a classifier from scratch")
    t.add_argument("--model", choices=("cnn", "resnet"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file of training hyperparameters")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--train-fraction", type=float, default=0.75)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="accuracy + confusion matrix on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--train-fraction", type=float, default=None)
    e.add_argument("--split-seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sweep", help="accuracy per SNR level")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--train-fraction", type=float, default=None)
    s.add_argument("--split-seed", type=int, default=None)
    s.add_argument("--svg", help="also render a line chart")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sweep)

    i = sub.add_parser("inject", help="single-bit fault campaign")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--layer", required=True, help="campaign selector, e.g. C1 or all")
    i.add_argument("--trials", type=int, default=1000)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--eval-frames", type=int, default=210)
    i.add_argument("--trainable-only", action="store_true")
    i.add_argument("--layer-first", action="store_true")
    i.add_argument("--train-fraction", type=float, default=None)
    i.add_argument("--split-seed", type=int, default=None)
    i.add_argument("--out", required=True)
    i.set_defaults(func=_cmd_inject)

    a = sub.add_parser("attack", help="adversarial-example attack")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--attack", choices=ATTACK_KINDS, required=True)
    a.add_argument("--eps", type=float, default=None, help="default: 0.05 x batch RMS")
    a.add_argument("--step", type=float, default=None, help="default: eps/4")
    a.add_argument("--norm", choices=("l2", "linf"), default="linf")
    a.add_argument("--iters", type=int, default=10)
    a.add_argument("--samples", type=int, default=512)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--train-fraction", type=float, default=None)
    a.add_argument("--split-seed", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_attack)

    r = sub.add_parser("report", help="render SVG/CSV bundle from result files")
    r.add_argument("--sweep", action="append", help="sweep CSV (repeatable)")
    r.add_argument("--confusion", help="confusion CSV")
    r.add_argument("--trials", help="fault trials CSV")
    r.add_argument("--attack-result", action="append", help="attack JSON (repeatable)")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrustbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
