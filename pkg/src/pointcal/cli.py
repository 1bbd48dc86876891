"""Command-line interface: gen, train, eval, calib, oracle.

Every command is deterministic given its config and seed; reports carry
the resolved config and its hash so downstream figures are traceable.
Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .calibration import BinStats, CalibrationReport, ece as compute_ece, reliability_bins
from .config import ExperimentConfig, load_experiment_config
from .evaluation import (MATCH_METHODS, SEG_METHODS, EvalItems, evaluate_matching,
                         evaluate_segmentation)
from .oracles import SUITES, rows_to_csv
from .persist import (Checkpoint, checkpoint_from_params, config_hash, load_checkpoint,
                      load_dataset, params_from_checkpoint, read_json, save_checkpoint,
                      write_json, write_matching_dataset, write_segmentation_dataset)
from .rng import Rng
from .scenes import gen_matching_pair, gen_segmentation_scene
from .training import TrainingDiverged, train_matching, train_segmentation

REPORT_VERSION = 1
# fields excluded from byte-for-byte determinism comparisons
NONDETERMINISTIC_REPORT_FIELDS = ("wall_clock_s",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# command implementations (importable; the CLI wraps them)
# ---------------------------------------------------------------------------

def cmd_gen(config: ExperimentConfig, out_dir=None) -> Path:
    """Generate the dataset a config describes; returns the manifest path."""
    out = Path(out_dir if out_dir is not None else config.out_dir) / "dataset"
    cfg_dict = config.to_dict()
    if config.task == "segmentation":
        rng = Rng(config.scene.seed)
        train = [gen_segmentation_scene(config.scene, rng.derive("train", i))
                 for i in range(config.n_train)]
        evals = [gen_segmentation_scene(config.scene, rng.derive("eval", i))
                 for i in range(config.n_eval)]
        return write_segmentation_dataset(out, train, evals, cfg_dict,
                                          config.scene.seed)
    rng = Rng(config.pair.seed)
    train = [gen_matching_pair(config.pair, rng.derive("train", i))
             for i in range(config.n_train)]
    evals = [gen_matching_pair(config.pair, rng.derive("eval", i))
             for i in range(config.n_eval)]
    return write_matching_dataset(out, train, evals, cfg_dict, config.pair.seed)


def cmd_train(config: ExperimentConfig, out_dir=None) -> tuple:
    """Train the configured variant; writes checkpoint + train report.

    Returns (checkpoint_path, report_path).
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    manifest = out / "dataset" / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found at {manifest}; run gen")
    dataset = load_dataset(manifest)
    rng = Rng(config.seed)
    if config.task == "segmentation":
        params, report = train_segmentation(
            config.net, dataset.train, config.variant,
            metric_weight=config.metric_weight, margin=config.margin,
            epochs=config.epochs, rng=rng, lr=config.lr,
            momentum=config.momentum, weight_decay=config.weight_decay,
            triplets_per_step=config.triplets_per_step,
            ces_neighborhood=config.ces_neighborhood,
            correlated=config.correlated, au_samples=config.au_samples)
    else:
        params, report = train_matching(
            config.net, dataset.train, config.variant, margin=config.margin,
            stage_epochs=config.stage_epochs, rng=rng, lr=config.lr,
            momentum=config.momentum, weight_decay=config.weight_decay,
            triplets_per_step=config.triplets_per_step,
            correlated=config.correlated)

    cfg_dict = config.to_dict()
    ckpt = checkpoint_from_params(params, metadata={
        "task": config.task, "variant": config.variant, "seed": config.seed,
        "epochs": report.epochs, "losses": report.losses, "config": cfg_dict})
    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, ckpt)

    report_doc = {
        "report_version": REPORT_VERSION,
        "kind": "train",
        "task": config.task,
        "variant": config.variant,
        "seed": config.seed,
        "epochs": report.epochs,
        "losses": report.losses,
        "param_count": report.param_count,
        "wall_clock_s": report.wall_clock_s,
        "checkpoint": ckpt_path.name,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
    }
    report_path = out / "train_report.json"
    write_json(report_path, report_doc)
    return ckpt_path, report_path


def _bins_to_rows(bins: BinStats) -> list:
    rows = []
    for b in range(bins.num_bins):
        count = int(bins.counts[b])
        empty = count == 0
        rows.append({
            "center": float(bins.centers[b]),
            "mean_level": None if empty else float(bins.mean_levels[b]),
            "count": count,
            "accuracy": None if empty else float(bins.accuracies[b]),
            "confidence": None if empty else float(bins.confidences[b]),
        })
    return rows


def write_reliability_csv(path, bins: BinStats) -> None:
    lines = ["bin_center,mean_level,count,accuracy,confidence"]
    for row in _bins_to_rows(bins):
        if row["count"] == 0:
            lines.append("%.6g,,0,," % row["center"])
        else:
            lines.append("%.6g,%.9g,%d,%.9g,%.9g"
                         % (row["center"], row["mean_level"], row["count"],
                            row["accuracy"], row["confidence"]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_items_csv(path, items: EvalItems) -> None:
    lines = ["uncertainty,level,correct"]
    for u, lv, c in zip(items.uncertainty, items.levels, items.correct):
        lines.append("%.9g,%.9g,%d" % (u, lv, int(c)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_items_csv(path) -> EvalItems:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
    data = np.array([[float(v) for v in r.split(",")] for r in rows])
    return EvalItems(data[:, 0], data[:, 1], data[:, 2])


def _report_doc(report: CalibrationReport, task: str, config: dict,
                num_bins: int) -> dict:
    metric = {"kind": report.metric_kind, "value": report.metric_value}
    if report.per_pair_hit_ratio is not None:
        metric["per_pair_hit_ratio"] = [float(h) for h in report.per_pair_hit_ratio]
    return {
        "report_version": REPORT_VERSION,
        "kind": "eval",
        "task": task,
        "method": report.method,
        "seed": report.seed,
        "metric": metric,
        "ece": report.ece,
        "num_bins": num_bins,
        "bins": _bins_to_rows(report.bins),
        "config": config,
        "config_hash": config_hash(config) if config else "",
    }


def cmd_eval(checkpoint_path, dataset_manifest, method: str, out_dir,
             seed: int = None, num_bins: int = 10) -> Path:
    """Evaluate a checkpoint on a dataset's eval split; writes the report
    JSON, the reliability CSV and the per-item dump. Returns the report path."""
    ckpt = load_checkpoint(checkpoint_path)
    params = params_from_checkpoint(ckpt)
    dataset = load_dataset(dataset_manifest)
    task = ckpt.metadata.get("task")
    ds_task = read_json(dataset_manifest)["task"]
    if task != ds_task:
        raise ValueError(f"checkpoint task {task!r} does not match dataset {ds_task!r}")
    methods = SEG_METHODS if task == "segmentation" else MATCH_METHODS
    if method not in methods:
        raise ValueError(f"method {method!r} invalid for task {task!r}")
    rng = Rng(seed if seed is not None else ckpt.metadata.get("seed", 0))
    if task == "segmentation":
        report, items = evaluate_segmentation(params, dataset.eval, method, rng,
                                              num_bins=num_bins)
    else:
        report, items = evaluate_matching(params, dataset.eval, method, rng,
                                          num_bins=num_bins)

    out = Path(out_dir) / f"eval_{method}"
    out.mkdir(parents=True, exist_ok=True)
    doc = _report_doc(report, task, ckpt.metadata.get("config", {}), num_bins)
    report_path = out / "report.json"
    write_json(report_path, doc)
    write_reliability_csv(out / "reliability.csv", report.bins)
    write_items_csv(out / "items.csv", items)
    return report_path


def cmd_calib(items_path, out_dir, num_bins: int = 10) -> Path:
    """Re-bin an existing per-item dump into a fresh calibration report."""
    items = read_items_csv(items_path)
    bins = reliability_bins(items.levels, items.correct, num_bins)
    doc = {
        "report_version": REPORT_VERSION,
        "kind": "calib",
        "source": str(items_path),
        "ece": compute_ece(bins),
        "num_bins": num_bins,
        "bins": _bins_to_rows(bins),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"calib_{num_bins}.json"
    write_json(report_path, doc)
    write_reliability_csv(out / f"calib_{num_bins}.csv", bins)
    return report_path


def cmd_oracle(suite: str, out_dir=None, seed: int = None) -> bool:
    """Run a verification suite; writes its CSV table, returns overall pass."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    kwargs = {} if seed is None else {"seed": seed}
    rows = SUITES[suite](**kwargs)
    csv = rows_to_csv(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"oracle_{suite}.csv").write_text(csv, encoding="utf-8")
    else:
        sys.stdout.write(csv)
    return all(r.passed for r in rows)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="pointcal",
                     description="probabilistic point-embedding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", default=None)

    p_train = sub.add_parser("train", help="train the configured variant")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True, help="dataset manifest path")
    p_eval.add_argument("--method", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--bins", type=int, default=10)

    p_calib = sub.add_parser("calib", help="re-bin an eval item dump")
    p_calib.add_argument("--dump", required=True, help="items.csv from eval")
    p_calib.add_argument("--out", required=True)
    p_calib.add_argument("--bins", type=int, default=10)

    p_oracle = sub.add_parser("oracle", help="run a verification suite")
    p_oracle.add_argument("--suite", required=True,
                          choices=sorted(SUITES))
    p_oracle.add_argument("--out", default=None)
    p_oracle.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen":
            config = load_experiment_config(args.config, seed_override=args.seed,
                                            out_override=args.out)
            path = cmd_gen(config)
            print(path)
        elif args.command == "train":
            config = load_experiment_config(args.config, seed_override=args.seed,
                                            out_override=args.out)
            ckpt, report = cmd_train(config)
            print(report)
        elif args.command == "eval":
            path = cmd_eval(args.checkpoint, args.dataset, args.method, args.out,
                            seed=args.seed, num_bins=args.bins)
            print(path)
        elif args.command == "calib":
            path = cmd_calib(args.dump, args.out, num_bins=args.bins)
            print(path)
        elif args.command == "oracle":
            passed = cmd_oracle(args.suite, out_dir=args.out, seed=args.seed)
            if not passed:
                print("oracle suite FAILED its tolerance gates", file=sys.stderr)
                return 2
            print("oracle suite passed")
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
