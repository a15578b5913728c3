"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .boundary import boundary_grid, padded_bounds, write_grid_csv
from .config import ConfigError, ExperimentConfig
from .data import (
    Dataset,
    Normalizer,
    SplitSpec,
    load_csv,
    read_labeled_csv,
    split,
    write_csv,
)
from .distill import (
    DistilledSet,
    IcdConfig,
    dataset_nll,
    distill,
    predict_with_distilled,
    random_context_baseline,
)
from .meta import meta_train
from .metrics import accuracy, evaluate, trend_slope
from .model import PfnModel
from .prior import sample_two_moons

logger = logging.getLogger("icdistill")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _split_spec(cfg: ExperimentConfig) -> SplitSpec:
    d = cfg.data
    return SplitSpec(d.train_frac, d.val_frac, d.test_frac, seed=cfg.seed, stratified=d.stratified)


def _icd_config(cfg: ExperimentConfig, args) -> IcdConfig:
    icd = cfg.icd_config()
    overrides = {k: getattr(args, k) for k in ("m", "steps", "lr") if getattr(args, k, None) is not None}
    try:
        return IcdConfig(**{**icd.to_dict(), **overrides})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_distilled(dist: DistilledSet, path, sidecar: dict) -> None:
    write_csv(dist.as_dataset(), path)
    _dump({"m": dist.m, "C": dist.num_classes, **sidecar}, Path(path).with_suffix(".json"))


def read_distilled(path) -> DistilledSet:
    path = Path(path)
    side = path.with_suffix(".json")
    C = json.loads(side.read_text())["C"] if side.exists() else None
    data = read_labeled_csv(path, "label", C)
    return DistilledSet(data.X, data.y, data.num_classes)


# ---------------------------------------------------------------------------
# commands


def cmd_meta_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    steps = args.steps if args.steps is not None else cfg.meta_train.steps
    lr = args.lr if args.lr is not None else cfg.meta_train.lr
    model = PfnModel.init(cfg.model, seed=cfg.seed)
    model, log = meta_train(
        model, cfg.prior, steps, adam_lr=lr, split_ratio=cfg.meta_train.split_ratio,
        window=min(cfg.meta_train.window, steps), out_dir=out,
    )
    model.save(out / "model.json")
    _dump(cfg.to_dict(), out / "config.json")
    logger.info("wrote %s", out / "model.json")
    return EXIT_OK


def _random_arm(model, train: Dataset, m: int, test: Dataset, seed: int, repeats: int) -> dict:
    reports = []
    for r in range(repeats):
        _, proba = random_context_baseline(model, train, m, test.X, np.random.default_rng(seed + r))
        reports.append(evaluate(test.y, proba).to_dict())
    mean = {k: float(np.mean([rep[k] for rep in reports])) for k in ("accuracy", "f1", "auc")}
    return {"mean": mean, "runs": reports}


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    icd = _icd_config(cfg, args)
    model = PfnModel.load(args.checkpoint)
    if icd.m > model.config.context_cap:
        raise ConfigError(f"m={icd.m} exceeds context_cap={model.config.context_cap}")
    data, ingest = load_csv(args.train_csv, cfg.data.label_column, cfg.data.categorical_columns)
    train, val, test = split(data, _split_spec(cfg))
    norm = Normalizer.fit(train.X)
    train, val, test = norm.apply(train), norm.apply(val), norm.apply(test)
    dist, log = distill(model, train, val, icd)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_distilled(dist, out / "distilled.csv", {
        "seed": icd.seed,
        "best_val_auc": log.summary["best_val_auc"],
        "steps_run": log.summary["steps_run"],
    })
    log.write_jsonl(out / "distill_log.jsonl")
    write_csv(test, out / "test.csv")
    _dump({"mean": norm.mean.tolist(), "std": norm.std.tolist()}, out / "normalizer.json")

    _, proba = predict_with_distilled(model, dist, test.X)
    icd_report = evaluate(test.y, proba).to_dict()
    rand = _random_arm(model, train, min(icd.m, train.n), test, icd.seed, cfg.eval.baseline_repeats)
    report = {
        "icd": icd_report,
        "random": rand,
        "icd_test_accuracy": icd_report["accuracy"],
        "random_test_accuracy": rand["mean"]["accuracy"],
        "split_sizes": {"train": train.n, "val": val.n, "test": test.n},
        "rejected_rows": ingest.rejected,
    }
    _dump(report, out / "report.json")
    return EXIT_OK


def _eval_one(model: PfnModel, dist: DistilledSet, test_csv) -> dict:
    test = read_labeled_csv(test_csv, "label", dist.num_classes)
    if test.d != dist.d:
        raise ConfigError(f"{test_csv}: {test.d} features, distilled set has {dist.d}")
    _, proba = predict_with_distilled(model, dist, test.X)
    return evaluate(test.y, proba).to_dict()


def cmd_eval(args) -> int:
    model = PfnModel.load(args.checkpoint)
    dist = read_distilled(args.distilled)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        reports = list(pool.map(lambda p: _eval_one(model, dist, p), args.test))
    result = {"reports": {str(p): r for p, r in zip(args.test, reports)}}
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_boundary(args) -> int:
    model = PfnModel.load(args.checkpoint)
    dist = read_distilled(args.distilled)
    if dist.d != 2:
        raise ConfigError(f"boundary export needs 2 features, distilled set has {dist.d}")
    bounds = args.bounds if args.bounds else padded_bounds(dist.X)
    write_grid_csv(boundary_grid(model, dist.as_dataset(), bounds, args.resolution), args.out)
    return EXIT_OK


def _trend_points(path) -> list[tuple[float, float]]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "x" in doc and "y" in doc:
        return list(zip(doc["x"], doc["y"]))
    items = doc if isinstance(doc, list) else [doc]
    try:
        return [(float(it["train_size"]), float(it["log_auc_ratio"])) for it in items]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: expected train_size/log_auc_ratio records or x/y lists") from exc


def cmd_trend(args) -> int:
    pts = [p for path in args.results for p in _trend_points(path)]
    x, y = zip(*pts) if pts else ((), ())
    try:
        res = trend_slope(x, y)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    text = json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def run_moons_demo(cfg: ExperimentConfig, out: Path, checkpoint=None, icd: IcdConfig | None = None) -> dict:
    """Two-moons reproduction: distill 16 points for 400 steps and export boundary grids."""
    out.mkdir(parents=True, exist_ok=True)
    if checkpoint:
        model = PfnModel.load(checkpoint)
    else:
        model = PfnModel.init(cfg.model, seed=cfg.seed)
        model, _ = meta_train(model, cfg.prior, cfg.meta_train.steps, adam_lr=cfg.meta_train.lr,
                              split_ratio=cfg.meta_train.split_ratio,
                              window=min(cfg.meta_train.window, cfg.meta_train.steps), out_dir=out / "meta")
        model.save(out / "model.json")
    icd = icd or IcdConfig(m=16, steps=400, lr=1e-2, batch_size=cfg.icd.batch_size,
                           eval_interval=cfg.icd.eval_interval,
                           early_stop_patience=cfg.icd.early_stop_patience, seed=cfg.seed)
    data = sample_two_moons(cfg.data.moons_n, cfg.data.moons_noise, np.random.default_rng(cfg.seed))
    train, val, test = split(data, _split_spec(cfg))
    norm = Normalizer.fit(train.X)
    train, val, test = norm.apply(train), norm.apply(val), norm.apply(test)
    write_csv(train, out / "train.csv")
    write_csv(test, out / "test.csv")

    grid_steps = sorted(s for s in cfg.eval.grid_steps if s <= icd.steps)
    dist, log = distill(model, train, val, icd, record_steps=grid_steps)
    log.write_jsonl(out / "distill_log.jsonl")
    bounds = padded_bounds(np.concatenate([train.X, test.X]))
    trajectory = {}
    for step in grid_steps:
        snap = DistilledSet(log.snapshots[step], dist.y, dist.num_classes, dist.per_class_counts)
        grid = boundary_grid(model, snap.as_dataset(), bounds, cfg.eval.grid_resolution)
        write_grid_csv(grid, out / f"grid_t{step}.csv")
        write_csv(snap.as_dataset(), out / f"distilled_t{step}.csv")
        labels, _ = predict_with_distilled(model, snap, test.X)
        trajectory[str(step)] = {
            "test_accuracy": accuracy(test.y, labels),
            "train_loss": dataset_nll(model, train, snap),
        }
    write_distilled(dist, out / "distilled.csv", {
        "seed": icd.seed,
        "best_val_auc": log.summary["best_val_auc"],
        "steps_run": log.summary["steps_run"],
    })
    _, proba = predict_with_distilled(model, dist, test.X)
    icd_report = evaluate(test.y, proba).to_dict()
    rand = _random_arm(model, train, icd.m, test, 0, cfg.eval.baseline_repeats)
    summary = {
        "trajectory": trajectory,
        "icd": icd_report,
        "icd_test_accuracy": icd_report["accuracy"],
        "random_mean_test_accuracy": rand["mean"]["accuracy"],
        "random_mean_test_auc": rand["mean"]["auc"],
        "random_test_accuracies": [r["accuracy"] for r in rand["runs"]],
        "best_step": log.summary["best_step"],
        "best_val_auc": log.summary["best_val_auc"],
        "bounds": list(bounds),
    }
    _dump(summary, out / "summary.json")
    return summary


def cmd_moons_demo(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.meta_train.steps = args.steps
    icd = None
    if args.m is not None or args.lr is not None:
        icd = IcdConfig(m=args.m or 16, steps=400, lr=1e-2 if args.lr is None else args.lr,
                        batch_size=cfg.icd.batch_size, eval_interval=cfg.icd.eval_interval,
                        early_stop_patience=cfg.icd.early_stop_patience, seed=cfg.seed)
    run_moons_demo(cfg, Path(args.out), args.checkpoint, icd)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", metavar="PATH", help="experiment JSON config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", metavar="DIR", required=True, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icdistill",
        description="Meta-train a small tabular transformer and distill datasets into short contexts for it.",
        epilog="Set ICDISTILL_LOG=debug|info to control logging. "
               "Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train a classifier on synthetic prior tasks")
    _common(p, "output directory for model.json, best.json, final.json and meta_log.jsonl")
    p.add_argument("--steps", type=int, help="number of meta-training steps")
    p.add_argument("--lr", type=float, help="meta-training Adam learning rate")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("distill", help="distill a CSV dataset into a small context")
    _common(p, "output directory for the distilled set, log and report")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="model checkpoint JSON")
    p.add_argument("--train-csv", required=True, metavar="PATH", help="labelled CSV with header")
    p.add_argument("--m", type=int, help="distilled set size")
    p.add_argument("--steps", type=int, help="distillation steps")
    p.add_argument("--lr", type=float, help="distillation Adam learning rate")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a distilled context on test CSVs")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="model checkpoint JSON")
    p.add_argument("--distilled", required=True, metavar="PATH", help="distilled set CSV")
    p.add_argument("--test", required=True, nargs="+", metavar="PATH", help="test CSVs (integer label column)")
    p.add_argument("--jobs", type=int, default=1, help="evaluate test files in parallel")
    p.add_argument("--out", metavar="PATH", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("boundary", help="export a probability grid for a 2-feature context")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="model checkpoint JSON")
    p.add_argument("--distilled", required=True, metavar="PATH", help="distilled set CSV")
    p.add_argument("--bounds", type=float, nargs=4, metavar=("X1MIN", "X1MAX", "X2MIN", "X2MAX"),
                   help="grid extent (default: distilled points padded by 0.5)")
    p.add_argument("--resolution", type=int, default=100, help="grid points per axis")
    p.add_argument("--out", required=True, metavar="PATH", help="output CSV")
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("trend", help="test whether a performance ratio trends with training-set size")
    p.add_argument("results", nargs="+", metavar="RESULTS_JSON",
                   help="JSON with x/y lists or train_size/log_auc_ratio records")
    p.add_argument("--out", metavar="PATH", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("moons-demo", help="two-moons distillation run with boundary grids")
    _common(p, "output directory")
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (meta-trains one when omitted)")
    p.add_argument("--steps", type=int, help="meta-training steps when no checkpoint is given")
    p.add_argument("--m", type=int, help="distilled set size (default 16)")
    p.add_argument("--lr", type=float, help="distillation learning rate (default 1e-2)")
    p.set_defaults(func=cmd_moons_demo)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ICDISTILL_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ArithmeticError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
