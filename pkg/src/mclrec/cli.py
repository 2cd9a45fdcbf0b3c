"""``mclrec`` command line: prepare, train, evaluate, ablate."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from . import config as cfgmod
from . import data, training
from .config import ConfigError, TrainConfig
from .evaluation import EvalReport, evaluate
from .intent import IntentError
from .nn import CheckpointError

OUT_DIR_ENV = "MCLREC_OUT_DIR"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.txt"

ABLATION_AXES = {
    "K": ("intent.K", (32, 64, 128, 256, 512, 1024, 2048)),
    "ratio": ("intent.ratio", (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875)),
    "gamma": ("loss.gamma", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)),
}

log = logging.getLogger("mclrec")


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


INPUT_ERRORS = (UsageError, ConfigError, FileNotFoundError, data.DatasetError,
                CheckpointError, IntentError)


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    dataset_fingerprint: str
    paths: dict[str, str]
    started: str
    finished: str = ""
    version: str = __version__
    extra: dict[str, Any] = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- config plumbing ------------------------------------------------------------

def parse_sets(items: Sequence[str]) -> dict[str, list[str]]:
    """``key=v1,v2`` pairs -> key -> values; more than one value means a grid axis."""
    out: dict[str, list[str]] = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in cfgmod.SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = [v.strip() for v in value.split(",")]
    return out


def single_sets(items: Sequence[str]) -> dict[str, str]:
    sets = parse_sets(items)
    grid = [k for k, v in sets.items() if len(v) > 1]
    if grid:
        raise UsageError(f"grid values are only accepted by 'train': {', '.join(grid)}")
    return {k: v[0] for k, v in sets.items()}


def expand_grid(sets: dict[str, list[str]]) -> list[dict[str, str]]:
    keys = list(sets)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sets[k] for k in keys))]


def resolve_config(args, cell: dict[str, Any] | None = None) -> TrainConfig:
    layers = []
    if args.config:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        layers.append(cfgmod.read_config_file(args.config))
    if cell:
        layers.append(cell)
    if args.seed is not None:
        layers.append({"train.seed": args.seed})
    return TrainConfig(cfgmod.resolve(*layers))


def out_root(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")


def load_data(path: str, cfg: TrainConfig) -> data.InteractionDataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.endswith(".json"):
        return data.load_dataset(path)
    return data.load(path, cfg["data.format"], cfg["data.kcore"], cfg["data.fixpoint"])


def cell_name(cell: dict[str, str], axes: Sequence[str]) -> str:
    return "_".join(f"{k}={cell[k]}" for k in axes)


# -- commands ----------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg = resolve_config(args, single_sets(args.set))
    fmt = args.format or cfg["data.format"]
    ds = data.load(args.input, fmt, cfg["data.kcore"], cfg["data.fixpoint"])
    if args.subsample:
        ds = ds.subsample(args.subsample, cfg["train.seed"])
    output = Path(args.output) if args.output else out_root(args) / "dataset.json"
    output.parent.mkdir(parents=True, exist_ok=True)
    started = _now()
    data.save_dataset(ds, output)
    stats = ds.stats()
    print(data.format_stats(stats))
    for key, value in stats.items():
        print(f"{key}={value!r}")
    RunManifest("prepare", _jsonable(cfg.flat), cfg["train.seed"], ds.fingerprint(),
                {"input": str(args.input), "dataset": str(output)}, started, _now(),
                extra={"format": fmt, "subsample": args.subsample}).write(output.parent)
    return 0


def _jsonable(flat: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}


def _train_one(args, ds: data.InteractionDataset, cfg: TrainConfig, run_dir: Path,
               command: str) -> EvalReport:
    started = _now()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfgmod.dump(cfg.flat))
    result = training.train(ds, cfg, out_dir=run_dir, resume=getattr(args, "resume", False))
    report = evaluate(result.encoder, ds, "test", exclude_history=cfg["eval.exclude_history"])
    (run_dir / REPORT_FILE).write_text(report.to_records())
    paths = {"dataset": str(args.data), "history": str(run_dir / training.HISTORY_FILE),
             "best": str(run_dir / training.BEST_FILE), "last": str(run_dir / training.LAST_FILE),
             "report": str(run_dir / REPORT_FILE)}
    RunManifest(command, _jsonable(cfg.flat), cfg["train.seed"], ds.fingerprint(), paths,
                started, _now(), extra={"best_epoch": result.best_epoch,
                                        "epochs_run": len(result.history)}).write(run_dir)
    return report


def cmd_train(args) -> int:
    sets = parse_sets(args.set)
    axes = [k for k, v in sets.items() if len(v) > 1]
    grid = expand_grid(sets)
    cfgs = [resolve_config(args, cell) for cell in grid]  # validate every cell up front
    ds = load_data(args.data, cfgs[0])
    root = out_root(args)
    for cell, cfg in zip(grid, cfgs):
        run_dir = root / (args.name if len(grid) == 1 else f"{args.name}_{cell_name(cell, axes)}")
        report = _train_one(args, ds, cfg, run_dir, "train")
        print(f"[{run_dir}]")
        print(report.table())
        print(report.to_records(), end="")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args, single_sets(args.set))
    model, _, meta = training.load_model(args.checkpoint)
    ds = load_data(args.data, cfg)
    if ds.item_count != model.cfg.item_count:
        raise CheckpointError(
            f"checkpoint was trained on {model.cfg.item_count} items but the dataset has "
            f"{ds.item_count}; the item embedding cannot score this catalog")
    started = _now()
    report = evaluate(model, ds, args.split, exclude_history=cfg["eval.exclude_history"])
    run_dir = out_root(args) / f"evaluate_{args.split}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / REPORT_FILE).write_text(report.to_records())
    RunManifest("evaluate", meta["config"], int(meta["config"]["train.seed"]), ds.fingerprint(),
                {"checkpoint": str(args.checkpoint), "dataset": str(args.data),
                 "report": str(run_dir / REPORT_FILE)}, started, _now(),
                extra={"split": args.split}).write(run_dir)
    print(report.table())
    print(report.to_records(), end="")
    return 0


def ablation_table(axis: str, rows: list[dict[str, Any]]) -> str:
    header = f"{axis:>8}  {'HR@5':>7}  {'HR@10':>7}  {'NDCG@5':>7}  {'NDCG@10':>7}  status"
    lines = [header]
    for r in rows:
        if r["status"] == "ok":
            lines.append(f"{r['value']:>8}  {r['hr5']:7.4f}  {r['hr10']:7.4f}  "
                         f"{r['ndcg5']:7.4f}  {r['ndcg10']:7.4f}  ok")
        else:
            lines.append(f"{r['value']:>8}  {'-':>7}  {'-':>7}  {'-':>7}  {'-':>7}  {r['status']}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    key, grid = ABLATION_AXES[args.axis]
    values = [v.strip() for v in args.values.split(",")] if args.values else [str(v) for v in grid]
    base = single_sets(args.set)
    if key in base:
        raise UsageError(f"{key} is the ablation axis; do not also --set it")
    cfgs = [resolve_config(args, base | {key: v}) for v in values]
    ds = load_data(args.data, cfgs[0])
    root = out_root(args) / f"ablate_{args.axis}"
    rows: list[dict[str, Any]] = []
    for value, cfg in zip(values, cfgs):
        row: dict[str, Any] = {"axis": args.axis, "value": value}
        try:
            report = _train_one(args, ds, cfg, root / f"{key}={value}", "ablate")
            row.update(report.metrics(), status="ok")
        except IntentError as err:
            row["status"] = f"error: {err}"
            log.warning("cell %s=%s failed: %s", key, value, err)
        rows.append(row)
    table = ablation_table(args.axis, rows)
    (root / "table.txt").write_text(table + "\n")
    with open(root / "rows.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(table)
    return 0


# -- parser -------------------------------------------------------------------

def _config_help() -> str:
    lines = ["config keys (defaults):"]
    for key, (default, _, text) in cfgmod.SCHEMA.items():
        shown = "+".join(default) if isinstance(default, tuple) else default
        lines.append(f"  {key} = {shown}    {text}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (default 1, required for bitwise determinism)")
    common.add_argument("--out-dir", help=f"output root (default ${OUT_DIR_ENV} or ./runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override; comma-separated values form a grid (train only)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="mclrec", description="Multi-intent contrastive sequential recommender.",
        epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"mclrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="filter a raw log and cache it")
    p.add_argument("input")
    p.add_argument("--format", choices=data.FORMATS)
    p.add_argument("--output", help="dataset file (default <out-dir>/dataset.json)")
    p.add_argument("--subsample", type=int, default=0,
                   help="keep this many users, drawn with train.seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train and report test metrics")
    p.add_argument("--data", required=True, help="prepared .json dataset or raw log")
    p.add_argument("--name", default="train", help="run directory name under the out dir")
    p.add_argument("--resume", action="store_true", help="continue from last.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="sweep one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    p.add_argument("--values", help="comma-separated subset of the grid")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except INPUT_ERRORS as err:
        print(f"mclrec: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - last-resort boundary
        print(f"mclrec: internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
