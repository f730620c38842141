"""Command-line entry point.

Config files are flat ``key = value`` text (``#`` starts a comment); keys are
the long flag names without leading dashes. Precedence: built-in defaults,
then the config file, then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .graphs import (
    DatasetFormatError,
    GraphDataset,
    find_dataset_root,
    pad_plain_attributes,
    parse_tu_dataset,
    synthetic_classification_dataset,
    synthetic_regression_dataset,
)
from .harness import (
    DROP_RATIOS,
    FAST_GRID,
    GAMMAS,
    INCOMPLETE_RATIOS,
    PAPER_GRID,
    STREAM_TRAIN,
    ExperimentTable,
    TrainSpec,
    derive_seed,
    evaluate,
    history_csv,
    make_batches,
    make_folds,
    run_cv,
    run_gamma_sweep,
    run_incomplete,
    run_perturbation,
    run_regression,
    train_one,
    write_results,
)
from .model import save_checkpoint

logger = logging.getLogger("copool")

SYNTHETIC = {"SYNTH-CLS": (synthetic_classification_dataset, 100), "SYNTH-REG": (synthetic_regression_dataset, 1000)}

DEFAULTS = {
    "dataset": None,
    "data_root": ".",
    "task": "classification",
    "seed": None,
    "jobs": 1,
    "out": None,
    "pad_dim": 1,
    "subset": None,
    "synthetic_size": None,
    "gamma": 1.0,
    "epsilon": None,
    "hidden": None,
    "lr": None,
    "weight_decay": None,
    "dropout": None,
    "gpr_steps": 3,
    "ablation": "none",
    "max_epochs": 300,
    "patience": 50,
    "batch_size": 32,
    "full_batch": False,
    "single_self_loop": False,
    "off_grid": False,
    "fast": False,
    "folds": 10,
    "fold": 0,
    "mode": "drop",
    "ratios": None,
    "gammas": None,
    "n_seeds": 4,
    "verbose": False,
}
SPEC_DEFAULTS = {"lr": 0.001, "weight_decay": 0.0001, "epsilon": 0.5, "hidden": 64, "dropout": 0.0}
SEEDED = {"train", "cv", "perturb", "incomplete", "gamma-sweep", "regress"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> _Parser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--dataset", help="TU dataset name, or SYNTH-CLS / SYNTH-REG")
    common.add_argument("--data-root", help="directory holding the TU files")
    common.add_argument("--task", choices=("classification", "regression"))
    common.add_argument("--seed", type=int, help="master seed (required for training commands)")
    common.add_argument("--jobs", type=int, help="parallel folds")
    common.add_argument("--out", help="output directory")
    common.add_argument("--pad-dim", type=int, help="all-one attribute dim for plain graphs")
    common.add_argument("--subset", type=int, help="keep only the first N graphs")
    common.add_argument("--synthetic-size", type=int, help="graph count for synthetic datasets")
    common.add_argument("--gamma", type=float, help="edge retaining ratio")
    common.add_argument("--epsilon", type=float, help="node pooling ratio")
    common.add_argument("--hidden", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--weight-decay", type=float)
    common.add_argument("--dropout", type=float)
    common.add_argument("--gpr-steps", type=int)
    common.add_argument("--ablation", choices=("none", "no-gpr", "no-node-view"))
    common.add_argument("--max-epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--full-batch", action="store_true")
    common.add_argument("--single-self-loop", action="store_true", help="score with one self-loop instead of two")
    common.add_argument("--off-grid", action="store_true", help="allow values outside the search grid")
    common.add_argument("--folds", type=int)
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="copool", description="Cross-view graph pooling experiments.")
    parser.add_argument("--version", action="version", version=f"copool {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    p = sub.add_parser("train", parents=[common], help="train one spec on one fold", argument_default=argparse.SUPPRESS)
    p.add_argument("--fold", type=int)
    p = sub.add_parser("cv", parents=[common], help="grid search with k-fold CV", argument_default=argparse.SUPPRESS)
    p.add_argument("--fast", action="store_true", help="reduced grid: lr 0.001, hidden 64")
    p = sub.add_parser("perturb", parents=[common], help="edge drop / add study", argument_default=argparse.SUPPRESS)
    p.add_argument("--mode", choices=("drop", "add"))
    p.add_argument("--ratios", type=_floats)
    p = sub.add_parser("incomplete", parents=[common], help="missing-attribute study", argument_default=argparse.SUPPRESS)
    p.add_argument("--ratios", type=_floats)
    p = sub.add_parser("gamma-sweep", parents=[common], help="edge retaining ratio sweep", argument_default=argparse.SUPPRESS)
    p.add_argument("--gammas", type=_floats)
    p = sub.add_parser("regress", parents=[common], help="graph regression with L1 loss", argument_default=argparse.SUPPRESS)
    p.add_argument("--n-seeds", type=int)
    sub.add_parser("inspect", parents=[common], help="dataset statistics", argument_default=argparse.SUPPRESS)
    return parser


def _option_types(parser: argparse.ArgumentParser) -> dict:
    types = {}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                types.update(_option_types(sp))
        elif action.dest not in ("help", "version", "command", "config"):
            if isinstance(action, argparse._StoreTrueAction):
                types[action.dest] = _bool
            else:
                types[action.dest] = action.type or str
    return types


def read_config_file(path, types: dict) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in types:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        try:
            out[dest] = types[dest](value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{no}: bad value for {key}: {exc}") from None
    return out


def resolve(argv) -> dict:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    from_file = read_config_file(ns.pop("config"), _option_types(parser)) if "config" in ns else {}
    cfg = {**DEFAULTS, **from_file, **ns, "command": command}
    if command in SEEDED and cfg["seed"] is None:
        raise UsageError(f"copool {command}: --seed is required (no implicit randomness)")
    if cfg["dataset"] is None:
        raise UsageError(f"copool {command}: --dataset is required")
    if cfg["dataset"] == "SYNTH-REG":
        cfg["task"] = "regression"
    if cfg["out"] is None:
        cfg["out"] = str(Path("runs") / command)
    if command != "inspect":
        try:
            make_spec(cfg)
        except ValueError as exc:
            raise UsageError(f"copool {command}: {exc}") from None
    return cfg


def load_dataset(cfg: dict) -> GraphDataset:
    name = cfg["dataset"]
    if name in SYNTHETIC:
        make, default_size = SYNTHETIC[name]
        ds = make(cfg["synthetic_size"] or default_size, seed=0)
    else:
        base = find_dataset_root(name, cfg["data_root"])
        if base is None:
            raise FileNotFoundError(f"dataset {name!r} not found under {cfg['data_root']!r} (or $COPOOL_DATA)")
        ds = parse_tu_dataset(base, name, task=cfg["task"])
    if cfg["subset"]:
        ds = ds.subset(range(min(cfg["subset"], len(ds))))
    if ds.attr_kind == "plain":
        ds = pad_plain_attributes(ds, cfg["pad_dim"])
    return ds


def make_spec(cfg: dict) -> TrainSpec:
    vals = {k: (cfg[k] if cfg[k] is not None else SPEC_DEFAULTS[k]) for k in SPEC_DEFAULTS}
    return TrainSpec(
        **vals,
        gamma=cfg["gamma"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        seed=cfg["seed"] or 0,
        gpr_steps=cfg["gpr_steps"],
        ablation=cfg["ablation"],
        batch_size=cfg["batch_size"],
        full_batch=cfg["full_batch"],
        double_self_loop=not cfg["single_self_loop"],
        off_grid=cfg["off_grid"],
    )


def make_grid(cfg: dict) -> dict:
    grid = dict(FAST_GRID if cfg["fast"] else PAPER_GRID)
    for key in grid:
        if cfg[key] is not None:
            grid[key] = (cfg[key],)
    return grid


def _write_echo(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = {**cfg, "version": __version__}
    (out / "config_echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def _run(cfg: dict) -> int:
    out = Path(cfg["out"])
    _write_echo(out, cfg)
    ds = load_dataset(cfg)
    command = cfg["command"]
    seed = cfg["seed"]

    if command == "inspect":
        stats = ds.stats()
        for key, value in stats.items():
            print(f"{key}: {value:.2f}" if isinstance(value, float) else f"{key}: {value}")
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        return 0

    spec = make_spec(cfg)
    k, jobs = cfg["folds"], cfg["jobs"]
    if command == "train":
        splits = make_folds(ds, k, seed)
        if not 0 <= cfg["fold"] < len(splits):
            raise ValueError(f"fold {cfg['fold']} outside [0, {len(splits)})")
        split = splits[cfg["fold"]]
        res = train_one(ds, split, spec, derive_seed(seed, STREAM_TRAIN, split.fold_index))
        _, test_metric = evaluate(res.params, res.config, make_batches([ds.graphs[i] for i in split.test_ids], spec.batch_size))
        table = ExperimentTable("train", [(f"fold={split.fold_index}", test_metric, 0.0, seed)])
        table.extra.update(best_epoch=res.best_epoch, best_val_loss=res.best_val_loss, spec=spec.to_dict())
        write_results(out, table)
        (out / "history" / f"{split.fold_index}.csv").write_text(history_csv(res.history))
        save_checkpoint(out / "model.npz", res.params, res.config, {"seed": seed, "fold": split.fold_index})
    elif command == "cv":
        table = run_cv(ds, make_grid(cfg), spec, seed, k, jobs)
    elif command == "perturb":
        table = run_perturbation(ds, cfg["mode"], cfg["ratios"] or DROP_RATIOS, spec, seed, k, jobs)
    elif command == "incomplete":
        table = run_incomplete(ds, cfg["ratios"] or INCOMPLETE_RATIOS, spec, seed, k, jobs)
    elif command == "gamma-sweep":
        table = run_gamma_sweep(ds, cfg["gammas"] or GAMMAS, spec, seed, k, jobs)
    elif command == "regress":
        table = run_regression(ds, spec, seed, cfg["n_seeds"])
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown command {command}")
    if command != "train":
        write_results(out, table)
    sys.stdout.write(table.to_csv())
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve(argv)
    except UsageError as exc:
        build_parser().print_usage(sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(cfg)
    except (ValueError, FileNotFoundError, DatasetFormatError, FloatingPointError, OSError) as exc:
        print(f"copool {cfg['command']}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
