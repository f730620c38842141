"""Training loop, early stopping, grid search with k-fold CV, experiment drivers.

Seeding: a master seed fans out through ``numpy.random.SeedSequence`` keyed
by ``(master, stream, *ids)``. Streams: 0 fold assignment, 1 dataset
transforms, 2 per-fold training (keyed by fold index only, so every grid
point and every experiment row sees the same initialisation), 3 regression
repeats. Inside a training run the derived seed spawns three PCG64
generators: parameter init, epoch shuffling, dropout masks.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graphs import FoldSplit, GraphDataset, batch_graphs, make_incomplete, perturb_edges, random_split, stratified_kfold
from .layers import Adam
from .model import ModelConfig, ModelParams, forward, init_params, loss
from .pooling import CoPoolConfig

logger = logging.getLogger(__name__)

PAPER_GRID: dict[str, tuple] = {
    "lr": (0.005, 0.0005, 0.001),
    "weight_decay": (0.0001, 0.001),
    "epsilon": (0.5, 0.25),
    "hidden": (128, 64),
    "dropout": (0.0, 0.5),
}
FAST_GRID: dict[str, tuple] = {**PAPER_GRID, "lr": (0.001,), "hidden": (64,)}

STREAM_FOLDS, STREAM_TRANSFORM, STREAM_TRAIN, STREAM_REGRESSION = 0, 1, 2, 3

DROP_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
INCOMPLETE_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
GAMMAS = tuple(round(0.1 * i, 1) for i in range(1, 11))

ABLATIONS = {"none": "full", "full": "full", "no-gpr": "no_gpr", "no_gpr": "no_gpr", "no-node-view": "no_node_view", "no_node_view": "no_node_view"}


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss becomes NaN or infinite."""


def derive_seed(master: int, *path: int) -> int:
    if master < 0:
        raise ValueError("seeds must be non-negative")
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 0.001
    weight_decay: float = 0.0001
    epsilon: float = 0.5
    hidden: int = 64
    dropout: float = 0.0
    gamma: float = 1.0
    max_epochs: int = 300
    patience: int = 50
    seed: int = 0
    gpr_steps: int = 3
    ablation: str = "full"
    batch_size: int = 32
    full_batch: bool = False
    double_self_loop: bool = True
    lr_decay: bool = False
    off_grid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ablation", ABLATIONS.get(self.ablation, self.ablation))
        if self.ablation not in ("full", "no_gpr", "no_node_view"):
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if not self.off_grid:
            for key, allowed in PAPER_GRID.items():
                if getattr(self, key) not in allowed:
                    raise ValueError(f"{key}={getattr(self, key)} is off the search grid {allowed}; set off_grid to override")
            if (self.max_epochs, self.patience) != (300, 50):
                raise ValueError("max_epochs/patience differ from 300/50; set off_grid to override")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        self.pool_config()

    def pool_config(self) -> CoPoolConfig:
        return CoPoolConfig(self.gamma, self.epsilon, self.gpr_steps, self.ablation, self.double_self_loop)

    def model_config(self, ds: GraphDataset) -> ModelConfig:
        return ModelConfig(
            attr_dim=ds.attr_dim,
            hidden=self.hidden,
            dropout=self.dropout,
            pool=self.pool_config(),
            task=ds.task,
            num_classes=max(ds.num_classes, 2),
        )

    def replace(self, **changes) -> "TrainSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def label(self) -> str:
        return f"lr={self.lr:g},wd={self.weight_decay:g},eps={self.epsilon:g},hidden={self.hidden},dropout={self.dropout:g}"


def expand_grid(grid: dict[str, Sequence], base: TrainSpec) -> list[TrainSpec]:
    """Cartesian product of ``grid`` applied on top of ``base`` (grid order)."""
    keys = list(grid)
    return [base.replace(**dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    lr: float


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    best_val_metric: float


def make_batches(graphs, batch_size: int):
    return [batch_graphs(graphs[i : i + batch_size]) for i in range(0, len(graphs), batch_size)]


def evaluate(params: ModelParams, config: ModelConfig, batches, fwd: Callable = forward) -> tuple[float, float]:
    """(mean loss, metric) over batches; metric is accuracy or MAE."""
    total_loss = 0.0
    hits = 0.0
    count = 0
    with T.no_grad():
        for b in batches:
            out = fwd(b, params, config, False, None)
            n = b.num_slots
            total_loss += loss(out, b.targets, config.task).item() * n
            if config.task == "classification":
                hits += float(np.sum(np.argmax(out.data, axis=1) == b.targets))
            else:
                hits += float(np.sum(np.abs(out.data.reshape(-1) - b.targets)))
            count += n
    return total_loss / count, hits / count


def train_one(
    ds: GraphDataset,
    split: FoldSplit,
    spec: TrainSpec,
    seed: int | None = None,
    forward_fn: Callable | None = None,
) -> TrainResult:
    """Adam training with early stopping on validation loss.

    Returns the parameters of the best-validation epoch. ``forward_fn`` can
    replace the model forward (used to test the stopping logic).
    """
    if not split.train_ids or not split.val_ids:
        raise ValueError("train and validation sets must be nonempty")
    seed = spec.seed if seed is None else seed
    init_rng, shuffle_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    config = spec.model_config(ds)
    params = init_params(config, init_rng)
    fwd = forward_fn or forward
    tensors = params.tensors()

    train = [ds.graphs[i] for i in split.train_ids]
    val_batches = make_batches([ds.graphs[i] for i in split.val_ids], spec.batch_size)
    bs = len(train) if spec.full_batch else spec.batch_size
    opt = Adam(spec.lr, spec.weight_decay)

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_metric = math.inf, 0, math.nan
    best_snap = params.snapshot()
    bad_epochs = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        run_loss, seen = 0.0, 0
        for start in range(0, len(train), bs):
            batch = batch_graphs([train[i] for i in order[start : start + bs]])
            T.reset_tape()
            Adam.zero_grad(tensors)
            out = fwd(batch, params, config, True, drop_rng)
            L = loss(out, batch.targets, config.task)
            value = L.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch} for spec {spec.to_dict()}")
            T.backward(L)
            opt.step(tensors)
            run_loss += value * batch.num_slots
            seen += batch.num_slots
        T.reset_tape()
        val_loss, val_metric = evaluate(params, config, val_batches, fwd)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch} for spec {spec.to_dict()}")
        history.append(EpochRecord(epoch, run_loss / seen, val_loss, val_metric, opt.lr))
        if val_loss < best_loss:
            best_loss, best_epoch, best_metric = val_loss, epoch, val_metric
            best_snap = params.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if spec.lr_decay and bad_epochs % 10 == 0:
                opt.lr = max(opt.lr * 0.5, 1e-5)
        if epoch - best_epoch >= spec.patience:
            break
    params.restore(best_snap)
    return TrainResult(params, config, history, best_epoch, best_loss, best_metric)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    val_loss: float
    val_metric: float
    test_loss: float
    test_metric: float
    epochs_run: int
    history: list[EpochRecord] = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("history")
        return d


@dataclass
class CVReport:
    dataset: str
    metric: str
    spec: TrainSpec
    folds: list[FoldResult]
    mean: float
    std: float
    seed: int
    grid: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "folds": [f.summary() for f in self.folds],
            "grid": self.grid,
            "wall_clock_seconds": self.wall_clock,
        }


def sample_std(values: Sequence[float]) -> float:
    vals = np.asarray(values, dtype=np.float64)
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


_WORKER_DS: GraphDataset | None = None


def _init_worker(ds: GraphDataset) -> None:
    global _WORKER_DS
    _WORKER_DS = ds
    T.reset_tape()


def _fold_task(args) -> FoldResult:
    ds, split, spec, seed = args
    ds = ds if ds is not None else _WORKER_DS
    res = train_one(ds, split, spec, seed)
    test_batches = make_batches([ds.graphs[i] for i in split.test_ids], spec.batch_size)
    test_loss, test_metric = evaluate(res.params, res.config, test_batches)
    return FoldResult(split.fold_index, res.best_epoch, res.best_val_loss, res.best_val_metric, test_loss, test_metric, len(res.history), res.history)


def _run_tasks(ds: GraphDataset, tasks: list[tuple], jobs: int) -> list[FoldResult]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_fold_task((ds, *t)) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ds,)) as pool:
        return list(pool.map(_fold_task, [(None, *t) for t in tasks]))


def make_folds(ds: GraphDataset, k: int, seed: int) -> list[FoldSplit]:
    return stratified_kfold(ds, k, derive_seed(seed, STREAM_FOLDS))


def grid_search_cv(
    ds: GraphDataset,
    grid: dict[str, Sequence] | None,
    base: TrainSpec,
    k: int = 10,
    seed: int = 0,
    jobs: int = 1,
) -> CVReport:
    """Run k-fold CV for every grid point; report the best-validation point.

    Selection uses the mean validation metric across folds (accuracy up,
    MAE down); ties keep the earlier grid point.
    """
    t0 = time.perf_counter()
    specs = expand_grid(grid or {}, base)
    splits = make_folds(ds, k, seed)
    tasks = [(split, spec, derive_seed(seed, STREAM_TRAIN, split.fold_index)) for spec in specs for split in splits]
    results = _run_tasks(ds, tasks, jobs)
    higher = ds.task == "classification"
    per_spec = [results[i * k : (i + 1) * k] for i in range(len(specs))]
    summary = []
    best_i, best_val = 0, None
    for i, (spec, folds) in enumerate(zip(specs, per_spec)):
        val = float(np.mean([f.val_metric for f in folds]))
        test = float(np.mean([f.test_metric for f in folds]))
        summary.append({"spec": spec.label(), "mean_val_metric": val, "mean_test_metric": test})
        if best_val is None or (val > best_val if higher else val < best_val):
            best_i, best_val = i, val
    chosen = per_spec[best_i]
    tests = [f.test_metric for f in chosen]
    return CVReport(
        dataset=ds.name,
        metric="accuracy" if higher else "mae",
        spec=specs[best_i],
        folds=chosen,
        mean=float(np.mean(tests)),
        std=sample_std(tests),
        seed=seed,
        grid=summary,
        wall_clock=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# experiment drivers


@dataclass
class ExperimentTable:
    name: str
    rows: list[tuple[str, float, float, int]]
    reports: dict[str, CVReport] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "mean", "std", "seed"])
        for key, mean, std, seed in self.rows:
            w.writerow([key, repr(float(mean)), repr(float(std)), seed])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "experiment": self.name,
            "rows": [{"key": r[0], "mean": r[1], "std": r[2], "seed": r[3]} for r in self.rows],
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            **self.extra,
        }


def _sweep(name: str, ds: GraphDataset, variants, spec: TrainSpec, seed: int, k: int, jobs: int) -> ExperimentTable:
    table = ExperimentTable(name, [])
    for key, vds, vspec in variants:
        logger.info("%s: running %s", name, key)
        rep = grid_search_cv(vds, None, vspec, k=k, seed=seed, jobs=jobs)
        table.rows.append((key, rep.mean, rep.std, seed))
        table.reports[key] = rep
    return table


def run_cv(ds: GraphDataset, grid, spec: TrainSpec, seed: int, k: int = 10, jobs: int = 1) -> ExperimentTable:
    rep = grid_search_cv(ds, grid, spec, k=k, seed=seed, jobs=jobs)
    return ExperimentTable("cv", [(ds.name or "dataset", rep.mean, rep.std, seed)], {ds.name or "dataset": rep})


def run_perturbation(ds, mode: str, ratios=DROP_RATIOS, spec: TrainSpec = TrainSpec(), seed: int = 0, k: int = 10, jobs: int = 1) -> ExperimentTable:
    """CV accuracy per edge-perturbation ratio (``drop`` or ``add`` from empty)."""
    tseed = derive_seed(seed, STREAM_TRANSFORM)
    variants = ((f"{mode}={r:g}", perturb_edges(ds, mode, r, tseed), spec) for r in ratios)
    return _sweep("perturb", ds, variants, spec, seed, k, jobs)


def run_incomplete(ds, ratios=INCOMPLETE_RATIOS, spec: TrainSpec = TrainSpec(), seed: int = 0, k: int = 10, jobs: int = 1) -> ExperimentTable:
    """CV accuracy when a fraction of nodes lose all attributes."""
    tseed = derive_seed(seed, STREAM_TRANSFORM)
    variants = ((f"incomplete={r:g}", make_incomplete(ds, r, tseed), spec) for r in ratios)
    return _sweep("incomplete", ds, variants, spec, seed, k, jobs)


def run_gamma_sweep(ds, gammas=GAMMAS, spec: TrainSpec = TrainSpec(), seed: int = 0, k: int = 10, jobs: int = 1) -> ExperimentTable:
    """CV accuracy per edge retaining ratio."""
    variants = ((f"gamma={g:g}", ds, spec.replace(gamma=g)) for g in gammas)
    return _sweep("gamma-sweep", ds, variants, spec, seed, k, jobs)


def run_ablation(ds, spec: TrainSpec, seed: int, k: int = 10, jobs: int = 1, modes=("full", "no_gpr", "no_node_view")) -> ExperimentTable:
    variants = ((f"ablation={m}", ds, spec.replace(ablation=m)) for m in modes)
    return _sweep("ablation", ds, variants, spec, seed, k, jobs)


def run_regression(ds: GraphDataset, spec: TrainSpec, seed: int = 0, n_seeds: int = 4, split: FoldSplit | None = None) -> ExperimentTable:
    """Train with L1 loss and plateau LR halving under ``n_seeds`` seeds.

    Rows: one per seed plus ``mean``; each row's ``std`` column holds the
    seed's predict-the-mean baseline MAE for reference (``mean`` row: std
    over seeds). Baselines are reported in ``extra`` as well.
    """
    if ds.task != "regression":
        raise ValueError("run_regression needs a regression dataset")
    split = split or random_split(len(ds), derive_seed(seed, STREAM_FOLDS))
    spec = spec.replace(lr_decay=True)
    y = ds.targets()
    baseline = float(np.mean(np.abs(y[list(split.test_ids)] - y[list(split.train_ids)].mean())))
    table = ExperimentTable("regress", [], extra={"baseline_mae": baseline, "seeds": []})
    maes = []
    for s in range(n_seeds):
        rseed = derive_seed(seed, STREAM_REGRESSION, s)
        res = train_one(ds, split, spec, rseed)
        _, mae = evaluate(res.params, res.config, make_batches([ds.graphs[i] for i in split.test_ids], spec.batch_size))
        maes.append(mae)
        table.rows.append((f"seed{s}", mae, 0.0, rseed))
        table.extra["seeds"].append({"seed": rseed, "test_mae": mae, "best_epoch": res.best_epoch, "epochs_run": len(res.history), "history": [dataclasses.asdict(h) for h in res.history]})
    table.rows.append(("mean", float(np.mean(maes)), sample_std(maes), seed))
    table.rows.append(("baseline", baseline, 0.0, seed))
    table.extra["mean_mae"] = float(np.mean(maes))
    table.extra["relative_improvement"] = 1.0 - float(np.mean(maes)) / baseline if baseline > 0 else 0.0
    return table


# ---------------------------------------------------------------------------
# output files


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "val_metric"])
    for h in history:
        w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.val_metric)])
    return buf.getvalue()


def write_results(out_dir, table: ExperimentTable) -> Path:
    """Write ``table.csv``, ``report.json`` and ``history/`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "history").mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(table.to_csv())
    (out / "report.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True, default=float))
    single = len(table.reports) == 1
    for key, rep in table.reports.items():
        hdir = out / "history" if single else out / "history" / _safe(key)
        hdir.mkdir(parents=True, exist_ok=True)
        for f in rep.folds:
            (hdir / f"{f.fold}.csv").write_text(history_csv(f.history))
    for i, s in enumerate(table.extra.get("seeds", [])):
        hist = [EpochRecord(**h) for h in s["history"]]
        (out / "history" / f"seed{i}.csv").write_text(history_csv(hist))
    return out


def _safe(key: str) -> str:
    return key.replace("=", "_").replace("/", "_")
