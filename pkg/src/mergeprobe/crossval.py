"""Leave-one-task-out cross-validation over model pairs."""
from __future__ import annotations

import csv
import itertools
import json
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MergeProbeError, MissingInput, TooFewTasks
from .linopt import (
    CoefficientSet,
    MlpConfig,
    MlpRegressor,
    OptimizerConfig,
    _score_r,
    fit_linear,
    fit_linear_l1,
    fit_mlp,
    fit_normalizer,
)
from .merging import normalized_target
from .metrics import METRIC_NAMES, MetricVector


@dataclass
class Dataset:
    X: np.ndarray
    p: np.ndarray
    pairs: list
    method: str = ""
    metric_names: tuple = METRIC_NAMES

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        self.pairs = [tuple(pair) for pair in self.pairs]
        self.metric_names = tuple(self.metric_names)
        n = self.p.size
        if self.X.shape != (n, len(self.metric_names)):
            raise ValueError(f"X has shape {self.X.shape}, expected ({n}, {len(self.metric_names)})")
        if len(self.pairs) != n:
            raise ValueError("one pair id per row required")
        if n < 3:
            raise ValueError("a dataset needs at least 3 rows")
        if not (np.isfinite(self.X).all() and np.isfinite(self.p).all()):
            raise ValueError("dataset contains NaN or Inf")
        keys = [frozenset(pair) for pair in self.pairs]
        if len(set(keys)) != n:
            raise ValueError("pair ids must be unique")

    @property
    def tasks(self) -> list[str]:
        seen = {}
        for a, b in self.pairs:
            seen.setdefault(a, None)
            seen.setdefault(b, None)
        return list(seen)

    def select_metrics(self, names: Sequence[str]) -> "Dataset":
        idx = [self.metric_names.index(n) for n in names]
        return Dataset(self.X[:, idx], self.p, self.pairs, self.method, tuple(names))

    def with_targets(self, p) -> "Dataset":
        return Dataset(self.X, p, self.pairs, self.method, self.metric_names)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    held_out: str
    train: tuple
    val: tuple


def all_pairs(task_ids: Sequence[str]) -> list[tuple[str, str]]:
    return list(itertools.combinations(task_ids, 2))


def build_folds(task_ids: Sequence[str]) -> list[FoldPlan]:
    """One plan per task; indices refer to :func:`all_pairs` order."""
    task_ids = list(task_ids)
    if len(set(task_ids)) != len(task_ids):
        raise ValueError("task ids must be unique")
    if len(task_ids) < 3:
        raise TooFewTasks(f"leave-one-task-out needs at least 3 tasks, got {len(task_ids)}")
    pairs = all_pairs(task_ids)
    plans = []
    for task in task_ids:
        val = tuple(i for i, pair in enumerate(pairs) if task in pair)
        train = tuple(i for i, pair in enumerate(pairs) if task not in pair)
        plans.append(FoldPlan(task, train, val))
    return plans


def dataset_folds(dataset: Dataset) -> list[FoldPlan]:
    """Fold plans with indices into ``dataset`` rows; every task pair must be present."""
    tasks = sorted(dataset.tasks)
    row_of = {frozenset(pair): i for i, pair in enumerate(dataset.pairs)}
    missing = [pair for pair in all_pairs(tasks) if frozenset(pair) not in row_of]
    if missing:
        raise MissingInput(f"dataset lacks pairs: {missing}")
    plans = []
    for plan in build_folds(tasks):
        pairs = all_pairs(tasks)
        plans.append(
            FoldPlan(
                plan.held_out,
                tuple(sorted(row_of[frozenset(pairs[i])] for i in plan.train)),
                tuple(sorted(row_of[frozenset(pairs[i])] for i in plan.val)),
            )
        )
    return plans


# ---------------------------------------------------------------------------
# fitting procedures: fn(X_train, p_train, seed) -> model with .predict and .train_r
# ---------------------------------------------------------------------------

Fitter = Callable[[np.ndarray, np.ndarray, int], object]


def linear_fitter(cfg: OptimizerConfig = OptimizerConfig()) -> Fitter:
    def fit(X, p, seed):
        return fit_linear(X, p, cfg)

    fit.kind = "linear"
    return fit


def l1_fitter(lam: float = 1.0, cfg: OptimizerConfig = OptimizerConfig()) -> Fitter:
    def fit(X, p, seed):
        return fit_linear_l1(X, p, lam, cfg)

    fit.kind = "l1"
    return fit


def mlp_fitter(cfg: MlpConfig = MlpConfig()) -> Fitter:
    from dataclasses import replace

    def fit(X, p, seed):
        return fit_mlp(X, p, replace(cfg, seed=seed))

    fit.kind = "mlp"
    return fit


@dataclass
class FoldResult:
    fold: int
    held_out: str
    train_r: float | None
    val_r: float | None
    model: object = None
    error: str | None = None
    n_train: int = 0
    n_val: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = {
            "fold": self.fold,
            "held_out": self.held_out,
            "train_r": self.train_r,
            "val_r": self.val_r,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "error": self.error,
        }
        if isinstance(self.model, CoefficientSet):
            d["coefficients"] = self.model.to_dict()
        elif isinstance(self.model, MlpRegressor):
            d["mlp"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        model = CoefficientSet.from_dict(d["coefficients"]) if d.get("coefficients") else None
        return cls(d["fold"], d["held_out"], d["train_r"], d["val_r"], model, d.get("error"),
                   d.get("n_train", 0), d.get("n_val", 0))


def _mean_std(values) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class AggregateReport:
    method: str
    n_folds: int
    failed: list = field(default_factory=list)
    train_r_mean: float | None = None
    train_r_std: float | None = None
    val_r_mean: float | None = None
    val_r_std: float | None = None
    metric_names: tuple = METRIC_NAMES
    w_mean: list | None = None
    w_std: list | None = None
    nonzero_freq: list | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_folds": self.n_folds,
            "failed": self.failed,
            "train_r": {"mean": self.train_r_mean, "std": self.train_r_std},
            "val_r": {"mean": self.val_r_mean, "std": self.val_r_std},
            "metric_names": list(self.metric_names),
            "w_mean": self.w_mean,
            "w_std": self.w_std,
            "nonzero_freq": self.nonzero_freq,
        }


def aggregate(folds: Sequence[FoldResult], method: str = "", metric_names=METRIC_NAMES) -> AggregateReport:
    """Mean and population std over successful folds, in fold order."""
    folds = sorted(folds, key=lambda f: f.fold)
    good = [f for f in folds if f.ok]
    rep = AggregateReport(method, len(folds), [{"fold": f.fold, "held_out": f.held_out, "error": f.error}
                                               for f in folds if not f.ok], metric_names=tuple(metric_names))
    rep.train_r_mean, rep.train_r_std = _mean_std([f.train_r for f in good])
    rep.val_r_mean, rep.val_r_std = _mean_std([f.val_r for f in good])
    coefs = [f.model for f in good if isinstance(f.model, CoefficientSet)]
    if coefs:
        W = np.vstack([c.w for c in coefs])
        rep.w_mean = W.mean(axis=0).tolist()
        rep.w_std = W.std(axis=0).tolist()
        rep.nonzero_freq = np.mean([c.nonzero() for c in coefs], axis=0).tolist()
    return rep


@dataclass
class LotoResult:
    method: str
    folds: list
    aggregate: AggregateReport
    kind: str = "linear"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "kind": self.kind,
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LotoResult":
        folds = [FoldResult.from_dict(f) for f in d["folds"]]
        names = tuple(d["aggregate"].get("metric_names") or METRIC_NAMES)
        return cls(d["method"], folds, aggregate(folds, d["method"], names), d.get("kind", "linear"))


def _run_fold(dataset: Dataset, idx: int, plan: FoldPlan, fit: Fitter, seed: int) -> FoldResult:
    tr = np.asarray(plan.train)
    va = np.asarray(plan.val)
    res = FoldResult(idx, plan.held_out, None, None, n_train=tr.size, n_val=va.size)
    try:
        norm = fit_normalizer(dataset.X[tr])
        Xtr = norm.apply(dataset.X[tr])
        Xva = norm.apply(dataset.X[va])
        model = fit(Xtr, dataset.p[tr], seed)
        res.model = model
        res.train_r = float(model.train_r)
        res.val_r = _score_r(model.predict(Xva), dataset.p[va])
        if isinstance(model, CoefficientSet):
            model.fold = plan.held_out
            model.method = dataset.method
            model.val_r = res.val_r
        elif isinstance(model, MlpRegressor):
            model.val_r = res.val_r
    except (MergeProbeError, ValueError, ArithmeticError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_loto(dataset: Dataset, fit: Fitter | None = None, seed: int = 0, workers: int = 1) -> LotoResult:
    """Per fold: normalize with train-row min/max, fit, correlate on held-out pairs.

    Fold ``i`` uses seed ``seed + i``. A failing fold is recorded with its
    error and left out of the aggregate.
    """
    fit = fit or linear_fitter()
    plans = dataset_folds(dataset)
    jobs = [(i, plan) for i, plan in enumerate(plans)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(lambda job: _run_fold(dataset, job[0], job[1], fit, seed + job[0]), jobs))
    else:
        folds = [_run_fold(dataset, i, plan, fit, seed + i) for i, plan in jobs]
    folds.sort(key=lambda f: f.fold)
    return LotoResult(dataset.method, folds, aggregate(folds, dataset.method, dataset.metric_names),
                      getattr(fit, "kind", "linear"))


def train_rows(plan: FoldPlan, n_rows: int) -> np.ndarray:
    return np.asarray(plan.train)


def leakage_probe(dataset: Dataset, plan: FoldPlan, *, trials: int = 1, seed: int = 0,
                  rows: Callable[[FoldPlan, int], np.ndarray] = train_rows) -> bool:
    """True iff randomizing validation-row metrics leaves the fold normalizer bit-identical.

    ``rows`` picks the rows the normalizer is fitted on; the default is the
    pipeline's own choice (training rows only).
    """
    rng = np.random.default_rng(seed)
    base = fit_normalizer(dataset.X[rows(plan, len(dataset.p))])
    val = np.asarray(plan.val)
    scale = np.abs(dataset.X).max() + 1.0
    for _ in range(trials):
        X = dataset.X.copy()
        X[val] = rng.normal(0.0, 10.0 * scale, size=(val.size, X.shape[1]))
        other = fit_normalizer(X[rows(plan, len(dataset.p))])
        if not (np.array_equal(base.mins, other.mins) and np.array_equal(base.maxs, other.maxs)):
            return False
    return True


# ---------------------------------------------------------------------------
# building datasets from CSV exchange files
# ---------------------------------------------------------------------------

ACCURACY_COLUMNS = ("task_a", "task_b", "method", "acc_merged_a", "acc_a", "acc_merged_b", "acc_b")


def read_accuracy_csv(path) -> dict:
    """{method: {frozenset(pair): normalized target}}."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ACCURACY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for row in reader:
            target = normalized_target(
                float(row["acc_merged_a"]), float(row["acc_a"]), float(row["acc_merged_b"]), float(row["acc_b"])
            )
            out.setdefault(row["method"], {})[frozenset((row["task_a"], row["task_b"]))] = target
    return out


def write_accuracy_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ACCURACY_COLUMNS)
        for row in rows:
            writer.writerow([row[0], row[1], row[2]] + [format(float(x), ".17g") for x in row[3:]])


def build_dataset(metric_rows: Sequence[tuple[str, str, MetricVector]], targets: dict, method: str) -> Dataset:
    """Join metric rows with one method's targets; raises MissingInput naming absent pairs."""
    missing = [(a, b) for a, b, _ in metric_rows if frozenset((a, b)) not in targets]
    if missing:
        raise MissingInput(f"no accuracy rows for method {method} and pairs {missing}")
    X = np.vstack([mv.as_array() for _, _, mv in metric_rows])
    p = np.array([targets[frozenset((a, b))] for a, b, _ in metric_rows])
    return Dataset(X, p, [(a, b) for a, b, _ in metric_rows], method)


def save_loto(path, results: Sequence[LotoResult]) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in results], indent=1, allow_nan=False) + "\n")


def load_loto(path) -> list[LotoResult]:
    return [LotoResult.from_dict(d) for d in json.loads(Path(path).read_text())]


def format_mean_std(mean: float | None, std: float | None) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    return f"{mean:.3f} ± {std:.3f}"
