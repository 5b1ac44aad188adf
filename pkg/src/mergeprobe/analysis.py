"""Interpretation of fitted coefficients and per-metric correlations."""
from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .crossval import Dataset, Fitter, linear_fitter, run_loto
from .errors import ConstantInput, EmptyMetricSet
from .linopt import pearson
from .merging import METHODS
from .metrics import CATEGORIES, CATEGORY_METRICS, METRIC_NAMES, NUM_METRICS

TIERS = ((0.001, "p<0.001"), (0.01, "p<0.01"), (0.05, "p<0.05"))


# ---------------------------------------------------------------------------
# t distribution via the regularized incomplete beta function
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    # modified Lentz evaluation of the continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * df, 0.5, df / (df + t * t))


def pearson_pvalue(r: float, n: int) -> float:
    """Two-sided p of H0: rho = 0, using t = r sqrt((n-2)/(1-r^2)) with n-2 dof."""
    if n < 3:
        raise ValueError("need n >= 3")
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        return 0.0
    # df / (df + t^2) simplifies to 1 - r^2
    return betainc(0.5 * (n - 2), 0.5, 1.0 - r * r)


def significance_tier(p: float) -> str:
    for thr, label in TIERS:
        if p < thr:
            return label
    return "n.s."


@dataclass(frozen=True)
class Correlation:
    metric: str
    method: str
    r: float | None
    p: float | None
    tier: str
    error: str | None = None


def individual_correlations(datasets: Mapping[str, Dataset]) -> list[Correlation]:
    """Raw-metric Pearson r and p against the target, per method and metric."""
    out = []
    for method, ds in datasets.items():
        n = ds.p.size
        if n < 3:
            raise ValueError("need at least 3 rows")
        for k, name in enumerate(ds.metric_names):
            try:
                r = pearson(ds.X[:, k], ds.p)
            except ConstantInput as exc:
                out.append(Correlation(name, method, None, None, "n/a", str(exc)))
                continue
            p = pearson_pvalue(r, n)
            out.append(Correlation(name, method, r, p, significance_tier(p)))
    return out


# ---------------------------------------------------------------------------
# coefficient fingerprints
# ---------------------------------------------------------------------------

def _sign(x: float) -> int:
    return 1 if x > 0 else (-1 if x < 0 else 0)


def _vec(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != NUM_METRICS:
        raise ValueError(f"coefficient vector needs {NUM_METRICS} entries, got {w.size}")
    return w


def top_k_metrics(w, k: int, names: Sequence[str] = METRIC_NAMES) -> list[tuple[str, int]]:
    """(metric, sign) by descending |w|; ties keep canonical order."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if not 0 <= k <= w.size:
        raise ValueError(f"k must be in [0, {w.size}]")
    order = sorted(range(w.size), key=lambda i: (-abs(w[i]), i))
    return [(names[i], _sign(w[i])) for i in order[:k]]


def topk_overlap(wa, wb, k: int) -> float:
    if k <= 0:
        raise ValueError("k must be positive")
    sa = {m for m, _ in top_k_metrics(wa, k)}
    sb = {m for m, _ in top_k_metrics(wb, k)}
    return len(sa & sb) / k


def sign_agreement(wa, wb) -> float:
    """Fraction of metrics whose coefficients have the same strict sign; zeros never agree."""
    a, b = _vec(wa), _vec(wb)
    agree = ((a > 0) & (b > 0)) | ((a < 0) & (b < 0))
    return float(np.count_nonzero(agree)) / a.size


@dataclass(frozen=True)
class StableMetric:
    metric: str
    sign: int
    per_method: dict
    average: float


def stable_metrics(table: Mapping[str, Sequence[float]]) -> list[StableMetric]:
    """Metrics with the same nonzero sign under every method, canonical order."""
    if set(table) != set(METHODS):
        raise ValueError(f"need exactly the methods {METHODS}, got {sorted(table)}")
    W = {m: _vec(table[m]) for m in METHODS}
    out = []
    for i, name in enumerate(METRIC_NAMES):
        signs = {_sign(W[m][i]) for m in METHODS}
        if len(signs) == 1 and 0 not in signs:
            vals = {m: float(W[m][i]) for m in METHODS}
            out.append(StableMetric(name, signs.pop(), vals, sum(vals.values()) / len(vals)))
    return out


def category_importance(table: Mapping[str, Sequence[float]]) -> dict:
    """{method: {category: {"importance": mean |w| over the category, "share": fraction}}}."""
    report = {}
    for method, w in table.items():
        w = _vec(w)
        imp = {}
        for cat in CATEGORIES:
            idx = [METRIC_NAMES.index(n) for n in CATEGORY_METRICS[cat]]
            imp[cat] = float(np.abs(w[idx]).sum()) / len(idx)
        total = sum(imp.values())
        report[method] = {
            cat: {"importance": v, "share": (v / total if total > 0 else 0.0)} for cat, v in imp.items()
        }
    return report


def category_ablation(datasets: Mapping[str, Dataset], category: str, fit: Fitter | None = None,
                      seed: int = 0) -> dict:
    """LOTO val r with and without one metric category, per method."""
    if category not in CATEGORY_METRICS:
        raise ValueError(f"unknown category {category!r}")
    fit = fit or linear_fitter()
    out = {}
    for method, ds in datasets.items():
        keep = [n for n in ds.metric_names if n not in CATEGORY_METRICS[category]]
        if not keep:
            raise EmptyMetricSet(f"dropping {category} leaves no metrics")
        full = run_loto(ds, fit, seed).aggregate.val_r_mean
        reduced = run_loto(ds.select_metrics(keep), fit, seed).aggregate.val_r_mean
        delta = None if full is None or reduced is None else reduced - full
        out[method] = {"full": full, "reduced": reduced, "delta": delta}
    return out


def pairwise_matrix(table: Mapping[str, Sequence[float]], fn) -> dict:
    methods = list(table)
    return {a: {b: fn(table[a], table[b]) for b in methods} for a in methods}


# ---------------------------------------------------------------------------
# coefficient tables
# ---------------------------------------------------------------------------

def read_coefficient_table(path) -> tuple[dict, dict]:
    """Read a metric x method CSV with optional ``<method>_std`` columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty coefficient table")
    names = [row["metric"] for row in rows]
    if tuple(names) != METRIC_NAMES:
        raise ValueError(f"{path}: metric column must list the {NUM_METRICS} metrics in canonical order")
    methods = [c for c in rows[0] if c != "metric" and not c.endswith("_std")]
    means = {m: np.array([float(row[m]) for row in rows]) for m in methods}
    stds = {m: np.array([float(row[m + "_std"]) for row in rows]) for m in methods if m + "_std" in rows[0]}
    return means, stds


def builtin_table13() -> tuple[dict, dict]:
    ref = resources.files("mergeprobe") / "data" / "table13.csv"
    with resources.as_file(ref) as path:
        return read_coefficient_table(path)


def write_coefficient_table(path, means: Mapping, stds: Mapping | None = None) -> None:
    methods = list(means)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["metric"] + methods + ([m + "_std" for m in methods] if stds else [])
        writer.writerow(header)
        for i, name in enumerate(METRIC_NAMES):
            row = [name] + [repr(float(means[m][i])) for m in methods]
            if stds:
                row += [repr(float(stds[m][i])) for m in methods]
            writer.writerow(row)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_reports(out_dir, means: Mapping, correlations: Sequence[Correlation] | None = None,
                  ablations: Mapping | None = None, top_k: int = 5) -> list[Path]:
    """Write every analysis table; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = list(means)
    written = []

    path = out / "top_k.csv"
    rows = []
    for m in methods:
        for rank, (name, sign) in enumerate(top_k_metrics(means[m], top_k), 1):
            rows.append([m, rank, name, "+" if sign > 0 else ("-" if sign < 0 else "0"),
                         _fmt(float(means[m][METRIC_NAMES.index(name)]))])
    _write_rows(path, ["method", "rank", "metric", "sign", "coefficient"], rows)
    written.append(path)

    stable = stable_metrics(means) if set(means) == set(METHODS) else []
    path = out / "stable_metrics.csv"
    _write_rows(path, ["metric", "sign"] + list(METHODS) + ["average"],
                [[s.metric, "+" if s.sign > 0 else "-"] + [_fmt(s.per_method[m]) for m in METHODS] + [_fmt(s.average)]
                 for s in stable])
    written.append(path)

    for k in (5, 10):
        path = out / f"top{k}_overlap.csv"
        mat = pairwise_matrix(means, lambda a, b: topk_overlap(a, b, k))
        _write_rows(path, ["method"] + methods, [[a] + [_fmt(mat[a][b]) for b in methods] for a in methods])
        written.append(path)

    path = out / "sign_agreement.csv"
    mat = pairwise_matrix(means, sign_agreement)
    _write_rows(path, ["method"] + methods, [[a] + [_fmt(mat[a][b]) for b in methods] for a in methods])
    written.append(path)

    path = out / "category_importance.csv"
    rep = category_importance(means)
    _write_rows(path, ["method", "category", "importance", "share"],
                [[m, c, _fmt(v["importance"]), _fmt(v["share"])] for m in methods for c, v in rep[m].items()])
    written.append(path)

    path = out / "coefficient_heatmap.csv"
    write_coefficient_table(path, means)
    written.append(path)

    if correlations:
        path = out / "individual_correlations.csv"
        _write_rows(path, ["method", "metric", "r", "p", "tier", "error"],
                    [[c.method, c.metric, _fmt(c.r), _fmt(c.p), c.tier, c.error or ""] for c in correlations])
        written.append(path)

    if ablations:
        path = out / "category_ablation.csv"
        _write_rows(path, ["category", "method", "full_val_r", "reduced_val_r", "delta"],
                    [[cat, m, _fmt(v["full"]), _fmt(v["reduced"]), _fmt(v["delta"])]
                     for cat, per in ablations.items() for m, v in per.items()])
        written.append(path)

    path = out / "analysis.json"
    bundle = {
        "coefficients": {m: [float(x) for x in means[m]] for m in methods},
        "metric_names": list(METRIC_NAMES),
        "top_k": {m: top_k_metrics(means[m], top_k) for m in methods},
        "stable": [s.__dict__ for s in stable],
        "sign_agreement": pairwise_matrix(means, sign_agreement),
        "category_importance": rep,
        "ablations": ablations or {},
    }
    path.write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    written.append(path)
    return written
