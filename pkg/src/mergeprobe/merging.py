"""Merge operators: task arithmetic, weight averaging, isotropic and TSV.

All operators work in float64 and return float64 ParamMaps with the name set
and shapes of the pretrained model. Inputs are put in a canonical order
(content digest) before any reduction, so the result does not depend on the
order in which task vectors are passed.
"""
from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import RankDeficient, ShapeMismatch, ZeroDenominator
from .metrics import numerical_rank
from .tensorstore import ParamMap, check_compatible, task_vector

METHODS = ("TA", "WA", "ISO", "TSV")
DEFAULT_ALPHA = {"TA": 0.3, "ISO": 1.0}


@dataclass(frozen=True)
class MergeConfig:
    method: str
    alpha: float | None = None
    num_tasks: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if self.alpha is not None and not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.num_tasks is not None and self.num_tasks < 1:
            raise ValueError("num_tasks must be positive")

    @property
    def resolved_alpha(self) -> float | None:
        if self.alpha is not None:
            return self.alpha
        return DEFAULT_ALPHA.get(self.method)


@dataclass
class MergeResult:
    merged: ParamMap
    # layer name -> {"before": [...], "after": [...]} singular values (TSV / ISO only)
    diagnostics: dict = field(default_factory=dict)


def _canonical(maps: Sequence[Mapping]) -> list[ParamMap]:
    pms = [m if isinstance(m, ParamMap) else ParamMap(m) for m in maps]
    return [pm for _, pm in sorted(((pm.digest(), i), pm) for i, pm in enumerate(pms))]


def _check_all(base: Mapping, others: Sequence[Mapping]) -> None:
    for other in others:
        try:
            check_compatible(base, other)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _sum(arrays) -> np.ndarray:
    total = np.zeros_like(_f64(arrays[0]))
    for a in arrays:
        total = total + _f64(a)
    return total


def merge_task_arithmetic(theta0: Mapping, taus: Sequence[Mapping], alpha: float = 0.3) -> MergeResult:
    """theta0 + alpha * sum(taus)."""
    if not taus:
        raise ValueError("need at least one task vector")
    _check_all(theta0, taus)
    taus = _canonical(taus)
    merged = {n: _f64(theta0[n]) + alpha * _sum([t[n] for t in taus]) for n in theta0}
    return MergeResult(ParamMap(merged, check_finite=False))


def merge_weight_average(thetas: Sequence[Mapping]) -> MergeResult:
    """Elementwise mean of fine-tuned models."""
    if len(thetas) < 2:
        raise ValueError("weight averaging needs at least two models")
    _check_all(thetas[0], thetas[1:])
    thetas = _canonical(thetas)
    m = len(thetas)
    merged = {n: _sum([t[n] for t in thetas]) / m for n in thetas[0]}
    return MergeResult(ParamMap(merged, check_finite=False))


def merge_isotropic(theta0: Mapping, taus: Sequence[Mapping], alpha: float = 1.0) -> MergeResult:
    """Flatten the spectrum of the summed update of every 2-D layer.

    Each nonzero singular value of sum(taus) is replaced by their mean, which
    keeps the nuclear norm. Other tensors get theta0 + mean(taus).
    """
    if not taus:
        raise ValueError("need at least one task vector")
    _check_all(theta0, taus)
    taus = _canonical(taus)
    merged = {}
    diagnostics = {}
    for n in theta0:
        base = _f64(theta0[n])
        delta = _sum([t[n] for t in taus])
        if base.ndim != 2:
            merged[n] = base + delta / len(taus)
            continue
        U, s, Vt = np.linalg.svd(delta, full_matrices=False)
        r = numerical_rank(s, delta.shape)
        if r == 0:
            merged[n] = base.copy()
            diagnostics[n] = {"before": s.tolist(), "after": [0.0] * s.size}
            continue
        flat = math.fsum(s[:r]) / r
        iso = flat * (U[:, :r] @ Vt[:r])
        merged[n] = base + alpha * iso
        diagnostics[n] = {"before": s.tolist(), "after": [flat] * r + [0.0] * (s.size - r)}
    return MergeResult(ParamMap(merged, check_finite=False), diagnostics)


def nearest_orthogonal(X: np.ndarray) -> np.ndarray:
    """Polar factor P Q^T of X = P L Q^T (closest matrix with orthonormal columns)."""
    P, _, Qt = np.linalg.svd(X, full_matrices=False)
    return P @ Qt


def tsv_layer(deltas: Sequence[np.ndarray], num_tasks: int):
    """TSV merge of one 2-D layer; returns (merged delta, U_perp, V_perp, retained sigmas)."""
    m, n = deltas[0].shape
    r = min(m, n)
    if r == 0:
        raise RankDeficient("layer has a zero dimension")
    k = -(-r // num_tasks)
    Us, Ss, Vs = [], [], []
    for d in deltas:
        U, s, Vt = np.linalg.svd(_f64(d), full_matrices=False)
        Us.append(U[:, :k])
        Ss.append(s[:k])
        Vs.append(Vt[:k].T)
    U_hat = np.concatenate(Us, axis=1)
    V_hat = np.concatenate(Vs, axis=1)
    sig = np.concatenate(Ss)
    U_perp = nearest_orthogonal(U_hat)
    V_perp = nearest_orthogonal(V_hat)
    merged = (U_perp * sig) @ V_perp.T
    return merged, U_perp, V_perp, sig


def merge_tsv(theta0: Mapping, taus: Sequence[Mapping], num_tasks: int | None = None) -> MergeResult:
    """Task-singular-vector merge.

    Each task's 2-D update keeps its top ceil(r / M) singular triplets; the
    concatenated left and right bases are replaced by their nearest
    orthonormal matrices before recombination. Other tensors use the mean.
    """
    if not taus:
        raise ValueError("need at least one task vector")
    _check_all(theta0, taus)
    taus = _canonical(taus)
    M = len(taus) if num_tasks is None else int(num_tasks)
    if M < 1:
        raise ValueError("num_tasks must be positive")
    merged = {}
    diagnostics = {}
    for n in theta0:
        base = _f64(theta0[n])
        if base.ndim != 2:
            merged[n] = base + _sum([t[n] for t in taus]) / len(taus)
            continue
        delta, _, _, sig = tsv_layer([t[n] for t in taus], M)
        merged[n] = base + delta
        diagnostics[n] = {
            "before": sorted(sig.tolist(), reverse=True),
            "after": np.linalg.svd(delta, compute_uv=False).tolist(),
        }
    return MergeResult(ParamMap(merged, check_finite=False), diagnostics)


def merge(config: MergeConfig, theta0: Mapping, finetuned: Sequence[Mapping]) -> MergeResult:
    """Dispatch on ``config.method`` given the pretrained and fine-tuned models."""
    if config.method == "WA":
        return merge_weight_average(finetuned)
    taus = [task_vector(ft, theta0) for ft in finetuned]
    if config.method == "TA":
        return merge_task_arithmetic(theta0, taus, config.resolved_alpha)
    if config.method == "ISO":
        return merge_isotropic(theta0, taus, config.resolved_alpha)
    return merge_tsv(theta0, taus, config.num_tasks)


def normalized_target(acc_merged_a: float, acc_a: float, acc_merged_b: float, acc_b: float) -> float:
    """Mean of the two per-task accuracy ratios (merged / individual); not clamped."""
    if acc_a == 0 or acc_b == 0:
        raise ZeroDenominator("individual accuracy must be nonzero")
    return 0.5 * (acc_merged_a / acc_a + acc_merged_b / acc_b)
