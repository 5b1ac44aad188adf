"""Pairwise mergeability metrics.

28 metrics in five families, computed from two task vectors (flat and
per-layer) and two probe sets. Every metric is symmetric in its two inputs;
where a computation is not symmetric by construction (the per-layer SVD
products) the pair is put into a canonical order first, so ``m(A, B)`` and
``m(B, A)`` run the same floating-point operations.
"""
from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateStack, LengthMismatch, MetricError, NoMatrixLayers, ShapeMismatch, ZeroVector
from .tensorstore import ParamMap, ProbeSet, flatten

TASK_VECTOR = "task_vector"
EFFECTIVE_RANK = "effective_rank"
SUBSPACE_OVERLAP = "subspace_overlap"
ACTIVATION = "activation"
GRADIENT = "gradient"

CATEGORY_METRICS = {
    TASK_VECTOR: ("tv_cosine_sim", "tv_l2_dist", "tv_dot", "weight_angle", "tv_mag_ratio"),
    EFFECTIVE_RANK: (
        "eff_rank",
        "eff_rank_score",
        "stable_rank",
        "spectral_gap",
        "sv_ratio",
        "layer_eff_rank",
        "layer_eff_rank_score",
    ),
    SUBSPACE_OVERLAP: (
        "sv_overlap",
        "left_subspace_top_k",
        "right_subspace_top_k",
        "right_subspace_bot_k",
        "interact_top_k",
        "interact_bot_k",
    ),
    ACTIVATION: ("act_l2_dist", "act_cosine_sim", "act_mag_ratio", "act_dot"),
    GRADIENT: ("enc_grad_cos", "enc_grad_l2", "enc_grad_dot", "input_grad_cos", "input_grad_l2", "input_grad_dot"),
}
CATEGORIES = tuple(CATEGORY_METRICS)
METRIC_NAMES = tuple(name for names in CATEGORY_METRICS.values() for name in names)
METRIC_CATEGORY = {name: cat for cat, names in CATEGORY_METRICS.items() for name in names}
NUM_METRICS = len(METRIC_NAMES)

# float32 checkpoints: singular values below this relative level are rounding noise
RANK_RTOL = float(np.finfo(np.float32).eps)


@dataclass(frozen=True)
class MetricConfig:
    k: int = 10
    sv_k: int = 100
    layerwise: bool = True

    def __post_init__(self):
        if self.k < 1 or self.sv_k < 1:
            raise ValueError("k and sv_k must be positive")


class MetricVector(Mapping):
    """The 28 metric values of one model pair, in canonical order."""

    __slots__ = ("_values",)

    def __init__(self, values: Mapping[str, float]):
        missing = [n for n in METRIC_NAMES if n not in values]
        extra = [n for n in values if n not in METRIC_CATEGORY]
        if missing or extra:
            raise ValueError(f"metric vector mismatch: missing {missing}, unknown {extra}")
        vals = {n: float(values[n]) for n in METRIC_NAMES}
        bad = [n for n, v in vals.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metric values: {bad}")
        self._values = vals

    def __getitem__(self, name):
        return self._values[name]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        return f"MetricVector({self._values!r})"

    def as_array(self) -> np.ndarray:
        return np.array([self._values[n] for n in METRIC_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "MetricVector":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        if arr.size != NUM_METRICS:
            raise ValueError(f"expected {NUM_METRICS} values, got {arr.size}")
        return cls(dict(zip(METRIC_NAMES, arr.tolist())))


# ---------------------------------------------------------------------------
# vector geometry (shared by task-vector, activation and gradient families)
# ---------------------------------------------------------------------------

def vector_geometry(a, b) -> dict[str, float]:
    """cosine, l2, dot, angle (degrees) and magnitude ratio of two vectors."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size != b.size:
        raise LengthMismatch(f"vector lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ZeroVector("empty vectors")
    aa, bb, ab, dd = kernels.pair_sums(a, b)
    na, nb = math.sqrt(aa), math.sqrt(bb)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine, angle and magnitude ratio are undefined for a zero vector")
    cos = ab / (na * nb)
    # acos loses all precision near cos = +-1; the half-angle form does not
    minus, plus = kernels.unit_sums(a, b, na, nb)
    return {
        "cosine": cos,
        "l2": math.sqrt(dd),
        "dot": ab,
        "angle": math.degrees(2.0 * math.atan2(math.sqrt(minus), math.sqrt(plus))),
        "mag_ratio": min(na, nb) / max(na, nb),
    }


def tv_geometry(tau_a, tau_b) -> dict[str, float]:
    g = vector_geometry(tau_a, tau_b)
    return {
        "tv_cosine_sim": g["cosine"],
        "tv_l2_dist": g["l2"],
        "tv_dot": g["dot"],
        "weight_angle": g["angle"],
        "tv_mag_ratio": g["mag_ratio"],
    }


# ---------------------------------------------------------------------------
# effective rank family
# ---------------------------------------------------------------------------

def two_row_singular_values(a, b) -> tuple[float, float]:
    """Singular values of the 2 x D stack [a; b] from its 2 x 2 Gram matrix.

    The determinant is formed as |a|^2 |b|^2 (1 - cos^2) with both factors of
    (1 - cos)(1 + cos) taken from unit-vector sums, which keeps sigma_2 accurate
    for nearly collinear rows and is symmetric in (a, b).
    """
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size != b.size:
        raise LengthMismatch(f"vector lengths differ: {a.size} vs {b.size}")
    aa, bb, ab, _ = kernels.pair_sums(a, b)
    if aa == 0.0 and bb == 0.0:
        raise DegenerateStack("both rows are zero")
    half = 0.5 * (aa - bb)
    lam1 = 0.5 * (aa + bb) + math.sqrt(half * half + ab * ab)
    if aa == 0.0 or bb == 0.0:
        det = 0.0
    else:
        minus, plus = kernels.unit_sums(a, b, math.sqrt(aa), math.sqrt(bb))
        det = aa * bb * (minus * plus) * 0.25
    lam2 = min(det / lam1, lam1)
    return math.sqrt(lam1), math.sqrt(max(lam2, 0.0))


def effective_rank(sigmas) -> float:
    s = np.asarray(sigmas, dtype=np.float64)
    total = s.sum()
    if not total > 0:
        raise DegenerateStack("all singular values are zero")
    p = s[s > 0] / total
    return float(math.exp(-float(np.sum(p * np.log(p)))))


def spectrum_stats(s1: float, s2: float) -> dict[str, float]:
    if not s1 > 0:
        raise DegenerateStack("leading singular value is zero")
    er = effective_rank([s1, s2])
    return {
        "eff_rank": er,
        "eff_rank_score": 2.0 - er,
        "stable_rank": (s1 + s2) ** 2 / (s1 * s1 + s2 * s2),
        "spectral_gap": (s1 - s2) / s1,
        "sv_ratio": s2 / s1,
    }


def layerwise_effective_rank(layers: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Effective rank per layer pair, averaged with weights |a_l| + |b_l|."""
    num = 0.0
    den = 0.0
    for a, b in layers:
        aa, bb, _, _ = kernels.pair_sums(a, b)
        weight = math.sqrt(aa) + math.sqrt(bb)
        if weight == 0.0:
            continue
        s1, s2 = two_row_singular_values(a, b)
        num += weight * effective_rank([s1, s2])
        den += weight
    if den == 0.0:
        raise DegenerateStack("every layer is zero in both task vectors")
    return num / den


def effrank_suite(tau_a, tau_b, per_layer=None) -> dict[str, float]:
    """Effective-rank family. ``per_layer`` is an iterable of (a_l, b_l) slices;
    without it the layer-wise metrics fall back to the global stack."""
    tau_a = np.asarray(tau_a).reshape(-1)
    tau_b = np.asarray(tau_b).reshape(-1)
    s1, s2 = two_row_singular_values(tau_a, tau_b)
    out = spectrum_stats(s1, s2)
    if per_layer is None:
        ler = out["eff_rank"]
    else:
        ler = layerwise_effective_rank(per_layer)
    out["layer_eff_rank"] = ler
    out["layer_eff_rank_score"] = 2.0 - ler
    return out


# ---------------------------------------------------------------------------
# subspace overlap family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpectrum:
    name: str
    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray
    rank: int


@dataclass(frozen=True)
class SpectralDecomposition:
    """Thin SVDs of every 2-D tensor of a task vector, computed once per model."""

    layers: dict = field(default_factory=dict)
    digest: str = ""

    @classmethod
    def from_delta(cls, delta: Mapping) -> "SpectralDecomposition":
        mats = {n: np.asarray(v) for n, v in delta.items() if np.ndim(v) == 2}
        layers = {}
        for name in sorted(mats):
            W = np.asarray(mats[name], dtype=np.float64)
            U, s, Vt = np.linalg.svd(W, full_matrices=False)
            rank = numerical_rank(s, W.shape)
            layers[name] = LayerSpectrum(name, U, s, Vt, rank)
        return cls(layers, ParamMap(mats, check_finite=False).digest())


def numerical_rank(s, shape) -> int:
    if s.size == 0 or not s[0] > 0:
        return 0
    tol = s[0] * max(shape) * RANK_RTOL
    return int(np.count_nonzero(s > tol))


def _as_decomposition(x) -> SpectralDecomposition:
    if isinstance(x, SpectralDecomposition):
        return x
    return SpectralDecomposition.from_delta(x)


def _cos(u, v) -> float:
    return float(u @ v) / (math.sqrt(float(u @ u)) * math.sqrt(float(v @ v)))


def _layer_overlaps(A: LayerSpectrum, B: LayerSpectrum, k: int, sv_k: int) -> dict[str, float]:
    n_sv = min(sv_k, A.s.size)
    sa = A.s[:n_sv] / A.s[:n_sv].sum()
    sb = B.s[:n_sv] / B.s[:n_sv].sum()
    kk = min(k, A.rank, B.rank)

    Ua, Ub = A.U[:, :kk], B.U[:, :kk]
    Va_top, Vb_top = A.Vt[:kk].T, B.Vt[:kk].T
    Va_bot, Vb_bot = A.Vt[A.rank - kk:A.rank].T, B.Vt[B.rank - kk:B.rank].T
    M_top = Va_top.T @ Vb_top
    M_bot = Va_bot.T @ Vb_bot
    return {
        "sv_overlap": _cos(sa, sb),
        "left_subspace_top_k": float(np.linalg.norm(Ua.T @ Ub, "fro")),
        "right_subspace_top_k": float(np.linalg.norm(M_top, "fro")),
        "right_subspace_bot_k": float(np.linalg.norm(M_bot, "fro")),
        "interact_top_k": float(np.mean(np.linalg.svd(M_top, compute_uv=False) ** 2)),
        "interact_bot_k": float(np.mean(np.linalg.svd(M_bot, compute_uv=False) ** 2)),
    }


def subspace_suite(delta_a, delta_b, k: int = 10, sv_k: int = 100) -> dict[str, float]:
    """Subspace-overlap family, averaged uniformly over shared 2-D layers.

    Accepts task-vector ParamMaps or precomputed :class:`SpectralDecomposition`.
    Layers where either side is exactly zero carry no subspace and are skipped.
    """
    A = _as_decomposition(delta_a)
    B = _as_decomposition(delta_b)
    if set(A.layers) != set(B.layers):
        raise ShapeMismatch("task vectors have different 2-D layer sets")
    if B.digest < A.digest:
        A, B = B, A
    per_layer = []
    for name in sorted(A.layers):
        la, lb = A.layers[name], B.layers[name]
        if la.U.shape != lb.U.shape or la.Vt.shape != lb.Vt.shape:
            raise ShapeMismatch(f"layer {name!r} shapes differ")
        if la.rank == 0 or lb.rank == 0:
            continue
        per_layer.append(_layer_overlaps(la, lb, k, sv_k))
    if not per_layer:
        raise NoMatrixLayers("no 2-D layer with a nonzero update in both task vectors")
    names = CATEGORY_METRICS[SUBSPACE_OVERLAP]
    return {n: math.fsum(d[n] for d in per_layer) / len(per_layer) for n in names}


# ---------------------------------------------------------------------------
# probe-based families
# ---------------------------------------------------------------------------

def activation_suite(pa: ProbeSet, pb: ProbeSet) -> dict[str, float]:
    if pa.activations.shape[1] != pb.activations.shape[1]:
        raise LengthMismatch(
            f"activation dims differ: {pa.activations.shape[1]} vs {pb.activations.shape[1]}"
        )
    mean_a = pa.activations.mean(axis=0, dtype=np.float64)
    mean_b = pb.activations.mean(axis=0, dtype=np.float64)
    g = vector_geometry(mean_a, mean_b)
    return {
        "act_l2_dist": g["l2"],
        "act_cosine_sim": g["cosine"],
        "act_mag_ratio": g["mag_ratio"],
        "act_dot": g["dot"],
    }


def gradient_suite(pa: ProbeSet, pb: ProbeSet) -> dict[str, float]:
    out = {}
    for prefix, ga, gb in (
        ("enc_grad", pa.encoder_grad, pb.encoder_grad),
        ("input_grad", pa.input_grad, pb.input_grad),
    ):
        if ga.size != gb.size:
            raise LengthMismatch(f"{prefix} lengths differ: {ga.size} vs {gb.size}")
        try:
            g = vector_geometry(ga, gb)
        except ZeroVector as exc:
            raise ZeroVector(f"{prefix}: {exc}") from exc
        out[f"{prefix}_cos"] = g["cosine"]
        out[f"{prefix}_l2"] = g["l2"]
        out[f"{prefix}_dot"] = g["dot"]
    return out


# ---------------------------------------------------------------------------
# full vector
# ---------------------------------------------------------------------------

_UNDEFINED_ON_ZERO = {
    "tv_geometry": ("tv_cosine_sim", "weight_angle", "tv_mag_ratio"),
    "activation_suite": ("act_cosine_sim", "act_mag_ratio"),
}


def _failed_ids(suite: str, exc: Exception) -> tuple[str, ...]:
    if isinstance(exc, ZeroVector) and suite in _UNDEFINED_ON_ZERO:
        return _UNDEFINED_ON_ZERO[suite]
    if suite == "gradient_suite" and isinstance(exc, ZeroVector):
        prefix = "input_grad" if "input_grad" in str(exc) else "enc_grad"
        return (f"{prefix}_cos",)
    return {
        "tv_geometry": CATEGORY_METRICS[TASK_VECTOR],
        "effrank_suite": CATEGORY_METRICS[EFFECTIVE_RANK],
        "subspace_suite": CATEGORY_METRICS[SUBSPACE_OVERLAP],
        "activation_suite": CATEGORY_METRICS[ACTIVATION],
        "gradient_suite": CATEGORY_METRICS[GRADIENT],
    }[suite]


def compute_metric_vector(
    tv_a: Mapping,
    tv_b: Mapping,
    probe_a: ProbeSet,
    probe_b: ProbeSet,
    config: MetricConfig = MetricConfig(),
    *,
    spectra_a: SpectralDecomposition | None = None,
    spectra_b: SpectralDecomposition | None = None,
) -> MetricVector:
    """All 28 metrics for one pair of task vectors (ParamMaps) and probe sets.

    Raises :class:`MetricError` listing every metric id whose suite failed.
    """
    if set(tv_a) != set(tv_b):
        raise ShapeMismatch("task vectors have different parameter names")
    flat_a = flatten(tv_a)
    flat_b = flatten(tv_b)
    layers = [(np.asarray(tv_a[n]).reshape(-1), np.asarray(tv_b[n]).reshape(-1)) for n in sorted(tv_a)]

    jobs = {
        "tv_geometry": lambda: tv_geometry(flat_a, flat_b),
        "effrank_suite": lambda: effrank_suite(flat_a, flat_b, layers if config.layerwise else None),
        "subspace_suite": lambda: subspace_suite(
            spectra_a if spectra_a is not None else tv_a,
            spectra_b if spectra_b is not None else tv_b,
            config.k,
            config.sv_k,
        ),
        "activation_suite": lambda: activation_suite(probe_a, probe_b),
        "gradient_suite": lambda: gradient_suite(probe_a, probe_b),
    }
    values = {}
    failures = []
    for suite, job in jobs.items():
        try:
            values.update(job())
        except (ZeroVector, DegenerateStack, NoMatrixLayers, LengthMismatch, ShapeMismatch) as exc:
            failures.append((suite, _failed_ids(suite, exc), exc))
    if failures:
        raise MetricError(failures)
    return MetricVector(values)


# ---------------------------------------------------------------------------
# CSV exchange
# ---------------------------------------------------------------------------

CSV_COLUMNS = METRIC_NAMES + ("task_a", "task_b")


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def write_metric_csv(path, rows: Iterable[tuple[str, str, MetricVector]]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for task_a, task_b, mv in rows:
            writer.writerow([format_float(mv[n]) for n in METRIC_NAMES] + [task_a, task_b])
    tmp.replace(path)


def read_metric_csv(path) -> list[tuple[str, str, MetricVector]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        return [
            (row["task_a"], row["task_b"], MetricVector({n: float(row[n]) for n in METRIC_NAMES}))
            for row in reader
        ]
