"""Deterministic synthetic models, probes and planted metric->performance datasets.

Random numbers come from numpy's PCG64 bit generator seeded with
``SynthSpec.seed``. Low-rank factors and the pretrained weights sit on a
dyadic grid so that every fine-tuned weight and task-vector entry is exact
in float32; the rank of each stored layer update is then exactly the
requested rank.
"""
from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .crossval import Dataset
from .errors import InvalidSpec
from .linopt import fit_normalizer
from .metrics import METRIC_NAMES, NUM_METRICS, MetricConfig, SpectralDecomposition, compute_metric_vector, numerical_rank
from .tensorstore import ParamMap, ProbeSet, task_vector

RNG_NAME = "numpy.random.PCG64"
_FACTOR_GRID = 16.0  # factors are multiples of 1/16
_BASE_GRID = 256.0   # pretrained weights are multiples of 1/256


def default_w_star(seed: int = 0, spread: float = 0.05) -> np.ndarray:
    """Dense planted coefficients near uniform, summing to one."""
    rng = np.random.Generator(np.random.PCG64(seed + 7919))
    w = 1.0 / NUM_METRICS + spread * rng.standard_normal(NUM_METRICS)
    return w / w.sum()


@dataclass(frozen=True)
class SynthSpec:
    num_tasks: int = 20
    layer_shapes: tuple = ((64, 64),) * 4
    bias_dim: int = 64
    rank: int | tuple = 16
    noise: float = 0.0
    w_star: tuple | None = None
    seed: int = 0
    probe_samples: int = 16
    act_dim: int = 32
    grad_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "layer_shapes", tuple(tuple(int(d) for d in s) for s in self.layer_shapes))
        if self.w_star is not None:
            object.__setattr__(self, "w_star", tuple(float(x) for x in self.w_star))

    def ranks(self) -> tuple:
        if isinstance(self.rank, (int, np.integer)):
            return (int(self.rank),) * self.num_tasks
        return tuple(int(r) for r in self.rank)

    def planted(self) -> np.ndarray:
        if self.w_star is None:
            return default_w_star(self.seed)
        return np.asarray(self.w_star, dtype=np.float64)

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise InvalidSpec("num_tasks must be positive")
        if not self.layer_shapes:
            raise InvalidSpec("at least one 2-D layer is required")
        for shape in self.layer_shapes:
            if len(shape) != 2 or min(shape) < 1:
                raise InvalidSpec(f"bad layer shape {shape}")
        ranks = self.ranks()
        if len(ranks) != self.num_tasks:
            raise InvalidSpec("one rank per task required")
        min_dim = min(min(s) for s in self.layer_shapes)
        if any(r < 1 or r > min_dim for r in ranks):
            raise InvalidSpec(f"ranks must lie in [1, {min_dim}]")
        if not (math.isfinite(self.noise) and self.noise >= 0):
            raise InvalidSpec("noise must be finite and >= 0")
        if self.w_star is not None and len(self.w_star) != NUM_METRICS:
            raise InvalidSpec(f"w_star needs {NUM_METRICS} entries")
        if self.probe_samples < 1 or self.act_dim < 1 or self.grad_dim < 1 or self.bias_dim < 0:
            raise InvalidSpec("probe sizes must be positive")

    def to_dict(self) -> dict:
        return {
            "rng": RNG_NAME,
            "num_tasks": self.num_tasks,
            "layer_shapes": [list(s) for s in self.layer_shapes],
            "bias_dim": self.bias_dim,
            "rank": list(self.ranks()),
            "noise": self.noise,
            "w_star": self.planted().tolist(),
            "seed": self.seed,
            "probe_samples": self.probe_samples,
            "act_dim": self.act_dim,
            "grad_dim": self.grad_dim,
        }


@dataclass
class SynthModels:
    pretrained: ParamMap
    finetuned: list
    probes: list
    task_ids: list = field(default_factory=list)


def task_names(n: int) -> list[str]:
    width = len(str(n))
    return [f"T{i + 1:0{width}d}" for i in range(n)]


def _grid(x, q):
    return np.round(x * q) / q


def _low_rank(rng, shape, rank, scale):
    m, n = shape
    while True:
        A = _grid(rng.standard_normal((m, rank)), _FACTOR_GRID)
        B = _grid(rng.standard_normal((rank, n)), _FACTOR_GRID)
        delta = scale * (A @ B)
        if numerical_rank(np.linalg.svd(delta, compute_uv=False), shape) == rank:
            return delta


def gen_models(spec: SynthSpec) -> SynthModels:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    names = [f"layer{i}.weight" for i in range(len(spec.layer_shapes))]
    theta0 = {n: _grid(rng.standard_normal(s), _BASE_GRID) for n, s in zip(names, spec.layer_shapes)}
    if spec.bias_dim:
        theta0["head.bias"] = _grid(rng.standard_normal(spec.bias_dim), _BASE_GRID)
    pretrained = ParamMap({k: v.astype(np.float32) for k, v in theta0.items()})

    act_base = rng.standard_normal(spec.act_dim)
    finetuned, probes = [], []
    for rank in spec.ranks():
        # per-task update scale on a 1/8 grid keeps products dyadic
        scale = _grid(0.25 * math.exp(0.5 * rng.standard_normal()), 8.0) or 0.125
        scale /= math.sqrt(rank)
        scale = _grid(scale, 64.0) or 1.0 / 64.0
        ft = {}
        for n, shape in zip(names, spec.layer_shapes):
            ft[n] = theta0[n] + _low_rank(rng, shape, rank, scale) / _FACTOR_GRID
        if spec.bias_dim:
            ft["head.bias"] = theta0["head.bias"] + _grid(0.1 * rng.standard_normal(spec.bias_dim), _BASE_GRID)
        finetuned.append(ParamMap({k: v.astype(np.float32) for k, v in ft.items()}))

        shift = rng.standard_normal(spec.act_dim)
        acts = act_base + shift + rng.standard_normal((spec.probe_samples, spec.act_dim))
        gscale = math.exp(0.5 * rng.standard_normal())
        probes.append(
            ProbeSet(
                acts.astype(np.float32),
                (gscale * rng.standard_normal(spec.grad_dim)).astype(np.float32),
                (gscale * rng.standard_normal(spec.grad_dim)).astype(np.float32),
            )
        )
    return SynthModels(pretrained, finetuned, probes, task_names(spec.num_tasks))


def pair_metrics(models: SynthModels, config: MetricConfig = MetricConfig()):
    """Metric vectors for every unordered task pair, in canonical pair order."""
    taus = [task_vector(ft, models.pretrained) for ft in models.finetuned]
    spectra = [SpectralDecomposition.from_delta(t) for t in taus]
    rows = []
    for i, j in itertools.combinations(range(len(taus)), 2):
        mv = compute_metric_vector(taus[i], taus[j], models.probes[i], models.probes[j], config,
                                   spectra_a=spectra[i], spectra_b=spectra[j])
        rows.append((models.task_ids[i], models.task_ids[j], mv))
    return rows


def planted_targets(X: np.ndarray, w_star, noise: float, rng) -> np.ndarray:
    """p = normalize_all(X) @ w* + N(0, noise^2)."""
    Xn = fit_normalizer(X).apply(X)
    p = Xn @ np.asarray(w_star, dtype=np.float64)
    if noise > 0:
        p = p + noise * rng.standard_normal(p.size)
    return p


def gen_planted_dataset(spec: SynthSpec, method: str = "planted", config: MetricConfig = MetricConfig()) -> Dataset:
    spec.validate()
    if spec.num_tasks < 3:
        raise InvalidSpec("a planted dataset needs at least 3 tasks")
    rows = pair_metrics(gen_models(spec), config)
    X = np.vstack([mv.as_array() for _, _, mv in rows])
    rng = np.random.Generator(np.random.PCG64(spec.seed + 104729))
    p = planted_targets(X, spec.planted(), spec.noise, rng)
    return Dataset(X, p, [(a, b) for a, b, _ in rows], method, METRIC_NAMES)


def permuted(dataset: Dataset, seed: int = 0) -> Dataset:
    """Permutation null: same metrics, targets shuffled across rows."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return dataset.with_targets(rng.permutation(dataset.p))


def sparse_w_star(active: Sequence[int], values: Sequence[float] | None = None) -> np.ndarray:
    w = np.zeros(NUM_METRICS)
    vals = values if values is not None else [1.0 / len(active)] * len(active)
    for idx, v in zip(active, vals):
        w[idx] = v
    return w


def accuracy_rows(dataset: Dataset, seed: int = 0):
    """Synthetic accuracy table whose normalized target equals ``dataset.p``.

    Individual accuracies are drawn in [0.6, 0.95]; both merged accuracies
    scale their individual accuracy by the pair's target.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    acc = {t: float(0.6 + 0.35 * rng.random()) for t in dataset.tasks}
    out = []
    for (a, b), target in zip(dataset.pairs, dataset.p):
        out.append((a, b, dataset.method, target * acc[a], acc[a], target * acc[b], acc[b]))
    return out
