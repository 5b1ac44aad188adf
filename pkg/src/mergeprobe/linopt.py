"""Predictors of post-merge performance from normalized metrics.

* :func:`fit_linear` - Adam ascent on Pearson r with w rescaled to sum to one
  after every step; best iterate is returned.
* :func:`fit_linear_l1` - Adam descent on ``-r + lam * |w|_1`` without the
  sum constraint.
* :func:`fit_mlp` - one-hidden-layer ReLU network trained on MSE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .errors import ConstantInput, ConstantScore, DegenerateScore, EmptyTrainingSet, SumNearZero
from .metrics import METRIC_NAMES

NONZERO_THRESHOLD = 1e-6


# ---------------------------------------------------------------------------
# min-max normalization to [-1, 1]
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.maxs == self.mins

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        span = self.maxs - self.mins
        const = span == 0
        safe = np.where(const, 1.0, span)
        out = 2.0 * (X - self.mins) / safe - 1.0
        out[..., const] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}


def fit_normalizer(X_train) -> Normalizer:
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise EmptyTrainingSet(f"need at least 2 training rows, got shape {X.shape}")
    return Normalizer(X.min(axis=0), X.max(axis=0))


# ---------------------------------------------------------------------------
# Pearson correlation and its gradient
# ---------------------------------------------------------------------------

def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise ValueError("Pearson correlation needs at least 3 points")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise ConstantInput("Pearson correlation is undefined for a constant input")
    return float(da @ db) / math.sqrt(saa * sbb)


def _score_r(scores, p) -> float:
    try:
        return pearson(scores, p)
    except ConstantInput as exc:
        raise ConstantScore(str(exc)) from exc


def pearson_gradient(w, X, p) -> np.ndarray:
    """Gradient of r(Xw, p) with respect to w."""
    X = np.asarray(X, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    pc = p - p.mean()
    pn = math.sqrt(float(pc @ pc))
    if pn == 0.0:
        raise ConstantInput("target is constant")
    r, g, ok = kernels._score_grad(Xc, pc, pn, np.asarray(w, dtype=np.float64))
    if not ok:
        raise DegenerateScore("score Xw is constant")
    return g


# ---------------------------------------------------------------------------
# linear predictors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    max_iter: int = 1000
    patience: int = 50
    tol: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.lr, self.max_iter, self.patience, self.tol) <= 0:
            raise ValueError("lr, max_iter, patience and tol must be positive")


@dataclass
class CoefficientSet:
    w: np.ndarray
    constraint: str  # "sum-to-one" | "l1" | "unconstrained"
    train_r: float
    val_r: float | None = None
    iterations: int = 0
    method: str | None = None
    fold: str | None = None
    objective: float | None = None
    metric_names: tuple = METRIC_NAMES
    trace: np.ndarray | None = field(default=None, repr=False)
    # every accepted iterate, row 0 = starting point
    path: np.ndarray | None = field(default=None, repr=False)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w

    def nonzero(self, threshold: float = NONZERO_THRESHOLD) -> np.ndarray:
        return np.abs(self.w) > threshold

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "fold": self.fold,
            "constraint": self.constraint,
            "w": [float(x) for x in self.w],
            "train_r": self.train_r,
            "val_r": self.val_r,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientSet":
        return cls(
            w=np.asarray(d["w"], dtype=np.float64),
            constraint=d["constraint"],
            train_r=d["train_r"],
            val_r=d.get("val_r"),
            iterations=d.get("iterations", 0),
            method=d.get("method"),
            fold=d.get("fold"),
        )


def _prepare(X, p):
    X = np.asarray(X, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != p.size:
        raise ValueError(f"X has shape {X.shape}, p has {p.size} entries")
    if X.shape[0] < 3:
        raise EmptyTrainingSet("need at least 3 training rows")
    if not (np.isfinite(X).all() and np.isfinite(p).all()):
        raise ValueError("X and p must be finite")
    pc = p - p.mean()
    if float(pc @ pc) == 0.0:
        raise ConstantScore("target is constant")
    return X, p, X - X.mean(axis=0), pc


def _run(X, p, w0, cfg: OptimizerConfig, constrained: bool, lam: float):
    X, p, Xc, pc = _prepare(X, p)
    best_w, best_r, best_obj, iters, trace, path, status = kernels.fit_loop(
        Xc, pc, w0, cfg.lr, cfg.max_iter, cfg.patience, cfg.tol,
        cfg.beta1, cfg.beta2, cfg.eps, constrained, lam,
    )
    if status == kernels.FIT_CONSTANT:
        raise ConstantScore("initial score X w0 is constant")
    if status == kernels.FIT_SUM_NEAR_ZERO:
        raise SumNearZero("coefficient sum stayed below 1e-8 after 60 step halvings")
    return best_w, float(best_r), float(best_obj), int(iters), trace[: iters + 1], path[: iters + 1]


def fit_linear(X_train, p_train, cfg: OptimizerConfig = OptimizerConfig()) -> CoefficientSet:
    """Maximize r(Xw, p) subject to sum(w) = 1, starting from the uniform vector.

    If a step lands within 1e-8 of a zero sum, it is retaken from the previous
    iterate with the step size halved (repeatedly) before rescaling.
    """
    K = np.shape(X_train)[1]
    w0 = np.full(K, 1.0 / K)
    w, r, obj, iters, trace, path = _run(X_train, p_train, w0, cfg, True, 0.0)
    return CoefficientSet(w=w, constraint="sum-to-one", train_r=r, iterations=iters, objective=obj, trace=trace,
                          path=path)


def fit_linear_l1(X_train, p_train, lam: float = 1.0, cfg: OptimizerConfig = OptimizerConfig()) -> CoefficientSet:
    """Minimize ``-r(Xw, p) + lam * sum|w|`` without the sum constraint.

    Uses the subgradient 0 at w_i = 0, and a coordinate that would cross zero
    in one step is set to exactly zero. A zero score vector counts as r = 0.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    K = np.shape(X_train)[1]
    w0 = np.full(K, 1.0 / K)
    w, r, obj, iters, trace, path = _run(X_train, p_train, w0, cfg, False, float(lam))
    return CoefficientSet(
        w=w,
        constraint="l1" if lam > 0 else "unconstrained",
        train_r=r,
        iterations=iters,
        objective=obj,
        trace=trace,
        path=path,
    )


# ---------------------------------------------------------------------------
# MLP baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 8
    dropout: float = 0.4
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 300
    seed: int = 0
    init: str = "default"  # "default" (uniform +-1/sqrt(fan_in)) or "zeros"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.init not in ("default", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")


class Adam:
    """Adam with coupled L2 weight decay (decay added to the gradient)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


class MlpRegressor:
    """inputs -> hidden (ReLU, inverted dropout) -> 1."""

    def __init__(self, n_in: int, cfg: MlpConfig = MlpConfig()):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden
        if cfg.init == "zeros":
            self.params = {
                "W1": np.zeros((n_in, h)),
                "b1": np.zeros(h),
                "W2": np.zeros((h, 1)),
                "b2": np.zeros(1),
            }
        else:
            b_in = 1.0 / math.sqrt(n_in)
            b_h = 1.0 / math.sqrt(h)
            self.params = {
                "W1": self.rng.uniform(-b_in, b_in, (n_in, h)),
                "b1": self.rng.uniform(-b_in, b_in, h),
                "W2": self.rng.uniform(-b_h, b_h, (h, 1)),
                "b2": self.rng.uniform(-b_h, b_h, 1),
            }
        self.train_r: float | None = None
        self.val_r: float | None = None
        self.loss_history: list[float] = []

    @property
    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def predict(self, X) -> np.ndarray:
        P = self.params
        hidden = np.maximum(np.asarray(X, dtype=np.float64) @ P["W1"] + P["b1"], 0.0)
        return (hidden @ P["W2"] + P["b2"]).reshape(-1)

    def fit(self, X, p) -> "MlpRegressor":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(p, dtype=np.float64).reshape(-1, 1)
        cfg = self.cfg
        opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        n = X.shape[0]
        keep = 1.0 - cfg.dropout
        for _ in range(cfg.epochs):
            P = self.params
            pre = X @ P["W1"] + P["b1"]
            act = np.maximum(pre, 0.0)
            if cfg.dropout > 0:
                mask = (self.rng.random(act.shape) < keep) / keep
            else:
                mask = np.ones_like(act)
            hidden = act * mask
            out = hidden @ P["W2"] + P["b2"]
            err = out - y
            self.loss_history.append(float(np.mean(err * err)))
            d_out = 2.0 * err / n
            d_hidden = (d_out @ P["W2"].T) * mask * (pre > 0)
            grads = {
                "W2": hidden.T @ d_out,
                "b2": d_out.sum(axis=0),
                "W1": X.T @ d_hidden,
                "b1": d_hidden.sum(axis=0),
            }
            opt.step(self.params, grads)
        return self

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "config": asdict(self.cfg),
            "num_parameters": self.num_parameters,
            "train_r": self.train_r,
            "val_r": self.val_r,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }


def fit_mlp(X_train, p_train, cfg: MlpConfig = MlpConfig()) -> MlpRegressor:
    X, p, _, _ = _prepare(X_train, p_train)
    model = MlpRegressor(X.shape[1], cfg).fit(X, p)
    model.train_r = _score_r(model.predict(X), p)
    return model
