"""Hot numeric kernels with numba and pure-numpy implementations.

Every kernel exists in two flavours: ``*_numba`` (compiled loop) and
``*_numpy`` (vectorized). The un-suffixed name dispatches on
:data:`mergeprobe._accel.NUMBA_ENABLED`. Both flavours accumulate in float64
and reduce in fixed-size blocks, so results do not depend on the input dtype
beyond the initial widening.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._accel import HAVE_NUMBA, NUMBA_ENABLED, njit

DEFAULT_BLOCK = 8192

FIT_OK = 0
FIT_CONSTANT = 1
FIT_SUM_NEAR_ZERO = 2


# ---------------------------------------------------------------------------
# pairwise reductions: a.a, b.b, a.b, |a-b|^2
# ---------------------------------------------------------------------------

def _pair_sums_loop(a, b, block):
    n = a.size
    aa = 0.0
    bb = 0.0
    ab = 0.0
    dd = 0.0
    start = 0
    while start < n:
        stop = min(start + block, n)
        saa = 0.0
        sbb = 0.0
        sab = 0.0
        sdd = 0.0
        for i in range(start, stop):
            x = np.float64(a[i])
            y = np.float64(b[i])
            saa += x * x
            sbb += y * y
            sab += x * y
            d = x - y
            sdd += d * d
        aa += saa
        bb += sbb
        ab += sab
        dd += sdd
        start = stop
    return aa, bb, ab, dd


def _unit_sums_loop(a, b, na, nb, block):
    n = a.size
    minus = 0.0
    plus = 0.0
    start = 0
    while start < n:
        stop = min(start + block, n)
        sm = 0.0
        sp = 0.0
        for i in range(start, stop):
            x = np.float64(a[i]) / na
            y = np.float64(b[i]) / nb
            d = x - y
            s = x + y
            sm += d * d
            sp += s * s
        minus += sm
        plus += sp
        start = stop
    return minus, plus


_pair_sums_jit = njit(_pair_sums_loop)
_unit_sums_jit = njit(_unit_sums_loop)


def _check_pair(a, b):
    a = np.ascontiguousarray(a).reshape(-1)
    b = np.ascontiguousarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def pair_sums_numba(a, b, block=DEFAULT_BLOCK):
    a, b = _check_pair(a, b)
    return _pair_sums_jit(a, b, int(block))


def pair_sums_numpy(a, b, block=DEFAULT_BLOCK):
    a, b = _check_pair(a, b)
    aa = bb = ab = dd = 0.0
    for start in range(0, a.size, block):
        x = a[start:start + block].astype(np.float64)
        y = b[start:start + block].astype(np.float64)
        d = x - y
        aa += float(np.dot(x, x))
        bb += float(np.dot(y, y))
        ab += float(np.dot(x, y))
        dd += float(np.dot(d, d))
    return aa, bb, ab, dd


def unit_sums_numba(a, b, na, nb, block=DEFAULT_BLOCK):
    a, b = _check_pair(a, b)
    return _unit_sums_jit(a, b, float(na), float(nb), int(block))


def unit_sums_numpy(a, b, na, nb, block=DEFAULT_BLOCK):
    a, b = _check_pair(a, b)
    minus = plus = 0.0
    for start in range(0, a.size, block):
        x = a[start:start + block].astype(np.float64) / na
        y = b[start:start + block].astype(np.float64) / nb
        d = x - y
        s = x + y
        minus += float(np.dot(d, d))
        plus += float(np.dot(s, s))
    return minus, plus


def pair_sums_parallel(a, b, workers=4, block=DEFAULT_BLOCK):
    """Block-parallel variant of :func:`pair_sums`; partials are combined in block order."""
    a, b = _check_pair(a, b)
    n = a.size
    span = max(block, -(-n // max(workers, 1)))
    span = -(-span // block) * block
    starts = list(range(0, n, span)) or [0]
    kernel = pair_sums_numba if NUMBA_ENABLED else pair_sums_numpy
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda s: kernel(a[s:s + span], b[s:s + span], block), starts))
    return tuple(float(sum(p[i] for p in parts)) for i in range(4))


if NUMBA_ENABLED:
    pair_sums = pair_sums_numba
    unit_sums = unit_sums_numba
else:
    pair_sums = pair_sums_numpy
    unit_sums = unit_sums_numpy


# ---------------------------------------------------------------------------
# Adam on the Pearson objective (sum-to-one constrained or L1-penalized)
# ---------------------------------------------------------------------------

def _score_grad(Xc, pc, pnorm, w):
    s = Xc @ w
    ss = s @ s
    if not ss > 0.0:
        return 0.0, np.zeros_like(w), False
    sn = np.sqrt(ss)
    r = (s @ pc) / (sn * pnorm)
    g = Xc.T @ (pc / (sn * pnorm) - (r / ss) * s)
    return r, g, True


def _make_fit_loop(score_grad):
    def _fit_loop(Xc, pc, w0, lr, max_iter, patience, tol, beta1, beta2, eps, constrained, lam):
        K = w0.size
        w = w0.copy()
        m = np.zeros(K)
        v = np.zeros(K)
        trace = np.full(max_iter + 1, np.nan)
        path = np.full((max_iter + 1, K), np.nan)
        pnorm = np.sqrt(pc @ pc)

        r, g, ok = score_grad(Xc, pc, pnorm, w)
        if not ok:
            return w, np.nan, np.nan, 0, trace, path, FIT_CONSTANT
        obj = r - lam * np.abs(w).sum()
        trace[0] = obj
        path[0] = w
        best_obj = obj
        best_r = r
        best_w = w.copy()
        wait = 0
        it = 0
        for t in range(1, max_iter + 1):
            gl = -g + lam * np.sign(w)
            m = beta1 * m + (1.0 - beta1) * gl
            v = beta2 * v + (1.0 - beta2) * gl * gl
            mhat = m / (1.0 - beta1 ** t)
            vhat = v / (1.0 - beta2 ** t)
            step = mhat / (np.sqrt(vhat) + eps)
            new = w - lr * step
            if constrained:
                total = new.sum()
                cur = lr
                halvings = 0
                while abs(total) < 1e-8:
                    halvings += 1
                    if halvings > 60:
                        return best_w, best_r, best_obj, it, trace, path, FIT_SUM_NEAR_ZERO
                    cur *= 0.5
                    new = w - cur * step
                    total = new.sum()
                new = new / total
            elif lam > 0.0:
                # orthant clipping: a coordinate that crosses zero stops at zero
                for i in range(K):
                    if w[i] != 0.0 and np.sign(new[i]) != np.sign(w[i]):
                        new[i] = 0.0
            w = new
            r, g, ok = score_grad(Xc, pc, pnorm, w)
            if not ok:
                r = 0.0
            obj = r - lam * np.abs(w).sum()
            trace[t] = obj
            path[t] = w
            it = t
            if obj > best_obj + tol:
                wait = 0
            else:
                wait += 1
            if obj > best_obj:
                best_obj = obj
                best_r = r
                best_w = w.copy()
            if wait >= patience:
                break
        return best_w, best_r, best_obj, it, trace, path, FIT_OK

    return _fit_loop


_fit_loop = _make_fit_loop(_score_grad)
_fit_loop_jit = njit(_make_fit_loop(njit(_score_grad))) if HAVE_NUMBA else _fit_loop


def _fit_args(Xc, pc, w0, *rest):
    return (
        np.ascontiguousarray(Xc, dtype=np.float64),
        np.ascontiguousarray(pc, dtype=np.float64),
        np.ascontiguousarray(w0, dtype=np.float64),
    ) + rest


def fit_loop_numpy(Xc, pc, w0, lr, max_iter, patience, tol, beta1, beta2, eps, constrained, lam):
    return _fit_loop(*_fit_args(Xc, pc, w0, float(lr), int(max_iter), int(patience), float(tol),
                                float(beta1), float(beta2), float(eps), bool(constrained), float(lam)))


def fit_loop_numba(Xc, pc, w0, lr, max_iter, patience, tol, beta1, beta2, eps, constrained, lam):
    return _fit_loop_jit(*_fit_args(Xc, pc, w0, float(lr), int(max_iter), int(patience), float(tol),
                                    float(beta1), float(beta2), float(eps), bool(constrained), float(lam)))


fit_loop = fit_loop_numba if NUMBA_ENABLED else fit_loop_numpy

__all__ = [
    "HAVE_NUMBA",
    "NUMBA_ENABLED",
    "pair_sums",
    "pair_sums_numba",
    "pair_sums_numpy",
    "pair_sums_parallel",
    "unit_sums",
    "unit_sums_numba",
    "unit_sums_numpy",
    "fit_loop",
    "fit_loop_numba",
    "fit_loop_numpy",
]
