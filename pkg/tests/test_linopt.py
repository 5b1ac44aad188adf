import numpy as np
import pytest

from mergeprobe import kernels
from mergeprobe.errors import ConstantInput, ConstantScore, EmptyTrainingSet
from mergeprobe.linopt import (
    CoefficientSet,
    MlpConfig,
    OptimizerConfig,
    fit_linear,
    fit_linear_l1,
    fit_mlp,
    fit_normalizer,
    pearson,
    pearson_gradient,
)


def planted(rng, n=171, k=28, spread=0.05, noise=0.0):
    X = rng.uniform(-1, 1, (n, k))
    w = 1 / k + spread * rng.standard_normal(k)
    w /= w.sum()
    return X, X @ w + noise * rng.standard_normal(n), w


def test_normalizer_maps_to_unit_interval(rng):
    X = rng.standard_normal((10, 4))
    X[:, 2] = 7.0
    norm = fit_normalizer(X)
    Z = norm.apply(X)
    np.testing.assert_allclose(Z[:, [0, 1, 3]].min(0), -1)
    np.testing.assert_allclose(Z[:, [0, 1, 3]].max(0), 1)
    assert not Z[:, 2].any()
    # unseen rows are not clamped
    assert norm.apply(X[:1] * 0 + 100).max() > 1
    with pytest.raises(EmptyTrainingSet):
        fit_normalizer(X[:1])


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1)
    with pytest.raises(ConstantInput):
        pearson([1, 1, 1], [1, 2, 3])


def test_gradient_matches_central_differences(rng):
    X = rng.standard_normal((30, 5))
    p = rng.standard_normal(30)
    w = rng.standard_normal(5)
    g = pearson_gradient(w, X, p)
    h = 1e-6
    num = np.array([(pearson(X @ (w + h * e), p) - pearson(X @ (w - h * e), p)) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


def test_fit_linear_planted(rng):
    X, p, _ = planted(rng)
    cs = fit_linear(X, p)
    assert cs.train_r >= 0.999
    assert abs(cs.w.sum() - 1) < 1e-9
    assert pearson(X @ cs.w, p) == pytest.approx(cs.train_r, abs=1e-12)


def test_fit_linear_errors(rng):
    X = rng.standard_normal((10, 3))
    with pytest.raises(ConstantScore):
        fit_linear(X, np.ones(10))
    with pytest.raises(EmptyTrainingSet):
        fit_linear(X[:2], np.arange(2.0))


def test_numba_and_numpy_paths_agree(rng):
    X, p, _ = planted(rng, spread=0.3)
    Xc, pc = X - X.mean(0), p - p.mean()
    args = (Xc, pc, np.full(28, 1 / 28), 0.01, 500, 50, 1e-4, 0.9, 0.999, 1e-8, True, 0.0)
    a = kernels.fit_loop_numpy(*args)
    b = kernels.fit_loop_numba(*args)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-9, atol=1e-12)
    assert a[3] == b[3]


def test_l1_shrinks_everything(rng):
    X, p, _ = planted(rng)
    cs = fit_linear_l1(X, p, lam=1e6)
    assert np.all(np.abs(cs.w) < 1e-6)


def test_l1_recovers_sparse_support(rng):
    X = rng.uniform(-1, 1, (171, 28))
    w = np.zeros(28)
    w[[3, 11, 20]] = [0.5, -0.3, 0.2]
    p = X @ w + 0.01 * rng.standard_normal(171)
    cs = fit_linear_l1(X, p, lam=1e-3)
    assert set(np.flatnonzero(cs.nonzero())) >= {3, 11, 20}
    assert np.sign(cs.w[[3, 11, 20]]).tolist() == [1, -1, 1]


def test_coefficient_set_round_trip(rng):
    X, p, _ = planted(rng)
    cs = fit_linear(X, p, OptimizerConfig(max_iter=20))
    back = CoefficientSet.from_dict(cs.to_dict())
    assert back.w.tobytes() == cs.w.tobytes()
    assert back.train_r == cs.train_r


def test_mlp_shape_and_determinism(rng):
    X, p, _ = planted(rng)
    a = fit_mlp(X, p, MlpConfig(seed=3))
    b = fit_mlp(X, p, MlpConfig(seed=3))
    assert a.num_parameters == 241
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    assert a.train_r > 0
    # all-zero weights never leave the dead ReLU point: output stays constant
    with pytest.raises(ConstantScore):
        fit_mlp(X, p, MlpConfig(init="zeros", epochs=5))
