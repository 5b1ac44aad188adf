import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mergeprobe.errors import DegenerateStack, LengthMismatch, MetricError, ZeroVector
from mergeprobe.metrics import (
    METRIC_NAMES,
    MetricConfig,
    MetricVector,
    activation_suite,
    compute_metric_vector,
    effective_rank,
    effrank_suite,
    gradient_suite,
    read_metric_csv,
    spectrum_stats,
    subspace_suite,
    tv_geometry,
    two_row_singular_values,
    vector_geometry,
    write_metric_csv,
)
from mergeprobe.tensorstore import ParamMap, ProbeSet

TOL = 1e-9


def test_canonical_metric_list():
    assert len(METRIC_NAMES) == 28 and len(set(METRIC_NAMES)) == 28


def test_tv_orthogonal_unit_vectors():
    g = tv_geometry([1.0, 0.0], [0.0, 1.0])
    assert g["tv_cosine_sim"] == pytest.approx(0, abs=TOL)
    assert g["weight_angle"] == pytest.approx(90, abs=TOL)
    assert g["tv_l2_dist"] == pytest.approx(math.sqrt(2), abs=TOL)
    assert g["tv_dot"] == pytest.approx(0, abs=TOL)
    assert g["tv_mag_ratio"] == pytest.approx(1, abs=TOL)


def test_tv_identical_and_collinear():
    g = tv_geometry([2.0, 1.0], [2.0, 1.0])
    assert (g["tv_cosine_sim"], g["weight_angle"], g["tv_l2_dist"], g["tv_mag_ratio"], g["tv_dot"]) == pytest.approx(
        (1, 0, 0, 1, 5), abs=TOL
    )
    g = tv_geometry([3.0, 4.0], [6.0, 8.0])
    assert g["tv_mag_ratio"] == pytest.approx(0.5, abs=TOL)
    assert g["tv_cosine_sim"] == pytest.approx(1, abs=TOL)
    assert g["tv_dot"] == pytest.approx(50, abs=TOL)
    assert g["tv_l2_dist"] == pytest.approx(5, abs=TOL)


def test_geometry_errors():
    with pytest.raises(ZeroVector):
        vector_geometry([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(LengthMismatch):
        vector_geometry([1.0], [1.0, 2.0])


def test_effective_rank_family_closed_forms():
    s1, s2 = two_row_singular_values([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    st_ = spectrum_stats(s1, s2)
    assert (st_["eff_rank"], st_["eff_rank_score"], st_["stable_rank"], st_["spectral_gap"], st_["sv_ratio"]) == \
        pytest.approx((2, 0, 2, 0, 1), abs=TOL)

    suite = effrank_suite([1.0, 2.0, 3.0], [-2.0, -4.0, -6.0])
    assert (suite["eff_rank"], suite["eff_rank_score"], suite["stable_rank"], suite["spectral_gap"],
            suite["sv_ratio"]) == pytest.approx((1, 1, 1, 1, 0), abs=TOL)

    st_ = spectrum_stats(3.0, 1.0)
    # p = (3/4, 1/4): H = 0.5623351446...
    h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert st_["eff_rank"] == pytest.approx(math.exp(h), abs=TOL)
    assert st_["eff_rank"] == pytest.approx(1.7547, abs=1e-4)
    assert st_["stable_rank"] == pytest.approx(1.6, abs=TOL)
    assert st_["spectral_gap"] == pytest.approx(2 / 3, abs=TOL)
    assert st_["sv_ratio"] == pytest.approx(1 / 3, abs=TOL)


def test_two_row_singular_values_against_svd(rng):
    for _ in range(20):
        a, b = rng.standard_normal((2, 40))
        ref = np.linalg.svd(np.vstack([a, b]), compute_uv=False)
        assert two_row_singular_values(a, b) == pytest.approx(tuple(ref), rel=1e-10)


def test_nearly_collinear_second_singular_value():
    a = np.ones(1000)
    b = a * 2 + 1e-7 * np.sin(np.arange(1000))
    ref = np.linalg.svd(np.vstack([a, b]).astype(np.longdouble).astype(np.float64), compute_uv=False)
    s1, s2 = two_row_singular_values(a, b)
    assert s1 == pytest.approx(ref[0], rel=1e-12)
    assert s2 == pytest.approx(ref[1], rel=1e-4)


def test_effective_rank_degenerate():
    with pytest.raises(DegenerateStack):
        effective_rank([0.0, 0.0])
    with pytest.raises(DegenerateStack):
        two_row_singular_values(np.zeros(3), np.zeros(3))
    assert effective_rank([5.0, 0.0]) == 1.0


def test_layerwise_weighting():
    la = (np.array([1.0, 0.0]), np.array([0.0, 1.0]))  # eff rank 2, weight 2
    lb = (np.array([1.0, 1.0]), np.array([2.0, 2.0]))  # eff rank 1, weight 3 sqrt 2
    out = effrank_suite(np.concatenate([la[0], lb[0]]), np.concatenate([la[1], lb[1]]), [la, lb])
    w1, w2 = 2.0, 3 * math.sqrt(2)
    assert out["layer_eff_rank"] == pytest.approx((2 * w1 + 1 * w2) / (w1 + w2), abs=TOL)
    assert out["layer_eff_rank_score"] == pytest.approx(2 - out["layer_eff_rank"], abs=TOL)


# ---------------------------------------------------------------------------
# subspace family
# ---------------------------------------------------------------------------

def _eig_svd(W):
    # independent SVD: eigendecomposition of the Gram matrices
    evals, V = np.linalg.eigh(W.T @ W)
    order = np.argsort(evals)[::-1]
    evals, V = evals[order], V[:, order]
    s = np.sqrt(np.clip(evals, 0, None))
    U = W @ V / s
    return U, s, V


def _oracle_layer(A, B, k, sv_k):
    Ua, sa, Va = _eig_svd(A)
    Ub, sb, Vb = _eig_svd(B)
    r = min(A.shape)
    k = min(k, r)
    n = min(sv_k, r)
    pa, pb = sa[:n] / sa[:n].sum(), sb[:n] / sb[:n].sum()
    top = Va[:, :k].T @ Vb[:, :k]
    bot = Va[:, r - k:r].T @ Vb[:, r - k:r]
    return {
        "sv_overlap": pa @ pb / (np.linalg.norm(pa) * np.linalg.norm(pb)),
        "left_subspace_top_k": np.linalg.norm(Ua[:, :k].T @ Ub[:, :k]),
        "right_subspace_top_k": np.linalg.norm(top),
        "right_subspace_bot_k": np.linalg.norm(bot),
        "interact_top_k": np.mean(np.linalg.svd(top, compute_uv=False) ** 2),
        "interact_bot_k": np.mean(np.linalg.svd(bot, compute_uv=False) ** 2),
    }


def test_subspace_matches_gram_oracle(rng):
    A1, B1, A2, B2 = (rng.standard_normal((8, 6)) for _ in range(4))
    got = subspace_suite({"l1": A1, "l2": A2}, {"l1": B1, "l2": B2}, k=3, sv_k=100)
    o1, o2 = _oracle_layer(A1, B1, 3, 100), _oracle_layer(A2, B2, 3, 100)
    for name, value in got.items():
        assert value == pytest.approx((o1[name] + o2[name]) / 2, abs=TOL), name


def test_subspace_self_overlap(rng):
    A = rng.standard_normal((10, 10))
    got = subspace_suite({"w": A}, {"w": A}, k=4)
    assert got["sv_overlap"] == pytest.approx(1, abs=TOL)
    assert got["interact_top_k"] == pytest.approx(1, abs=TOL)
    assert got["left_subspace_top_k"] == pytest.approx(2.0, abs=TOL)


def test_subspace_orthogonal_right_spaces(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    L = rng.standard_normal((6, 3))
    A = L @ Q[:, :3].T
    B = L @ Q[:, 3:].T
    got = subspace_suite({"w": A}, {"w": B}, k=3)
    assert got["right_subspace_top_k"] == pytest.approx(0, abs=TOL)
    assert got["interact_top_k"] == pytest.approx(0, abs=TOL)


def test_subspace_ignores_vectors_and_skips_zero_layers(rng):
    A = rng.standard_normal((5, 4))
    B = rng.standard_normal((5, 4))
    base = subspace_suite({"w": A}, {"w": B}, k=2)
    more = subspace_suite({"w": A, "z": np.zeros((5, 4)), "b": np.ones(3)},
                          {"w": B, "z": rng.standard_normal((5, 4)), "b": np.ones(3)}, k=2)
    assert more == pytest.approx(base, abs=0)


# ---------------------------------------------------------------------------
# probe families
# ---------------------------------------------------------------------------

def _probe(acts, enc, inp):
    return ProbeSet(np.asarray(acts, np.float64), np.asarray(enc, np.float64), np.asarray(inp, np.float64))


def test_activation_examples(rng):
    acts = rng.standard_normal((4, 3))
    g = activation_suite(_probe(acts, [1], [1]), _probe(acts, [1], [1]))
    assert (g["act_l2_dist"], g["act_cosine_sim"], g["act_mag_ratio"]) == pytest.approx((0, 1, 1), abs=TOL)
    g = activation_suite(_probe([[1.0, 0.0]], [1], [1]), _probe([[0.0, 2.0]], [1], [1]))
    assert (g["act_cosine_sim"], g["act_dot"], g["act_mag_ratio"], g["act_l2_dist"]) == pytest.approx(
        (0, 0, 0.5, math.sqrt(5)), abs=TOL)


def test_activation_mean_matches_loop(rng):
    A = rng.standard_normal((10, 6))
    B = rng.standard_normal((10, 6))
    ma = [sum(A[i, j] for i in range(10)) / 10 for j in range(6)]
    mb = [sum(B[i, j] for i in range(10)) / 10 for j in range(6)]
    g = activation_suite(_probe(A, [1], [1]), _probe(B, [1], [1]))
    assert g["act_dot"] == pytest.approx(sum(x * y for x, y in zip(ma, mb)), rel=1e-12)


def test_gradient_examples(rng):
    gv = rng.standard_normal(1000)
    out = gradient_suite(_probe([[1.0]], gv, gv), _probe([[1.0]], gv, -gv))
    assert out["enc_grad_cos"] == pytest.approx(1, abs=TOL)
    assert out["enc_grad_l2"] == pytest.approx(0, abs=TOL)
    assert out["input_grad_cos"] == pytest.approx(-1, abs=TOL)
    assert out["input_grad_dot"] == pytest.approx(-float(gv @ gv), rel=1e-12)

    ga, gb = rng.standard_normal((2, 1000))
    out = gradient_suite(_probe([[1.0]], ga, ga), _probe([[1.0]], gb, gb))
    dot = math.fsum(x * y for x, y in zip(ga, gb))
    l2 = math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(ga, gb)))
    cos = dot / math.sqrt(math.fsum(x * x for x in ga) * math.fsum(y * y for y in gb))
    assert out["enc_grad_dot"] == pytest.approx(dot, rel=1e-12)
    assert out["enc_grad_l2"] == pytest.approx(l2, rel=1e-12)
    assert out["enc_grad_cos"] == pytest.approx(cos, rel=1e-12)


# ---------------------------------------------------------------------------
# full vector
# ---------------------------------------------------------------------------

def _pair(rng, m=6, n=5):
    ta = ParamMap({"w": rng.standard_normal((m, n)), "b": rng.standard_normal(n)})
    tb = ParamMap({"w": rng.standard_normal((m, n)), "b": rng.standard_normal(n)})
    pa = _probe(rng.standard_normal((4, 3)), rng.standard_normal(7), rng.standard_normal(9))
    pb = _probe(rng.standard_normal((4, 3)), rng.standard_normal(7), rng.standard_normal(9))
    return ta, tb, pa, pb


def test_self_pair_extremes(rng):
    ta, _, pa, _ = _pair(rng)
    mv = compute_metric_vector(ta, ta, pa, pa, MetricConfig(k=3))
    for name in ("tv_l2_dist", "act_l2_dist", "enc_grad_l2", "input_grad_l2"):
        assert mv[name] == pytest.approx(0, abs=TOL)
    for name in ("tv_cosine_sim", "tv_mag_ratio", "eff_rank", "act_cosine_sim", "act_mag_ratio",
                 "enc_grad_cos", "input_grad_cos", "sv_overlap", "interact_top_k"):
        assert mv[name] == pytest.approx(1, abs=TOL)


def test_zero_task_vectors_name_failures(rng):
    ta, tb, pa, pb = _pair(rng)
    zero = ParamMap({k: np.zeros_like(v) for k, v in ta.items()})
    with pytest.raises(MetricError) as info:
        compute_metric_vector(zero, zero, pa, pb)
    ids = set(info.value.metric_ids)
    assert {"tv_cosine_sim", "eff_rank", "sv_overlap"} <= ids
    assert "act_l2_dist" not in ids


def test_composition_equals_suites(rng):
    ta, tb, pa, pb = _pair(rng)
    mv = compute_metric_vector(ta, tb, pa, pb, MetricConfig(k=3))
    flat_a = np.concatenate([ta["b"], ta["w"].ravel()])
    flat_b = np.concatenate([tb["b"], tb["w"].ravel()])
    expect = {}
    expect.update(tv_geometry(flat_a, flat_b))
    expect.update(effrank_suite(flat_a, flat_b, [(ta[n].ravel(), tb[n].ravel()) for n in ("b", "w")]))
    expect.update(subspace_suite(ta, tb, 3))
    expect.update(activation_suite(pa, pb))
    expect.update(gradient_suite(pa, pb))
    assert dict(mv) == pytest.approx(expect, abs=TOL)


@given(st.integers(0, 2**31 - 1))
def test_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    ta, tb, pa, pb = _pair(rng)
    ab = compute_metric_vector(ta, tb, pa, pb, MetricConfig(k=2))
    ba = compute_metric_vector(tb, ta, pb, pa, MetricConfig(k=2))
    assert dict(ab) == dict(ba)


def test_metric_csv_round_trip(tmp_path, rng):
    rows = [(f"T{i}", f"T{i + 1}", MetricVector.from_array(rng.standard_normal(28) * 10.0 ** rng.integers(-20, 20)))
            for i in range(20)]
    write_metric_csv(tmp_path / "m.csv", rows)
    back = read_metric_csv(tmp_path / "m.csv")
    for (a, b, mv), (a2, b2, mv2) in zip(rows, back):
        assert (a, b) == (a2, b2)
        assert mv.as_array().tobytes() == mv2.as_array().tobytes()
