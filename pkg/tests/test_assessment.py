import math

import numpy as np
import pytest

from stmrf.assessment import (
    AccuracyReport,
    ErrorMatrix,
    agreement_map,
    area_adjusted_metrics,
    area_estimates,
    error_matrix,
    estimated_proportions,
    multi_run_average,
    report_rows,
)

HAND_N = [[40, 10], [5, 45]]
HAND_W = [0.3, 0.7]


def longhand(n, W):
    """Stratified estimators written out cell by cell with plain floats."""
    K = len(n)
    rows = [sum(r) for r in n]
    p = [[W[i] * n[i][j] / rows[i] for j in range(K)] for i in range(K)]
    oa = sum(p[i][i] for i in range(K))
    oa_var = sum(W[i] ** 2 * (n[i][i] / rows[i]) * (1 - n[i][i] / rows[i]) / (rows[i] - 1) for i in range(K))
    ua = [n[i][i] / rows[i] for i in range(K)]
    col = [sum(p[i][j] for i in range(K)) for j in range(K)]
    pa = [p[j][j] / col[j] for j in range(K)]
    pa_var = []
    for j in range(K):
        a = W[j] ** 2 * (1 - pa[j]) ** 2 * ua[j] * (1 - ua[j]) / (rows[j] - 1)
        b = sum(W[i] ** 2 * (n[i][j] / rows[i]) * (1 - n[i][j] / rows[i]) / (rows[i] - 1) for i in range(K) if i != j)
        pa_var.append((a + pa[j] ** 2 * b) / col[j] ** 2)
    return p, oa, math.sqrt(oa_var), ua, pa, [math.sqrt(v) for v in pa_var], col


def test_error_matrix_examples():
    m = np.array([[0, 1], [1, 1]])
    e = error_matrix(m, [(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 1)], 2)
    assert np.array_equal(e.n, np.diag([1, 3]))
    np.testing.assert_allclose(e.W, [0.25, 0.75])
    assert error_matrix(m, [], 2).n.sum() == 0
    assert error_matrix(m, [(0, 0, 1)], 2).n[0, 1] == 1
    with pytest.raises(ValueError):
        error_matrix(m, [(2, 0, 0)], 2)


def test_hand_matrix():
    e = ErrorMatrix(HAND_N, HAND_W)
    rep = area_adjusted_metrics(e)
    p, oa, oa_se, ua, pa, pa_se, col = longhand(HAND_N, HAND_W)
    np.testing.assert_allclose(estimated_proportions(e), [[0.24, 0.06], [0.07, 0.63]], atol=1e-12)
    assert rep.oa == pytest.approx(0.87, abs=1e-9)
    assert rep.ua[0] == pytest.approx(0.80, abs=1e-9)
    assert rep.pa[0] == pytest.approx(0.24 / 0.31, abs=1e-9)
    assert rep.pa[0] == pytest.approx(0.77419, abs=1e-5)
    assert rep.oa_ci == pytest.approx(1.96 * oa_se, abs=1e-12)
    np.testing.assert_allclose(rep.pa, pa, atol=1e-12)
    np.testing.assert_allclose(rep.pa_ci, 1.96 * np.array(pa_se), atol=1e-12)
    np.testing.assert_allclose(rep.area_prop, col, atol=1e-12)


def test_diagonal_matrix_is_perfect():
    rep = area_adjusted_metrics(ErrorMatrix(np.diag([5, 7, 9]), [0.2, 0.3, 0.5]))
    assert rep.oa == 1 and rep.oa_ci == 0
    assert (rep.ua == 1).all() and (rep.pa == 1).all()
    assert (rep.ua_ci == 0).all() and (rep.pa_ci == 0).all()


def test_empty_zero_weight_stratum_is_absent():
    rep = area_adjusted_metrics(ErrorMatrix([[8, 2], [0, 0]], [1.0, 0.0]))
    assert rep.oa == pytest.approx(0.8)
    assert np.isnan(rep.ua[1])
    with pytest.raises(ValueError, match="stratum 1"):
        area_adjusted_metrics(ErrorMatrix([[8, 2], [0, 0]], [0.5, 0.5]))


def test_area_estimates():
    area, ci = area_estimates(ErrorMatrix(HAND_N, HAND_W), 100.0)
    assert area[0] == pytest.approx(31.0, abs=1e-9)
    area, ci = area_estimates(ErrorMatrix(np.diag([3, 4]), [0.4, 0.6]), 50.0)
    np.testing.assert_allclose(area, [20.0, 30.0])
    assert (ci == 0).all()
    with pytest.raises(ValueError):
        area_estimates(ErrorMatrix(HAND_N, HAND_W), 0.0)


def random_matrix(rng, K):
    n = rng.integers(1, 30, (K, K))
    W = rng.dirichlet(np.ones(K))
    return ErrorMatrix(n, W)


def test_properties_on_random_matrices(rng):
    for _ in range(200):
        K = int(rng.integers(2, 6))
        e = random_matrix(rng, K)
        p = estimated_proportions(e)
        assert abs(p.sum() - 1) < 1e-9
        rep = area_adjusted_metrics(e)
        assert rep.oa <= 1 + 1e-12
        np.testing.assert_allclose(rep.ua * p.sum(1), np.diag(p), atol=1e-15)
        # longhand agreement
        _, oa, oa_se, ua, pa, pa_se, _ = longhand(e.n.tolist(), e.W.tolist())
        assert rep.oa == pytest.approx(oa, abs=1e-12)
        np.testing.assert_allclose(rep.pa_ci, 1.96 * np.array(pa_se), atol=1e-12)


def test_merging_classes_never_lowers_oa(rng):
    for _ in range(100):
        K = int(rng.integers(3, 6))
        e = random_matrix(rng, K)
        a, b = sorted(rng.choice(K, 2, replace=False))
        # merging a and b turns the off-diagonal cells p_ab, p_ba into agreement
        p = estimated_proportions(e)
        merged_oa = np.trace(p) + p[a, b] + p[b, a]
        assert merged_oa >= area_adjusted_metrics(e).oa - 1e-12


def test_agreement_map():
    a = np.array([[0, 1], [2, 2]])
    assert agreement_map(a, a)[..., 0].all()
    assert not agreement_map(a, (a + 1) % 3)[..., 0].any()
    b = np.array([[0, 0], [2, 1]])
    g = agreement_map(a, b)
    assert g[..., 0].sum() == 2 and np.array_equal(g[..., 1], b)
    with pytest.raises(ValueError):
        agreement_map(a, a[:1])


def _rep(oa, K=2):
    z = np.zeros(K)
    return AccuracyReport(oa, 0.01, z + 0.5, z, z + oa, z, z + 1 / K, z)


def test_multi_run_average():
    single = multi_run_average([_rep(0.6)])
    assert single.oa == 0.6
    two = multi_run_average([_rep(0.6), _rep(0.8)])
    assert two.oa == pytest.approx(0.7)
    assert two.sd["oa"] == pytest.approx(0.1)
    same = multi_run_average([_rep(0.7)] * 3)
    assert same.sd["oa"] == 0
    with pytest.raises(ValueError):
        multi_run_average([])
    r = _rep(0.6)
    r.ua = np.array([np.nan, 0.4])
    avg = multi_run_average([r, _rep(0.8)])
    assert avg.ua[0] == 0.5 and avg.ua[1] == pytest.approx(0.45)


def test_report_rows():
    rows = report_rows(area_adjusted_metrics(ErrorMatrix(HAND_N, HAND_W)), ["a", "b"], date="d", method="m")
    assert len(rows) == 1 + 3 * 2
    assert rows[0]["metric"] == "oa" and rows[0]["date"] == "d"
