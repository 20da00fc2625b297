import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosweight.estimation import point_estimate
from cosweight.exceptions import ConfigError, UnsupportedEstimandError
from cosweight.sensitivity import (msm_bounds, msm_interval, msm_threshold, ratio_extremes,
                                   sensitivity_grid, vbm_bounds, vbm_threshold)
from cosweight.weights import WeightPipeline

from conftest import make_dataset
from oracles import (msm_by_enumeration, orthogonal_perturbations, random_instance,
                     weighted_effect)


@pytest.mark.parametrize("estimand", ["att", "ato", "ate"])
def test_msm_matches_vertex_enumeration(estimand):
    rng = np.random.default_rng(11)
    for _ in range(15):
        ds, w = random_instance(rng, estimand, max_group=9)
        lam = float(rng.uniform(1, 4))
        res = msm_bounds(ds, w, lam)
        lo, hi = msm_by_enumeration(ds, w, lam)
        assert res.lower == pytest.approx(lo, abs=1e-10)
        assert res.upper == pytest.approx(hi, abs=1e-10)


def test_msm_lambda_one_is_point(toy):
    w = WeightPipeline().fit(toy)
    res = msm_bounds(toy, w, 1.0)
    assert res.lower == pytest.approx(res.tau_hat, abs=1e-12)
    assert res.upper == pytest.approx(res.tau_hat, abs=1e-12)


def test_msm_huge_lambda_reaches_outcome_range():
    y = np.array([0.0, 1.0, 5.0])
    lo, hi, _, _ = ratio_extremes(y, np.ones(3), 1e200)
    assert (lo, hi) == pytest.approx((0.0, 5.0))


def test_msm_rejects_lambda_below_one():
    with pytest.raises(ConfigError):
        msm_interval([1, 2], [1, 1], [1, 0], "att", 0.5)


def test_msm_threshold_bisection():
    rng = np.random.default_rng(3)
    ds, w = random_instance(rng, "att")
    thr = msm_threshold(ds, w, tol=1e-8)
    lo, hi, _ = msm_interval(ds.y, w.values, ds.treatment, "att", thr.value)
    assert lo <= 0 <= hi or thr.unbounded
    if not thr.unbounded and thr.value > 1 + 1e-6:
        lo2, hi2, _ = msm_interval(ds.y, w.values, ds.treatment, "att", thr.value - 1e-6)
        assert not lo2 <= 0 <= hi2


def test_vbm_closed_form(toy):
    w = WeightPipeline().fit(toy)
    est = point_estimate(toy, w)
    c = toy.treatment == 0
    yc, wc = toy.y[c], w.values[c]
    rho = np.corrcoef(wc, yc)[0, 1]
    expected = math.sqrt(0.3 / 0.7) * math.sqrt(1 - rho ** 2) * yc.std() * wc.std()
    res = vbm_bounds(est, 0.3)
    assert res.bias_bound == pytest.approx(expected, rel=1e-12)
    assert res.interval == pytest.approx((est.tau_hat - expected, est.tau_hat + expected))


def test_vbm_bound_is_attained():
    # the residual of y on [1, w] is the worst-case perturbation direction
    rng = np.random.default_rng(4)
    ds, w = random_instance(rng, "att", max_group=30, min_group=10)
    est = point_estimate(ds, w)
    r2 = 0.3
    c = ds.treatment == 0
    yc, wc = ds.y[c], w.values[c]
    basis = np.column_stack([np.ones(c.sum()), wc])
    resid = yc - basis @ np.linalg.lstsq(basis, yc, rcond=None)[0]
    eps = resid * math.sqrt(r2 / (1 - r2) * wc.var() / resid.var())
    star = w.values.copy()
    star[c] += eps
    tau_star = weighted_effect(ds, star, "att")
    res = vbm_bounds(est, r2)
    assert tau_star == pytest.approx(res.lower, abs=1e-9)


@pytest.mark.parametrize("estimand", ["att", "ato"])
def test_vbm_dominates_perturbations_small(estimand):
    rng = np.random.default_rng(12)
    for _ in range(5):
        ds, w = random_instance(rng, estimand, max_group=20, min_group=5)
        est = point_estimate(ds, w)
        res = vbm_bounds(est, 0.3)
        star = np.tile(w.values, (500, 1))
        for arm in w.estimand.weighted_arms:
            m = ds.treatment == arm
            star[:, m] += orthogonal_perturbations(w.values[m], 0.3, 500, rng)
        taus = np.array([weighted_effect(ds, s, estimand) for s in star])
        assert np.all(taus >= res.lower - 1e-9) and np.all(taus <= res.upper + 1e-9)


def test_vbm_rejects_ate_and_bad_r2(toy):
    est_ate = point_estimate(toy, WeightPipeline(estimand="ate").fit(toy))
    with pytest.raises(UnsupportedEstimandError):
        vbm_bounds(est_ate, 0.1)
    est = point_estimate(toy, WeightPipeline().fit(toy))
    with pytest.raises(ConfigError):
        vbm_bounds(est, 1.0)


def test_vbm_threshold_round_trip(toy):
    est = point_estimate(toy, WeightPipeline().fit(toy))
    thr = vbm_threshold(est)
    res = vbm_bounds(est, thr.value)
    assert min(abs(res.lower), abs(res.upper)) < 1e-9


def test_sensitivity_grid(toy):
    w = WeightPipeline().fit(toy)
    rows = sensitivity_grid(toy, w, "msm", [1.0, 1.5, 2.0])
    assert [r["param"] for r in rows] == [1.0, 1.5, 2.0]
    assert rows[0]["lower"] >= rows[1]["lower"] >= rows[2]["lower"]
    with pytest.raises(ConfigError):
        sensitivity_grid(toy, w, "nope", [1.0])


@settings(max_examples=60, deadline=None)
@given(y=st.lists(st.floats(-100, 100), min_size=2, max_size=15),
       lam1=st.floats(1, 10), lam2=st.floats(1, 10), seed=st.integers(0, 2 ** 31))
def test_msm_intervals_nest_in_lambda(y, lam1, lam2, seed):
    y = np.array(y)
    w = np.random.default_rng(seed).uniform(0.1, 3, size=y.size)
    small, big = sorted((lam1, lam2))
    lo_s, hi_s, _, _ = ratio_extremes(y, w, small)
    lo_b, hi_b, _, _ = ratio_extremes(y, w, big)
    point = np.sum(w * y) / np.sum(w)
    tol = 1e-9 * (1 + np.abs(y).max())
    assert lo_b - tol <= lo_s <= point + tol
    assert point - tol <= hi_s <= hi_b + tol


_TOY = make_dataset(np.random.default_rng(7), m1=8, m0=10, size=(10, 20))
_TOY_ESTIMATE = point_estimate(_TOY, WeightPipeline().fit(_TOY))


@settings(max_examples=60, deadline=None)
@given(r2a=st.floats(0, 0.99), r2b=st.floats(0, 0.99))
def test_vbm_monotone_in_r2(r2a, r2b):
    est = _TOY_ESTIMATE
    lo, hi = sorted((r2a, r2b))
    assert vbm_bounds(est, lo).bias_bound <= vbm_bounds(est, hi).bias_bound
