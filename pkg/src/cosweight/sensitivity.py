"""Marginal (MSM) and variance-based (VBM) sensitivity bounds and thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import CosDataset
from .estimation import EffectEstimate, GroupMoments, point_estimate, weighted_difference
from .exceptions import ConfigError, UnsupportedEstimandError
from .weights import Estimand, WeightSet, _check_match, is_normalized


@dataclass(frozen=True)
class MsmResult:
    lam: float
    lower: float
    upper: float
    tau_hat: float
    estimand: Estimand
    cuts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": "msm", "param": self.lam, "lower": self.lower, "upper": self.upper,
                "tau_hat": self.tau_hat, "estimand": self.estimand.value}


@dataclass(frozen=True)
class VbmResult:
    r2: float
    bias_bound: float
    lower: float
    upper: float
    tau_hat: float
    estimand: Estimand
    flags: tuple = ()

    @property
    def interval(self) -> tuple:
        return (self.lower, self.upper)

    def to_dict(self) -> dict:
        return {"model": "vbm", "param": self.r2, "lower": self.lower, "upper": self.upper,
                "bias_bound": self.bias_bound, "tau_hat": self.tau_hat,
                "estimand": self.estimand.value, "flags": list(self.flags)}


@dataclass(frozen=True)
class ThresholdResult:
    model: str
    value: float
    interval: tuple
    unbounded: bool = False

    def to_dict(self) -> dict:
        return {"model": self.model, "value": None if self.unbounded else self.value,
                "interval": [None if not math.isfinite(v) else v for v in self.interval],
                "unbounded": self.unbounded}


# -- MSM ----------------------------------------------------------------------

def ratio_extremes(y, w, lam):
    """Extremes of ``sum(v*y)/sum(v)`` over the box ``w/lam <= v <= w*lam``.

    The optimum of this linear-fractional program sits at a vertex where the
    units with the largest (for the max) or smallest (for the min) outcomes
    take the upper box weight. All ``n + 1`` cut positions in the sorted
    order are scanned with cumulative sums. Returns
    ``(minimum, maximum, cut_min, cut_max)`` where a cut counts the units
    given upper weight.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    order = np.argsort(y, kind="stable")
    ys, ws = y[order], w[order]
    # the ratio is scale invariant, so use [w / lam^2, w] to avoid overflow at huge lam
    lo, hi = ws / (lam * lam), ws
    # prefix sums over the k smallest outcomes, k = 0..n
    lo_w = np.concatenate([[0.0], np.cumsum(lo)])
    hi_w = np.concatenate([[0.0], np.cumsum(hi)])
    lo_wy = np.concatenate([[0.0], np.cumsum(lo * ys)])
    hi_wy = np.concatenate([[0.0], np.cumsum(hi * ys)])
    n = ys.shape[0]
    # max: the top k units get hi; i.e. the bottom n-k get lo
    bottom = n - np.arange(n + 1)
    num_max = lo_wy[bottom] + (hi_wy[n] - hi_wy[bottom])
    den_max = lo_w[bottom] + (hi_w[n] - hi_w[bottom])
    # min: the bottom k units get hi
    kk = np.arange(n + 1)
    num_min = hi_wy[kk] + (lo_wy[n] - lo_wy[kk])
    den_min = hi_w[kk] + (lo_w[n] - lo_w[kk])
    with np.errstate(invalid="ignore", divide="ignore"):
        r_max = np.where(den_max > 0, num_max / den_max, -np.inf)
        r_min = np.where(den_min > 0, num_min / den_min, np.inf)
    k_max = int(np.argmax(r_max))
    k_min = int(np.argmin(r_min))
    return float(r_min[k_min]), float(r_max[k_max]), k_min, k_max


def msm_interval(y, w, a, estimand, lam: float):
    """MSM bounds from raw arrays; returns ``(lower, upper, cuts)``."""
    if not lam >= 1:
        raise ConfigError(f"lambda must be >= 1, got {lam}")
    estimand = Estimand(estimand)
    y, w, a = np.asarray(y, float), np.asarray(w, float), np.asarray(a)
    c, t = a == 0, a == 1
    c_min, c_max, ck_min, ck_max = ratio_extremes(y[c], w[c], lam)
    cuts = {"control_min": ck_min, "control_max": ck_max}
    if estimand is Estimand.ATT:
        mu1 = float(y[t].mean())
        return mu1 - c_max, mu1 - c_min, cuts
    t_min, t_max, tk_min, tk_max = ratio_extremes(y[t], w[t], lam)
    cuts.update(treated_min=tk_min, treated_max=tk_max)
    return t_min - c_max, t_max - c_min, cuts


def msm_bounds(ds: CosDataset, w: WeightSet, lam: float) -> MsmResult:
    """Bounds on the effect when each weight may move within ``[w/lam, w*lam]``.

    Each weighted group enters as a Hajek ratio, perturbed independently.
    For the ATT only controls move; for ATO/ATE the upper bound pairs the
    largest treated mean with the smallest control mean.
    """
    _check_match(w, ds)
    if not is_normalized(w):
        raise ConfigError("msm_bounds requires normalized weights")
    lower, upper, cuts = msm_interval(ds.y, w.values, ds.treatment, w.estimand, lam)
    tau = weighted_difference(ds.y, w.values, ds.treatment, w.estimand)
    return MsmResult(float(lam), lower, upper, tau, w.estimand, cuts)


def msm_threshold(ds: CosDataset, w: WeightSet, tol: float = 1e-4,
                  lam_cap: float = 1e6) -> ThresholdResult:
    """Smallest lambda whose MSM interval contains zero, by doubling then bisection."""
    _check_match(w, ds)
    y, v, a, est = ds.y, w.values, ds.treatment, w.estimand
    tau = weighted_difference(y, v, a, est)

    def covers(lam):
        lo, hi, _ = msm_interval(y, v, a, est, lam)
        return lo <= 0.0 <= hi, (lo, hi)

    if tau == 0.0:
        return ThresholdResult("msm", 1.0, (tau, tau))
    lo_lam, hi_lam = 1.0, 2.0
    ok, interval = covers(hi_lam)
    while not ok:
        if hi_lam >= lam_cap:
            return ThresholdResult("msm", math.inf, interval, unbounded=True)
        lo_lam, hi_lam = hi_lam, min(2.0 * hi_lam, lam_cap)
        ok, interval = covers(hi_lam)
    while hi_lam - lo_lam > tol:
        mid = 0.5 * (lo_lam + hi_lam)
        ok, iv = covers(mid)
        if ok:
            hi_lam, interval = mid, iv
        else:
            lo_lam = mid
    return ThresholdResult("msm", hi_lam, interval)


# -- VBM ----------------------------------------------------------------------

def _check_r2(r2: float) -> None:
    if not 0.0 <= r2 < 1.0:
        raise ConfigError(f"R^2 must lie in [0, 1), got {r2}")


def _arm_factor(m: GroupMoments, arm: int, flags: list) -> float:
    """``sqrt(1 - cor^2) * sqrt(var_w * var_y)`` for one arm."""
    cor = m.cor_wy[arm]
    if not np.isfinite(cor):
        flags.append(f"cor_undefined_arm{arm}")
        cor = 0.0
    return math.sqrt(max(0.0, 1.0 - cor * cor)) * math.sqrt(m.var_w[arm] * m.var_y[arm])


def vbm_scale(m: GroupMoments, estimand) -> tuple:
    """The R^2-free factor of the VBM bias bound, plus any flags raised."""
    estimand = Estimand(estimand)
    flags: list = []
    if estimand is Estimand.ATT:
        return _arm_factor(m, 0, flags), tuple(flags)
    if estimand is Estimand.ATO:
        return _arm_factor(m, 1, flags) + _arm_factor(m, 0, flags), tuple(flags)
    raise UnsupportedEstimandError("the variance-based model covers the ATT and ATO only")


def _vbm(m: GroupMoments, r2: float, tau_hat: float, estimand: Estimand) -> VbmResult:
    _check_r2(r2)
    scale, flags = vbm_scale(m, estimand)
    bound = math.sqrt(r2 / (1.0 - r2)) * scale
    return VbmResult(float(r2), bound, tau_hat - bound, tau_hat + bound, estimand, flags)


def vbm_bound_att(m: GroupMoments, r2: float, tau_hat: float = 0.0) -> VbmResult:
    """ATT bias bound from the control-arm moments."""
    return _vbm(m, r2, tau_hat, Estimand.ATT)


def vbm_bound_ato(m: GroupMoments, r2: float, tau_hat: float = 0.0) -> VbmResult:
    """ATO bias bound: treated-arm plus control-arm contributions."""
    return _vbm(m, r2, tau_hat, Estimand.ATO)


def vbm_bounds(estimate: EffectEstimate, r2: float) -> VbmResult:
    return _vbm(estimate.moments, r2, estimate.tau_hat, estimate.estimand)


def vbm_threshold(estimate: EffectEstimate) -> ThresholdResult:
    """Closed-form R^2 at which the VBM interval first reaches zero."""
    tau = estimate.tau_hat
    if tau == 0.0:
        return ThresholdResult("vbm", 0.0, (0.0, 0.0))
    scale, _ = vbm_scale(estimate.moments, estimate.estimand)
    if scale <= 0.0:
        return ThresholdResult("vbm", math.inf, (tau, tau), unbounded=True)
    t = abs(tau) / scale
    r2 = t * t / (1.0 + t * t)
    if r2 >= 1.0:
        return ThresholdResult("vbm", math.inf, (tau, tau), unbounded=True)
    res = vbm_bounds(estimate, r2)
    return ThresholdResult("vbm", r2, res.interval)


def sensitivity_grid(ds: CosDataset, w: WeightSet, model: str, params,
                     estimate: Optional[EffectEstimate] = None) -> list:
    """Bound rows ``{param, lower, upper}`` for each parameter value."""
    rows = []
    if model == "msm":
        for lam in params:
            r = msm_bounds(ds, w, float(lam))
            rows.append({"param": r.lam, "lower": r.lower, "upper": r.upper})
    elif model == "vbm":
        est = estimate if estimate is not None else point_estimate(ds, w)
        for r2 in params:
            r = vbm_bounds(est, float(r2))
            rows.append({"param": r.r2, "lower": r.lower, "upper": r.upper})
    else:
        raise ConfigError(f"unknown sensitivity model {model!r}")
    return rows
