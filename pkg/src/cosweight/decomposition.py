"""Bias decompositions for omitted cluster-level (V) and unit-level (U) confounders.

Three nested weight vectors are compared: ``w_reduced`` fit on ``{K, X}``,
``w_mid`` on ``{K, X, V}`` and ``w_full`` on ``{K, X, V, U}``. The bias of the
weighted control mean is ``cov(w_reduced - w_full, Y | A = 0)``; the
decomposition writes it as a cluster term and a unit term, each a correlation
times an imbalance factor times an estimable scale.

The algebra behind the decomposition uses ``var(w_mid) = var(w_reduced) /
(1 - R2_V)`` and the analogous relation for ``U``. Both hold exactly when
each coarser weight is the projection of the finer one (the sample version of
``E(w* | X) = w``). :func:`nested_weight_triple` builds triples with that
property; for arbitrary triples the reported ``identity_residual`` measures
how far the decomposition is from the direct covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import CosDataset
from .exceptions import ConfigError, DegenerateWeightsError, InfeasibleRatioError
from .weights import (
    Estimand,
    WeightSet,
    fit_propensity,
    weights_from_propensity,
)

R2_MAX = 1.0 - 1e-12


def _var(v):
    return float(np.mean((v - v.mean()) ** 2))


def _cov(u, v):
    return float(np.mean((u - u.mean()) * (v - v.mean())))


def _cor(u, v):
    su, sv = _var(u), _var(v)
    if su <= 0 or sv <= 0:
        return 0.0
    return max(-1.0, min(1.0, _cov(u, v) / math.sqrt(su * sv)))


def residual_imbalance_r2(w_coarse, w_fine, flags: Optional[list] = None) -> float:
    """``var(w_coarse - w_fine) / var(w_fine)`` clamped to ``[0, 1 - 1e-12]``.

    Both vectors must already be restricted to one arm.
    """
    w_coarse = np.asarray(w_coarse, dtype=float)
    w_fine = np.asarray(w_fine, dtype=float)
    if w_coarse.shape != w_fine.shape:
        raise ConfigError("weight vectors differ in length")
    denom = _var(w_fine)
    if denom <= 0:
        raise DegenerateWeightsError("finer weights have zero variance")
    r2 = _var(w_coarse - w_fine) / denom
    if r2 > R2_MAX:
        if flags is not None:
            flags.append("r2_clamped")
        r2 = R2_MAX
    return r2


@dataclass(frozen=True, eq=False)
class WeightTriple:
    """Nested weights on one dataset.

    Values are plain arrays: projected weights need not stay nonnegative,
    and the decomposition is an identity on any real-valued weights.
    """

    w_reduced: np.ndarray
    w_mid: np.ndarray
    w_full: np.ndarray
    treatment: np.ndarray
    estimand: Estimand = Estimand.ATT

    def __post_init__(self):
        arrs = [np.array(getattr(self, nm), dtype=float).reshape(-1)
                for nm in ("w_reduced", "w_mid", "w_full")]
        t = np.array(self.treatment).reshape(-1)
        if any(a.shape != t.shape for a in arrs):
            raise ConfigError("weight triple members differ in length")
        for nm, a in zip(("w_reduced", "w_mid", "w_full"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, nm, a)
        t.setflags(write=False)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "estimand", Estimand(self.estimand))

    @classmethod
    def from_weight_sets(cls, reduced: WeightSet, mid: WeightSet, full: WeightSet) -> "WeightTriple":
        if not (reduced.estimand == mid.estimand == full.estimand):
            raise ConfigError("weight triple members target different estimands")
        if not (np.array_equal(reduced.treatment, mid.treatment)
                and np.array_equal(mid.treatment, full.treatment)):
            raise ConfigError("weight triple members have different treatment vectors")
        if not (reduced.normalized and mid.normalized and full.normalized):
            raise ConfigError("weight triple members must be normalized")
        return cls(reduced.values, mid.values, full.values, reduced.treatment, reduced.estimand)


@dataclass(frozen=True)
class ArmTerms:
    r2_v: float
    r2_u: float
    cor_v: float
    cor_u: float
    scale: float
    cluster_term: float
    unit_term: float
    bias: float
    direct: float


@dataclass(frozen=True)
class DecompositionReport:
    estimand: Estimand
    arms: dict
    cluster_term: float
    unit_term: float
    total_bias: float
    direct_bias: float
    identity_residual: float
    flags: tuple = field(default=())

    @property
    def r2_v(self) -> float:
        return self.arms[0].r2_v

    @property
    def r2_u(self) -> float:
        return self.arms[0].r2_u

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand.value,
            "arms": {str(a): vars(t) for a, t in sorted(self.arms.items())},
            "cluster_term": self.cluster_term,
            "unit_term": self.unit_term,
            "total_bias": self.total_bias,
            "direct_bias": self.direct_bias,
            "identity_residual": self.identity_residual,
            "flags": list(self.flags),
        }


def _arm_terms(y, w_red, w_mid, w_full, flags) -> ArmTerms:
    eps_v = w_red - w_mid
    eps_u = w_mid - w_full
    r2_v = residual_imbalance_r2(w_red, w_mid, flags)
    r2_u = residual_imbalance_r2(w_mid, w_full, flags)
    cor_v = _cor(eps_v, y)
    cor_u = _cor(eps_u, y)
    scale = math.sqrt(_var(y) * _var(w_red))
    amplify = math.sqrt(1.0 / (1.0 - r2_v))
    cluster = amplify * cor_v * math.sqrt(r2_v) * scale
    unit = amplify * cor_u * math.sqrt(r2_u / (1.0 - r2_u)) * scale
    return ArmTerms(r2_v, r2_u, cor_v, cor_u, scale, cluster, unit, cluster + unit,
                    _cov(w_red - w_full, y))


def _check_triple(t: WeightTriple, ds: CosDataset, estimand: Estimand) -> None:
    if t.estimand is not estimand:
        raise ConfigError(f"expected {estimand.name} weights, got {t.estimand.name}")
    if t.w_full.shape[0] != ds.n or not np.array_equal(t.treatment, ds.treatment):
        raise ConfigError("weight triple does not match the dataset")


def att_bias_decomposition(t: WeightTriple, ds: CosDataset) -> DecompositionReport:
    """Split the bias of the weighted control mean into cluster and unit terms.

    All moments condition on the control arm. ``total_bias`` is assembled
    from the stored pieces; ``direct_bias`` is ``cov(w_reduced - w_full, Y |
    A = 0)``.
    """
    _check_triple(t, ds, Estimand.ATT)
    c = ds.treatment == 0
    if c.sum() < 2:
        raise ConfigError("control arm needs at least 2 units")
    flags: list = []
    arm = _arm_terms(ds.y[c], t.w_reduced[c], t.w_mid[c], t.w_full[c], flags)
    return DecompositionReport(Estimand.ATT, {0: arm}, arm.cluster_term, arm.unit_term,
                               arm.bias, arm.direct, abs(arm.bias - arm.direct),
                               tuple(dict.fromkeys(flags)))


def ato_bias_decomposition(t: WeightTriple, ds: CosDataset) -> DecompositionReport:
    """ATO decomposition: treated-arm terms minus control-arm terms."""
    _check_triple(t, ds, Estimand.ATO)
    flags: list = []
    arms = {}
    for a in (1, 0):
        mask = ds.treatment == a
        if mask.sum() < 2:
            raise ConfigError(f"arm {a} needs at least 2 units")
        arms[a] = _arm_terms(ds.y[mask], t.w_reduced[mask], t.w_mid[mask], t.w_full[mask], flags)
    total = arms[1].bias - arms[0].bias
    direct = arms[1].direct - arms[0].direct
    return DecompositionReport(
        Estimand.ATO, arms, arms[1].cluster_term - arms[0].cluster_term,
        arms[1].unit_term - arms[0].unit_term, total, direct, abs(total - direct),
        tuple(dict.fromkeys(flags)))


def bias_decomposition(t: WeightTriple, ds: CosDataset) -> DecompositionReport:
    if t.estimand is Estimand.ATT:
        return att_bias_decomposition(t, ds)
    if t.estimand is Estimand.ATO:
        return ato_bias_decomposition(t, ds)
    raise ConfigError("bias decomposition is available for the ATT and ATO only")


def cluster_only_bias(cor_v: float, r2_v: float, var_y: float, var_w: float) -> float:
    """Bias when only a cluster-level confounder is omitted."""
    return cor_v * math.sqrt(r2_v / (1.0 - r2_v) * var_y * var_w)


def _project(target, basis):
    coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return basis @ coef


def project_nested(w_reduced, w_mid, w_full, treatment, estimand) -> WeightTriple:
    """Tower-calibrate a nested triple of fitted weights.

    Within each weighted arm, ``w_mid`` is replaced by the least-squares
    projection of ``w_full`` on ``[1, w_reduced, w_mid]`` and ``w_reduced``
    by the projection of that on ``[1, w_reduced]``. Projections contain
    the intercept, so arm means are preserved.
    """
    estimand = Estimand(estimand)
    treatment = np.asarray(treatment)
    red = np.asarray(w_reduced, float).copy()
    mid = np.asarray(w_mid, float).copy()
    full = np.asarray(w_full, float)
    for arm in estimand.weighted_arms:
        m = treatment == arm
        one = np.ones(m.sum())
        mid_arm = _project(full[m], np.column_stack([one, red[m], mid[m]]))
        red_arm = _project(mid_arm, np.column_stack([one, red[m]]))
        mid[m], red[m] = mid_arm, red_arm
    return WeightTriple(red, mid, full, treatment, estimand)


def nested_weight_triple(ds: CosDataset, v_names: Sequence[str], u_names: Sequence[str],
                         estimand="att", conditioning="cud", ridge=0.0,
                         project=True) -> WeightTriple:
    """Three nested logistic fits: without V and U, without U, and with both.

    ``v_names`` and ``u_names`` name the covariates standing in for the
    omitted cluster-level and unit-level confounders. With ``project`` the
    fits are tower-calibrated by :func:`project_nested`.
    """
    estimand = Estimand(estimand)
    v_names, u_names = list(v_names), list(u_names)
    full = weights_from_propensity(fit_propensity(ds, conditioning, ridge=ridge), estimand)
    mid = weights_from_propensity(
        fit_propensity(ds, conditioning, ridge=ridge, drop=u_names), estimand)
    red = weights_from_propensity(
        fit_propensity(ds, conditioning, ridge=ridge, drop=v_names + u_names), estimand)
    if project:
        return project_nested(red.values, mid.values, full.values, ds.treatment, estimand)
    return WeightTriple.from_weight_sets(red, mid, full)


def oracle_weight_factorization_check(pi_reduced, ratios_v, ratios_u, estimand, oracle,
                                      treatment=None) -> float:
    """Max relative error between factorized and independently supplied oracle weights.

    ATT: ``w* = pi/(1 - pi) * ratio_V * ratio_U`` (control-type weights for
    every supplied unit). ATO: the oracle score is ``pi * ratio_V *
    ratio_U``; controls take the score and treated units one minus it.
    """
    estimand = Estimand(estimand)
    pi = np.asarray(pi_reduced, float)
    rv = np.asarray(ratios_v, float)
    ru = np.asarray(ratios_u, float)
    oracle = np.asarray(oracle, float)
    if (rv <= 0).any() or (ru <= 0).any():
        raise ConfigError("imbalance ratios must be strictly positive")
    if estimand is Estimand.ATT:
        composed = pi / (1 - pi) * rv * ru
    elif estimand is Estimand.ATO:
        if treatment is None:
            raise ConfigError("ATO factorization needs the treatment vector")
        score = pi * rv * ru
        if ((score <= 0) | (score >= 1)).any():
            raise InfeasibleRatioError("composed oracle score falls outside (0, 1)")
        composed = np.where(np.asarray(treatment) == 1, 1 - score, score)
    else:
        raise ConfigError("factorization is defined for the ATT and ATO")
    return float(np.max(np.abs(composed - oracle) / np.abs(oracle)))


def validity_conditions_check(w: WeightSet, w_star: WeightSet, ds: Optional[CosDataset] = None,
                              strata=None) -> dict:
    """Diagnostics for the mean-matching and projection conditions.

    ``mean_match`` is the largest gap between arm means of ``w*`` and ``w``.
    ``projection_residual`` is the largest gap between the stratum mean of
    ``w*`` and that of ``w`` over (arm, stratum) cells. Strata default to the
    distinct rows of the observed covariates, which is only meaningful for
    discrete data.
    """
    if not (w.normalized and w_star.normalized):
        raise ConfigError("validity checks need normalized weights")
    if not np.array_equal(w.treatment, w_star.treatment):
        raise ConfigError("weight sets have different treatment vectors")
    if strata is None:
        if ds is None:
            raise ConfigError("need a dataset or explicit strata")
        obs = np.hstack([ds.k_units, ds.x])
        _, strata = np.unique(obs, axis=0, return_inverse=True)
    strata = np.asarray(strata).reshape(-1)
    mean_match = 0.0
    proj = 0.0
    for arm in w.estimand.weighted_arms:
        m = w.treatment == arm
        mean_match = max(mean_match, abs(w_star.values[m].mean() - w.values[m].mean()))
        for s in np.unique(strata[m]):
            cell = m & (strata == s)
            proj = max(proj, abs(w_star.values[cell].mean() - w.values[cell].mean()))
    return {"mean_match": float(mean_match), "projection_residual": float(proj)}
