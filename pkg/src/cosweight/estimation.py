"""Weighted effect estimates and the arm-conditional moments behind every bound."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .data import CosDataset
from .exceptions import ConfigError, InsufficientDataError
from .weights import Conditioning, Estimand, WeightPipeline, WeightSet, _check_match, is_normalized


@dataclass(frozen=True)
class GroupMoments:
    """Per-arm moments, indexed by arm (0 = control, 1 = treated).

    Variances use the 1/n convention. ``cor_wy[a]`` is NaN when either
    variance in arm ``a`` is zero.
    """

    var_y: tuple
    var_w: tuple
    cor_wy: tuple
    mean_y: tuple
    n: tuple

    def cor_defined(self, arm: int) -> bool:
        return bool(np.isfinite(self.cor_wy[arm]))

    def to_dict(self) -> dict:
        return {
            "var_y": list(self.var_y),
            "var_w": list(self.var_w),
            "cor_wy": [None if not np.isfinite(c) else c for c in self.cor_wy],
            "mean_y": list(self.mean_y),
            "n": list(self.n),
        }


@dataclass(frozen=True)
class EffectEstimate:
    estimand: Estimand
    tau_hat: float
    moments: GroupMoments
    weight_source: str = "propensity"
    conditioning: Optional[str] = None
    flags: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand.value,
            "tau_hat": self.tau_hat,
            "moments": self.moments.to_dict(),
            "weight_source": self.weight_source,
            "conditioning": self.conditioning,
            "flags": list(self.flags),
        }


def _pop_var(v: np.ndarray) -> float:
    return float(np.mean((v - v.mean()) ** 2))


def _pop_cor(u: np.ndarray, v: np.ndarray) -> float:
    su, sv = _pop_var(u), _pop_var(v)
    if su <= 0 or sv <= 0:
        return float("nan")
    c = float(np.mean((u - u.mean()) * (v - v.mean())) / np.sqrt(su * sv))
    return min(1.0, max(-1.0, c))


def arm_moments(y: np.ndarray, w: np.ndarray, a: np.ndarray) -> GroupMoments:
    """Moments from raw arrays; ``group_moments`` is the dataset-level entry point."""
    var_y, var_w, cor, mean_y, n = [], [], [], [], []
    for arm in (0, 1):
        mask = a == arm
        if mask.sum() < 2:
            raise InsufficientDataError(f"arm {arm} has fewer than 2 units")
        ya, wa = y[mask], w[mask]
        var_y.append(_pop_var(ya))
        var_w.append(_pop_var(wa))
        cor.append(_pop_cor(wa, ya))
        mean_y.append(float(ya.mean()))
        n.append(int(mask.sum()))
    return GroupMoments(tuple(var_y), tuple(var_w), tuple(cor), tuple(mean_y), tuple(n))


def group_moments(ds: CosDataset, w: WeightSet) -> GroupMoments:
    _check_match(w, ds)
    return arm_moments(ds.y, w.values, ds.treatment)


def weighted_difference(y: np.ndarray, w: np.ndarray, a: np.ndarray, estimand) -> float:
    t, c = a == 1, a == 0
    control = np.sum(w[c] * y[c]) / c.sum()
    if Estimand(estimand) is Estimand.ATT:
        return float(y[t].mean() - control)
    return float(np.sum(w[t] * y[t]) / t.sum() - control)


def point_estimate(ds: CosDataset, w: WeightSet, conditioning: Optional[str] = None) -> EffectEstimate:
    """Weighting estimator of the effect.

    ATT: treated mean minus ``(1/n0) sum_controls w_i Y_i``. ATO and ATE
    weight both arms the same way. Weights must be normalized, which makes
    these weighted group means.
    """
    _check_match(w, ds)
    if not is_normalized(w):
        raise ConfigError("point_estimate requires normalized weights")
    tau = weighted_difference(ds.y, w.values, ds.treatment, w.estimand)
    flags = list(w.flags)
    moments = group_moments(ds, w)
    for arm in w.estimand.weighted_arms:
        if not moments.cor_defined(arm):
            flags.append(f"cor_undefined_arm{arm}")
    return EffectEstimate(w.estimand, tau, moments, w.source,
                          None if conditioning is None else str(conditioning), tuple(flags))


class ClusterWeightingEstimator(BaseEstimator):
    """Fit weights on a :class:`CosDataset` and estimate the effect.

    Parameters mirror :class:`~cosweight.weights.WeightPipeline`. After
    ``fit`` the estimator exposes ``weights_``, ``estimate_`` and ``tau_``.
    """

    def __init__(self, estimand="att", conditioning="cud", source="propensity", ridge=0.0,
                 max_iter=100, tol=1e-8):
        self.estimand = estimand
        self.conditioning = conditioning
        self.source = source
        self.ridge = ridge
        self.max_iter = max_iter
        self.tol = tol

    def _pipeline(self) -> WeightPipeline:
        return WeightPipeline(estimand=self.estimand, conditioning=self.conditioning,
                              source=self.source, ridge=self.ridge, max_iter=self.max_iter,
                              tol=self.tol)

    def fit(self, ds: CosDataset, y=None):
        self.weights_ = self._pipeline().fit(ds)
        self.estimate_ = point_estimate(ds, self.weights_, Conditioning(self.conditioning).value)
        self.tau_ = self.estimate_.tau_hat
        return self

    def transform(self, ds: CosDataset) -> np.ndarray:
        """Refit on ``ds`` and return the normalized weights."""
        return self._pipeline().fit(ds).values

    def fit_transform(self, ds: CosDataset, y=None) -> np.ndarray:
        return self.fit(ds).weights_.values
