"""Cluster (block) bootstrap with percentile intervals."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import CosDataset
from .estimation import point_estimate
from .exceptions import ConfigError, CosError, InferenceError
from .sensitivity import msm_interval, vbm_bounds
from .weights import WeightPipeline, WeightSet

log = logging.getLogger(__name__)

STATISTICS = ("estimate", "msm_lower", "msm_upper", "vbm_lower", "vbm_upper")


def percentile(values, p: float) -> float:
    """Type-7 (linear interpolation) sample quantile."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ConfigError("percentile of an empty list")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must lie in [0, 1], got {p}")
    return float(np.quantile(values, p, method="linear"))


@dataclass(frozen=True)
class Statistic:
    """A named scalar computed from a dataset and its fitted weights.

    ``param`` is lambda for the MSM endpoints and R^2 for the VBM endpoints.
    """

    name: str = "estimate"
    param: Optional[float] = None

    def __post_init__(self):
        if self.name not in STATISTICS:
            raise ConfigError(f"unknown statistic {self.name!r}")
        if self.name != "estimate" and self.param is None:
            raise ConfigError(f"statistic {self.name} needs a parameter")

    @classmethod
    def parse(cls, text: str) -> "Statistic":
        """Parse ``name`` or ``name:param`` (e.g. ``msm_upper:1.5``)."""
        name, _, param = text.partition(":")
        return cls(name, float(param) if param else None)

    def __call__(self, ds: CosDataset, w: WeightSet) -> float:
        if self.name == "estimate":
            return point_estimate(ds, w).tau_hat
        if self.name.startswith("msm"):
            lo, hi, _ = msm_interval(ds.y, w.values, ds.treatment, w.estimand, self.param)
            return lo if self.name == "msm_lower" else hi
        res = vbm_bounds(point_estimate(ds, w), self.param)
        return res.lower if self.name == "vbm_lower" else res.upper

    @property
    def label(self) -> str:
        return self.name if self.param is None else f"{self.name}:{self.param!r}"


@dataclass(frozen=True)
class BootstrapSpec:
    B: int = 1000
    level: float = 0.95
    seed: int = 0
    statistic: Statistic = Statistic()

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("B must be at least 1")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")


@dataclass(frozen=True)
class BootstrapCI:
    lower: float
    upper: float
    replicates_used: int
    failures: int
    seed: int

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "replicates_used": self.replicates_used,
                "failures": self.failures, "seed": self.seed}


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Generator for replicate ``b``, independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def resample_clusters(ds: CosDataset, rng: np.random.Generator):
    """Draw ``m`` clusters with replacement and keep all their units.

    Each drawn cluster gets a fresh id ``"<original>#<draw>"``. Returns the
    new dataset and the indices of the drawn clusters.
    """
    drawn = rng.integers(0, ds.m, size=ds.m)
    order = np.argsort(ds.cluster_index, kind="stable")
    starts = np.concatenate([[0], np.cumsum(ds.n_units)])
    pieces = [order[starts[j]:starts[j + 1]] for j in drawn]
    units = np.concatenate(pieces)
    new_index = np.repeat(np.arange(ds.m), ds.n_units[drawn])
    new_ds = CosDataset(
        unit_ids=np.arange(units.size),
        cluster_index=new_index,
        x=ds.x[units],
        y=ds.y[units],
        cluster_ids=[f"{ds.cluster_ids[j]}#{pos}" for pos, j in enumerate(drawn)],
        a=ds.a[drawn],
        k=ds.k[drawn],
        x_names=ds.x_names,
        k_names=ds.k_names,
    )
    return new_ds, drawn


def bootstrap_replicates(ds: CosDataset, pipeline: WeightPipeline,
                         statistics: Sequence[Statistic], B: int, seed: int) -> np.ndarray:
    """``B x len(statistics)`` replicate values; failed replicates are NaN rows.

    A replicate fails when the resample lacks a treated or control cluster or
    when refitting or evaluating raises a library error.
    """
    out = np.full((B, len(statistics)), np.nan)
    for b in range(B):
        try:
            rep, _ = resample_clusters(ds, replicate_rng(seed, b))
            w = pipeline.fit(rep)
            out[b] = [s(rep, w) for s in statistics]
        except CosError as exc:
            log.debug("bootstrap replicate %d failed: %s", b, exc)
            out[b] = np.nan
    return out


def percentile_ci(values, level: float):
    alpha = 1.0 - level
    return percentile(values, alpha / 2), percentile(values, 1 - alpha / 2)


def summarize(values: np.ndarray, level: float, seed: int) -> BootstrapCI:
    values = np.asarray(values, dtype=float)
    ok = values[np.isfinite(values)]
    failures = values.size - ok.size
    if failures > values.size / 2:
        raise InferenceError(f"{failures} of {values.size} bootstrap replicates failed")
    lo, hi = percentile_ci(ok, level)
    return BootstrapCI(lo, hi, int(ok.size), int(failures), seed)


def block_bootstrap(ds: CosDataset, spec: BootstrapSpec, pipeline: WeightPipeline) -> BootstrapCI:
    """Percentile interval for ``spec.statistic`` under the cluster bootstrap.

    Every replicate refits the weights with ``pipeline`` before evaluating
    the statistic.
    """
    vals = bootstrap_replicates(ds, pipeline, [spec.statistic], spec.B, spec.seed)[:, 0]
    return summarize(vals, spec.level, spec.seed)
