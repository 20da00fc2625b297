"""Amplification of sensitivity parameters and benchmarking against observed covariates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import CosDataset
from .exceptions import ConfigError, CosError
from .weights import WeightPipeline, WeightSet


@dataclass(frozen=True)
class AmplificationCurve:
    """Pairs ``(component_V, component_U)`` that compose to ``total``.

    MSM: ``lam_V * lam_U = total``. VBM: ``1 - (1 - r2_V)(1 - r2_U) = total``.
    """

    model: str
    total: float
    points: tuple

    def residuals(self) -> np.ndarray:
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.model == "msm":
            return np.abs(pts[:, 0] * pts[:, 1] - self.total)
        return np.abs(1.0 - (1.0 - pts[:, 0]) * (1.0 - pts[:, 1]) - self.total)


def amplify_lambda(total: float, grid_size: int = 21) -> AmplificationCurve:
    """Log-spaced split of ``total`` into a cluster and a unit component.

    ``sqrt(total)`` (the symmetric split) is always on the grid.
    """
    if not total >= 1:
        raise ConfigError(f"lambda must be >= 1, got {total}")
    if grid_size < 1:
        raise ConfigError("grid_size must be positive")
    if total == 1:
        return AmplificationCurve("msm", 1.0, ((1.0, 1.0),))
    lam_v = np.geomspace(1.0, total, max(grid_size, 2))
    mid = math.sqrt(total)
    lam_v = np.sort(np.concatenate([lam_v[~np.isclose(lam_v, mid, rtol=1e-9, atol=0)], [mid]]))
    lam_v[0], lam_v[-1] = 1.0, total
    points = tuple((float(v), float(total / v)) for v in lam_v)
    return AmplificationCurve("msm", float(total), points)


def amplify_r2(total: float, grid_size: int = 21) -> AmplificationCurve:
    """Split of a VBM ``R^2`` into cluster and unit components."""
    if not 0 <= total < 1:
        raise ConfigError(f"R^2 must lie in [0, 1), got {total}")
    if grid_size < 1:
        raise ConfigError("grid_size must be positive")
    if total == 0:
        return AmplificationCurve("vbm", 0.0, ((0.0, 0.0),))
    r2_v = np.linspace(0.0, total, max(grid_size, 2))
    r2_u = np.clip(1.0 - (1.0 - total) / (1.0 - r2_v), 0.0, total)
    points = tuple((float(v), float(u)) for v, u in zip(r2_v, r2_u))
    return AmplificationCurve("vbm", float(total), points)


def compose_r2(r2_v: float, r2_u: float) -> float:
    return 1.0 - (1.0 - r2_v) * (1.0 - r2_u)


@dataclass(frozen=True)
class BenchmarkEntry:
    omitted: tuple
    r2_b: Optional[float]
    lambda_b: Optional[float]
    r2_raw: Optional[float] = None
    refit_converged: bool = True
    flags: tuple = field(default=())

    @property
    def levels(self) -> set:
        return {lvl for _, lvl in self.omitted}

    def to_dict(self) -> dict:
        return {
            "omitted": [{"name": n, "level": lvl} for n, lvl in self.omitted],
            "r2_b": self.r2_b,
            "lambda_b": self.lambda_b,
            "r2_raw": self.r2_raw,
            "refit_converged": self.refit_converged,
            "flags": list(self.flags),
        }


def benchmark_entry(w_full: WeightSet, w_reduced: WeightSet, omitted: tuple) -> BenchmarkEntry:
    """Benchmark values from full-covariate and reduced-covariate weights."""
    flags = []
    mask = w_full.weighted_mask()
    c = w_full.treatment == 0
    var_full = float(np.var(w_full.values[c]))
    var_red = float(np.var(w_reduced.values[c]))
    if var_full <= 0:
        r2_raw = 0.0 if var_red <= 0 else -math.inf
    else:
        r2_raw = 1.0 - var_red / var_full
    r2_hat = r2_raw
    if r2_hat < 0:
        flags.append("r2_clamped")
        r2_hat = 0.0
    wf, wr = w_full.values[mask], w_reduced.values[mask]
    if (wf <= 0).any() or (wr <= 0).any():
        lam = math.inf
        flags.append("zero_weight")
    else:
        lam = float(max(np.max(wr / wf), np.max(wf / wr), 1.0))
    return BenchmarkEntry(omitted, r2_hat / (1.0 + r2_hat), lam,
                          None if not math.isfinite(r2_raw) else r2_raw, True, tuple(flags))


def benchmark(ds: CosDataset, base_weights: WeightSet, subsets: Sequence[Sequence[str]],
              pipeline: WeightPipeline) -> list:
    """Refit weights with each covariate subset omitted and compare to the base weights.

    ``R2_b = R2_hat / (1 + R2_hat)`` with ``R2_hat = 1 - var(w_reduced | A=0) /
    var(w_full | A=0)`` clamped at 0, and ``lambda_b`` is the largest ratio
    between reduced and full weights, in either direction, over the weighted
    arm(s). Failed refits yield an entry with no values.
    """
    levels = {nm: "unit" for nm in ds.x_names}
    levels.update({nm: "cluster" for nm in ds.k_names})
    entries = []
    for subset in subsets:
        subset = list(subset)
        unknown = [s for s in subset if s not in levels]
        if unknown:
            raise ConfigError(f"unknown covariates: {', '.join(unknown)}")
        omitted = tuple((s, levels[s]) for s in subset)
        if not subset:
            entries.append(BenchmarkEntry(omitted, 0.0, 1.0, 0.0))
            continue
        try:
            reduced = pipeline.fit(ds, drop=subset)
        except CosError as exc:
            entries.append(BenchmarkEntry(omitted, None, None, None, False,
                                          (f"refit_failed: {exc}",)))
            continue
        entries.append(benchmark_entry(base_weights, reduced, omitted))
    return entries


def benchmark_plot_data(entries: Sequence[BenchmarkEntry], threshold_r2: float,
                        grid_size: int = 21) -> list:
    """Rows for an amplification-frontier plot with benchmark points.

    Frontier rows come from :func:`amplify_r2` at the threshold. Cluster-only
    subsets are placed on the V axis, unit-only subsets on the U axis and
    mixed subsets at ``(r2_b, r2_b)``.
    """
    rows = [{"kind": "frontier", "label": "", "r2_v": v, "r2_u": u}
            for v, u in amplify_r2(threshold_r2, grid_size).points]
    for e in entries:
        if e.r2_b is None:
            continue
        label = "+".join(n for n, _ in e.omitted)
        levels = e.levels
        if levels == {"cluster"}:
            v, u = e.r2_b, 0.0
        elif levels == {"unit"}:
            v, u = 0.0, e.r2_b
        else:
            v, u = e.r2_b, e.r2_b
        rows.append({"kind": "benchmark", "label": label, "r2_v": v, "r2_u": u})
    return rows


def write_plot_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["kind"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
