"""Synthetic clustered DGP, oracle sensitivity parameters and coverage studies.

The base population stands in for a school dataset: clusters carry
achievement-related covariates, units carry reading and math scores with a
cluster random intercept. Treatment follows the latent-index rule
``Z* = e(K)/c + Unif(-0.5, 0.5)``, ``Z = 1(Z* > 0.25)``, and control potential
outcomes are ``beta0 + 2.5 R + 2.5 M + 1.9 P + b_j + v`` with ``v ~ N(0, 12^2)``.
The true effect is 0.3 standard deviations of the control outcome.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit

from .bootstrap import Statistic, bootstrap_replicates, percentile_ci
from .data import CosDataset
from .estimation import arm_moments, weighted_difference
from .exceptions import ConfigError, CosError, DegenerateWeightsError, StructuralError
from .sensitivity import msm_interval, vbm_scale
from .weights import Estimand, WeightPipeline, WeightSet, normalize

log = logging.getLogger(__name__)

UNIT_COVARIATES = ("read", "math", "female", "minority", "hispanic")
CLUSTER_COVARIATES = ("frl", "ell", "prof", "school_math", "school_read", "attendance")
OMIT = {
    "omit_unit": ("read", "math"),
    "omit_cluster": ("prof", "school_math", "school_read"),
}


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the synthetic clustered DGP.

    ``ps_coefficients`` are the cluster-level propensity slopes, in the order
    of :data:`CLUSTER_COVARIATES`; the intercept is solved so the average
    propensity equals ``m1 / (m1 + m0)``.
    """

    m1: int = 18
    m0: int = 26
    cluster_size: tuple = (50, 120)
    ps_coefficients: tuple = (-0.125, -0.0625, 0.25, 0.125, 0.125, 0.0625)
    overlap_c: float = 1.0
    z_threshold: float = 0.25
    outcome_coeffs: tuple = (2.5, 2.5, 1.9)
    beta0: float = 50.0
    noise_sd: float = 12.0
    cluster_intercept_sd: float = 0.0
    tau_sd_multiplier: float = 0.3
    achievement_loading: float = 0.7
    score_intercept_sd: float = 0.5
    score_sd: float = 1.7
    school_score_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.overlap_c <= 0:
            raise ConfigError("overlap_c must be positive")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be positive")
        if self.m1 < 1 or self.m0 < 1:
            raise ConfigError("cluster counts must be at least 1")
        lo, hi = self.cluster_size
        if not 1 <= lo <= hi:
            raise ConfigError("cluster_size must satisfy 1 <= low <= high")
        if len(self.ps_coefficients) != len(CLUSTER_COVARIATES):
            raise ConfigError(
                f"ps_coefficients needs {len(CLUSTER_COVARIATES)} entries, "
                f"got {len(self.ps_coefficients)}")
        if len(self.outcome_coeffs) != 3:
            raise ConfigError("outcome_coeffs is (read, math, prof)")

    @property
    def m(self) -> int:
        return self.m1 + self.m0


@dataclass(frozen=True, eq=False)
class BasePopulation:
    """Covariates and cluster structure before treatment and outcomes."""

    cluster_index: np.ndarray
    x: np.ndarray
    k: np.ndarray
    cluster_effect: np.ndarray
    x_names: tuple = UNIT_COVARIATES
    k_names: tuple = CLUSTER_COVARIATES

    @property
    def m(self) -> int:
        return self.k.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def column(self, name: str) -> np.ndarray:
        """Unit-level values of a unit or cluster covariate."""
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        return self.k[self.cluster_index, self.k_names.index(name)]


def generate_base_population(cfg: DgpConfig, seed: Optional[int] = None) -> BasePopulation:
    """Draw clusters and units.

    A latent achievement factor ``s_j`` drives proficiency, reading and math
    scores, attendance and (negatively) free-lunch share. Unit scores add a
    cluster random intercept and correlated unit noise; school averages are
    the cluster means of the unit scores.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    m = cfg.m
    lo, hi = cfg.cluster_size
    sizes = rng.integers(lo, hi + 1, size=m)
    s = rng.standard_normal(m)
    frl = -0.5 * s + math.sqrt(0.75) * rng.standard_normal(m)
    ell = 0.3 * frl + 0.95 * rng.standard_normal(m)
    prof = 0.8 * s + 0.6 * rng.standard_normal(m)
    attendance = 0.4 * s + math.sqrt(0.84) * rng.standard_normal(m)

    cluster_index = np.repeat(np.arange(m), sizes)
    n = cluster_index.size
    lam = cfg.achievement_loading
    shared = lam * s + cfg.score_intercept_sd * rng.standard_normal(m)
    noise = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.6], [0.6, 1.0]], size=n)
    read = cfg.score_sd * (shared[cluster_index] + noise[:, 0])
    math_ = cfg.score_sd * (shared[cluster_index] + 0.8 * noise[:, 1])
    female = rng.binomial(1, 0.5, size=n).astype(float)
    minority = rng.binomial(1, expit(-0.5 + 0.8 * frl[cluster_index])).astype(float)
    hispanic = rng.binomial(1, expit(-1.5 + 0.8 * ell[cluster_index])).astype(float)

    # school-wide averages: driven by the same factor as the sampled scores but
    # not equal to the sample means
    school_read = lam * s + cfg.school_score_noise * rng.standard_normal(m)
    school_math = lam * s + cfg.school_score_noise * rng.standard_normal(m)
    x = np.column_stack([read, math_, female, minority, hispanic])
    k = np.column_stack([frl, ell, prof, school_math, school_read, attendance])
    b = cfg.cluster_intercept_sd * rng.standard_normal(m)
    return BasePopulation(cluster_index, x, k, b)


def base_propensity(pop: BasePopulation, cfg: DgpConfig) -> np.ndarray:
    """Cluster-level score ``e(K)`` with intercept solved for the target treated share."""
    lin = pop.k @ np.asarray(cfg.ps_coefficients, dtype=float)
    target = cfg.m1 / cfg.m
    b0 = optimize.brentq(lambda c: expit(c + lin).mean() - target, -50.0, 50.0)
    return expit(b0 + lin)


def true_propensity(e_hat: np.ndarray, cfg: DgpConfig) -> np.ndarray:
    """``P(Z = 1 | K)`` implied by the latent-index rule."""
    return np.clip(0.5 - (cfg.z_threshold - e_hat / cfg.overlap_c), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Assignment:
    a: np.ndarray
    e_hat: np.ndarray
    true_ps: np.ndarray
    attempts: int


def assign_treatment(pop: BasePopulation, cfg: DgpConfig, rng: np.random.Generator,
                     max_attempts: int = 100) -> Assignment:
    """Cluster treatment from ``Z* = e/c + Unif(-0.5, 0.5)``, treated iff ``Z* > threshold``.

    Draws in which every cluster lands in one arm are redrawn.
    """
    e_hat = base_propensity(pop, cfg)
    for attempt in range(1, max_attempts + 1):
        z_star = e_hat / cfg.overlap_c + rng.uniform(-0.5, 0.5, size=pop.m)
        a = (z_star > cfg.z_threshold).astype(np.int8)
        if 0 < a.sum() < pop.m:
            return Assignment(a, e_hat, true_propensity(e_hat, cfg), attempt)
    raise StructuralError(f"all clusters fell in one arm in {max_attempts} draws")


@dataclass(frozen=True, eq=False)
class SimulatedData:
    ds: CosDataset
    tau: float
    y0: np.ndarray
    assignment: Assignment


def generate_outcomes(pop: BasePopulation, assignment: Assignment, cfg: DgpConfig,
                      rng: np.random.Generator) -> SimulatedData:
    c_read, c_math, c_prof = cfg.outcome_coeffs
    y0 = (cfg.beta0 + c_read * pop.column("read") + c_math * pop.column("math")
          + c_prof * pop.column("prof") + pop.cluster_effect[pop.cluster_index]
          + cfg.noise_sd * rng.standard_normal(pop.n))
    tau = cfg.tau_sd_multiplier * float(np.std(y0))
    z = assignment.a[pop.cluster_index]
    y = y0 + z * tau
    ds = CosDataset(
        unit_ids=np.arange(pop.n), cluster_index=pop.cluster_index, x=pop.x, y=y,
        cluster_ids=np.arange(pop.m), a=assignment.a, k=pop.k,
        x_names=pop.x_names, k_names=pop.k_names,
    )
    return SimulatedData(ds, tau, y0, assignment)


def simulate_dataset(pop: BasePopulation, cfg: DgpConfig, rng: np.random.Generator) -> SimulatedData:
    return generate_outcomes(pop, assign_treatment(pop, cfg, rng), cfg, rng)


def oracle_weights(sim: SimulatedData) -> WeightSet:
    """Normalized ATT weights from the true cluster propensities of the DGP."""
    ds = sim.ds
    pi = sim.assignment.true_ps[ds.cluster_index]
    t = ds.treatment
    raw = np.ones(ds.n)
    c = t == 0
    raw[c] = pi[c] / (1.0 - pi[c])
    return normalize(WeightSet(Estimand.ATT, raw, t, False, "oracle"))


def oracle_parameters(w_misspec: WeightSet, w_star: WeightSet) -> dict:
    """Oracle ``R^2`` and ``lambda`` relating misspecified weights to ideal weights.

    ``r2_oracle = max(0, 1 - var(w_misspec) / var(w_star))`` over the control
    arm and ``lambda_oracle`` is the largest ratio in either direction over
    the weighted arm(s).
    """
    if not np.array_equal(w_misspec.treatment, w_star.treatment):
        raise ConfigError("weight sets have different treatment vectors")
    c = w_star.treatment == 0
    var_star = float(np.var(w_star.values[c]))
    if var_star <= 0:
        raise DegenerateWeightsError("ideal weights have zero variance")
    r2 = max(0.0, 1.0 - float(np.var(w_misspec.values[c])) / var_star)
    mask = w_star.weighted_mask()
    wm, ws = w_misspec.values[mask], w_star.values[mask]
    both_zero = (wm == 0) & (ws == 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.maximum(wm / ws, ws / wm)
    ratio[both_zero] = 1.0
    lam = float(max(np.max(ratio), 1.0))
    return {"r2_oracle": r2, "lambda_oracle": lam}


def icc(ds: CosDataset, y: Optional[np.ndarray] = None) -> float:
    """One-way ANOVA intraclass correlation of the outcome, clamped to [0, 1]."""
    y = ds.y if y is None else np.asarray(y, dtype=float)
    g = ds.m
    if g < 2:
        raise ConfigError("ICC needs at least two clusters")
    sizes = ds.n_units.astype(float)
    n = sizes.sum()
    if sizes.max() < 2:
        raise ConfigError("ICC needs a cluster with at least two units")
    means = np.bincount(ds.cluster_index, weights=y, minlength=g) / sizes
    grand = y.mean()
    ssb = float(np.sum(sizes * (means - grand) ** 2))
    ssw = float(np.sum((y - means[ds.cluster_index]) ** 2))
    msb = ssb / (g - 1)
    msw = ssw / (n - g)
    n0 = (n - np.sum(sizes ** 2) / n) / (g - 1)
    sigma_b = (msb - msw) / n0
    total = sigma_b + msw
    if total <= 0:
        return 1.0 if msw == 0 and ssb > 0 else 0.0
    return float(min(1.0, max(0.0, sigma_b / total)))


# -- studies -------------------------------------------------------------------

@dataclass
class ConditionSummary:
    overlap_c: float
    misspecification: str
    model: str
    coverage: float
    mean_length: float
    replications: int
    failures: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimReport:
    study: int
    conditions: list
    records: list
    failures: list = field(default_factory=list)

    def condition(self, overlap_c, misspecification, model) -> ConditionSummary:
        for cnd in self.conditions:
            if (cnd.overlap_c == overlap_c and cnd.misspecification == misspecification
                    and cnd.model == model):
                return cnd
        raise KeyError((overlap_c, misspecification, model))

    def summary(self) -> dict:
        return {"study": self.study,
                "conditions": [c.to_dict() for c in self.conditions],
                "failures": list(self.failures)}

    def write_records(self, path) -> None:
        if not self.records:
            return
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.records[0]))
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _rep_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


DEFAULT_PIPELINE = WeightPipeline(estimand=Estimand.ATT, conditioning="cud", source="stable",
                                  balance_penalty=0.001)


def _bounds(ds: CosDataset, w: WeightSet, oracle: dict) -> dict:
    y, a = ds.y, ds.treatment
    tau_hat = weighted_difference(y, w.values, a, Estimand.ATT)
    m_lo, m_hi, _ = msm_interval(y, w.values, a, Estimand.ATT, oracle["lambda_oracle"])
    scale, _ = vbm_scale(arm_moments(y, w.values, a), Estimand.ATT)
    r2 = min(oracle["r2_oracle"], 1.0 - 1e-12)
    half = math.sqrt(r2 / (1.0 - r2)) * scale
    return {"tau_hat": tau_hat, "msm": (m_lo, m_hi), "vbm": (tau_hat - half, tau_hat + half)}


def _ideal(sim: SimulatedData, pipe: WeightPipeline, oracle: str) -> WeightSet:
    if oracle == "fitted":
        return pipe.fit(sim.ds)
    if oracle == "true":
        return oracle_weights(sim)
    raise ConfigError(f"oracle must be 'fitted' or 'true', got {oracle!r}")


def run_sim1(cfg: DgpConfig, replications: int, c_values: Sequence[float] = (1.0, 5.0, 10.0),
             misspecifications: Sequence[str] = ("omit_unit", "omit_cluster"),
             seed: Optional[int] = None, pipeline: Optional[WeightPipeline] = None,
             oracle: str = "fitted") -> SimReport:
    """Coverage and length of MSM and VBM bounds at the oracle parameters.

    For each overlap level and replicate: draw treatment and outcomes on the
    fixed base population, fit ideal weights on all covariates and
    misspecified weights without the designated covariates, then evaluate
    both bounds at the oracle parameters and record whether they contain the
    true effect.
    """
    if replications < 1:
        raise ConfigError("replications must be at least 1")
    seed = cfg.seed if seed is None else seed
    pop = generate_base_population(cfg, seed)
    pipe = DEFAULT_PIPELINE if pipeline is None else pipeline
    records, failures = [], []
    for c in c_values:
        ccfg = replace(cfg, overlap_c=float(c))
        for r in range(replications):
            rng = _rep_rng(seed, 1, int(round(c * 1000)), r)
            try:
                sim = simulate_dataset(pop, ccfg, rng)
                w_star = _ideal(sim, pipe, oracle)
                for mis in misspecifications:
                    w_mis = pipe.fit(sim.ds, drop=OMIT[mis])
                    params = oracle_parameters(w_mis, w_star)
                    b = _bounds(sim.ds, w_mis, params)
                    for model in ("msm", "vbm"):
                        lo, hi = b[model]
                        records.append({
                            "overlap_c": float(c), "misspecification": mis, "model": model,
                            "replicate": r, "tau": sim.tau, "tau_hat": b["tau_hat"],
                            "lower": lo, "upper": hi, "length": hi - lo,
                            "covered": bool(lo <= sim.tau <= hi),
                            "r2_oracle": params["r2_oracle"],
                            "lambda_oracle": params["lambda_oracle"],
                        })
            except CosError as exc:
                log.warning("sim1 c=%s replicate %d failed: %s", c, r, exc)
                failures.append({"overlap_c": float(c), "replicate": r, "error": str(exc)})
    return SimReport(1, _summarize(records, failures, c_values, misspecifications), records,
                     failures)


def _summarize(records, failures, c_values, misspecifications) -> list:
    out = []
    for c in c_values:
        nfail = sum(1 for f in failures if f["overlap_c"] == float(c))
        for mis in misspecifications:
            for model in ("msm", "vbm"):
                rows = [r for r in records if r["overlap_c"] == float(c)
                        and r["misspecification"] == mis and r["model"] == model]
                cov = float(np.mean([r["covered"] for r in rows])) if rows else float("nan")
                length = float(np.mean([r["length"] for r in rows])) if rows else float("nan")
                out.append(ConditionSummary(float(c), mis, model, cov, length, len(rows), nfail))
    return out


def run_sim2(cfg: DgpConfig, replications: int, B: int, level: float = 0.95,
             seed: Optional[int] = None,
             misspecifications: Sequence[str] = ("omit_unit", "omit_cluster"),
             pipeline: Optional[WeightPipeline] = None, oracle: str = "fitted") -> SimReport:
    """Coverage of block-bootstrap percentile intervals around the oracle bounds.

    Oracle parameters are computed once per simulated dataset; each bootstrap
    replicate resamples clusters, refits the misspecified weights and
    re-evaluates both bounds at those parameters. The interval runs from the
    lower percentile of the lower endpoints to the upper percentile of the
    upper endpoints.
    """
    if replications < 1 or B < 1:
        raise ConfigError("replications and B must be at least 1")
    seed = cfg.seed if seed is None else seed
    pop = generate_base_population(cfg, seed)
    pipe = DEFAULT_PIPELINE if pipeline is None else pipeline
    c = float(cfg.overlap_c)
    records, failures = [], []
    for r in range(replications):
        rng = _rep_rng(seed, 2, r)
        try:
            sim = simulate_dataset(pop, cfg, rng)
            w_star = _ideal(sim, pipe, oracle)
            for mis_i, mis in enumerate(misspecifications):
                drop = OMIT[mis]
                w_mis = pipe.fit(sim.ds, drop=drop)
                params = oracle_parameters(w_mis, w_star)
                b = _bounds(sim.ds, w_mis, params)
                reduced = sim.ds.drop_covariates(drop)
                stats = [Statistic("msm_lower", params["lambda_oracle"]),
                         Statistic("msm_upper", params["lambda_oracle"]),
                         Statistic("vbm_lower", min(params["r2_oracle"], 1 - 1e-12)),
                         Statistic("vbm_upper", min(params["r2_oracle"], 1 - 1e-12))]
                boot_seed = int(np.random.SeedSequence(seed, spawn_key=(2, r, mis_i))
                                .generate_state(1)[0])
                reps = bootstrap_replicates(reduced, pipe, stats, B, boot_seed)
                ok = np.isfinite(reps).all(axis=1)
                nfail = int((~ok).sum())
                if nfail > B / 2:
                    raise CosError(f"{nfail} of {B} bootstrap replicates failed")
                reps = reps[ok]
                for model, (jl, ju) in (("msm", (0, 1)), ("vbm", (2, 3))):
                    lo = percentile_ci(reps[:, jl], level)[0]
                    hi = percentile_ci(reps[:, ju], level)[1]
                    raw_lo, raw_hi = b[model]
                    records.append({
                        "overlap_c": c, "misspecification": mis, "model": model,
                        "replicate": r, "tau": sim.tau, "tau_hat": b["tau_hat"],
                        "bound_lower": raw_lo, "bound_upper": raw_hi,
                        "lower": lo, "upper": hi, "length": hi - lo,
                        "covered": bool(lo <= sim.tau <= hi),
                        "bound_covered": bool(raw_lo <= sim.tau <= raw_hi),
                        "r2_oracle": params["r2_oracle"],
                        "lambda_oracle": params["lambda_oracle"],
                        "boot_failures": nfail,
                    })
        except CosError as exc:
            log.warning("sim2 replicate %d failed: %s", r, exc)
            failures.append({"overlap_c": c, "replicate": r, "error": str(exc)})
    return SimReport(2, _summarize(records, failures, [c], misspecifications), records, failures)
