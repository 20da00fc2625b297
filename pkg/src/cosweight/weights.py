"""Propensity scores, balancing weights and estimand-specific weight sets."""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import CosDataset
from .exceptions import (
    ConfigError,
    DataError,
    DegenerateWeightsError,
    InfeasibleBalanceError,
    SeparationError,
    SingularDesignError,
    UnsupportedEstimandError,
)

CLIP = 1e-6
SEPARATION_LIMIT = 30.0


class Estimand(str, enum.Enum):
    ATT = "att"
    ATO = "ato"
    ATE = "ate"

    @property
    def weighted_arms(self) -> tuple:
        """Arms whose weights are estimated (and normalized)."""
        return (0,) if self is Estimand.ATT else (0, 1)


class Conditioning(str, enum.Enum):
    CUD = "cud"
    COD = "cod"


def design_matrix(ds: CosDataset, conditioning="cud", drop: Sequence[str] = ()):
    """Unit-level covariate matrix for a conditioning set, without intercept.

    CUD uses ``[K, X]`` and COD uses ``[K]``. Returns ``(matrix, names)``.
    """
    conditioning = Conditioning(conditioning)
    drop = set(drop)
    unknown = drop - set(ds.x_names) - set(ds.k_names)
    if unknown:
        raise ConfigError(f"unknown covariates: {', '.join(sorted(unknown))}")
    cols, names = [], []
    ku = ds.k_units
    for j, nm in enumerate(ds.k_names):
        if nm not in drop:
            cols.append(ku[:, j])
            names.append(nm)
    if conditioning is Conditioning.CUD:
        for j, nm in enumerate(ds.x_names):
            if nm not in drop:
                cols.append(ds.x[:, j])
                names.append(nm)
    mat = np.column_stack(cols) if cols else np.empty((ds.n, 0))
    return mat, names


def _standardize(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    const = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(const, 1.0, scale)
    return (X - mean) / scale, mean, scale, const


def _dependent_columns(Z: np.ndarray, names: Sequence[str]) -> list:
    """Names of columns that are linear combinations of the others."""
    if Z.shape[1] == 0:
        return []
    _, r, piv = linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(Z.shape) * np.finfo(float).eps * 1e3 if diag.size else 0.0
    rank = int((diag > tol).sum())
    return [names[j] for j in sorted(piv[rank:])]


class LogisticPropensity(ClassifierMixin, BaseEstimator):
    """Logistic regression fit by iteratively reweighted least squares.

    Columns are standardized internally; the ridge penalty acts on the
    standardized slopes (never the intercept) and the reported ``coef_`` and
    ``intercept_`` are on the original scale. Fitted probabilities are clipped
    to ``[clip, 1 - clip]``.

    With ``ridge=0`` an exactly collinear design raises
    :class:`SingularDesignError` and a standardized coefficient beyond 30 in
    absolute value raises :class:`SeparationError`.
    """

    def __init__(self, ridge=0.0, max_iter=100, tol=1e-8, clip=CLIP, feature_names=None):
        self.ridge = ridge
        self.max_iter = max_iter
        self.tol = tol
        self.clip = clip
        self.feature_names = feature_names

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_features=0)
        if not np.isin(y, (0, 1)).all():
            raise DataError("treatment labels must be 0 or 1")
        y = y.astype(float)
        if y.min() == y.max():
            raise SeparationError("all units share one treatment value")
        n, p = X.shape
        names = list(self.feature_names) if self.feature_names is not None else [
            f"x{j}" for j in range(p)]
        Xs, mean, scale, const = _standardize(X)
        if self.ridge == 0:
            if const.any():
                bad = [names[j] for j in np.flatnonzero(const)]
                raise SingularDesignError(
                    f"design columns are constant (collinear with the intercept): {', '.join(bad)}")
            dep = _dependent_columns(np.column_stack([np.ones(n), Xs]), ["intercept", *names])
            if dep:
                raise SingularDesignError(f"collinear design columns: {', '.join(dep)}")
        Z = np.column_stack([np.ones(n), Xs])
        penalty = np.full(p + 1, float(self.ridge))
        penalty[0] = 0.0

        def objective(b):
            eta = Z @ b
            return np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(penalty * b * b)

        beta = np.zeros(p + 1)
        pbar = y.mean()
        beta[0] = np.log(pbar / (1 - pbar))
        obj = objective(beta)
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            mu = expit(Z @ beta)
            wts = mu * (1 - mu)
            grad = Z.T @ (y - mu) - penalty * beta
            hess = (Z * wts[:, None]).T @ Z + np.diag(penalty)
            try:
                step = linalg.solve(hess, grad, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                if self.ridge == 0:
                    raise SeparationError(
                        "information matrix became singular (likely separation); "
                        "refit with ridge > 0") from None
                raise
            t = 1.0
            while True:
                cand = beta + t * step
                cand_obj = objective(cand)
                if cand_obj >= obj - 1e-12 * abs(obj) or t < 1e-10:
                    break
                t *= 0.5
            change = np.max(np.abs(cand - beta))
            beta, obj = cand, cand_obj
            if self.ridge == 0 and np.max(np.abs(beta)) > SEPARATION_LIMIT:
                raise SeparationError(
                    "coefficient magnitude exceeded 30 (quasi-complete separation); "
                    "refit with ridge > 0")
            if change < self.tol:
                converged = True
                break

        self.beta_std_ = beta
        self.coef_ = beta[1:] / scale
        self.intercept_ = float(beta[0] - np.sum(beta[1:] * mean / scale))
        self._mean, self._scale = mean, scale
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = p
        self.converged_ = converged
        self.n_iter_ = it
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_min_features=0)
        return self.intercept_ + X @ self.coef_

    def predict_proba(self, X):
        p1 = np.clip(expit(self.decision_function(X)), self.clip, 1 - self.clip)
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)


@dataclass(frozen=True, eq=False)
class PropensityFit:
    conditioning: Conditioning
    coefficients: np.ndarray
    names: tuple
    scores: np.ndarray
    treatment: np.ndarray
    converged: bool
    iterations: int
    n_clipped: int = 0


def fit_propensity(ds: CosDataset, conditioning="cud", max_iter=100, tol=1e-8, ridge=0.0,
                   drop: Sequence[str] = ()) -> PropensityFit:
    """Unit-level logistic regression of cluster treatment on the conditioning design."""
    conditioning = Conditioning(conditioning)
    X, names = design_matrix(ds, conditioning, drop)
    model = LogisticPropensity(ridge=ridge, max_iter=max_iter, tol=tol, feature_names=names)
    a = ds.treatment
    model.fit(X, a)
    raw = expit(model.decision_function(X))
    scores = np.clip(raw, CLIP, 1 - CLIP)
    return PropensityFit(
        conditioning=conditioning,
        coefficients=np.concatenate([[model.intercept_], model.coef_]),
        names=("intercept", *names),
        scores=scores,
        treatment=a.copy(),
        converged=model.converged_,
        iterations=model.n_iter_,
        n_clipped=int(np.sum((raw <= CLIP) | (raw >= 1 - CLIP))),
    )


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Per-unit weights for one estimand.

    ``treatment`` is carried along so the weighted groups can be identified
    without the dataset.
    """

    estimand: Estimand
    values: np.ndarray
    treatment: np.ndarray
    normalized: bool = False
    source: str = "propensity"
    flags: tuple = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        treatment = np.array(self.treatment).astype(np.int8).reshape(-1)
        if values.shape != treatment.shape:
            raise ConfigError("weights and treatment have different lengths")
        if not np.isfinite(values).all() or (values < 0).any():
            raise DegenerateWeightsError("weights must be finite and nonnegative")
        values.setflags(write=False)
        treatment.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "estimand", Estimand(self.estimand))
        object.__setattr__(self, "flags", tuple(self.flags))

    def __len__(self):
        return self.values.shape[0]

    def arm(self, a: int) -> np.ndarray:
        return self.values[self.treatment == a]

    def weighted_mask(self) -> np.ndarray:
        return np.isin(self.treatment, self.estimand.weighted_arms)


def _check_match(w: WeightSet, ds: Optional[CosDataset]) -> None:
    if ds is None:
        return
    if len(w) != ds.n or not np.array_equal(w.treatment, ds.treatment):
        raise ConfigError("weights do not match the dataset")


def normalize(w: WeightSet, ds: Optional[CosDataset] = None) -> WeightSet:
    """Rescale weights to average 1 within each weighted group."""
    _check_match(w, ds)
    values = w.values.copy()
    for arm in w.estimand.weighted_arms:
        mask = w.treatment == arm
        total = values[mask].sum()
        if not mask.any() or total <= 0:
            raise DegenerateWeightsError(f"weights in arm {arm} sum to zero")
        values[mask] *= mask.sum() / total
    return WeightSet(w.estimand, values, w.treatment, True, w.source, w.flags)


def is_normalized(w: WeightSet, atol=1e-9) -> bool:
    if not w.normalized:
        return False
    return all(abs(w.arm(arm).mean() - 1.0) <= atol for arm in w.estimand.weighted_arms)


def raw_weights(scores, treatment, estimand) -> np.ndarray:
    """Estimand-specific transform of propensity scores (before normalization)."""
    estimand = Estimand(estimand)
    pi = np.asarray(scores, dtype=float)
    t = np.asarray(treatment) == 1
    if estimand is Estimand.ATT:
        return np.where(t, 1.0, pi / (1 - pi))
    if estimand is Estimand.ATO:
        return np.where(t, 1 - pi, pi)
    return np.where(t, 1 / pi, 1 / (1 - pi))


def weights_from_propensity(fit: PropensityFit, estimand="att", normalized=True) -> WeightSet:
    estimand = Estimand(estimand)
    pi = fit.scores
    if ((pi <= 0) | (pi >= 1)).any():
        raise DegenerateWeightsError("propensity scores must lie strictly inside (0, 1)")
    flags = ("propensity_clipped",) if fit.n_clipped else ()
    w = WeightSet(estimand, raw_weights(pi, fit.treatment, estimand), fit.treatment,
                  False, "propensity", flags)
    return normalize(w) if normalized else w


class EntropyBalancer(BaseEstimator):
    """First-moment entropy balancing of controls to the treated means.

    Control weights are ``exp(theta @ z)`` with ``theta`` minimizing the dual
    ``log sum_controls exp(theta @ z) - theta @ zbar_treated``. The dual is
    minimized by Newton-direction descent with Armijo backtracking, falling
    back to the plain gradient when the Hessian is singular. Covariates are
    standardized on the control sample first.

    ``penalty > 0`` adds ``penalty / 2 * |theta|^2`` to the dual, which trades
    exact balance for a bounded solution: the standardized imbalance at the
    optimum is ``penalty * theta``. This keeps the weights defined when the
    treated means fall outside the control hull.
    """

    def __init__(self, tol=1e-6, max_iter=500, step=1.0, theta_cap=1e4, penalty=0.0,
                 feature_names=None):
        self.tol = tol
        self.max_iter = max_iter
        self.step = step
        self.theta_cap = theta_cap
        self.penalty = penalty
        self.feature_names = feature_names

    def fit(self, X, a):
        X, a = check_X_y(X, a, ensure_min_features=0)
        p = X.shape[1]
        names = list(self.feature_names) if self.feature_names is not None else [
            f"x{j}" for j in range(p)]
        t, c = a == 1, a == 0
        if not t.any() or not c.any():
            raise DataError("need both treated and control units")
        if self.penalty < 0:
            raise ConfigError("penalty must be nonnegative")
        pen = float(self.penalty)
        target = X[t].mean(axis=0)
        Zc = X[c]
        mean = Zc.mean(axis=0)
        scale = Zc.std(axis=0)
        const = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if pen == 0 and (const & (np.abs(target - mean) > self.tol)).any():
            bad = [names[j] for j in np.flatnonzero(const)]
            raise InfeasibleBalanceError(
                f"covariates constant among controls cannot be balanced: {', '.join(bad)}; "
                "consider the ATO estimand")
        keep = ~const
        Zs = (Zc[:, keep] - target[keep]) / scale[keep]
        kept = [nm for nm, k in zip(names, keep) if k]
        dep = _dependent_columns(Zs - Zs.mean(axis=0), kept) if pen == 0 else []
        if dep:
            raise SingularDesignError(f"collinear balance covariates: {', '.join(dep)}")

        def dual(theta):
            s = Zs @ theta
            top = s.max() if s.size else 0.0
            return top + np.log(np.sum(np.exp(s - top))) + 0.5 * pen * (theta @ theta)

        def probs(theta):
            s = Zs @ theta
            e = np.exp(s - s.max())
            return e / e.sum()

        theta = np.zeros(Zs.shape[1])
        f = dual(theta)
        converged = Zs.shape[1] == 0
        it = 0
        for it in range(1, self.max_iter + 1):
            if converged:
                break
            q = probs(theta)
            mom = Zs.T @ q
            grad = mom + pen * theta
            if np.max(np.abs(grad)) < self.tol:
                converged = True
                break
            centered = Zs - mom
            hess = (centered * q[:, None]).T @ centered + pen * np.eye(theta.size)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", linalg.LinAlgWarning)
                    direction = -linalg.solve(hess, grad, assume_a="pos")
                if not np.all(np.isfinite(direction)) or direction @ grad >= 0:
                    raise linalg.LinAlgError
            except (linalg.LinAlgError, ValueError):
                direction = -grad
            t_step = float(self.step)
            while True:
                cand = theta + t_step * direction
                f_cand = dual(cand)
                if f_cand <= f + 1e-4 * t_step * (grad @ direction) or t_step < 1e-12:
                    break
                t_step *= 0.5
            theta, f = cand, f_cand
            if np.linalg.norm(theta) > self.theta_cap:
                raise InfeasibleBalanceError(
                    "entropy balancing dual diverged (treated means outside the control "
                    "covariate hull); consider the ATO estimand")
        if not converged:
            q = probs(theta)
            if np.max(np.abs(Zs.T @ q + pen * theta)) < self.tol:
                converged = True
        if not converged:
            raise InfeasibleBalanceError(
                f"entropy balancing did not reach balance within {self.max_iter} iterations; "
                "consider the ATO estimand")

        full_theta = np.zeros(p)
        full_theta[keep] = theta / scale[keep]
        q = probs(theta)
        self.theta_ = full_theta
        self.control_weights_ = q * q.shape[0]
        self.weights_ = np.ones(X.shape[0])
        self.weights_[c] = self.control_weights_
        self.n_iter_ = it
        self.imbalance_ = np.abs(Zc.T @ q - target)
        return self


class StableBalancer(BaseEstimator):
    """Minimum-variance (stable) balancing of controls to the treated means.

    Solves ``min (1/2n0) sum w_i^2 + |m|^2 / (2 * penalty)`` over nonnegative
    control weights with mean 1, where ``m`` is the standardized imbalance
    ``mean_controls(w z) - zbar_treated``. The dual variables ``(theta, nu)``
    give ``w_i = max(0, nu + theta @ (z_i - zbar_treated))``; the convex,
    piecewise-quadratic dual is minimized by semismooth Newton with Armijo
    backtracking. ``penalty = 0`` demands exact balance.
    """

    def __init__(self, penalty=0.0, tol=1e-8, max_iter=200, theta_cap=1e6, feature_names=None):
        self.penalty = penalty
        self.tol = tol
        self.max_iter = max_iter
        self.theta_cap = theta_cap
        self.feature_names = feature_names

    def fit(self, X, a):
        X, a = check_X_y(X, a, ensure_min_features=0)
        if self.penalty < 0:
            raise ConfigError("penalty must be nonnegative")
        pen = float(self.penalty)
        p = X.shape[1]
        names = list(self.feature_names) if self.feature_names is not None else [
            f"x{j}" for j in range(p)]
        t, c = a == 1, a == 0
        if not t.any() or not c.any():
            raise DataError("need both treated and control units")
        target = X[t].mean(axis=0)
        Zc = X[c]
        n0 = Zc.shape[0]
        scale = Zc.std(axis=0)
        const = scale <= 1e-12 * np.maximum(1.0, np.abs(Zc.mean(axis=0)))
        if pen == 0 and (const & (np.abs(target - Zc.mean(axis=0)) > self.tol)).any():
            bad = [names[j] for j in np.flatnonzero(const)]
            raise InfeasibleBalanceError(
                f"covariates constant among controls cannot be balanced: {', '.join(bad)}")
        keep = ~const
        Zs = (Zc[:, keep] - target[keep]) / scale[keep]
        if pen == 0:
            dep = _dependent_columns(Zs - Zs.mean(axis=0), [n for n, k in zip(names, keep) if k])
            if dep:
                raise SingularDesignError(f"collinear balance covariates: {', '.join(dep)}")
        q = Zs.shape[1]
        # augmented design: last coordinate is nu
        D = np.column_stack([Zs, np.ones(n0)])
        reg = np.append(np.full(q, pen), 0.0)
        lin = np.append(np.zeros(q), 1.0)

        def objective(v):
            u = np.maximum(D @ v, 0.0)
            return 0.5 * (u @ u) / n0 - v @ lin + 0.5 * (reg * v) @ v

        v = lin.copy()
        f = objective(v)
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            u = D @ v
            w = np.maximum(u, 0.0)
            grad = D.T @ w / n0 - lin + reg * v
            if np.max(np.abs(grad)) < self.tol:
                converged = True
                break
            act = u > 0
            hess = D[act].T @ D[act] / n0 + np.diag(reg)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", linalg.LinAlgWarning)
                    direction = -linalg.solve(hess, grad, assume_a="sym")
                if not np.all(np.isfinite(direction)) or direction @ grad >= 0:
                    raise linalg.LinAlgError
            except (linalg.LinAlgError, ValueError):
                direction = -grad
            step = 1.0
            while True:
                cand = v + step * direction
                f_cand = objective(cand)
                if f_cand <= f + 1e-4 * step * (grad @ direction) or step < 1e-12:
                    break
                step *= 0.5
            v, f = cand, f_cand
            if np.linalg.norm(v[:q]) > self.theta_cap:
                raise InfeasibleBalanceError(
                    "stable balancing dual diverged (treated means outside the control "
                    "covariate hull); use a positive penalty")
        if not converged:
            raise InfeasibleBalanceError(
                f"stable balancing did not converge within {self.max_iter} iterations")
        w = np.maximum(D @ v, 0.0)
        w *= n0 / w.sum()
        full_theta = np.zeros(p)
        full_theta[keep] = v[:q] / scale[keep]
        self.theta_ = full_theta
        self.nu_ = float(v[q])
        self.control_weights_ = w
        self.weights_ = np.ones(X.shape[0])
        self.weights_[c] = w
        self.n_iter_ = it
        self.imbalance_ = np.abs(Zc.T @ w / n0 - target)
        return self


def stable_weights(ds: CosDataset, estimand="att", conditioning="cud", penalty: float = 0.0,
                   tol=1e-8, max_iter=200, drop: Sequence[str] = ()) -> WeightSet:
    """Minimum-variance ATT balancing weights (see :class:`StableBalancer`)."""
    estimand = Estimand(estimand)
    if estimand is not Estimand.ATT:
        raise UnsupportedEstimandError(
            f"balancing weights support only the ATT; use propensity weights for {estimand.name}")
    X, names = design_matrix(ds, conditioning, drop)
    bal = StableBalancer(penalty=penalty, tol=tol, max_iter=max_iter, feature_names=names)
    bal.fit(X, ds.treatment)
    return normalize(WeightSet(Estimand.ATT, bal.weights_, ds.treatment, False, "stable"))


def balancing_weights(ds: CosDataset, estimand="att", conditioning="cud", tol=1e-6,
                      max_iter=500, step=1.0, drop: Sequence[str] = (),
                      penalty: float = 0.0) -> WeightSet:
    """Entropy-balancing ATT weights; controls reproduce the treated means of ``[K, X]``.

    With ``penalty > 0`` balance is approximate (see :class:`EntropyBalancer`).
    """
    estimand = Estimand(estimand)
    if estimand is not Estimand.ATT:
        raise UnsupportedEstimandError(
            f"balancing weights support only the ATT; use propensity weights for {estimand.name}")
    X, names = design_matrix(ds, conditioning, drop)
    bal = EntropyBalancer(tol=tol, max_iter=max_iter, step=step, penalty=penalty,
                          feature_names=names)
    bal.fit(X, ds.treatment)
    w = WeightSet(Estimand.ATT, bal.weights_, ds.treatment, False, "balancing")
    return normalize(w)


def load_external_weights(path, ds: CosDataset, estimand="att") -> WeightSet:
    """Read a ``(unit_id, weight)`` CSV aligned to ``ds`` by unit id."""
    estimand = Estimand(estimand)
    found = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"unit_id", "weight"} <= set(reader.fieldnames):
            raise DataError(f"{path} must have columns unit_id, weight")
        for r, row in enumerate(reader, start=2):
            try:
                found[row["unit_id"]] = float(row["weight"])
            except ValueError:
                raise DataError(f"row {r}: weight {row['weight']!r} is not numeric") from None
    ids = [str(u) for u in ds.unit_ids]
    missing = [u for u in ids if u not in found]
    if missing:
        raise DataError(f"no weight for unit {missing[0]}")
    values = np.array([found[u] for u in ids])
    if estimand is Estimand.ATT:
        values = np.where(ds.treatment == 1, 1.0, values)
    return normalize(WeightSet(estimand, values, ds.treatment, False, "external"), ds)


@dataclass(frozen=True)
class WeightPipeline:
    """Recipe for (re)fitting weights on a dataset.

    Used wherever weights must be refit: bootstrap replicates, benchmarking
    and the simulation harness.
    """

    estimand: Estimand = Estimand.ATT
    conditioning: Conditioning = Conditioning.CUD
    source: str = "propensity"
    ridge: float = 0.0
    max_iter: int = 100
    tol: float = 1e-8
    balance_tol: float = 1e-6
    balance_max_iter: int = 500
    balance_penalty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "estimand", Estimand(self.estimand))
        object.__setattr__(self, "conditioning", Conditioning(self.conditioning))
        if self.source not in ("propensity", "balancing", "stable"):
            raise ConfigError(f"cannot refit weights from source {self.source!r}")
        if self.source in ("balancing", "stable") and self.estimand is not Estimand.ATT:
            raise UnsupportedEstimandError(
                f"balancing weights support only the ATT; use propensity weights for "
                f"{self.estimand.name}")

    def fit(self, ds: CosDataset, drop: Sequence[str] = ()) -> WeightSet:
        if self.source == "stable":
            return stable_weights(ds, self.estimand, self.conditioning, self.balance_penalty,
                                  drop=drop)
        if self.source == "balancing":
            return balancing_weights(ds, self.estimand, self.conditioning, self.balance_tol,
                                     self.balance_max_iter, drop=drop,
                                     penalty=self.balance_penalty)
        fit = fit_propensity(ds, self.conditioning, self.max_iter, self.tol, self.ridge, drop)
        return weights_from_propensity(fit, self.estimand)
