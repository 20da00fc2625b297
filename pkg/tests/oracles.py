"""Brute-force reference computations used by the tests."""

import itertools

import numpy as np

from cosweight.data import CosDataset
from cosweight.weights import WeightSet, normalize


def random_instance(rng, estimand="att", max_group=12, min_group=2):
    """Dataset plus normalized weights with both arms of size <= max_group."""
    n1 = int(rng.integers(min_group, max_group + 1))
    n0 = int(rng.integers(min_group, max_group + 1))
    m1 = int(rng.integers(1, n1 + 1))
    m0 = int(rng.integers(1, n0 + 1))
    # every cluster gets at least one unit
    idx1 = np.concatenate([np.arange(m1), rng.integers(0, m1, n1 - m1)])
    idx0 = np.concatenate([np.arange(m0), rng.integers(0, m0, n0 - m0)]) + m1
    cluster_index = np.concatenate([idx1, idx0])
    n = n1 + n0
    y = rng.normal(size=n) * rng.uniform(0.5, 20) + rng.normal() * 10
    a = np.array([1] * m1 + [0] * m0)
    ds = CosDataset(unit_ids=np.arange(n), cluster_index=cluster_index, x=np.zeros((n, 0)), y=y,
                    cluster_ids=np.arange(m1 + m0), a=a, k=np.zeros((m1 + m0, 0)))
    raw = np.exp(rng.normal(size=n) * rng.uniform(0.1, 1.5))
    w = normalize(WeightSet(estimand, raw, ds.treatment))
    return ds, w


def hajek_extremes_by_enumeration(y, w, lam):
    """Min and max of sum(v*y)/sum(v) over every vertex of [w/lam, w*lam]."""
    n = len(y)
    bits = np.array(list(itertools.product((0, 1), repeat=n)), dtype=bool)
    v = np.where(bits, w * lam, w / lam)
    ratio = (v @ y) / v.sum(axis=1)
    return ratio.min(), ratio.max()


def msm_by_enumeration(ds, w, lam):
    y, a = ds.y, ds.treatment
    c, t = a == 0, a == 1
    c_min, c_max = hajek_extremes_by_enumeration(y[c], w.values[c], lam)
    if w.estimand.value == "att":
        mu1 = y[t].mean()
        return mu1 - c_max, mu1 - c_min
    t_min, t_max = hajek_extremes_by_enumeration(y[t], w.values[t], lam)
    return t_min - c_max, t_max - c_min


def orthogonal_perturbations(w, r2, draws, rng):
    """Perturbations eps with mean 0, cov(eps, w) = 0 and var(eps) <= r2/(1-r2) var(w).

    With w* = w + eps these are exactly the weights allowed by the
    variance-based model at R^2 <= r2. Rows mix Gaussian and heavy-tailed
    directions; a third sit on the constraint boundary.
    """
    n = w.shape[0]
    basis = np.column_stack([np.ones(n), w - w.mean()])
    q, _ = np.linalg.qr(basis)
    raw = np.where(rng.random((draws, 1)) < 0.5, rng.normal(size=(draws, n)),
                   rng.standard_t(2, size=(draws, n)))
    eps = raw - (raw @ q) @ q.T
    var = np.mean(eps ** 2, axis=1)
    keep = var > 0
    eps, var = eps[keep], var[keep]
    limit = r2 / (1 - r2) * np.var(w)
    frac = rng.random(eps.shape[0])
    frac[: eps.shape[0] // 3] = 1.0
    return eps * np.sqrt(frac * limit / var)[:, None]


def weighted_effect(ds, values, estimand):
    """Weighted difference written out directly from the definition."""
    y, a = ds.y, ds.treatment
    t, c = a == 1, a == 0
    control = np.sum(values[c] * y[c]) / c.sum()
    if estimand == "att":
        return y[t].mean() - control
    return np.sum(values[t] * y[t]) / t.sum() - control
