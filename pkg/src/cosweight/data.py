"""Clustered observational datasets: container, CSV ingestion and balance."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import ConfigError, ParseError, SchemaError, StructuralError


class UnitRecord(NamedTuple):
    unit_id: str
    cluster_id: str
    x: tuple
    y: float


class ClusterRecord(NamedTuple):
    cluster_id: str
    a: int
    k: tuple
    n_units: int


@dataclass(frozen=True)
class SchemaConfig:
    """Column roles for a unit-level CSV.

    ``cluster_file`` optionally points at a companion CSV holding one row per
    cluster with the cluster id, treatment and cluster covariates.
    """

    unit_id: str
    cluster_id: str
    outcome: str
    treatment: str
    unit_covariates: tuple = ()
    cluster_covariates: tuple = ()
    treatment_level: str = "cluster"
    cluster_file: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "unit_covariates", tuple(self.unit_covariates))
        object.__setattr__(self, "cluster_covariates", tuple(self.cluster_covariates))
        if self.treatment_level != "cluster":
            raise ConfigError("treatment_level must be 'cluster'")
        roles = [self.unit_id, self.cluster_id, self.outcome, self.treatment,
                 *self.unit_covariates, *self.cluster_covariates]
        dupes = sorted({r for r in roles if roles.count(r) > 1})
        if dupes:
            raise ConfigError(f"column roles overlap: {', '.join(dupes)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaConfig":
        known = {"unit_id", "cluster_id", "outcome", "treatment", "unit_covariates",
                 "cluster_covariates", "treatment_level", "cluster_file"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown schema keys: {', '.join(sorted(unknown))}")
        missing = {"unit_id", "cluster_id", "outcome", "treatment"} - set(d)
        if missing:
            raise ConfigError(f"schema missing keys: {', '.join(sorted(missing))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SchemaConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = {
            "unit_id": self.unit_id,
            "cluster_id": self.cluster_id,
            "outcome": self.outcome,
            "treatment": self.treatment,
            "unit_covariates": list(self.unit_covariates),
            "cluster_covariates": list(self.cluster_covariates),
            "treatment_level": self.treatment_level,
        }
        if self.cluster_file is not None:
            d["cluster_file"] = self.cluster_file
        return d


def _as_matrix(values, rows: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == rows:
        return arr.copy()
    if arr.size == 0:
        return np.empty((rows, 0))
    return arr.reshape(rows, -1).copy()


@dataclass(frozen=True, eq=False)
class CosDataset:
    """Units nested in clusters with cluster-level treatment.

    Arrays are stored unit-major for units (``x``, ``y``, ``cluster_index``)
    and cluster-major for clusters (``a``, ``k``). Construction validates the
    structure; arrays are made read-only so the object can be shared freely.
    """

    unit_ids: np.ndarray
    cluster_index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cluster_ids: np.ndarray
    a: np.ndarray
    k: np.ndarray
    x_names: tuple = ()
    k_names: tuple = ()
    n_units: np.ndarray = field(init=False)

    def __post_init__(self):
        unit_ids = np.array(self.unit_ids, dtype=object).reshape(-1)
        cluster_ids = np.array(self.cluster_ids, dtype=object).reshape(-1)
        cluster_index = np.array(self.cluster_index, dtype=np.intp).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        x = _as_matrix(self.x, n)
        a = np.array(self.a).reshape(-1)
        if a.size and not np.isin(a, (0, 1)).all():
            raise StructuralError("cluster treatment must be 0 or 1")
        a = a.astype(np.int8)
        m = a.shape[0]
        k = _as_matrix(self.k, m)
        x_names = tuple(self.x_names) or tuple(f"x{j}" for j in range(x.shape[1]))
        k_names = tuple(self.k_names) or tuple(f"k{j}" for j in range(k.shape[1]))

        if unit_ids.shape != (n,) or cluster_index.shape != (n,):
            raise StructuralError("unit arrays have inconsistent lengths")
        if cluster_ids.shape != (m,):
            raise StructuralError("cluster arrays have inconsistent lengths")
        if len(x_names) != x.shape[1] or len(k_names) != k.shape[1]:
            raise StructuralError("covariate names do not match covariate dimensions")
        if n and (cluster_index.min() < 0 or cluster_index.max() >= m):
            raise StructuralError("unit references a cluster that does not exist")
        if not (np.isfinite(y).all() and np.isfinite(x).all() and np.isfinite(k).all()):
            raise StructuralError("missing or non-finite values are not allowed")
        n_units = np.bincount(cluster_index, minlength=m)
        if (n_units == 0).any():
            empty = cluster_ids[n_units == 0][0]
            raise StructuralError(f"cluster {empty} has no units")
        if not (a == 1).any():
            raise StructuralError("no treated cluster")
        if not (a == 0).any():
            raise StructuralError("no control cluster")

        for arr in (unit_ids, cluster_ids, cluster_index, y, x, a, k, n_units):
            arr.setflags(write=False)
        for name, val in [("unit_ids", unit_ids), ("cluster_ids", cluster_ids),
                          ("cluster_index", cluster_index), ("y", y), ("x", x), ("a", a),
                          ("k", k), ("x_names", x_names), ("k_names", k_names),
                          ("n_units", n_units)]:
            object.__setattr__(self, name, val)

    # counts -----------------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def m(self) -> int:
        return int(self.a.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def d_k(self) -> int:
        return int(self.k.shape[1])

    @property
    def n1(self) -> int:
        return int(self.n_units[self.a == 1].sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    # unit-level views ---------------------------------------------------------
    @property
    def treatment(self) -> np.ndarray:
        """Treatment of each unit's cluster."""
        return self.a[self.cluster_index]

    @property
    def k_units(self) -> np.ndarray:
        """Cluster covariates expanded to one row per unit."""
        return self.k[self.cluster_index]

    @property
    def covariate_names(self) -> list:
        return [(nm, "unit") for nm in self.x_names] + [(nm, "cluster") for nm in self.k_names]

    def units(self) -> Iterator[UnitRecord]:
        for i in range(self.n):
            yield UnitRecord(self.unit_ids[i], self.cluster_ids[self.cluster_index[i]],
                             tuple(self.x[i]), float(self.y[i]))

    def clusters(self) -> Iterator[ClusterRecord]:
        for j in range(self.m):
            yield ClusterRecord(self.cluster_ids[j], int(self.a[j]), tuple(self.k[j]),
                                int(self.n_units[j]))

    def equals(self, other: "CosDataset") -> bool:
        return (
            self.x_names == other.x_names
            and self.k_names == other.k_names
            and np.array_equal(self.unit_ids.astype(str), other.unit_ids.astype(str))
            and np.array_equal(self.cluster_ids.astype(str), other.cluster_ids.astype(str))
            and np.array_equal(self.cluster_index, other.cluster_index)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.k, other.k)
        )

    def drop_covariates(self, names: Sequence[str]) -> "CosDataset":
        """Copy of the dataset without the named unit or cluster covariates."""
        names = set(names)
        unknown = names - set(self.x_names) - set(self.k_names)
        if unknown:
            raise ConfigError(f"unknown covariates: {', '.join(sorted(unknown))}")
        xk = [j for j, nm in enumerate(self.x_names) if nm not in names]
        kk = [j for j, nm in enumerate(self.k_names) if nm not in names]
        return CosDataset(
            unit_ids=self.unit_ids, cluster_index=self.cluster_index, x=self.x[:, xk],
            y=self.y, cluster_ids=self.cluster_ids, a=self.a, k=self.k[:, kk],
            x_names=tuple(self.x_names[j] for j in xk),
            k_names=tuple(self.k_names[j] for j in kk),
        )

    def with_outcome(self, y) -> "CosDataset":
        return CosDataset(
            unit_ids=self.unit_ids, cluster_index=self.cluster_index, x=self.x, y=y,
            cluster_ids=self.cluster_ids, a=self.a, k=self.k,
            x_names=self.x_names, k_names=self.k_names,
        )


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"row {row}: column {column!r} has non-numeric value {value!r}") from None
    if not math.isfinite(out):
        raise ParseError(f"row {row}: column {column!r} has non-finite value {value!r}")
    return out


def _parse_treatment(value: str, column: str, row: int) -> int:
    v = _parse_float(value, column, row)
    if v not in (0.0, 1.0):
        raise ParseError(f"row {row}: treatment column {column!r} must be 0 or 1, got {value!r}")
    return int(v)


def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise StructuralError(f"{path} has no header row") from None


def _require(frame: pd.DataFrame, columns, path) -> None:
    for col in columns:
        if col not in frame.columns:
            raise SchemaError(f"column {col!r} not found in {path}")


def load_dataset(csv_source, schema: SchemaConfig, cluster_source=None) -> CosDataset:
    """Read a unit-level CSV into a validated :class:`CosDataset`.

    Cluster treatment and covariates are read from the unit rows unless a
    companion cluster CSV is given (argument or ``schema.cluster_file``). When
    both carry a column they are cross-checked. Row order is preserved and
    clusters are ordered by first appearance.
    """
    units = _read_csv(csv_source)
    if cluster_source is None and schema.cluster_file is not None:
        cluster_source = Path(schema.cluster_file)
        if not cluster_source.is_absolute():
            cluster_source = Path(csv_source).parent / cluster_source
    clusters = _read_csv(cluster_source) if cluster_source is not None else None

    _require(units, [schema.unit_id, schema.cluster_id, schema.outcome, *schema.unit_covariates],
             csv_source)
    cluster_cols = [schema.treatment, *schema.cluster_covariates]
    if clusters is None:
        _require(units, cluster_cols, csv_source)
    else:
        _require(clusters, [schema.cluster_id, *cluster_cols], cluster_source)

    n = len(units)
    # header is line 1, so data row r sits on line r + 2
    unit_ids = units[schema.unit_id].to_numpy(dtype=object)
    cid_col = units[schema.cluster_id].to_numpy(dtype=object)
    y = np.array([_parse_float(v, schema.outcome, r + 2)
                  for r, v in enumerate(units[schema.outcome])], dtype=float)
    x = np.empty((n, len(schema.unit_covariates)))
    for j, col in enumerate(schema.unit_covariates):
        x[:, j] = [_parse_float(v, col, r + 2) for r, v in enumerate(units[col])]
    if len(set(unit_ids)) != n:
        raise StructuralError("unit ids are not unique")

    order: dict = {}
    for cid in cid_col:
        order.setdefault(cid, len(order))
    cluster_index = np.array([order[c] for c in cid_col], dtype=np.intp)
    cluster_ids = np.array(list(order), dtype=object)
    m = len(order)
    a = np.full(m, -1, dtype=int)
    k = np.full((m, len(schema.cluster_covariates)), np.nan)

    def _assign(j, values, row, source):
        av = _parse_treatment(values[0], schema.treatment, row)
        kv = [_parse_float(v, c, row) for v, c in zip(values[1:], schema.cluster_covariates)]
        if a[j] == -1:
            a[j] = av
            k[j] = kv
            return
        if a[j] != av:
            raise StructuralError(
                f"cluster {cluster_ids[j]}: treatment differs across rows ({source} row {row})")
        for c, old, new in zip(schema.cluster_covariates, k[j], kv):
            if old != new:
                raise StructuralError(
                    f"cluster {cluster_ids[j]}: covariate {c!r} differs across rows "
                    f"({source} row {row})")

    if clusters is not None:
        seen = set()
        for r, row in enumerate(clusters[[schema.cluster_id, *cluster_cols]].itertuples(index=False)):
            cid = row[0]
            if cid in seen:
                raise StructuralError(f"cluster {cid} listed twice in cluster file")
            seen.add(cid)
            if cid in order:
                _assign(order[cid], row[1:], r + 2, "cluster file")
        missing = [c for c in cluster_ids if c not in seen]
        if missing:
            raise StructuralError(f"cluster {missing[0]} missing from cluster file")
    present = [c for c in cluster_cols if c in units.columns]
    if clusters is None or present == cluster_cols:
        # per-unit copies; cross-checked against the cluster file when both exist
        for r, row in enumerate(units[cluster_cols].itertuples(index=False)):
            _assign(cluster_index[r], row, r + 2, "unit file")
    elif present:
        for col in present:
            pos = cluster_cols.index(col)
            for r, v in enumerate(units[col]):
                j = cluster_index[r]
                if pos == 0:
                    ok = _parse_treatment(v, col, r + 2) == a[j]
                else:
                    ok = _parse_float(v, col, r + 2) == k[j, pos - 1]
                if not ok:
                    raise StructuralError(
                        f"cluster {cluster_ids[j]}: column {col!r} disagrees with cluster file "
                        f"(unit file row {r + 2})")

    if m == 0:
        raise StructuralError("no treated cluster")
    return CosDataset(
        unit_ids=unit_ids, cluster_index=cluster_index, x=x, y=y, cluster_ids=cluster_ids,
        a=a, k=k, x_names=schema.unit_covariates, k_names=schema.cluster_covariates,
    )


def write_dataset(ds: CosDataset, path, schema: Optional[SchemaConfig] = None) -> SchemaConfig:
    """Write ``ds`` as a unit-level CSV with cluster columns repeated per row.

    Floats are written with ``repr`` so :func:`load_dataset` reproduces them
    bit for bit. Returns the matching schema.
    """
    if schema is None:
        schema = SchemaConfig(unit_id="unit_id", cluster_id="cluster_id", outcome="y",
                              treatment="a", unit_covariates=ds.x_names,
                              cluster_covariates=ds.k_names)
    header = [schema.unit_id, schema.cluster_id, schema.outcome, schema.treatment,
              *schema.unit_covariates, *schema.cluster_covariates]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            j = ds.cluster_index[i]
            writer.writerow([ds.unit_ids[i], ds.cluster_ids[j], repr(float(ds.y[i])), int(ds.a[j]),
                             *(repr(float(v)) for v in ds.x[i]),
                             *(repr(float(v)) for v in ds.k[j])])
    return schema


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    level: str
    std_diff: float
    degenerate: bool = False


def _weighted_mean(v, w):
    return float(np.sum(w * v) / np.sum(w))


def standardized_differences(ds: CosDataset, w=None) -> list:
    """Standardized mean differences for every unit and cluster covariate.

    The numerator is the (weighted) treated mean minus the (weighted) control
    mean; the denominator is always the unweighted pooled SD,
    ``sqrt((s1^2 + s0^2) / 2)`` with sample variances, so that pre- and
    post-weighting values share a scale. Cluster covariates are expanded to
    unit level first. Covariates with zero pooled SD are reported as 0 and
    flagged as degenerate.
    """
    a = ds.treatment
    if w is None:
        weights = np.ones(ds.n)
    else:
        weights = np.asarray(getattr(w, "values", w), dtype=float)
        if weights.shape != (ds.n,):
            raise ConfigError("weights do not match dataset")
    t, c = a == 1, a == 0
    cols = np.hstack([ds.x, ds.k_units])
    rows = []
    for j, (name, level) in enumerate(ds.covariate_names):
        v = cols[:, j]
        s1 = v[t].var(ddof=1) if t.sum() > 1 else 0.0
        s0 = v[c].var(ddof=1) if c.sum() > 1 else 0.0
        sd = math.sqrt((s1 + s0) / 2.0)
        if sd <= 1e-12 * max(1.0, float(np.abs(v).max())):
            rows.append(BalanceRow(name, level, 0.0, True))
            continue
        diff = _weighted_mean(v[t], weights[t]) - _weighted_mean(v[c], weights[c])
        rows.append(BalanceRow(name, level, diff / sd, False))
    return rows


def write_balance_table(ds: CosDataset, w, path) -> list:
    """Write the (covariate, level, unweighted, weighted) balance CSV."""
    before = standardized_differences(ds)
    after = standardized_differences(ds, w)
    rows = [{"covariate": b.covariate, "level": b.level,
             "std_diff_unweighted": b.std_diff, "std_diff_weighted": aft.std_diff}
            for b, aft in zip(before, after)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["covariate", "level", "std_diff_unweighted",
                                                "std_diff_weighted"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "std_diff_unweighted": repr(r["std_diff_unweighted"]),
                             "std_diff_weighted": repr(r["std_diff_weighted"])})
    return rows
