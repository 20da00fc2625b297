import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosweight.amplification import (BenchmarkEntry, amplify_lambda, amplify_r2, benchmark,
                                     benchmark_entry, benchmark_plot_data, compose_r2,
                                     write_plot_csv)
from cosweight.data import CosDataset
from cosweight.exceptions import ConfigError
from cosweight.weights import WeightPipeline, WeightSet

from conftest import make_dataset


@settings(max_examples=100, deadline=None)
@given(total=st.floats(1.0, 1e6), grid=st.integers(1, 60))
def test_lambda_curve_identity(total, grid):
    curve = amplify_lambda(total, grid)
    for v, u in curve.points:
        assert abs(v * u - total) <= 1e-12 * total
        assert v >= 1 and u >= 1 - 1e-12


@settings(max_examples=100, deadline=None)
@given(total=st.floats(0.0, 0.999999), grid=st.integers(1, 60))
def test_r2_curve_identity(total, grid):
    curve = amplify_r2(total, grid)
    for v, u in curve.points:
        assert abs(1 - (1 - v) * (1 - u) - total) <= 1e-12
        assert 0 <= v <= total and 0 <= u <= total


def test_lambda_curve_contains_symmetric_split():
    curve = amplify_lambda(4.0, 10)
    assert (2.0, 2.0) in curve.points
    assert curve.points[0] == (1.0, 4.0) and curve.points[-1] == (4.0, 1.0)


def test_curve_input_validation():
    with pytest.raises(ConfigError):
        amplify_lambda(0.5)
    with pytest.raises(ConfigError):
        amplify_r2(1.0)
    assert amplify_r2(0.0).points == ((0.0, 0.0),)


def test_compose_r2():
    assert compose_r2(0.2, 0.5) == pytest.approx(0.6)


def test_benchmark_entry_formulas():
    a = np.array([1, 0, 0, 0, 0])
    full = WeightSet("att", [1, 0.5, 1.5, 1.0, 1.0], a, True)
    red = WeightSet("att", [1, 0.75, 1.25, 1.0, 1.0], a, True)
    e = benchmark_entry(full, red, (("x", "unit"),))
    # var(full|A=0) = 0.125, var(red|A=0) = 0.03125 -> R2_hat = 0.75, R2_b = 0.75 / 1.75
    assert e.r2_raw == pytest.approx(0.75)
    assert e.r2_b == pytest.approx(0.75 / 1.75)
    assert e.lambda_b == pytest.approx(1.5)


def duplicated_column_dataset():
    base = make_dataset(np.random.default_rng(42), m1=12, m0=18, size=(10, 20), confound=0.4)
    x = np.column_stack([base.x, base.x[:, 0]])
    return CosDataset(unit_ids=base.unit_ids, cluster_index=base.cluster_index, x=x, y=base.y,
                      cluster_ids=base.cluster_ids, a=base.a, k=base.k,
                      x_names=("x0", "x1", "x0_copy"), k_names=base.k_names)


def test_benchmark_null_on_duplicate_column():
    ds = duplicated_column_dataset()
    pipe = WeightPipeline(ridge=1e-4)
    (entry,) = benchmark(ds, pipe.fit(ds), [["x0_copy"]], pipe)
    assert entry.r2_b < 0.01 and entry.lambda_b < 1.05


def test_benchmark_real_covariate_is_detected():
    ds = duplicated_column_dataset()
    pipe = WeightPipeline(ridge=1e-4)
    (entry,) = benchmark(ds, pipe.fit(ds), [["k0"]], pipe)
    assert entry.omitted == (("k0", "cluster"),)
    assert entry.lambda_b > 1.05


def test_benchmark_failures_and_validation(toy):
    pipe = WeightPipeline()
    w = pipe.fit(toy)
    with pytest.raises(ConfigError, match="unknown"):
        benchmark(toy, w, [["nope"]], pipe)
    (empty,) = benchmark(toy, w, [[]], pipe)
    assert (empty.r2_b, empty.lambda_b) == (0.0, 1.0)


def test_plot_rows(tmp_path):
    entries = [BenchmarkEntry((("k", "cluster"),), 0.1, 1.2),
               BenchmarkEntry((("x", "unit"),), 0.2, 1.3),
               BenchmarkEntry((("k", "cluster"), ("x", "unit")), 0.05, 1.1),
               BenchmarkEntry((("z", "unit"),), None, None, refit_converged=False)]
    rows = benchmark_plot_data(entries, 0.3, grid_size=5)
    bench = [r for r in rows if r["kind"] == "benchmark"]
    assert [(r["r2_v"], r["r2_u"]) for r in bench] == [(0.1, 0.0), (0.0, 0.2), (0.05, 0.05)]
    assert sum(r["kind"] == "frontier" for r in rows) == 5
    write_plot_csv(rows, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "kind,label,r2_v,r2_u" and len(lines) == len(rows) + 1
    assert math.isclose(float(lines[-1].split(",")[2]), 0.05)
