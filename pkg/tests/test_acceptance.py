"""Acceptance criteria at their pinned tolerances.

Each test prints one ``[PASS]`` or ``[FAIL]`` line; the lines are repeated in
the pytest terminal summary. Run directly with ``python tests/test_acceptance.py``.
"""

import json
import time

import numpy as np
import pytest

from cosweight.amplification import amplify_lambda, amplify_r2, benchmark
from cosweight.cli import run as cli_run
from cosweight.data import CosDataset, write_dataset
from cosweight.decomposition import bias_decomposition, nested_weight_triple
from cosweight.estimation import point_estimate
from cosweight.exceptions import CosError
from cosweight.sensitivity import msm_bounds, vbm_bounds, vbm_threshold
from cosweight.simulation import DgpConfig, run_sim1, run_sim2
from cosweight.weights import WeightPipeline

from conftest import make_dataset, record_acceptance
from oracles import msm_by_enumeration, orthogonal_perturbations, random_instance

ESTIMANDS = ("att", "ato", "ate")


def test_msm_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        ds, w = random_instance(rng, ESTIMANDS[i % 3], max_group=12)
        lam = float(rng.choice([1.0, rng.uniform(1, 1.5), rng.uniform(1, 10)]))
        res = msm_bounds(ds, w, lam)
        lo, hi = msm_by_enumeration(ds, w, lam)
        worst = max(worst, abs(res.lower - lo), abs(res.upper - hi))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 60
    record_acceptance("MSM oracle equivalence", ok,
                      f"200 instances, max |diff| = {worst:.2e} (tol 1e-10), {elapsed:.1f}s")
    assert ok


def test_msm_degeneracy():
    rng = np.random.default_rng(102)
    worst = 0.0
    for i in range(100):
        ds, w = random_instance(rng, ESTIMANDS[i % 3], max_group=40)
        res = msm_bounds(ds, w, 1.0)
        worst = max(worst, abs(res.lower - res.tau_hat), abs(res.upper - res.tau_hat))
    ok = worst <= 1e-12
    record_acceptance("MSM degeneracy at lambda = 1", ok,
                      f"100 instances, max |bound - tau_hat| = {worst:.2e} (tol 1e-12)")
    assert ok


def _perturbed_effects(ds, w, r2, draws, rng):
    y, a = ds.y, ds.treatment
    t, c = a == 1, a == 0
    eps_c = orthogonal_perturbations(w.values[c], r2, draws, rng)
    control = (w.values[c] + eps_c) @ y[c] / c.sum()
    if w.estimand.value == "att":
        return y[t].mean() - control
    eps_t = orthogonal_perturbations(w.values[t], r2, eps_c.shape[0], rng)[: eps_c.shape[0]]
    eps_c = eps_c[: eps_t.shape[0]]
    control = (w.values[c] + eps_c) @ y[c] / c.sum()
    return (w.values[t] + eps_t) @ y[t] / t.sum() - control


def test_vbm_dominance():
    rng = np.random.default_rng(103)
    start = time.perf_counter()
    violations = 0
    checked = 0
    tightest = 0.0
    for i in range(50):
        ds, w = random_instance(rng, ("att", "ato")[i % 2], max_group=40, min_group=4)
        est = point_estimate(ds, w)
        for r2 in (0.1, 0.3, 0.5):
            res = vbm_bounds(est, r2)
            taus = _perturbed_effects(ds, w, r2, 10_000, rng)
            tol = 1e-9 * (1.0 + abs(est.tau_hat) + res.bias_bound)
            violations += int(np.sum((taus < res.lower - tol) | (taus > res.upper + tol)))
            checked += taus.size
            if res.bias_bound > 0:
                tightest = max(tightest, float(np.max(np.abs(taus - est.tau_hat))) / res.bias_bound)
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 120
    record_acceptance("VBM dominance", ok,
                      f"{violations} violations in {checked} perturbations; largest |bias|/bound"
                      f" = {tightest:.3f}; {elapsed:.1f}s")
    assert ok


def test_vbm_threshold_round_trip():
    rng = np.random.default_rng(104)
    worst = 0.0
    unbounded = 0
    # arms of 5+ units; with 2 units cor(w, y) = +-1 and the bound is identically 0
    for i in range(100):
        ds, w = random_instance(rng, ("att", "ato")[i % 2], max_group=40, min_group=5)
        est = point_estimate(ds, w)
        thr = vbm_threshold(est)
        if thr.unbounded:
            unbounded += 1
            continue
        res = vbm_bounds(est, thr.value)
        worst = max(worst, min(abs(res.lower), abs(res.upper)))
    ok = worst <= 1e-9 and unbounded == 0
    record_acceptance("VBM threshold round trip", ok,
                      f"100 instances, max |nearest endpoint| = {worst:.2e} (tol 1e-9), "
                      f"{unbounded} unbounded")
    assert ok


def _cov(u, v):
    return float(np.mean((u - u.mean()) * (v - v.mean())))


def test_bias_decomposition_identity():
    worst = {"att": 0.0, "ato": 0.0}
    failures = 0
    for i in range(100):
        ds = make_dataset(np.random.default_rng(1000 + i), m1=10, m0=14, size=(6, 14),
                          confound=0.5)
        for estimand in ("att", "ato"):
            try:
                t = nested_weight_triple(ds, ["k1"], ["x1"], estimand)
                rep = bias_decomposition(t, ds)
            except CosError:
                failures += 1
                continue
            for arm in t.estimand.weighted_arms:
                m = ds.treatment == arm
                direct = _cov(t.w_reduced[m] - t.w_full[m], ds.y[m])
                worst[estimand] = max(worst[estimand], abs(rep.arms[arm].bias - direct))
    ok = failures == 0 and max(worst.values()) <= 1e-8
    record_acceptance("Bias decomposition identity", ok,
                      f"100 nested triples; max |assembled - direct| ATT {worst['att']:.2e}, "
                      f"ATO per arm {worst['ato']:.2e} (tol 1e-8); {failures} fit failures")
    assert ok


def test_amplification_identities():
    worst_lam = worst_r2 = 0.0
    for grid in (1, 2, 5, 21, 50):
        for total in np.geomspace(1.0, 1e4, 40):
            pts = np.array(amplify_lambda(float(total), grid).points)
            worst_lam = max(worst_lam, float(np.max(np.abs(pts[:, 0] * pts[:, 1] / total - 1))))
        for total in np.linspace(0.0, 0.999, 40):
            pts = np.array(amplify_r2(float(total), grid).points)
            comp = 1 - (1 - pts[:, 0]) * (1 - pts[:, 1])
            worst_r2 = max(worst_r2, float(np.max(np.abs(comp - total))))
    ok = worst_lam <= 1e-12 and worst_r2 <= 1e-12
    record_acceptance("Amplification identities", ok,
                      f"max relative |lam_V lam_U - lam| = {worst_lam:.2e}, "
                      f"max |composed R2 - R2| = {worst_r2:.2e} (tol 1e-12)")
    assert ok


def test_benchmark_null():
    base = make_dataset(np.random.default_rng(42), m1=12, m0=18, size=(10, 20), confound=0.4)
    ds = CosDataset(unit_ids=base.unit_ids, cluster_index=base.cluster_index,
                    x=np.column_stack([base.x, base.x[:, 0]]), y=base.y,
                    cluster_ids=base.cluster_ids, a=base.a, k=base.k,
                    x_names=("x0", "x1", "x0_copy"), k_names=base.k_names)
    pipe = WeightPipeline(ridge=1e-4)
    (entry,) = benchmark(ds, pipe.fit(ds), [["x0_copy"]], pipe)
    ok = entry.r2_b < 0.01 and entry.lambda_b < 1.05
    record_acceptance("Benchmark null on a duplicated covariate", ok,
                      f"r2_b = {entry.r2_b:.2e} (< 0.01), lambda_b = {entry.lambda_b:.6f} (< 1.05)")
    assert ok


def _coverage(report, c, mis, model, reps):
    rows = [r for r in report.records if r["overlap_c"] == c and r["misspecification"] == mis
            and r["model"] == model]
    # failed replicates count as not covered
    return sum(r["covered"] for r in rows) / reps, float(np.mean([r["length"] for r in rows]))


def test_simulation_study_1():
    reps = 200
    start = time.perf_counter()
    rep = run_sim1(DgpConfig(seed=0), reps)
    elapsed = time.perf_counter() - start
    ok = True
    cells = []
    for c in (1.0, 5.0, 10.0):
        for mis in ("omit_unit", "omit_cluster"):
            msm_cov, msm_len = _coverage(rep, c, mis, "msm", reps)
            vbm_cov, vbm_len = _coverage(rep, c, mis, "vbm", reps)
            exempt = mis == "omit_unit" and c == 10.0
            cell_ok = msm_cov >= 0.98 and (exempt or vbm_cov >= 0.90) and vbm_len < msm_len
            ok &= cell_ok
            cells.append(f"c={c:g} {mis}: MSM {msm_cov:.3f} VBM {vbm_cov:.3f}"
                         f"{' (exempt)' if exempt else ''} len ratio {vbm_len / msm_len:.3f}")
    msm_rows = [r for r in rep.records if r["model"] == "msm"]
    inf_share = np.mean([np.isinf(r["lambda_oracle"]) for r in msm_rows])
    record_acceptance("Simulation 1 coverage and length", ok,
                      f"{reps} reps, {len(rep.failures)} failed, {elapsed:.0f}s; " + "; ".join(cells)
                      + f"; oracle lambda infinite in {inf_share:.1%} of fits")
    assert ok


@pytest.mark.slow
def test_simulation_study_2():
    reps, B = 100, 200
    start = time.perf_counter()
    rep = run_sim2(DgpConfig(seed=0, overlap_c=10.0), reps, B)
    elapsed = time.perf_counter() - start
    cov = {(mis, model): _coverage(rep, 10.0, mis, model, reps)[0]
           for mis in ("omit_unit", "omit_cluster") for model in ("msm", "vbm")}
    ok = (cov[("omit_unit", "vbm")] >= 0.95 and cov[("omit_unit", "msm")] >= 0.98
          and cov[("omit_cluster", "msm")] >= 0.98)
    detail = ", ".join(f"{mis} {model} {v:.3f}" for (mis, model), v in cov.items())
    record_acceptance("Simulation 2 bootstrap coverage", ok,
                      f"{reps} reps, B={B}, c=10, {len(rep.failures)} failed, {elapsed:.0f}s; "
                      f"{detail} (omit_cluster VBM reported only)")
    assert ok


CLI_COMMANDS = [
    ["load-check"],
    ["balance"],
    ["estimate", "--estimand", "ato"],
    ["decompose", "--v", "k1", "--u", "x1"],
    ["sensitivity", "--model", "msm", "--grid", "1:3:0.5", "--threshold", "--emit-plot"],
    ["sensitivity", "--model", "vbm", "--grid", "0:0.5:0.1", "--threshold"],
    ["amplify", "--model", "vbm"],
    ["benchmark", "--omit", "x0", "--omit", "k0,x1", "--emit-plot"],
    ["bootstrap", "--B", "50", "--statistic", "msm_upper:1.5"],
]


def _cli_outputs(root, out):
    data = ["--data", str(root / "data.csv"), "--schema", str(root / "schema.json"),
            "--out", str(out), "--quiet", "--seed", "11"]
    files = {}
    for argv in CLI_COMMANDS:
        if cli_run(argv + data) != 0:
            raise AssertionError(f"command failed: {argv}")
        files.update({(argv[0], argv[-1], p.name): p.read_bytes() for p in out.iterdir()})
    if cli_run(["simulate", "--study", "1", "--reps", "3", "--c", "5", "--out", str(out),
                "--quiet", "--seed", "11"]) != 0:
        raise AssertionError("simulate failed")
    files.update({("simulate", p.name): p.read_bytes() for p in out.iterdir()})
    return files


def test_cli_determinism(tmp_path):
    ds = make_dataset(np.random.default_rng(8), m1=8, m0=12, size=(6, 12), confound=0.3)
    schema = write_dataset(ds, tmp_path / "data.csv")
    (tmp_path / "schema.json").write_text(json.dumps(schema.to_dict()))
    first = _cli_outputs(tmp_path, tmp_path / "run1")
    second = _cli_outputs(tmp_path, tmp_path / "run2")
    differing = sorted(str(k) for k in first if first[k] != second.get(k))
    ok = first.keys() == second.keys() and not differing
    record_acceptance("CLI determinism", ok,
                      f"{len(first)} report files over {len(CLI_COMMANDS) + 1} commands, "
                      f"{len(differing)} differ")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
