"""Command-line entry point.

Every subcommand writes ``<out>/<command>.json`` (plus CSV plot data where
relevant) and echoes the JSON to stdout unless ``--quiet``. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .amplification import (amplify_lambda, amplify_r2, benchmark, benchmark_plot_data,
                            write_plot_csv)
from .bootstrap import BootstrapSpec, Statistic, block_bootstrap
from .data import SchemaConfig, load_dataset, standardized_differences, write_balance_table
from .decomposition import bias_decomposition, nested_weight_triple
from .estimation import point_estimate
from .exceptions import ConfigError, CosError, UnsupportedEstimandError
from .sensitivity import msm_threshold, sensitivity_grid, vbm_threshold
from .simulation import DgpConfig, run_sim1, run_sim2
from .weights import Estimand, WeightPipeline, load_external_weights


COMMANDS = ("load-check", "balance", "estimate", "decompose", "sensitivity", "amplify",
            "benchmark", "bootstrap", "simulate")


# -- serialization --------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def _encode(obj, indent: int = 0) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return '"nan"'
        if math.isinf(obj):
            return '"inf"' if obj > 0 else '"-inf"'
        text = format(obj, ".17g")
        return text if any(ch in text for ch in ".en") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted(obj.items())
        return "{\n" + ",\n".join(f"{inner}{json.dumps(k)}: {_encode(v, indent + 1)}"
                                  for k, v in items) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    return _encode(_plain(obj)) + "\n"


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


class Warnings:
    """Ordered, de-duplicated warnings gathered from logging, ``warnings`` and flags."""

    def __init__(self):
        self._items = []

    def add(self, msg: str) -> None:
        if msg not in self._items:
            self._items.append(msg)

    def extend(self, msgs) -> None:
        for m in msgs:
            self.add(str(m))

    def list(self) -> list:
        return list(self._items)


# -- argument parsing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--config", help="JSON file with option defaults (keys are option names)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--out", help="output directory (default: current directory)")
    g.add_argument("--quiet", action="store_true", default=None, help="do not echo reports")


def _data_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data and weights")
    g.add_argument("--data", help="unit-level CSV")
    g.add_argument("--schema", help="schema JSON")
    g.add_argument("--cluster-data", help="optional cluster-level CSV")
    g.add_argument("--conditioning", choices=("cud", "cod"))
    g.add_argument("--estimand", choices=("att", "ato", "ate"))
    g.add_argument("--weights",
                   help="propensity | balancing | stable | external:<path> (default propensity)")
    g.add_argument("--ridge", type=float, help="ridge penalty for the propensity model")
    g.add_argument("--penalty", type=float,
                   help="imbalance penalty for balancing and stable weights (default 0)")


DEFAULTS = {
    "seed": 0, "out": ".", "quiet": False, "conditioning": "cud", "estimand": "att",
    "weights": "propensity", "ridge": 0.0, "penalty": 0.0, "model": None, "grid_size": 21,
    "B": None, "level": 0.95, "statistic": "estimate", "study": 1, "reps": 200,
    "threshold": False, "emit_plot": False,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosweight",
        description="Weighting estimators and sensitivity analysis for clustered "
                    "observational studies.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_, data=True):
        p = sub.add_parser(name, help=help_, description=help_)
        _common(p)
        if data:
            _data_opts(p)
        return p

    add("load-check", "load and validate a dataset, report counts")
    add("balance", "standardized differences before and after weighting")
    add("estimate", "weighted point estimate and group moments")

    p = add("decompose", "cluster/unit bias decomposition from nested weight fits")
    p.add_argument("--v", action="append", default=None, metavar="NAME",
                   help="covariate standing in for an omitted cluster-level confounder")
    p.add_argument("--u", action="append", default=None, metavar="NAME",
                   help="covariate standing in for an omitted unit-level confounder")

    p = add("sensitivity", "MSM or VBM bounds and robustness thresholds")
    p.add_argument("--model", choices=("msm", "vbm"))
    p.add_argument("--param", action="append", type=float, default=None,
                   help="lambda (MSM) or R^2 (VBM); repeatable")
    p.add_argument("--grid", help="start:stop:step parameter grid (inclusive)")
    p.add_argument("--threshold", action="store_true", default=None)
    p.add_argument("--emit-plot", action="store_true", default=None,
                   help="write sensitivity_<model>.csv")

    p = add("amplify", "split a sensitivity parameter into cluster and unit parts", data=True)
    p.add_argument("--model", choices=("msm", "vbm"))
    p.add_argument("--total", type=float,
                   help="parameter to split (default: robustness threshold of the data)")
    p.add_argument("--grid-size", type=int)

    p = add("benchmark", "refit weights with observed covariates omitted")
    p.add_argument("--omit", action="append", default=None, metavar="A[,B...]",
                   help="comma-separated covariate subset to omit; repeatable")
    p.add_argument("--emit-plot", action="store_true", default=None,
                   help="write benchmark_plot.csv against the VBM threshold frontier")
    p.add_argument("--grid-size", type=int)

    p = add("bootstrap", "cluster bootstrap percentile interval")
    p.add_argument("--B", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--statistic", help="estimate | msm_lower:L | msm_upper:L | vbm_lower:R2 | "
                                       "vbm_upper:R2")

    p = add("simulate", "coverage studies on the synthetic clustered DGP", data=False)
    p.add_argument("--study", type=int, choices=(1, 2))
    p.add_argument("--reps", type=int)
    p.add_argument("--c", action="append", type=float, default=None,
                   help="overlap level; repeatable (study 2 uses the first, default 10)")
    p.add_argument("--B", type=int, help="bootstrap replicates for study 2 (default 200)")
    return parser


def _resolve(ns: argparse.Namespace) -> dict:
    """Merge defaults < config file < command line."""
    opts = dict(DEFAULTS)
    if ns.config:
        path = Path(ns.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in cfg.items():
            opts[k.replace("-", "_")] = v
    for k, v in vars(ns).items():
        if v is not None:
            opts[k] = v
    return opts


# -- stages --------------------------------------------------------------------------

def _path(opts, key, required=True) -> Optional[Path]:
    v = opts.get(key)
    if v is None:
        if required:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
        return None
    p = Path(v)
    if not p.is_file():
        raise ConfigError(f"{key.replace('_', '-')} file not found: {p}")
    return p


def _validate_weights(opts) -> str:
    src = str(opts["weights"])
    kind = src.split(":", 1)[0]
    if kind not in ("propensity", "balancing", "stable", "external"):
        raise ConfigError(f"unknown weight source {src!r}")
    estimand = Estimand(opts["estimand"])
    if kind in ("balancing", "stable") and estimand is not Estimand.ATT:
        raise UnsupportedEstimandError(
            f"{kind} weights support only the ATT; use propensity weights for {estimand.name}")
    if kind == "external":
        path = Path(src.split(":", 1)[1]) if ":" in src else None
        if path is None or not path.is_file():
            raise ConfigError(f"external weights file not found: {path}")
    return kind


def _pipeline(opts) -> WeightPipeline:
    kind = str(opts["weights"]).split(":", 1)[0]
    if kind == "external":
        raise ConfigError("external weights cannot be refit; use propensity, balancing or stable")
    return WeightPipeline(estimand=opts["estimand"], conditioning=opts["conditioning"],
                          source=kind, ridge=float(opts["ridge"]),
                          balance_penalty=float(opts["penalty"]))


def _load(opts):
    data = _path(opts, "data")
    schema = SchemaConfig.from_json(_path(opts, "schema"))
    return load_dataset(data, schema, _path(opts, "cluster_data", required=False))


def _weights(opts, ds, warn: Warnings):
    src = str(opts["weights"])
    if src.startswith("external:"):
        w = load_external_weights(src.split(":", 1)[1], ds, opts["estimand"])
    else:
        w = _pipeline(opts).fit(ds)
    warn.extend(f"weights: {f}" for f in w.flags)
    return w


def _estimate(opts, ds, w, warn: Warnings):
    est = point_estimate(ds, w, opts["conditioning"])
    warn.extend(f"estimate: {f}" for f in est.flags)
    return est


def _parse_grid(text: str) -> list:
    try:
        a, b, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"grid must be start:stop:step, got {text!r}") from None
    if step <= 0 or b < a:
        raise ConfigError("grid needs step > 0 and stop >= start")
    n = int(math.floor((b - a) / step + 1e-9))
    return [a + i * step for i in range(n + 1)]


def cmd_load_check(opts, warn):
    ds = _load(opts)
    return {"n": ds.n, "m": ds.m, "n1": ds.n1, "n0": ds.n0, "d_x": ds.d_x, "d_k": ds.d_k,
            "unit_covariates": list(ds.x_names), "cluster_covariates": list(ds.k_names),
            "treated_clusters": int(ds.a.sum()), "control_clusters": int(ds.m - ds.a.sum())}


def cmd_balance(opts, warn):
    ds = _load(opts)
    w = _weights(opts, ds, warn)
    out = Path(opts["out"])
    rows = write_balance_table(ds, w, out / "balance.csv")
    raw = standardized_differences(ds)
    for r in raw:
        if r.degenerate:
            warn.add(f"balance: covariate {r.covariate} has zero pooled standard deviation")
    return {"rows": rows, "table": str(Path("balance.csv"))}


def cmd_estimate(opts, warn):
    ds = _load(opts)
    w = _weights(opts, ds, warn)
    return _estimate(opts, ds, w, warn).to_dict()


def cmd_decompose(opts, warn):
    v, u = opts.get("v") or [], opts.get("u") or []
    if not v and not u:
        raise ConfigError("decompose needs at least one --v or --u covariate")
    ds = _load(opts)
    triple = nested_weight_triple(ds, v, u, opts["estimand"], opts["conditioning"],
                                  float(opts["ridge"]))
    rep = bias_decomposition(triple, ds)
    warn.extend(f"decompose: {f}" for f in rep.flags)
    out = rep.to_dict()
    out.update({"v": list(v), "u": list(u)})
    return out


def cmd_sensitivity(opts, warn):
    model = opts["model"]
    params = list(opts.get("param") or [])
    if opts.get("grid"):
        params += _parse_grid(opts["grid"])
    if not params and not opts["threshold"]:
        raise ConfigError("sensitivity needs --param, --grid or --threshold")
    if model == "vbm" and Estimand(opts["estimand"]) is Estimand.ATE:
        raise UnsupportedEstimandError("the VBM bound is defined for the ATT and ATO only")
    ds = _load(opts)
    w = _weights(opts, ds, warn)
    est = _estimate(opts, ds, w, warn)
    rows = sensitivity_grid(ds, w, model, params, est)
    result = {"model": model, "tau_hat": est.tau_hat, "estimand": est.estimand.value,
              "bounds": rows}
    if opts["threshold"]:
        th = msm_threshold(ds, w) if model == "msm" else vbm_threshold(est)
        if th.unbounded:
            warn.add(f"sensitivity: {model} threshold unbounded")
        result["threshold"] = th.to_dict()
    if opts["emit_plot"]:
        write_plot_csv(rows, Path(opts["out"]) / f"sensitivity_{model}.csv")
        result["plot"] = f"sensitivity_{model}.csv"
    return result


def cmd_amplify(opts, warn):
    model = opts["model"]
    total = opts.get("total")
    if total is None:
        ds = _load(opts)
        w = _weights(opts, ds, warn)
        if model == "msm":
            th = msm_threshold(ds, w)
        else:
            th = vbm_threshold(_estimate(opts, ds, w, warn))
        if th.unbounded:
            raise ConfigError("threshold is unbounded; pass --total")
        total = th.value
    curve = amplify_lambda(float(total), int(opts["grid_size"])) if model == "msm" else \
        amplify_r2(float(total), int(opts["grid_size"]))
    rows = [{"component_v": v, "component_u": u} for v, u in curve.points]
    write_plot_csv(rows, Path(opts["out"]) / f"amplify_{model}.csv")
    return {"model": model, "total": curve.total, "points": rows,
            "max_residual": float(curve.residuals().max()), "plot": f"amplify_{model}.csv"}


def cmd_benchmark(opts, warn):
    subsets = [[s.strip() for s in o.split(",") if s.strip()] for o in (opts.get("omit") or [])]
    if not subsets:
        raise ConfigError("benchmark needs at least one --omit subset")
    ds = _load(opts)
    pipe = _pipeline(opts)
    base = pipe.fit(ds)
    warn.extend(f"weights: {f}" for f in base.flags)
    entries = benchmark(ds, base, subsets, pipe)
    for e in entries:
        label = "+".join(n for n, _ in e.omitted)
        warn.extend(f"benchmark {label}: {f}" for f in e.flags)
    result = {"entries": [e.to_dict() for e in entries]}
    if opts["emit_plot"]:
        est = _estimate(opts, ds, base, warn)
        th = vbm_threshold(est)
        rows = benchmark_plot_data(entries, th.value, int(opts["grid_size"]))
        write_plot_csv(rows, Path(opts["out"]) / "benchmark_plot.csv")
        result.update({"threshold_r2": th.value, "plot": "benchmark_plot.csv"})
    return result


def cmd_bootstrap(opts, warn):
    stat = Statistic.parse(str(opts["statistic"]))
    spec = BootstrapSpec(B=int(opts["B"] or 1000), level=float(opts["level"]), seed=int(opts["seed"]),
                         statistic=stat)
    ds = _load(opts)
    pipe = _pipeline(opts)
    w = pipe.fit(ds)
    point = stat(ds, w)
    ci = block_bootstrap(ds, spec, pipe)
    if ci.failures:
        warn.add(f"bootstrap: {ci.failures} of {spec.B} replicates failed")
    out = ci.to_dict()
    out.update({"statistic": stat.label, "point": point, "B": spec.B, "level": spec.level})
    return out


def cmd_simulate(opts, warn):
    study = int(opts["study"])
    reps = int(opts["reps"])
    seed = int(opts["seed"])
    out = Path(opts["out"])
    if study == 1:
        cs = tuple(opts.get("c") or (1.0, 5.0, 10.0))
        rep = run_sim1(DgpConfig(seed=seed), reps, c_values=cs)
    else:
        c = float((opts.get("c") or [10.0])[0])
        B = int(opts["B"] or 200)
        rep = run_sim2(DgpConfig(seed=seed, overlap_c=c), reps, B)
    for f in rep.failures:
        warn.add(f"simulate: replicate {f['replicate']} (c={f['overlap_c']}) failed: {f['error']}")
    rep.write_records(out / f"simulate_study{study}_records.csv")
    result = rep.summary()
    result["records"] = f"simulate_study{study}_records.csv"
    return result


HANDLERS = {
    "load-check": cmd_load_check, "balance": cmd_balance, "estimate": cmd_estimate,
    "decompose": cmd_decompose, "sensitivity": cmd_sensitivity, "amplify": cmd_amplify,
    "benchmark": cmd_benchmark, "bootstrap": cmd_bootstrap, "simulate": cmd_simulate,
}


def _early_checks(command: str, opts) -> None:
    if command != "simulate":
        try:
            Estimand(opts["estimand"])
        except ValueError:
            raise ConfigError(f"unknown estimand {opts['estimand']!r}") from None
        _validate_weights(opts)
    if command in ("sensitivity", "amplify") and opts.get("model") is None:
        raise ConfigError(f"{command} needs --model msm|vbm")
    if command in ("benchmark", "bootstrap") and str(opts["weights"]).startswith("external"):
        raise ConfigError(f"{command} refits weights; external weights cannot be used")


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    try:
        opts = _resolve(ns)
        _early_checks(command, opts)
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
    except CosError as exc:
        print(f"cosweight: error [config]: {exc}", file=sys.stderr)
        return exc.exit_code

    warn = Warnings()
    collector = _Collector()
    root = logging.getLogger("cosweight")
    root.addHandler(collector)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = HANDLERS[command](opts, warn)
        for m in collector.messages:
            warn.add(m)
        for c in caught:
            warn.add(f"{c.category.__name__}: {c.message}")
    except CosError as exc:
        print(f"cosweight: error [{command}]: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        root.removeHandler(collector)

    report = {"command": command, "version": __version__, "seed": int(opts["seed"]),
              "result": result, "warnings": warn.list()}
    text = dumps(report)
    (out / f"{command}.json").write_text(text, encoding="utf-8")
    if not opts["quiet"]:
        sys.stdout.write(text)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
