"""Command-line front end: ``rmst-tmle estimate | simulate | curves``.

Exit codes: 0 success, 2 invalid input data, 3 numerical failure,
4 malformed configuration (bad flags, model specs or grid files).

Working-model grammar (``--h-spec``, ``--gr-spec``, ``--ga-spec``): terms
joined by ``+``.  ``1`` intercept, ``t`` linear time, ``factor(t)`` one
indicator per time, ``a`` arm, ``a:t``, ``a:factor(t)``, ``wJ`` or a column
name for a covariate, ``a:wJ`` arm interactions, ``W`` for all covariates
and ``saturated(t,a)`` for ``1 + factor(t) + a + a:factor(t)``.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core_data import DataValidationError, Dataset, read_csv
from .curves import DegenerateWeightsError, km_censoring, km_survival
from .estimators import ESTIMATORS, RECOVERABLE, estimate
from .glm import GlmError, SpecError
from .inference import BootstrapError, bootstrap_many, wald_ci
from .sim import (SIM_GA_SPEC, SIM_GR_SPEC, SIM_H_SPEC, DgpConfig,
                  default_jobs, load_fixtures, run_study)
from .tmle import DEFAULT_GA_SPEC, DEFAULT_GR_SPEC, DEFAULT_H_SPEC, TmleConfig

log = logging.getLogger("rmst_tmle")

EXIT_OK, EXIT_DATA, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4

MANIFEST_SCHEMA = "rmst-tmle/manifest/1"
ESTIMATE_SCHEMA = "rmst-tmle/estimate/1"
CURVES_SCHEMA = "rmst-tmle/curves/1"

GRID_KEYS = {"cells", "grid", "estimators", "specs", "replicates"}
CELL_KEYS = {"n", "k", "tau", "scenario", "censoring", "effect", "beta", "alpha0", "alpha1"}
SPEC_KEYS = {"h", "g_R", "g_A"}


class ConfigError(ValueError):
    """A flag, model specification or grid file cannot be used."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def make_manifest(command: list, config: dict, inputs: dict[str, str], seed) -> dict:
    """Run manifest embedded in every report.

    Timing and worker counts are kept out (see :func:`write_run_info`) so
    reports from identical invocations are byte-identical.
    """
    return {
        "schema": MANIFEST_SCHEMA,
        "software": {"name": "rmst-tmle", "version": __version__},
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
    }


def finite_or_null(obj, reasons: dict, path: str = "$"):
    """Replace non-finite floats by None, recording ``path -> reason``."""
    if isinstance(obj, dict):
        return {k: finite_or_null(v, reasons, f"{path}.{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [finite_or_null(v, reasons, f"{path}[{i}]") for i, v in enumerate(obj)]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        reasons.setdefault(path, "non_finite_value")
        return None
    return obj


def dump_json(obj: dict) -> str:
    reasons = dict(obj.pop("null_reasons", {}))
    clean = finite_or_null(obj, reasons)
    clean["null_reasons"] = dict(sorted(reasons.items()))
    return json.dumps(clean, indent=2, allow_nan=False) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_run_info(path: Path, started: float, **extra) -> None:
    info = {"schema": "rmst-tmle/run/1", "wall_seconds": round(time.perf_counter() - started, 3),
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), **extra}
    write_text(path, json.dumps(info, indent=2) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _load(path: str, k: int | None, tau: int) -> Dataset:
    data = read_csv(path, k)
    if tau < 1:
        raise DataValidationError([f"tau must be >=1, got {tau}"])
    if tau > data.k_max:
        raise DataValidationError([f"tau={tau} exceeds K={data.k_max}"])
    return data


# ----------------------------------------------------------------- estimate


def _estimator_names(choice: list[str]) -> tuple[str, ...]:
    names = []
    for c in choice:
        for nm in (ESTIMATORS if c == "all" else (c,)):
            if nm not in names:
                names.append(nm)
    return tuple(nm for nm in ESTIMATORS if nm in names)


def _run_estimators(data: Dataset, names, config: TmleConfig):
    """All requested estimators; a failing one is reported, not fatal."""
    try:
        return estimate(data, names, config), {}
    except SpecError:
        raise
    except RECOVERABLE:
        pass
    results, failures = {}, {}
    for nm in names:
        try:
            results.update(estimate(data, (nm,), config))
        except SpecError:
            raise
        except RECOVERABLE as exc:
            failures[nm] = f"{type(exc).__name__}: {exc}"
    return results, failures


def cmd_estimate(args) -> int:
    started = time.perf_counter()
    data = _load(args.input, args.k, args.tau)
    names = _estimator_names(args.estimator)
    config = TmleConfig(tau=args.tau, h_spec=args.h_spec, g_r_spec=args.gr_spec,
                        g_a_spec=args.ga_spec, max_iter=args.max_iter,
                        allow_unsaturated_censoring=args.allow_unsaturated_censoring)
    # parse the specs up front so a bad term is a configuration error
    config.specs(data.covariate_names, data.p)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results, failures = _run_estimators(data, names, config)
    for w in caught:
        log.warning("%s", w.message)

    reasons: dict[str, str] = {}
    boot = {}
    if args.boot and results:
        ok_names = [nm for nm in names if nm in results]
        try:
            boot = bootstrap_many(data, ok_names, config, B=args.boot, seed=args.seed,
                                  alpha=args.alpha, jobs=args.jobs,
                                  points={nm: results[nm].theta for nm in ok_names})
        except BootstrapError as exc:
            failures["bootstrap"] = str(exc)

    estimates = {}
    for nm in names:
        key = f"$.estimates.{nm}"
        if nm not in results:
            estimates[nm] = {"theta": None, "error": failures[nm]}
            reasons[f"{key}.theta"] = "estimator_failed"
            continue
        res = results[nm]
        entry = res.to_dict()
        ci = {}
        if res.se is not None and math.isfinite(res.se):
            ci["wald_plugin"] = wald_ci(res.theta, res.se, args.alpha).to_dict()
        else:
            ci["wald_plugin"] = None
            reasons[f"{key}.ci.wald_plugin"] = ("no_influence_function" if res.se is None
                                                else "non_finite_se")
            if res.se is None:
                reasons[f"{key}.se"] = "no_influence_function"
        if nm in boot:
            ci.update(boot[nm].to_dict())
        elif args.boot:
            reasons[f"{key}.ci.bootstrap"] = "bootstrap_failed"
        entry["ci"] = ci
        estimates[nm] = entry

    command = ["estimate", Path(args.input).name, "--tau", str(args.tau),
               "--estimator", *names, "--boot", str(args.boot), "--seed", str(args.seed)]
    manifest = make_manifest(
        command,
        {"tau": args.tau, "k": data.k_max, "estimators": list(names), "alpha": args.alpha,
         "h_spec": args.h_spec, "g_r_spec": args.gr_spec, "g_a_spec": args.ga_spec,
         "max_iter": args.max_iter, "boot": args.boot,
         "allow_unsaturated_censoring": args.allow_unsaturated_censoring},
        {Path(args.input).name: sha256_file(args.input)}, args.seed)
    report = {
        "schema": ESTIMATE_SCHEMA,
        "manifest": manifest,
        "data": {"n": data.n, "k": data.k_max, "tau": args.tau,
                 "n_by_arm": {"arm0": int(np.sum(data.a == 0)), "arm1": int(np.sum(data.a == 1))},
                 "covariates": list(data.covariate_names)},
        "estimates": estimates,
        "warnings": sorted({str(w.message) for w in caught}),
        "null_reasons": reasons,
    }
    text = dump_json(report)
    if args.out:
        out = Path(args.out)
        write_text(out, text)
        write_run_info(out.with_name(out.name + ".run.json"), started, jobs=args.jobs)
    else:
        sys.stdout.write(text)
    if failures:
        for nm, msg in failures.items():
            print(f"error: {nm}: {msg}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------------- curves


def curves_table(data: Dataset, tau: int) -> list[tuple[int, float, float, float, float]]:
    """Rows ``(t, S_treat, S_ctrl, G_treat, G_ctrl)`` for ``t = 0..tau-1``."""
    s1, s0 = km_survival(data, 1, tau).values, km_survival(data, 0, tau).values
    g1, g0 = km_censoring(data, 1, tau).values, km_censoring(data, 0, tau).values
    return [(t, float(s1[t]), float(s0[t]), float(g1[t]), float(g0[t])) for t in range(tau)]


def cmd_curves(args) -> int:
    started = time.perf_counter()
    data = _load(args.input, args.k, args.tau)
    lines = ["t,S_treat,S_ctrl,G_treat,G_ctrl"]
    lines += [",".join([str(t), *(_fmt(v) for v in row)]) for t, *row in curves_table(data,
                                                                                        args.tau)]
    text = "\n".join(lines) + "\n"
    manifest = make_manifest(["curves", Path(args.input).name, "--tau", str(args.tau)],
                             {"tau": args.tau, "k": data.k_max},
                             {Path(args.input).name: sha256_file(args.input)}, None)
    if args.out:
        out = Path(args.out)
        write_text(out, text)
        side = {"schema": CURVES_SCHEMA, "manifest": manifest,
                "columns": ["t", "S_treat", "S_ctrl", "G_treat", "G_ctrl"]}
        write_text(out.with_name(out.name + ".manifest.json"), dump_json(side))
        write_run_info(out.with_name(out.name + ".run.json"), started)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------- simulate


def _effect_mu(value) -> float:
    if value in (None, "zero", 0):
        return 0.0
    if value == "positive":
        return float(load_fixtures()["mu"])
    if isinstance(value, (int, float)) and not isinstance(value, bool) and value >= 0:
        return float(value)
    raise ConfigError(f"effect must be 'zero', 'positive' or a number >= 0, got {value!r}")


def _cell(spec: dict) -> DgpConfig:
    if not isinstance(spec, dict):
        raise ConfigError(f"grid cell must be an object, got {spec!r}")
    bad = set(spec) - CELL_KEYS
    if bad:
        raise ConfigError(f"invalid grid key(s): {', '.join(sorted(bad))}")
    kw = {k: v for k, v in spec.items() if k not in ("effect",)}
    if "beta" in kw:
        kw["beta"] = tuple(kw["beta"])
    if "k" in kw and "tau" not in kw:
        kw["tau"] = kw["k"]
    try:
        return DgpConfig(mu=_effect_mu(spec.get("effect")), **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid grid cell {spec!r}: {exc}") from None


def parse_grid(obj) -> tuple[list[DgpConfig], dict]:
    """Cells plus study options from a parsed grid file.

    The file holds either an explicit ``"cells"`` list or a ``"grid"``
    object whose list-valued entries are crossed, plus optional
    ``"estimators"``, ``"specs"`` and ``"replicates"``.
    """
    if not isinstance(obj, dict):
        raise ConfigError("grid file must contain a JSON object")
    bad = set(obj) - GRID_KEYS
    if bad:
        raise ConfigError(f"invalid grid key(s): {', '.join(sorted(bad))}")
    if ("cells" in obj) == ("grid" in obj):
        raise ConfigError("grid file needs exactly one of 'cells' or 'grid'")
    if "cells" in obj:
        if not isinstance(obj["cells"], list) or not obj["cells"]:
            raise ConfigError("'cells' must be a non-empty list")
        cells = [_cell(c) for c in obj["cells"]]
    else:
        g = obj["grid"]
        if not isinstance(g, dict):
            raise ConfigError("'grid' must be an object")
        keys = sorted(g)
        values = [v if isinstance(v, list) else [v] for v in (g[k] for k in keys)]
        cells = [_cell(dict(zip(keys, combo))) for combo in itertools.product(*values)]
    opts: dict = {}
    est = obj.get("estimators", list(ESTIMATORS))
    if not isinstance(est, list) or not est or set(est) - set(ESTIMATORS):
        raise ConfigError(f"'estimators' must be a non-empty subset of {list(ESTIMATORS)}")
    opts["estimators"] = tuple(nm for nm in ESTIMATORS if nm in est)
    specs = obj.get("specs", {})
    if not isinstance(specs, dict) or set(specs) - SPEC_KEYS:
        raise ConfigError(f"'specs' keys must be among {sorted(SPEC_KEYS)}")
    opts["h_spec"] = specs.get("h", SIM_H_SPEC)
    opts["g_r_spec"] = specs.get("g_R", SIM_GR_SPEC)
    opts["g_a_spec"] = specs.get("g_A", SIM_GA_SPEC)
    if "replicates" in obj:
        r = obj["replicates"]
        if not isinstance(r, int) or isinstance(r, bool) or r < 1:
            raise ConfigError("'replicates' must be a positive integer")
        opts["replicates"] = r
    return cells, opts


def _check_specs(cells: list[DgpConfig], opts: dict) -> None:
    names = [f"w{j}" for j in range(1, 6)]
    for cfg in cells:
        TmleConfig(tau=cfg.tau, h_spec=opts["h_spec"], g_r_spec=opts["g_r_spec"],
                   g_a_spec=opts["g_a_spec"]).specs(names, 5)


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    try:
        grid_obj = json.loads(Path(args.grid).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file is not valid JSON: {exc}") from None
    cells, opts = parse_grid(grid_obj)
    _check_specs(cells, opts)
    reps = args.reps if args.reps is not None else opts.get("replicates", 100)
    if reps < 1:
        raise ConfigError("--reps must be >= 1")

    def progress(ci, r):
        log.info("cell %d replicate %d done", ci, r)

    report = run_study(cells, opts["estimators"], reps, args.seed, args.jobs, opts["h_spec"],
                       opts["g_r_spec"], opts["g_a_spec"], progress)
    manifest = make_manifest(
        ["simulate", "--grid", Path(args.grid).name, "--reps", str(reps), "--seed",
         str(args.seed)],
        {"replicates": reps, "estimators": list(opts["estimators"]),
         "specs": {"h": opts["h_spec"], "g_R": opts["g_r_spec"], "g_A": opts["g_a_spec"]},
         "grid": grid_obj},
        {Path(args.grid).name: sha256_file(args.grid)}, args.seed)
    body = report.to_json_dict()
    doc = {"schema": body.pop("schema"), "manifest": manifest, **body}
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix in (".json", ".csv") else out
    write_text(stem.with_name(stem.name + ".json"), dump_json(doc))
    write_text(stem.with_name(stem.name + ".csv"), report.to_csv())
    write_run_info(stem.with_name(stem.name + ".run.json"), started, jobs=args.jobs)
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rmst-tmle",
                     description="RMST differences for two-arm trials with discrete-time "
                                 "right-censored outcomes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p):
        p.add_argument("input", help="CSV with columns id, arm, time, event, covariates...")
        p.add_argument("--tau", type=int, required=True, help="RMST horizon")
        p.add_argument("--k", type=int, default=None, help="last follow-up time (default max time)")
        p.add_argument("--out", default=None, help="output path (default stdout)")

    est = sub.add_parser("estimate", help="estimate the RMST difference")
    data_args(est)
    est.add_argument("--estimator", nargs="+", default=["all"],
                     choices=[*ESTIMATORS, "all"])
    est.add_argument("--h-spec", default=DEFAULT_H_SPEC, help="event-hazard model")
    est.add_argument("--gr-spec", default=DEFAULT_GR_SPEC, help="censoring-hazard model")
    est.add_argument("--ga-spec", default=DEFAULT_GA_SPEC, help="treatment model")
    est.add_argument("--allow-unsaturated-censoring", action="store_true")
    est.add_argument("--max-iter", type=int, default=50, help="TMLE iteration cap")
    est.add_argument("--boot", type=int, default=0, metavar="B",
                     help="bootstrap replicates (0 = none)")
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--jobs", type=int, default=default_jobs())
    est.set_defaults(func=cmd_estimate)

    cur = sub.add_parser("curves", help="per-arm Kaplan-Meier survival and censoring curves")
    data_args(cur)
    cur.set_defaults(func=cmd_curves)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--grid", required=True, help="JSON grid file")
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--jobs", type=int, default=default_jobs())
    sim.add_argument("--out", default="simreport", help="output stem for .json and .csv")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DataValidationError as exc:
        for line in exc.errors:
            print(f"invalid data: {line}", file=sys.stderr)
        return EXIT_DATA
    except (SpecError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GlmError, DegenerateWeightsError, BootstrapError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
