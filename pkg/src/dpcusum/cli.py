"""Command-line interface: ``dpcusum <command> [flags]``.

Every command writes one JSON document
``{spec_version, manifest, config, plan, results}``. Exit codes: 0 success,
2 usage error, 3 data/model error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import secrets
import sys
from pathlib import Path

from . import audit as audit_mod
from . import bounds as bounds_mod
from . import mc
from .data import MultiStreamSeries, fit_manifest, load_fitted, read_matrix
from .engine import DetectorConfig, run
from .errors import DataError, ModelError, NumericalError, PreconditionError
from .model import global_sensitivity
from .noise import RngHandle
from .presets import PRESETS, load_preset
from .scenario import ChangeScenario

SPEC_VERSION = "1"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
# flags that must not influence results, so they are left out of the command echo
_ECHO_EXCLUDED = {"--jobs", "--output", "-o", "--csv-dir"}


class UsageError(Exception):
    pass


# -- argument types ---------------------------------------------------------------


def positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be positive and finite, got {text}")
    return v


def finite_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be finite, got {text}")
    return v


def tau_value(text):
    if text.lower() in ("inf", "infinity", "none"):
        return math.inf
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be an integer or 'inf', got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("tau must be >= 0")
    return v


# -- manifest and output --------------------------------------------------------------


def build_id():
    """SHA-1 over the package's source files, in name order."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc)
    return t.isoformat(timespec="seconds")


def command_echo(argv):
    out = []
    skip = False
    for tok in argv:
        if skip:
            skip = False
            continue
        name = tok.split("=", 1)[0]
        if name in _ECHO_EXCLUDED:
            skip = "=" not in tok
            continue
        out.append(tok)
    return out


def resolve_seed(seed):
    if seed is not None:
        return int(seed), "flag"
    env = os.environ.get("DPSEQ_SEED")
    if env is not None:
        try:
            return int(env), "env"
        except ValueError:
            raise UsageError(f"DPSEQ_SEED must be an integer, got {env!r}") from None
    return secrets.randbits(63), "entropy"


def run_manifest(argv, seed, seed_source, started):
    return {
        "spec_version": SPEC_VERSION,
        "command": command_echo(argv),
        "master_seed": seed,
        "seed_source": seed_source,
        "timestamps": {"started": started, "finished": _timestamp()},
        "build_id": build_id(),
    }


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(doc, indent=2):
    return json.dumps(doc, indent=indent, sort_keys=False, default=_json_default, allow_nan=False)


def _finite_or_none(x):
    return x if x is None or math.isfinite(x) else None


def emit(doc, output, stdout):
    text = dumps(doc) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        stdout.write(text)


# -- shared option groups ----------------------------------------------------------------


def add_model_args(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--models", help="model configuration JSON (e.g. output of `fit`)")
    p.add_argument("--trunc", type=positive_float, help="override the truncation level of the Gaussian preset")


def add_privacy_args(p, multi=False):
    if multi:
        p.add_argument("--epsilon", type=positive_float, nargs="+", default=[])
        p.add_argument("--no-noise", action="store_true", help="include the non-private baseline")
    else:
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--epsilon", type=positive_float)
        g.add_argument("--no-noise", action="store_true", help="zero noise (non-private SUM-CUSUM)")


def add_run_args(p, trials_default=10_000):
    p.add_argument("--trials", type=positive_int, default=trials_default)
    p.add_argument("--horizon", type=positive_int, default=10**6)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=positive_int, default=mc.default_jobs())
    p.add_argument("-o", "--output", help="write the JSON report here instead of stdout")


def load_models(args):
    if args.preset:
        return tuple(load_preset(args.preset, args.trunc))
    if args.trunc is not None:
        raise UsageError("--trunc applies to presets only")
    try:
        with open(args.models) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {args.models}: {exc}") from exc
    return load_fitted(doc).models


def make_config(models, epsilon, threshold, horizon=10**6):
    if epsilon is None:
        return DetectorConfig.nonprivate(models, threshold, horizon)
    return DetectorConfig.private(models, epsilon, threshold, horizon)


def parse_affected(text, K):
    if text is None or text == "all":
        return frozenset(range(K))
    try:
        idx = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--affected must be 'all' or comma-separated 1-based stream numbers, got {text!r}") from None
    if not idx:
        raise UsageError("--affected is empty; a change needs at least one stream")
    bad = [i for i in idx if not 1 <= i <= K]
    if bad:
        raise UsageError(f"--affected streams {bad} out of range 1..{K}")
    return frozenset(i - 1 for i in idx)


def _models_echo(models):
    return {"K": len(models), "delta_max": global_sensitivity(models), "streams": [m.to_dict() for m in models]}


# -- commands ------------------------------------------------------------------------------


def cmd_simulate(args, ctx):
    models = load_models(args)
    eps = None if args.no_noise else args.epsilon
    plan = mc.TrialPlan(args.trials, args.horizon, ctx["seed"])
    results = []
    if args.gamma is not None:
        cal = mc.calibrate_threshold(make_config(models, eps, 0.0, args.horizon), args.gamma, plan, args.jobs)
        threshold = cal.threshold
        results.append({"kind": "calibration", **cal.to_dict()})
    else:
        threshold = args.threshold
    cfg = make_config(models, eps, threshold, args.horizon)
    if args.tau != math.inf and args.tau != 0:
        raise UsageError("only an immediate change (--tau 0) is supported for delay estimation")
    if args.mode in ("both", "arl"):
        rep = mc.estimate_arl(cfg, plan, args.jobs, cap=args.arl_cap)
        results.append({"kind": "arl", "threshold": threshold, **rep.to_dict()})
    if args.mode in ("both", "delay") and args.tau == 0:
        scenario = ChangeScenario.immediate(parse_affected(args.affected, len(models)))
        rep = mc.estimate_delay(cfg, plan, scenario, args.jobs)
        results.append({"kind": "delay", "threshold": threshold, "affected": sorted(k + 1 for k in scenario.affected), **rep.to_dict()})
    return {"config": {"epsilon": eps, "threshold": threshold, "models": _models_echo(models)}, "plan": plan.to_dict(), "results": results}


def _curve_label(eps):
    return "nonprivate" if eps is None else f"eps{eps:g}"


def cmd_curve(args, ctx):
    models = load_models(args)
    grid = mc.geometric_grid(args.b_min, args.b_max, args.b_steps)
    levels = [e for e in args.epsilon] + ([None] if args.no_noise else [])
    if not levels:
        raise UsageError("give at least one --epsilon or --no-noise")
    plan = mc.TrialPlan(args.trials, args.horizon, ctx["seed"])
    scenario = ChangeScenario.immediate(parse_affected(args.affected, len(models)))
    results = []
    csv_dir = Path(args.csv_dir) if args.csv_dir else (Path(args.output).parent if args.output else None)
    for eps in levels:
        cfg = make_config(models, eps, grid[0], args.horizon)
        points = mc.sweep_curve(cfg, grid, plan, scenario, args.jobs, args.arl_cap, args.arl_stop)
        entry = {"label": _curve_label(eps), "epsilon": eps, "points": [p.to_dict() for p in points]}
        if csv_dir is not None:
            csv_dir.mkdir(parents=True, exist_ok=True)
            path = csv_dir / f"curve_{_curve_label(eps)}.csv"
            mc.write_curve_csv(points, path)
            entry["csv"] = path.name
        results.append(entry)
    return {
        "config": {"thresholds": grid, "affected": sorted(k + 1 for k in scenario.affected), "models": _models_echo(models)},
        "plan": plan.to_dict(),
        "results": results,
    }


def cmd_calibrate(args, ctx):
    models = load_models(args)
    eps = None if args.no_noise else args.epsilon
    plan = mc.TrialPlan(args.trials, args.horizon, ctx["seed"])
    cal = mc.calibrate_threshold(make_config(models, eps, 0.0, args.horizon), args.gamma, plan, args.jobs)
    return {"config": {"epsilon": eps, "gamma": args.gamma, "models": _models_echo(models)}, "plan": plan.to_dict(), "results": [cal.to_dict()]}


def cmd_bounds(args, ctx):
    K, delta, itot = args.k, args.delta_max, args.itot
    if args.preset or args.models:
        models = load_models(args)
        K = K or len(models)
        delta = delta or global_sensitivity(models)
        itot = itot or math.fsum(m.drift_info for m in models)
    missing = [n for n, v in (("--k", K), ("--delta-max", delta), ("--itot", itot)) if v is None]
    if missing:
        raise UsageError(f"missing {', '.join(missing)} (or give --preset/--models)")
    rec = bounds_mod.bounds_record(K, args.epsilon, delta, args.threshold, itot, args.gamma)
    rec = {k: (_finite_or_none(v) if isinstance(v, float) else v) for k, v in rec.items()}
    cfg = {"K": K, "epsilon": args.epsilon, "delta_max": delta, "threshold": args.threshold, "I_tot": itot, "gamma": args.gamma}
    return {"config": cfg, "plan": None, "results": [rec]}


def cmd_fit(args, ctx):
    trunc = "auto" if args.trunc in (None, "auto") else positive_float(args.trunc)
    fitted = fit_manifest(args.manifest, args.retain, trunc, args.info_fraction)
    doc = fitted.to_config()
    info = [{"stream_id": m.stream_id, "kl_info": m.kl_info, "truncated_info": list(m.truncated_info)} for m in fitted.models]
    return {"config": {"manifest": os.path.basename(args.manifest), "retain": args.retain, "trunc_level": fitted.trunc_level}, "plan": None, "results": [{"info": info}], "models": doc}


def _read_detect_input(args, fitted):
    if args.input and args.input != "-":
        header, mat = read_matrix(args.input)
    else:
        header, mat = read_matrix(sys.stdin)
    dims = [tr.raw_dim if tr is not None else m.dim for m, tr in zip(fitted.models, fitted.transforms)]
    if mat.shape[1] != sum(dims):
        raise DataError(f"input has {mat.shape[1]} columns; the models expect {sum(dims)} (streams' raw features side by side)")
    cols, off = [], 0
    for d in dims:
        cols.append(mat[:, off:off + d])
        off += d
    raw = MultiStreamSeries(tuple(cols), tuple(m.stream_id or str(k) for k, m in enumerate(fitted.models)))
    return fitted.apply(raw)


def cmd_detect(args, ctx):
    try:
        with open(args.models) as fh:
            fitted = load_fitted(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {args.models}: {exc}") from exc
    series = _read_detect_input(args, fitted)
    eps = None if args.no_noise else args.epsilon
    cfg = make_config(fitted.models, eps, args.threshold, horizon=series.T)
    out = run(cfg, series.rows(), RngHandle(ctx["seed"], 0, "detect:noise"))
    return {
        "alarm": out.alarm,
        "stop_time": out.stop_time if out.alarm else None,
        "rows": series.T,
        "epsilon": eps,
        "threshold": args.threshold,
    }


def cmd_audit(args, ctx):
    models = load_models(args)
    rng = RngHandle(ctx["seed"], 0, f"audit:{args.mode}")
    eps = args.epsilon
    cfg = make_config(models, eps, args.threshold)
    if args.mode == "sensitivity":
        rep = audit_mod.sensitivity_check(cfg, args.pairs, args.length, rng)
        return {"config": {"epsilon": eps, "models": _models_echo(models)}, "plan": {"n_pairs": args.pairs, "T": args.length}, "results": [rep.to_dict()]}
    if not args.input or not args.edit:
        raise UsageError("ratio mode needs --input (tiny series CSV) and --edit t0,k0,value")
    _, mat = read_matrix(args.input)
    if mat.shape[1] != sum(m.dim for m in models):
        raise DataError("ratio input must hold the streams' observations side by side")
    cols, off = [], 0
    for m in models:
        cols.append(mat[:, off:off + m.dim])
        off += m.dim
    series = MultiStreamSeries(tuple(cols))
    try:
        t0, k0, *value = [v.strip() for v in args.edit.split(",")]
        edit = audit_mod.NeighborEdit(int(t0), int(k0), [float(v) for v in value])
    except ValueError:
        raise UsageError(f"--edit must be t0,k0,value[,value...] (0-based), got {args.edit!r}") from None
    rep = audit_mod.empirical_privacy_ratio(cfg, series, edit, args.runs, rng)
    return {"config": {"epsilon": eps, "threshold": args.threshold, "models": _models_echo(models)}, "plan": {"n_runs": args.runs}, "results": [rep.to_dict()]}


# -- parser --------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="dpcusum", description="Differentially private multi-stream CUSUM detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo ARL and delay at one threshold")
    add_model_args(p)
    add_privacy_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--threshold", type=finite_float)
    g.add_argument("--gamma", type=positive_float, help="calibrate the threshold to this ARL first")
    p.add_argument("--tau", type=tau_value, default=0, help="0 (immediate change) or inf (ARL only)")
    p.add_argument("--affected", default="all", help="'all' or 1-based stream numbers, e.g. 1,3")
    p.add_argument("--mode", choices=("both", "arl", "delay"), default="both")
    p.add_argument("--arl-cap", type=positive_float, help="stop ARL trials once the estimate is certified above this")
    add_run_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("curve", help="delay-ARL tradeoff curves on a geometric threshold grid")
    add_model_args(p)
    add_privacy_args(p, multi=True)
    p.add_argument("--b-min", type=positive_float, required=True)
    p.add_argument("--b-max", type=positive_float, required=True)
    p.add_argument("--b-steps", type=positive_int, required=True)
    p.add_argument("--affected", default="all")
    p.add_argument("--arl-cap", type=positive_float)
    p.add_argument("--arl-stop", type=positive_float, help="skip ARL runs at larger b once an estimate exceeds this")
    p.add_argument("--csv-dir", help="directory for one CSV per curve")
    add_run_args(p)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("calibrate", help="find the threshold with a target ARL")
    add_model_args(p)
    add_privacy_args(p)
    p.add_argument("--gamma", type=positive_float, required=True)
    add_run_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bounds", help="closed-form ARL and delay bounds")
    add_model_args(p, required=False)
    p.add_argument("--k", type=positive_int)
    p.add_argument("--epsilon", type=positive_float, required=True)
    p.add_argument("--delta-max", type=positive_float)
    p.add_argument("--threshold", type=finite_float, required=True)
    p.add_argument("--itot", type=positive_float)
    p.add_argument("--gamma", type=positive_float, default=5000.0, help="target ARL for the asymptotic threshold")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("fit", help="fit truncated Gaussian stream models from a data manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--retain", type=positive_int, default=5)
    p.add_argument("--trunc", default="auto", help="truncation level or 'auto'")
    p.add_argument("--info-fraction", type=positive_float, default=0.5)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="run the detector over a CSV stream (stdin by default)")
    p.add_argument("--models", required=True)
    add_privacy_args(p)
    p.add_argument("--threshold", type=finite_float, required=True)
    p.add_argument("--input", help="CSV file; '-' or omitted reads stdin")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("audit", help="sensitivity certification or advisory privacy-ratio audit")
    p.add_argument("--mode", choices=("sensitivity", "ratio"), required=True)
    add_model_args(p)
    p.add_argument("--epsilon", type=positive_float, required=True)
    p.add_argument("--threshold", type=finite_float, default=0.0)
    p.add_argument("--pairs", type=positive_int, default=1000)
    p.add_argument("--length", type=positive_int, default=50, help="series length T for sensitivity mode")
    p.add_argument("--runs", type=positive_int, default=200_000)
    p.add_argument("--input")
    p.add_argument("--edit")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None, stdout=None, stderr=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    started = _timestamp()
    try:
        seed, source = resolve_seed(getattr(args, "seed", None))
        body = args.func(args, {"seed": seed})
        manifest = run_manifest(argv, seed, source, started)
        if args.command == "detect":
            text = dumps({"manifest": manifest, **body}, indent=None) + "\n"
            if args.output:
                Path(args.output).write_text(text)
            else:
                stdout.write(text)
            return EXIT_OK
        doc = {"spec_version": SPEC_VERSION, "manifest": manifest, **body}
        emit(doc, getattr(args, "output", None), stdout)
        return EXIT_OK
    except (UsageError, PreconditionError) as exc:
        stderr.write(f"dpcusum {args.command}: usage error: {exc}\n")
        return EXIT_USAGE
    except (DataError, ModelError) as exc:
        stderr.write(f"dpcusum {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        stderr.write(f"dpcusum {args.command}: numerical error: {exc}\n")
        return EXIT_NUMERICAL


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
