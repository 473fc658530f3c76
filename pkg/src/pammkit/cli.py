"""Command line interface.

Subcommands mirror the library: ``as-ped`` transforms survival data into a
PED bundle, ``simulate`` draws survival times from a hazard expression,
``fit`` estimates a model from a bundle, ``predict``/``cumu-coef``/
``lag-lead`` turn a fitted model into plot-ready CSV tables, and ``info``
summarizes a bundle or model file.

Exit codes: 0 on success, 1 on user errors (bad flags, malformed files,
unknown columns; the message names the offender), 2 on internal errors.
Every output file is written atomically, so interrupted runs leave no
truncated artifacts.  Numeric kernels are pinned to one thread so results
do not depend on ``--threads``, which only caps coarse-grained workers.
"""

import argparse
import json
import os
import sys

from .errors import PammError

__all__ = ["build_parser", "dispatch", "main"]


class UsageError(Exception):
    """Bad command line or config input; reported as a user error."""


def _to_int(value, flag: str) -> int:
    try:
        return int(str(value))
    except ValueError:
        raise UsageError(f"{flag} expects an integer, got {value!r}")


def _to_float(value, flag: str) -> float:
    try:
        return float(str(value))
    except ValueError:
        raise UsageError(f"{flag} expects a number, got {value!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_range(text: str, flag: str):
    """Parse ``a:b:step`` into a grid, inclusive of ``b`` when it fits.

    ``b`` is included when (b - a) is an integer multiple of step within
    1e-9, so ``0:1000:200`` ends exactly at 1000.
    """
    import numpy as np

    parts = str(text).split(":")
    if len(parts) != 3:
        raise UsageError(f"{flag} expects a:b:step, got {text!r}")
    try:
        a, b, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"{flag} expects numeric a:b:step, got {text!r}")
    if step <= 0:
        raise UsageError(f"{flag} needs a positive step, got {step}")
    if b < a:
        raise UsageError(f"{flag} needs b >= a, got {text!r}")
    multiples = (b - a) / step
    n = round(multiples)
    if abs((b - a) - n * step) <= 1e-9:
        return np.linspace(a, b, int(n) + 1)
    return a + step * np.arange(int(multiples) + 1)


def _parse_value_list(text: str, flag: str):
    import numpy as np

    try:
        values = [float(p) for p in str(text).split(",") if p.strip() != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers")
    if not values:
        raise UsageError(f"{flag} must name at least one value")
    return np.asarray(values)


def _grid_from(ns: dict, range_flag: str, list_flag: str, required=True):
    range_key = range_flag.lstrip("-").replace("-", "_")
    list_key = list_flag.lstrip("-").replace("-", "_")
    if ns.get(range_key) is not None and ns.get(list_key) is not None:
        raise UsageError(f"{range_flag} and {list_flag} are exclusive")
    if ns.get(range_key) is not None:
        return _parse_range(ns[range_key], range_flag)
    if ns.get(list_key) is not None:
        return _parse_value_list(ns[list_key], list_flag)
    if required:
        raise UsageError(f"one of {range_flag} or {list_flag} is required")
    return None


def _require(ns: dict, key: str, flag: str):
    if ns.get(key) is None:
        raise UsageError(f"{flag} is required")
    return ns[key]


def _read_csv(path: str, flag: str):
    import pandas as pd

    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file {path!r}")
    return pd.read_csv(path)


def _write_csv(frame, path: str):
    from .ped import _atomic_write_text

    _atomic_write_text(path, frame.to_csv(index=False))


def _merge_config(ns: argparse.Namespace) -> dict:
    """Fill unset flags from the JSON config file; explicit flags win."""
    merged = dict(vars(ns))
    path = merged.pop("config", None)
    if path is None:
        return merged
    if not os.path.isfile(path):
        raise UsageError(f"--config: no such file {path!r}")
    with open(path, encoding="utf-8") as fh:
        try:
            loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {path!r} is not valid JSON: {exc}")
    if not isinstance(loaded, dict):
        raise UsageError(f"--config {path!r} must hold a JSON object")
    for key, value in loaded.items():
        attr = str(key).replace("-", "_")
        if attr not in merged and attr + "_" in merged:
            attr += "_"  # flags shadowing Python keywords, e.g. lambda
        if attr not in merged or attr == "handler":
            raise UsageError(f"--config: unknown option {key!r}")
        if merged[attr] is None:
            merged[attr] = value
    return merged


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_as_ped(ns: dict) -> int:
    from .ped import to_ped, write_ped_bundle

    data = _read_csv(_require(ns, "data", "--data"), "--data")
    formula = _require(ns, "formula", "--formula")
    cut = _grid_from(ns, "--cut", "--cut-list", required=False)
    tdc = [_read_csv(p, "--tdc") for p in ns["tdc"]] if ns.get("tdc") else None
    max_time = (
        _to_float(ns["max_time"], "--max-time")
        if ns.get("max_time") is not None
        else None
    )
    out = _require(ns, "out", "--out")

    ped = to_ped(data, formula, cut=cut, tdc=tdc, max_time=max_time)
    write_ped_bundle(ped, out)
    print(f"wrote PED bundle to {out} ({len(ped.data)} rows, "
          f"{len(ped.cuts) - 1} intervals)")
    return 0


def _parse_tdc_process(text: str):
    head, sep, tail = str(text).partition(":")
    if head != "ar2" or not sep:
        raise UsageError(
            f"--tdc-process expects ar2:<phi1>,<phi2>, got {text!r}"
        )
    parts = tail.split(",")
    if len(parts) != 2:
        raise UsageError(
            f"--tdc-process expects two coefficients, got {text!r}"
        )
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise UsageError(f"--tdc-process coefficients must be numbers")


def _cmd_simulate(ns: dict) -> int:
    import pandas as pd

    from .simulate import add_tdc, sim_pexp

    hazard = _require(ns, "hazard", "--hazard")
    seed = _to_int(_require(ns, "seed", "--seed"), "--seed")
    cuts = _grid_from(ns, "--cut", "--cut-list")
    out = _require(ns, "out", "--out")

    if ns.get("data") is not None:
        if ns.get("n") is not None:
            raise UsageError("--n and --data are exclusive")
        data = _read_csv(ns["data"], "--data")
    else:
        n = _to_int(_require(ns, "n", "--n"), "--n")
        if n < 1:
            raise UsageError(f"--n must be positive, got {n}")
        data = pd.DataFrame({"id": range(1, n + 1)})

    tdc = None
    if ns.get("tdc_grid") is not None:
        grid = _parse_range(ns["tdc_grid"], "--tdc-grid")
        ar = (
            _parse_tdc_process(ns["tdc_process"])
            if ns.get("tdc_process") is not None
            else (0.8, -0.1)
        )
        tdc = add_tdc(data, grid, seed=seed, ar=ar)
    elif ns.get("tdc_process") is not None:
        raise UsageError("--tdc-process needs --tdc-grid")

    sim = sim_pexp(data, hazard, cuts, seed=seed, tdc=tdc)
    _write_csv(sim, out)
    print(f"wrote {len(sim)} simulated subjects to {out}")
    if tdc is not None and ns.get("tdc_out") is not None:
        _write_csv(tdc, ns["tdc_out"])
        print(f"wrote exposure series to {ns['tdc_out']}")
    return 0


def _parse_lambda(text):
    if text is None or text == "gcv":
        return "gcv"
    head, sep, tail = str(text).partition(":")
    if head != "fixed" or not sep:
        raise UsageError(
            f"--lambda expects gcv or fixed:<value>[,<value>...], got {text!r}"
        )
    try:
        values = [float(p) for p in tail.split(",")]
    except ValueError:
        raise UsageError(f"--lambda values must be numbers, got {text!r}")
    return values[0] if len(values) == 1 else values


def _cmd_fit(ns: dict) -> int:
    from .fit import fit_pamm, save_model
    from .ped import read_ped_bundle

    ped = read_ped_bundle(_require(ns, "ped", "--ped"))
    model = _require(ns, "model", "--model")
    out = _require(ns, "out", "--out")
    lambda_ = _parse_lambda(ns.get("lambda_"))

    fit = fit_pamm(ped, model, lambda_=lambda_)
    save_model(fit, out)
    edf = ", ".join(f"{k}={v:.2f}" for k, v in fit.edf.items())
    print(f"wrote model to {out} (deviance {fit.deviance:.3f}, edf {edf})")
    return 0


def _parse_adds(text) -> list[str]:
    tokens = [t.strip() for t in str(text or "hazard").split(",") if t.strip()]
    allowed = ("hazard", "cumu", "surv")
    for t in tokens:
        if t not in allowed:
            raise UsageError(
                f"--add accepts {', '.join(allowed)}; got {t!r}"
            )
    if not tokens:
        raise UsageError("--add must name at least one quantity")
    return tokens


def _cmd_predict(ns: dict) -> int:
    from .fit import load_model
    from .ped import read_ped_bundle
    from .predict import add_cumu_hazard, add_hazard, add_surv_prob, \
        make_newdata

    fit = load_model(_require(ns, "model", "--model"))
    ped = read_ped_bundle(_require(ns, "ped", "--ped"))
    out = _require(ns, "out", "--out")
    adds = _parse_adds(ns.get("add"))
    group = ns.get("group")
    needs_seed = "cumu" in adds or "surv" in adds
    if needs_seed and ns.get("seed") is None:
        raise UsageError("--seed is required with --add cumu or surv")
    seed = (
        _to_int(ns["seed"], "--seed") if ns.get("seed") is not None else 0
    )

    matrices = None
    if ns.get("newdata") is not None:
        if fit.cumulative:
            raise UsageError(
                "--newdata grids carry no exposure histories; predict on "
                "the PED rows instead (omit --newdata)"
            )
        with open(ns["newdata"], encoding="utf-8") as fh:
            try:
                spec = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"--newdata is not valid JSON: {exc}")
        if not isinstance(spec, dict):
            raise UsageError("--newdata must hold an object of value lists")
        spec = {
            k: v if isinstance(v, list) else [v] for k, v in spec.items()
        }
        nd = make_newdata(ped, spec)
    elif fit.cumulative:
        # grids cannot carry exposure matrices, so evaluate per PED row
        nd = ped.data
        matrices = ped.matrices
        if group is None:
            group = "id"
    else:
        nd = make_newdata(ped, {"tend": [float(c) for c in ped.cuts[1:]]})

    if "hazard" in adds:
        nd = add_hazard(nd, fit, matrices=matrices)
    if "cumu" in adds:
        nd = add_cumu_hazard(
            nd, fit, seed=seed, group=group, matrices=matrices
        )
    if "surv" in adds:
        nd = add_surv_prob(
            nd, fit, seed=seed, group=group, matrices=matrices
        )
    _write_csv(nd, out)
    print(f"wrote {len(nd)} prediction rows to {out}")
    return 0


def _cmd_cumu_coef(ns: dict) -> int:
    from .fit import load_model
    from .ped import read_ped_bundle
    from .predict import get_cumu_coef

    fit = load_model(_require(ns, "model", "--model"))
    ped = read_ped_bundle(_require(ns, "ped", "--ped"))
    term = _require(ns, "term", "--term")
    seed = _to_int(_require(ns, "seed", "--seed"), "--seed")
    out = _require(ns, "out", "--out")

    table = get_cumu_coef(fit, ped, term, seed=seed)
    _write_csv(table, out)
    print(f"wrote cumulative coefficient path for {term!r} to {out}")
    return 0


def _cmd_lag_lead(ns: dict) -> int:
    from .ped import read_ped_bundle
    from .predict import export_laglead

    out = _require(ns, "out", "--out")
    if ns.get("ped") is not None:
        table = export_laglead(read_ped_bundle(ns["ped"]))
    else:
        cuts = _grid_from(ns, "--cut", "--cut-list")
        tz_grid = _grid_from(ns, "--tz-grid", "--tz-list")
        table = export_laglead(cuts, tz_grid=tz_grid, ll=ns.get("ll"))
    _write_csv(table, out)
    print(f"wrote {len(table)} lag-lead cells to {out}")
    return 0


def _cmd_info(ns: dict) -> int:
    from .errors import NotABundleError

    path = ns["path"]
    if os.path.isdir(path):
        from .ped import read_ped_bundle

        ped = read_ped_bundle(path)
        cuts = ", ".join(f"{c:g}" for c in ped.cuts)
        print(f"PED bundle: {path}")
        print(f"  rows:      {len(ped.data)}")
        print(f"  subjects:  {ped.data['id'].nunique()}")
        print(f"  intervals: {len(ped.cuts) - 1}  cuts: [{cuts}]")
        print(f"  columns:   {', '.join(ped.data.columns)}")
        for name, mat in ped.matrices.items():
            print(f"  matrix {name}: {mat.shape[0]} x {mat.shape[1]}")
        for meta in ped.cumulative:
            print(
                f"  cumulative term over {meta.tz_var!r}: "
                f"{len(meta.tz_grid)} exposure times"
            )
        return 0
    if os.path.isfile(path):
        from .fit import load_model

        fit = load_model(path)
        print(f"model: {path}")
        print(f"  formula:  {fit.model}")
        print(f"  rows:     {fit.n_obs}")
        print(f"  deviance: {fit.deviance:.4f}")
        lambdas = ", ".join(
            f"{label}={lam:g}"
            for label, lam in zip(fit.lambda_labels, fit.lambda_)
        )
        print(f"  lambda:   [{lambdas}]" if lambdas else "  lambda:   none")
        print("  terms:")
        for term in fit.terms:
            width = term.cols.stop - term.cols.start
            print(
                f"    {term.label:<24} {term.kind:<9} "
                f"cols {width:<3} edf {fit.edf[term.label]:.2f}"
            )
        return 0
    raise NotABundleError(f"{path!r} is neither a PED bundle nor a model")


# ---------------------------------------------------------------------------
# parser assembly and dispatch


def build_parser() -> argparse.ArgumentParser:
    from . import FORMAT_VERSION, __version__

    common = _Parser(add_help=False)
    common.add_argument(
        "--config",
        help="JSON file whose entries fill in unset flags",
    )
    common.add_argument(
        "--threads",
        type=int,
        help="cap for coarse-grained workers (numeric kernels stay "
        "single-threaded so outputs do not depend on this)",
    )

    parser = _Parser(
        prog="pammkit",
        description="piece-wise exponential additive mixed models",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"pammkit {__version__} (format {FORMAT_VERSION})",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser(
        "as-ped", parents=[common],
        help="transform survival data into a PED bundle",
    )
    p.add_argument("--data", help="subject-level CSV with the survival columns")
    p.add_argument("--formula", help='transform formula, e.g. "Surv(time, status) ~ ."')
    p.add_argument("--cut", help="interval boundaries as a:b:step")
    p.add_argument("--cut-list", help="interval boundaries as v1,v2,...")
    p.add_argument(
        "--tdc", action="append",
        help="exposure CSV with (id, tz, value) columns; repeatable",
    )
    p.add_argument("--max-time", help="censor follow-up at this time")
    p.add_argument("--out", help="output bundle directory")
    p.set_defaults(handler=_cmd_as_ped)

    p = sub.add_parser(
        "simulate", parents=[common],
        help="draw survival times from a hazard expression",
    )
    p.add_argument("--hazard", help='hazard expression, e.g. "~ -2 + 0.3*x"')
    p.add_argument("--n", help="number of subjects (id-only table)")
    p.add_argument("--data", help="subject CSV supplying covariates instead of --n")
    p.add_argument("--cut", help="hazard step grid as a:b:step")
    p.add_argument("--cut-list", help="hazard step grid as v1,v2,...")
    p.add_argument("--tdc-grid", help="exposure time grid as a:b:step")
    p.add_argument(
        "--tdc-process",
        help="exposure series law, ar2:<phi1>,<phi2> (default ar2:0.8,-0.1)",
    )
    p.add_argument("--seed", help="random seed (required)")
    p.add_argument("--out", help="output CSV of subjects with time and status")
    p.add_argument("--tdc-out", help="output CSV for the simulated exposures")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser(
        "fit", parents=[common], help="fit a hazard model on a PED bundle",
    )
    p.add_argument("--ped", help="PED bundle directory")
    p.add_argument("--model", help='model formula, e.g. "ped_status ~ s(tend)"')
    p.add_argument(
        "--lambda", dest="lambda_",
        help="smoothing: gcv (default) or fixed:<value>[,<value>...]",
    )
    p.add_argument("--out", help="output model JSON path")
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser(
        "predict", parents=[common],
        help="evaluate hazard, cumulative hazard and survival curves",
    )
    p.add_argument("--model", help="model JSON from fit")
    p.add_argument("--ped", help="PED bundle the covariate summaries come from")
    p.add_argument(
        "--newdata",
        help="JSON object of covariate value lists; default is one row per "
        "interval at sample covariate values",
    )
    p.add_argument(
        "--add", help="comma list of hazard, cumu, surv (default hazard)",
    )
    p.add_argument("--group", help="column separating cumulation paths")
    p.add_argument("--seed", help="random seed (required for cumu/surv)")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser(
        "cumu-coef", parents=[common],
        help="cumulative hazard difference for a one-unit covariate shift",
    )
    p.add_argument("--model", help="model JSON from fit")
    p.add_argument("--ped", help="PED bundle the covariate summaries come from")
    p.add_argument("--term", help="covariate to shift")
    p.add_argument("--seed", help="random seed (required)")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(handler=_cmd_cumu_coef)

    p = sub.add_parser(
        "lag-lead", parents=[common],
        help="export lag-lead window weights as a long table",
    )
    p.add_argument("--ped", help="PED bundle whose cumulative terms to export")
    p.add_argument("--cut", help="interval boundaries as a:b:step")
    p.add_argument("--cut-list", help="interval boundaries as v1,v2,...")
    p.add_argument("--tz-grid", help="exposure time grid as a:b:step")
    p.add_argument("--tz-list", help="exposure time grid as v1,v2,...")
    p.add_argument(
        "--ll", help="window rule: default, lagged(lag) or window(lag, lead)",
    )
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(handler=_cmd_lag_lead)

    p = sub.add_parser(
        "info", parents=[common],
        help="summarize a PED bundle or a model file",
    )
    p.add_argument("path", help="bundle directory or model JSON")
    p.set_defaults(handler=_cmd_info)

    return parser


def dispatch(argv=None) -> int:
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --version exit argparse directly
        return int(exc.code or 0)

    try:
        merged = _merge_config(ns)
        threads = merged.get("threads")
        if threads is not None and _to_int(threads, "--threads") < 1:
            raise UsageError(f"--threads must be at least 1, got {threads}")
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:  # pragma: no cover - always present with sklearn
            return ns.handler(merged)
        # pin BLAS so outputs are byte-stable across --threads settings
        with threadpool_limits(limits=1):
            return ns.handler(merged)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PammError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
