"""Prediction grids and survival quantities from fitted models.

Helpers in this module build tidy "newdata" frames (one row per covariate
combination and interval), attach hazards with delta-method intervals, and
accumulate them into cumulative hazards, survival probabilities and
cumulative coefficients with Monte Carlo posterior bands.  Exports are flat
tables ready for plotting; nothing here draws figures.
"""

from __future__ import annotations

import itertools

import numpy as np
import pandas as pd

from .errors import (
    DegenerateDataError,
    TendNotOnGridError,
    UnknownColumnError,
    UnorderedIntervalsError,
    UnresolvedTermError,
)
from .fit import FittedPamm, posterior_draws
from .formula import LagLeadSpec, parse_lag_lead
from .ped import PedDataset, int_info, interval_labels, make_lag_lead

__all__ = [
    "add_cumu_hazard",
    "add_hazard",
    "add_surv_prob",
    "export_cumu_effect",
    "export_laglead",
    "export_partial_effect",
    "get_cumu_coef",
    "kaplan_meier",
    "make_newdata",
    "ped_info",
    "sample_info",
]

_Z_CRIT = 1.959963984540054  # normal 97.5% quantile


# ---------------------------------------------------------------------------
# newdata construction

def _mode_first(col: pd.Series):
    """Most frequent value; ties go to the value appearing first."""
    values = col.tolist()
    counts = col.value_counts()
    return max(dict.fromkeys(values), key=lambda v: counts[v])


def _summary_row(frame: pd.DataFrame) -> dict:
    out = {}
    for name in frame.columns:
        col = frame[name]
        if pd.api.types.is_numeric_dtype(col):
            out[name] = float(col.mean())
        else:
            out[name] = _mode_first(col)
    return out


def _subject_frame(data) -> pd.DataFrame:
    """Covariate rows to summarize: PED collapses to one row per subject."""
    if isinstance(data, PedDataset):
        frame = data.data.drop_duplicates(subset="id", keep="first")
        return frame[data.covariate_columns()]
    return data


def sample_info(data, group=None) -> pd.DataFrame:
    """Single-row summary: means for numeric columns, modes otherwise.

    On PED input the structural columns are omitted and each subject counts
    once.  With ``group`` the summary is computed per group level, levels in
    data order.
    """
    frame = _subject_frame(data)
    if len(frame) == 0:
        raise DegenerateDataError("cannot summarize an empty dataset")
    if group is None:
        return pd.DataFrame([_summary_row(frame)])
    keys = [group] if isinstance(group, str) else list(group)
    for key in keys:
        if key not in frame.columns:
            raise UnknownColumnError(f"grouping column {key!r} not found")
    rows = []
    for _, chunk in frame.groupby(keys, sort=False):
        row = _summary_row(chunk.drop(columns=keys))
        for key in keys:
            row[key] = chunk[key].iloc[0]
        rows.append(row)
    return pd.DataFrame(rows)[list(frame.columns)]


def ped_info(ped: PedDataset, group=None) -> pd.DataFrame:
    """One row per interval with covariates at their sample values."""
    info = int_info(ped)
    summary = sample_info(ped, group=group)
    out = summary.merge(info, how="cross")
    # group-major: all intervals for the first summary row come first
    return out[list(info.columns) + list(summary.columns)]


def _cartesian(specified: dict) -> pd.DataFrame:
    """Cartesian product of the value lists, first key varying fastest."""
    keys = list(specified)
    lists = [list(np.atleast_1d(specified[k])) for k in keys]
    rows = [
        dict(zip(keys, reversed(combo)))
        for combo in itertools.product(*reversed(lists))
    ]
    return pd.DataFrame(rows)[keys]


def _interval_columns(cuts, tend_values) -> pd.DataFrame:
    """Interval variables realigned to the cut grid for given tend values."""
    cuts = np.asarray(cuts, dtype=float)
    labels = interval_labels(cuts)
    tend = np.asarray(tend_values, dtype=float)
    idx = np.searchsorted(cuts, tend)
    on_grid = (idx > 0) & (idx < len(cuts)) & (cuts[np.clip(idx, 0, len(cuts) - 1)] == tend)
    if not on_grid.all():
        bad = tend[~on_grid][0]
        raise TendNotOnGridError(
            f"tend value {bad:g} is not a cut point of the training grid"
        )
    tstart = cuts[idx - 1]
    intlen = tend - tstart
    return pd.DataFrame(
        {
            "tstart": tstart,
            "tend": tend,
            "intlen": intlen,
            "intmid": tstart + intlen / 2.0,
            "interval": [labels[i - 1] for i in idx],
            "offset": np.log(intlen),
        }
    )


def make_newdata(base, specified=None) -> pd.DataFrame:
    """Covariate grid with unspecified columns at their sample values.

    ``specified`` maps column names to value lists; the result is their
    Cartesian product (first key varying fastest).  On a PED base the
    interval variables are included and follow any specified ``tend``
    (which must lie on the training cut grid); without ``tend`` they
    describe the first interval.
    """
    specified = dict(specified or {})
    is_ped = isinstance(base, PedDataset)
    summary = sample_info(base).iloc[0].to_dict()

    tend_values = None
    if "tend" in specified:
        if not is_ped:
            raise UnknownColumnError(
                "tend can only be specified for a PED base"
            )
        tend_values = specified.pop("tend")

    for name in specified:
        if name not in summary:
            raise UnknownColumnError(
                f"column {name!r} not found among the covariates"
            )

    parts = dict(specified)
    if tend_values is not None:
        parts["tend"] = tend_values
    grid = _cartesian(parts) if parts else pd.DataFrame([{}])

    if is_ped:
        tend = (
            grid.pop("tend").to_numpy(dtype=float)
            if "tend" in grid.columns
            else np.full(len(grid), float(base.cuts[1]))
        )
        intervals = _interval_columns(base.cuts, tend)
    else:
        intervals = None

    for name, value in summary.items():
        if name not in grid.columns:
            grid[name] = value
    grid = grid[list(summary)]

    if intervals is None:
        return grid.reset_index(drop=True)
    out = pd.concat(
        [intervals.reset_index(drop=True), grid.reset_index(drop=True)],
        axis=1,
    )
    return out


# ---------------------------------------------------------------------------
# hazards and derived quantities

def _design(fit: FittedPamm, nd: pd.DataFrame, matrices=None) -> np.ndarray:
    return fit.design_for(nd, matrices or {})


def add_hazard(
    nd: pd.DataFrame, fit: FittedPamm, scale: str = "response", matrices=None
) -> pd.DataFrame:
    """Attach hazard, standard error and a 95% interval to each row.

    ``scale="link"`` reports the log-hazard; the offset is never added, so
    the hazard is per unit of time.
    """
    if scale not in ("response", "link"):
        raise ValueError(f"scale must be 'response' or 'link', got {scale!r}")
    X = _design(fit, nd, matrices)
    eta = X @ fit.beta
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, fit.V_beta, X), 0.0))
    lower = eta - _Z_CRIT * se
    upper = eta + _Z_CRIT * se
    out = nd.copy()
    if scale == "response":
        out["hazard"] = np.exp(eta)
        out["se"] = se
        out["ci_lower"] = np.exp(lower)
        out["ci_upper"] = np.exp(upper)
    else:
        out["hazard"] = eta
        out["se"] = se
        out["ci_lower"] = lower
        out["ci_upper"] = upper
    return out


def _group_codes(nd: pd.DataFrame, group) -> np.ndarray:
    if group is None:
        return np.zeros(len(nd), dtype=int)
    keys = [group] if isinstance(group, str) else list(group)
    for key in keys:
        if key not in nd.columns:
            raise UnknownColumnError(f"grouping column {key!r} not found")
    codes, _ = pd.factorize(
        pd.MultiIndex.from_frame(nd[keys]) if len(keys) > 1 else nd[keys[0]]
    )
    return codes


def _grouped_cumsum(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Cumulative sum along the last axis, restarting at each group."""
    out = np.empty_like(values)
    for code in np.unique(codes):
        idx = np.flatnonzero(codes == code)
        out[..., idx] = np.cumsum(values[..., idx], axis=-1)
    return out


def _check_interval_order(nd: pd.DataFrame, codes: np.ndarray):
    tend = nd["tend"].to_numpy(dtype=float)
    for code in np.unique(codes):
        t = tend[codes == code]
        if np.any(np.diff(t) <= 0):
            raise UnorderedIntervalsError(
                "rows must be ordered by strictly increasing tend within "
                "each group"
            )


def _cumu_hazard_paths(nd, fit, matrices, group, n_draws, seed):
    for col in ("tend", "intlen"):
        if col not in nd.columns:
            raise UnknownColumnError(f"newdata lacks the {col!r} column")
    codes = _group_codes(nd, group)
    _check_interval_order(nd, codes)
    X = _design(fit, nd, matrices)
    intlen = nd["intlen"].to_numpy(dtype=float)

    point = _grouped_cumsum(np.exp(X @ fit.beta) * intlen, codes)
    draws = posterior_draws(fit, n_draws, seed)
    paths = _grouped_cumsum(np.exp(draws @ X.T) * intlen[None, :], codes)
    lower, upper = np.percentile(paths, [2.5, 97.5], axis=0)
    return point, lower, upper


def add_cumu_hazard(
    nd: pd.DataFrame,
    fit: FittedPamm,
    *,
    n_draws: int = 100,
    seed: int,
    group=None,
    matrices=None,
) -> pd.DataFrame:
    """Attach the cumulative hazard with Monte Carlo percentile bands.

    Within each group, rows must be ordered by tend; the hazard in each row
    contributes hazard * intlen.  Bands are pointwise 2.5/97.5 percentiles
    over ``n_draws`` posterior draws, generated once and shared by groups.
    """
    point, lower, upper = _cumu_hazard_paths(
        nd, fit, matrices, group, n_draws, seed
    )
    out = nd.copy()
    out["cumu_hazard"] = point
    out["cumu_lower"] = lower
    out["cumu_upper"] = upper
    return out


def add_surv_prob(
    nd: pd.DataFrame,
    fit: FittedPamm,
    *,
    n_draws: int = 100,
    seed: int,
    group=None,
    matrices=None,
) -> pd.DataFrame:
    """Attach survival probabilities S = exp(-cumulative hazard).

    The interval bounds swap: the lower survival bound is the image of the
    upper cumulative-hazard bound.
    """
    point, lower, upper = _cumu_hazard_paths(
        nd, fit, matrices, group, n_draws, seed
    )
    out = nd.copy()
    out["surv_prob"] = np.exp(-point)
    out["surv_lower"] = np.exp(-upper)
    out["surv_upper"] = np.exp(-lower)
    return out


# ---------------------------------------------------------------------------
# cumulative coefficients

def _levels_in_order(frame: pd.DataFrame, name: str) -> list[str]:
    return list(dict.fromkeys(frame[name].astype(str)))


def get_cumu_coef(
    fit: FittedPamm,
    ped: PedDataset,
    term: str,
    *,
    n_draws: int = 100,
    seed: int,
) -> pd.DataFrame:
    """Cumulative hazard difference for a one-unit shift in a covariate.

    Numeric covariates compare sample mean + 1 against the sample mean;
    categorical covariates compare the first non-reference level against
    the reference.  The path starts at zero at the first cut point.
    """
    base = ped_info(ped)
    if term not in base.columns or term in ("tstart", "tend", "intlen",
                                            "intmid", "interval"):
        raise UnknownColumnError(f"{term!r} is not a model covariate")

    shifted = base.copy()
    if pd.api.types.is_numeric_dtype(ped.data[term]):
        shifted[term] = shifted[term] + 1.0
        variable = term
    else:
        levels = _levels_in_order(ped.data, term)
        if len(levels) < 2:
            raise DegenerateDataError(
                f"categorical column {term!r} has a single level"
            )
        base[term] = levels[0]
        shifted[term] = levels[1]
        variable = f"{term} ({levels[1]})"

    intlen = base["intlen"].to_numpy(dtype=float)
    X0 = _design(fit, base)
    X1 = _design(fit, shifted)

    def paths(eta0, eta1):
        return np.cumsum(np.exp(eta1) * intlen, axis=-1) - np.cumsum(
            np.exp(eta0) * intlen, axis=-1
        )

    point = paths(X0 @ fit.beta, X1 @ fit.beta)
    draws = posterior_draws(fit, n_draws, seed)
    all_paths = paths(draws @ X0.T, draws @ X1.T)
    lower, upper = np.percentile(all_paths, [2.5, 97.5], axis=0)

    time = np.concatenate([[float(fit.cuts[0])], base["tend"].to_numpy()])
    return pd.DataFrame(
        {
            "method": "pamm",
            "variable": variable,
            "time": time,
            "cumu_hazard": np.concatenate([[0.0], point]),
            "cumu_lower": np.concatenate([[0.0], lower]),
            "cumu_upper": np.concatenate([[0.0], upper]),
        }
    )


# ---------------------------------------------------------------------------
# effect exports

def _term_meta(fit: FittedPamm, term: str):
    for t in fit.terms:
        if t.label == term:
            return t
    raise UnresolvedTermError(
        f"model has no term labelled {term!r}; available: "
        f"{[t.label for t in fit.terms]}"
    )


def export_partial_effect(
    fit: FittedPamm, term: str, grids: dict, reference: dict | None = None
) -> pd.DataFrame:
    """Evaluate one term's contribution over a covariate grid.

    ``grids`` maps covariates of the term to value lists (Cartesian
    product, first key fastest).  With ``reference``, effects and their
    standard errors are for the difference against the grid point with
    those coordinates overridden, so the effect is exactly zero (se zero)
    where the reference coincides with the row itself.  Matrix covariates
    are evaluated pointwise with unit weight.
    """
    td = _term_meta(fit, term)
    meta = td.meta
    if meta["kind"] == "intercept":
        raise UnresolvedTermError("the intercept has no partial effect")
    grid = _cartesian(grids)
    reference = dict(reference or {})

    def design_at(frame_values: pd.DataFrame) -> np.ndarray:
        if meta.get("matrix"):
            matrices = {}
            for v in meta["vars"]:
                if v not in frame_values.columns:
                    raise UnresolvedTermError(
                        f"grid must provide values for matrix covariate "
                        f"{v!r}"
                    )
                matrices[v] = frame_values[v].to_numpy(dtype=float)[:, None]
            for name in meta["by"]:
                col = (
                    frame_values[name].to_numpy(dtype=float)
                    if name in frame_values.columns
                    else np.ones(len(frame_values))
                )
                matrices[name] = col[:, None]
            frame = pd.DataFrame(index=frame_values.index)
            return _eval_full_row(meta, frame, matrices)
        frame = frame_values.copy()
        needed = list(meta.get("vars", [])) + list(meta.get("by", []))
        if meta.get("kind") == "linear":
            needed = [meta["name"]] + (
                [meta["times"]] if meta["times"] else []
            )
        if meta.get("by_level"):
            g, level = meta["by_level"]
            if g not in frame.columns:
                frame[g] = level
        for name in needed:
            if name not in frame.columns:
                value = _sample_value(fit, name)
                frame[name] = value
        return _eval_full_row(meta, frame, {})

    D = design_at(grid)
    if reference:
        ref_grid = grid.copy()
        for name, value in reference.items():
            ref_grid[name] = value
        D = D - design_at(ref_grid)

    sl = td.cols
    beta = fit.beta[sl]
    V = fit.V_beta[sl, sl]
    effect = D @ beta
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", D, V, D), 0.0))
    out = grid.copy()
    out["effect"] = effect
    out["se"] = se
    out["ci_lower"] = effect - _Z_CRIT * se
    out["ci_upper"] = effect + _Z_CRIT * se
    return out


def _eval_full_row(meta, frame, matrices):
    from .fit import _eval_term

    return _eval_term(meta, frame, matrices)


def _sample_value(fit: FittedPamm, name: str):
    info = fit.sample.get("covariates", {}).get(name)
    if info is None:
        raise UnresolvedTermError(
            f"no grid or sample value available for column {name!r}"
        )
    return info["value"]


def _cumulative_meta_for(fit: FittedPamm, vars_needed):
    for meta in fit.cumulative:
        if set(vars_needed) <= set(meta.matrix_names()):
            return meta
    raise UnresolvedTermError(
        "term does not match any cumulative term of the training data"
    )


def export_cumu_effect(
    fit: FittedPamm,
    term: str,
    z,
    *,
    n_draws: int = 100,
    seed: int,
) -> pd.DataFrame:
    """Cumulative effect of a constant exposure profile per interval.

    ``z`` is a scalar (or one value per exposure grid point) held fixed
    over the exposure history; the effect at interval j is the
    quadrature-weighted sum of the fitted partial effect over the lag-lead
    window.
    """
    td = _term_meta(fit, term)
    meta = td.meta
    if not meta.get("matrix"):
        raise UnresolvedTermError(
            f"term {term!r} is not a cumulative (matrix) term"
        )
    cmeta = _cumulative_meta_for(fit, meta["vars"] + meta["by"])

    info = int_info(fit.cuts)
    tend = info["tend"].to_numpy()
    grid = np.asarray(cmeta.tz_grid, dtype=float)
    J, Q = len(tend), grid.size

    W = make_lag_lead(fit.cuts, grid, cmeta.ll)
    z_row = np.broadcast_to(np.asarray(z, dtype=float), (Q,))
    available = {}
    if cmeta.col_time:
        available[cmeta.col_time] = np.broadcast_to(tend[:, None], (J, Q))
    if cmeta.col_latency:
        available[cmeta.col_latency] = tend[:, None] - grid[None, :]
    if cmeta.col_tz:
        available[cmeta.col_tz] = np.broadcast_to(grid[None, :], (J, Q))
    for name in cmeta.col_z:
        available[name] = np.broadcast_to(z_row[None, :], (J, Q))
    available[cmeta.col_ll] = W

    D = _eval_full_row(meta, info, available)
    sl = td.cols
    effect = D @ fit.beta[sl]
    draws = posterior_draws(fit, n_draws, seed)[:, sl]
    paths = draws @ D.T
    lower, upper = np.percentile(paths, [2.5, 97.5], axis=0)

    out = info[["tstart", "tend", "interval"]].copy()
    out["cumu_effect"] = effect
    out["ci_lower"] = lower
    out["ci_upper"] = upper
    return out


def export_laglead(source, tz_grid=None, ll=None) -> pd.DataFrame:
    """Long-format lag-lead weights (interval, tz, weight) for heatmaps.

    ``source`` is either a PED dataset with cumulative terms (one block per
    term, identified by a leading tz_var column) or a cut vector, in which
    case ``tz_grid`` and ``ll`` describe the window directly.
    """
    if isinstance(source, PedDataset):
        if not source.cumulative:
            raise DegenerateDataError(
                "PED has no cumulative terms to describe"
            )
        blocks = []
        for meta in source.cumulative:
            block = export_laglead(source.cuts, meta.tz_grid, meta.ll)
            block.insert(0, "tz_var", meta.tz_var)
            blocks.append(block)
        return pd.concat(blocks, ignore_index=True)

    cuts = np.asarray(source, dtype=float)
    if tz_grid is None:
        raise ValueError("tz_grid is required when passing cut points")
    if ll is None:
        ll = parse_lag_lead("default")
    elif isinstance(ll, str):
        ll = parse_lag_lead(ll)
    elif not isinstance(ll, LagLeadSpec):
        raise ValueError("ll must be a lag-lead spec or its string form")
    grid = np.asarray(tz_grid, dtype=float)
    W = make_lag_lead(cuts, grid, ll)
    labels = interval_labels(cuts)
    return pd.DataFrame(
        {
            "interval": np.repeat(labels, grid.size),
            "tz": np.tile(grid, len(labels)),
            "weight": W.ravel(),
        }
    )


# ---------------------------------------------------------------------------
# nonparametric reference

def kaplan_meier(
    data: pd.DataFrame, time_col: str = "time", status_col: str = "status"
) -> pd.DataFrame:
    """Product-limit survival estimate over the unique observed times."""
    for col in (time_col, status_col):
        if col not in data.columns:
            raise UnknownColumnError(f"column {col!r} not found")
    times = data[time_col].to_numpy(dtype=float)
    status = data[status_col].to_numpy()
    if len(times) == 0:
        raise DegenerateDataError("cannot estimate survival from no rows")

    order = np.argsort(times, kind="stable")
    times, status = times[order], status[order]
    unique, first = np.unique(times, return_index=True)
    n = len(times)

    rows = []
    surv = 1.0
    for k, t in enumerate(unique):
        stop = first[k + 1] if k + 1 < len(unique) else n
        at_risk = n - first[k]
        events = int(np.sum(status[first[k]:stop] == 1))
        censored = (stop - first[k]) - events
        if events:
            surv *= 1.0 - events / at_risk
        rows.append(
            {
                "time": t,
                "n_risk": at_risk,
                "n_event": events,
                "n_censored": censored,
                "surv_prob": surv,
            }
        )
    return pd.DataFrame(rows)
