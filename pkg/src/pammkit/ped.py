"""Transforming survival data into piece-wise exponential data (PED).

One row of survival data (one subject with a right-censored event time)
becomes one row per follow-up interval the subject entered.  Each PED row
carries the interval bounds, an offset equal to the log of the time spent
inside the interval, and an event indicator that is 1 only on the row where
the event happened.  A Poisson model on ``ped_status`` with that offset is
then equivalent to a piece-wise constant hazard model.

Three transform flavours exist, selected by the transform formula:

* plain time-constant covariates (``split_tcc``)
* concurrent time-dependent covariates, merged onto intervals by last value
  carried forward (``split_concurrent``)
* cumulative exposure effects, realized as matrix-valued covariates over an
  exposure-time grid together with lag-lead quadrature weights
  (``split_cumulative``)
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import (
    DegenerateDataError,
    MissingBaselineExposureError,
    MissingExposureSeriesError,
    NoEventsError,
    NonPositiveTimeError,
    NotABundleError,
    PammError,
    RaggedExposureGridError,
    UnknownColumnError,
)
from .formula import (
    LagLeadSpec,
    TransformSpec,
    parse_lag_lead,
    parse_transform_formula,
)

__all__ = [
    "STRUCTURAL_COLS",
    "CumulativeTermMeta",
    "PedDataset",
    "PedTransformer",
    "default_cuts",
    "interval_labels",
    "int_info",
    "make_lag_lead",
    "split_tcc",
    "split_concurrent",
    "split_cumulative",
    "to_ped",
    "write_ped_bundle",
    "read_ped_bundle",
]

#: columns the transform owns; everything else on a PED frame is a covariate
STRUCTURAL_COLS = (
    "id",
    "tstart",
    "tend",
    "intlen",
    "interval",
    "offset",
    "ped_status",
)


@dataclass
class CumulativeTermMeta:
    """Bookkeeping for one cumulative term's matrix columns."""

    tz_var: str
    tz_grid: np.ndarray
    ll: LagLeadSpec
    col_time: str | None = None
    col_latency: str | None = None
    col_tz: str | None = None
    col_z: list[str] = field(default_factory=list)
    col_ll: str = "LL"

    def matrix_names(self) -> list[str]:
        names = []
        for name in (self.col_time, self.col_latency, self.col_tz):
            if name is not None:
                names.append(name)
        names.extend(self.col_z)
        names.append(self.col_ll)
        return names

    def to_dict(self) -> dict:
        return {
            "tz_var": self.tz_var,
            "tz_grid": np.asarray(self.tz_grid).tolist(),
            "ll": str(self.ll),
            "col_time": self.col_time,
            "col_latency": self.col_latency,
            "col_tz": self.col_tz,
            "col_z": list(self.col_z),
            "col_ll": self.col_ll,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CumulativeTermMeta":
        return cls(
            tz_var=d["tz_var"],
            tz_grid=np.asarray(d["tz_grid"], dtype=float),
            ll=parse_lag_lead(d["ll"]),
            col_time=d.get("col_time"),
            col_latency=d.get("col_latency"),
            col_tz=d.get("col_tz"),
            col_z=list(d.get("col_z", [])),
            col_ll=d.get("col_ll", "LL"),
        )


@dataclass
class PedDataset:
    """Piece-wise exponential data: a flat frame plus aligned matrix columns."""

    data: pd.DataFrame
    cuts: np.ndarray
    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    cumulative: list[CumulativeTermMeta] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.data)

    def covariate_columns(self) -> list[str]:
        return [c for c in self.data.columns if c not in STRUCTURAL_COLS]

    def is_matrix(self, name: str) -> bool:
        return name in self.matrices

    def int_info(self) -> pd.DataFrame:
        return int_info(self.cuts)


# ---------------------------------------------------------------------------
# cut points

def _check_cuts(cuts) -> np.ndarray:
    cuts = np.asarray(cuts, dtype=float)
    if cuts.ndim != 1 or cuts.size < 2:
        raise DegenerateDataError("need at least two cut points")
    if np.any(np.diff(cuts) <= 0):
        raise DegenerateDataError("cut points must be strictly increasing")
    return cuts


def default_cuts(times, status, max_time=None) -> np.ndarray:
    """Cut points at the uniquely observed event times.

    The grid starts at 0.  With ``max_time`` given, event times beyond it are
    dropped and ``max_time`` becomes the final cut point.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    events = np.unique(times[status == 1])
    if max_time is not None:
        events = events[events <= max_time]
    if events.size == 0 and max_time is None:
        raise NoEventsError(
            "no events to derive cut points from; pass explicit cuts or "
            "max_time"
        )
    cuts = [0.0]
    cuts.extend(float(v) for v in events if v > 0)
    if max_time is not None and (not cuts or cuts[-1] < max_time):
        cuts.append(float(max_time))
    return _check_cuts(cuts)


def _fmt_bound(v: float) -> str:
    return f"{v:.6g}"


def interval_labels(cuts) -> list[str]:
    cuts = np.asarray(cuts, dtype=float)
    return [
        f"({_fmt_bound(a)},{_fmt_bound(b)}]"
        for a, b in zip(cuts[:-1], cuts[1:])
    ]


def int_info(cuts_or_ped) -> pd.DataFrame:
    """One row per follow-up interval: bounds, length, midpoint and label."""
    cuts = (
        cuts_or_ped.cuts
        if isinstance(cuts_or_ped, PedDataset)
        else _check_cuts(cuts_or_ped)
    )
    tstart = cuts[:-1]
    tend = cuts[1:]
    return pd.DataFrame(
        {
            "tstart": tstart,
            "tend": tend,
            "intlen": tend - tstart,
            "intmid": tstart + (tend - tstart) / 2.0,
            "interval": interval_labels(cuts),
        }
    )


# ---------------------------------------------------------------------------
# input validation helpers

def _require_columns(data: pd.DataFrame, names, what: str):
    missing = [n for n in names if n not in data.columns]
    if missing:
        raise UnknownColumnError(
            f"{what} column(s) not found in data: {', '.join(missing)}"
        )


def _with_id(data: pd.DataFrame) -> pd.DataFrame:
    """Subjects are identified by an ``id`` column, created if absent."""
    if "id" in data.columns:
        if data["id"].duplicated().any():
            raise DegenerateDataError(
                "survival data must contain one row per subject; duplicate "
                "id values found"
            )
        return data
    data = data.copy()
    data.insert(0, "id", np.arange(1, len(data) + 1))
    return data


def _status_array(data: pd.DataFrame, status_col: str) -> np.ndarray:
    raw = np.asarray(data[status_col])
    status = raw.astype(float)
    if not np.isin(status, (0.0, 1.0)).all():
        raise DegenerateDataError(
            f"status column {status_col!r} must contain only 0 and 1"
        )
    return status.astype(int)


def _keep_columns(data: pd.DataFrame, spec: TransformSpec) -> list[str]:
    structural = {spec.time_col, spec.status_col, "id", *STRUCTURAL_COLS}
    if spec.keep is None:
        return [c for c in data.columns if c not in structural]
    _require_columns(data, spec.keep, "covariate")
    return [c for c in spec.keep if c not in structural]


def _as_transform_spec(spec) -> TransformSpec:
    if isinstance(spec, str):
        return parse_transform_formula(spec)
    return spec


# ---------------------------------------------------------------------------
# the core splitter

def _split_frame(data, spec, cuts) -> pd.DataFrame:
    times = np.asarray(data[spec.time_col], dtype=float)
    status = _status_array(data, spec.status_col)
    if np.any(times <= cuts[0]):
        raise NonPositiveTimeError(
            f"all values of {spec.time_col!r} must exceed the first cut "
            f"point {cuts[0]:g}"
        )

    # subject i occupies intervals 1..counts[i]; the last one contains
    # min(time, final cut)
    counts = np.searchsorted(cuts[:-1], times, side="left")
    total = int(counts.sum())
    row_of = np.repeat(np.arange(len(data)), counts)
    offsets_into = np.repeat(np.cumsum(counts) - counts, counts)
    j_idx = np.arange(total) - offsets_into

    tstart = cuts[j_idx]
    tend = cuts[j_idx + 1]
    intlen = tend - tstart
    exposure = np.minimum(intlen, times[row_of] - tstart)
    is_last = j_idx == (counts[row_of] - 1)
    within = times[row_of] <= cuts[-1]
    ped_status = (is_last & within & (status[row_of] == 1)).astype(int)

    labels = np.asarray(interval_labels(cuts), dtype=object)
    out = pd.DataFrame(
        {
            "id": np.asarray(data["id"])[row_of],
            "tstart": tstart,
            "tend": tend,
            "intlen": intlen,
            "interval": labels[j_idx],
            "offset": np.log(exposure),
            "ped_status": ped_status,
        }
    )
    keep = _keep_columns(data, spec)
    if keep:
        covs = data.iloc[row_of][keep].reset_index(drop=True)
        out = pd.concat([out, covs], axis=1)
    return out


def split_tcc(data, spec, cuts=None, max_time=None) -> PedDataset:
    """Split survival data with time-constant covariates into PED form.

    ``cuts`` defaults to the uniquely observed event times.  Follow-up ends
    at the final cut point; subjects surviving past it are administratively
    censored there.
    """
    spec = _as_transform_spec(spec)
    data = _with_id(data)
    _require_columns(data, [spec.time_col, spec.status_col], "survival")
    if cuts is None:
        cuts = default_cuts(
            data[spec.time_col], data[spec.status_col], max_time
        )
    else:
        cuts = _check_cuts(cuts)
    frame = _split_frame(data, spec, cuts)
    return PedDataset(data=frame, cuts=cuts)


# ---------------------------------------------------------------------------
# concurrent time-dependent covariates

def _exposure_table(tdc, tz_var: str) -> pd.DataFrame:
    """Pick the exposure table holding ``tz_var`` out of the tdc argument."""
    if tdc is None:
        raise UnknownColumnError(
            f"transform needs an exposure table containing {tz_var!r}"
        )
    if isinstance(tdc, dict):
        if tz_var not in tdc:
            raise UnknownColumnError(
                f"no exposure table given for tz_var {tz_var!r}"
            )
        table = tdc[tz_var]
    elif isinstance(tdc, pd.DataFrame):
        table = tdc
    else:
        tables = [t for t in tdc if tz_var in t.columns]
        if len(tables) != 1:
            raise UnknownColumnError(
                f"expected exactly one exposure table containing {tz_var!r}, "
                f"found {len(tables)}"
            )
        table = tables[0]
    _require_columns(table, ["id", tz_var], "exposure")
    return table


def split_concurrent(data, spec, tdc, max_time=None) -> PedDataset:
    """Split survival data and merge concurrent covariates by last value
    carried forward.

    Interval split points are the union of the event times and the
    measurement times of all concurrent covariates (within follow-up).
    Every subject needs a measurement at or before its first interval.
    """
    spec = _as_transform_spec(spec)
    data = _with_id(data)
    _require_columns(data, [spec.time_col, spec.status_col], "survival")

    base = default_cuts(data[spec.time_col], data[spec.status_col], max_time)
    extra = []
    for term in spec.concurrent:
        table = _exposure_table(tdc, term.tz_var)
        tz = np.asarray(table[term.tz_var], dtype=float)
        extra.append(tz[(tz > base[0]) & (tz < base[-1])])
    cuts = np.unique(np.concatenate([base] + extra))
    frame = _split_frame(data, spec, cuts)

    for term in spec.concurrent:
        table = _exposure_table(tdc, term.tz_var)
        _require_columns(table, term.columns, "concurrent covariate")
        right = table[["id", term.tz_var, *term.columns]].copy()
        right[term.tz_var] = right[term.tz_var].astype(float)
        # stable two-stage sort: the latest row wins among repeated
        # measurement times of one subject
        right = right.sort_values(["id", term.tz_var], kind="stable")
        right = right.sort_values(term.tz_var, kind="stable")
        right = right.rename(columns={term.tz_var: "tstart"})
        # static versions of merged columns are replaced by the measurements
        frame = frame.drop(
            columns=[c for c in term.columns if c in frame.columns]
        )
        left = frame[["id", "tstart"]].assign(_order=np.arange(len(frame)))
        left = left.sort_values("tstart", kind="stable")
        merged = pd.merge_asof(
            left, right, on="tstart", by="id", direction="backward"
        )
        merged = merged.sort_values("_order", kind="stable")
        for col in term.columns:
            vals = merged[col].to_numpy()
            if pd.isna(vals).any():
                bad = merged.loc[pd.isna(merged[col]), "id"].iloc[0]
                raise MissingBaselineExposureError(bad)
            frame[col] = vals
    return PedDataset(data=frame, cuts=cuts)


# ---------------------------------------------------------------------------
# cumulative effects

def _quadrature_steps(tz_grid: np.ndarray) -> np.ndarray:
    """Grid spacings used as quadrature weights; the first repeats the
    second, and a single-point grid gets weight 1."""
    if tz_grid.size == 1:
        return np.ones(1)
    steps = np.diff(tz_grid)
    return np.concatenate([[steps[0]], steps])


def make_lag_lead(cuts, tz_grid, ll: LagLeadSpec) -> np.ndarray:
    """Lag-lead weight matrix over intervals (rows) and exposure times
    (columns).

    Entry (j, q) is the quadrature step of grid point q if exposure time
    ``tz_grid[q]`` is active for interval j under the rule ``ll``, else 0.
    """
    cuts = _check_cuts(cuts)
    tz_grid = np.asarray(tz_grid, dtype=float)
    tstart = cuts[:-1][:, None]
    tend = cuts[1:][:, None]
    active = ll.active(tstart, tend, tz_grid[None, :])
    return active.astype(float) * _quadrature_steps(tz_grid)[None, :]


def _matrix_col_names(spec: TransformSpec, term, time_col: str) -> dict:
    """Column names for one cumulative term's matrices.

    With a single cumulative term the historical short names are used
    (``<time>_mat``, ``<tz>_latency``, ``LL``); with several terms every
    name is suffixed by the term's tz_var.
    """
    single = len(spec.cumulative) == 1
    tz = term.tz_var
    names = {}
    names["time"] = f"{time_col}_mat" if single else f"{time_col}_{tz}_mat"
    names["latency"] = f"{tz}_latency"
    names["tz"] = tz
    names["ll"] = "LL" if single else f"LL_{tz}"
    names["z"] = (lambda z: z) if single else (lambda z: f"{z}_{tz}")
    return names


def _common_grid(table: pd.DataFrame, tz_var: str, ids) -> np.ndarray:
    """The exposure grid shared by all subjects, validated to be identical."""
    table = table.sort_values(["id", tz_var], kind="stable")
    grouped = {k: v[tz_var].to_numpy(dtype=float) for k, v in table.groupby("id", sort=False)}
    grid = None
    for sid in ids:
        if sid not in grouped:
            raise MissingExposureSeriesError(sid, tz_var)
        g = grouped[sid]
        if grid is None:
            grid = g
        elif g.shape != grid.shape or not np.array_equal(g, grid):
            raise RaggedExposureGridError(
                f"exposure grid for {tz_var!r} differs between subjects "
                f"(subject {sid!r})"
            )
    return grid


def split_cumulative(data, spec, tdc, cuts=None, max_time=None) -> PedDataset:
    """Split survival data and attach cumulative-effect matrix columns.

    For every cumulative term the PED gains matrix columns over the
    exposure grid: the interval end point (time matrix), the latency
    ``tend - tz``, the exposure time itself, the exposure values, and
    lag-lead quadrature weights.  All matrices align row-for-row with the
    flat frame.
    """
    spec = _as_transform_spec(spec)
    data = _with_id(data)
    _require_columns(data, [spec.time_col, spec.status_col], "survival")
    if cuts is None:
        cuts = default_cuts(
            data[spec.time_col], data[spec.status_col], max_time
        )
    else:
        cuts = _check_cuts(cuts)
    frame = _split_frame(data, spec, cuts)

    tend = frame["tend"].to_numpy()
    tstart = frame["tstart"].to_numpy()
    row_ids = frame["id"].to_numpy()
    ids = list(dict.fromkeys(data["id"].tolist()))

    matrices: dict[str, np.ndarray] = {}
    metas: list[CumulativeTermMeta] = []
    for term in spec.cumulative:
        table = _exposure_table(tdc, term.tz_var)
        grid = _common_grid(table, term.tz_var, ids)
        names = _matrix_col_names(spec, term, spec.time_col)
        meta = CumulativeTermMeta(
            tz_var=term.tz_var, tz_grid=grid, ll=term.ll, col_ll=names["ll"]
        )

        steps = _quadrature_steps(grid)
        active = term.ll.active(
            tstart[:, None], tend[:, None], grid[None, :]
        )
        matrices[names["ll"]] = active.astype(float) * steps[None, :]

        for comp in term.components:
            if comp.latency:
                meta.col_latency = names["latency"]
                matrices[names["latency"]] = tend[:, None] - grid[None, :]
            elif comp.name == spec.time_col:
                meta.col_time = names["time"]
                matrices[names["time"]] = np.broadcast_to(
                    tend[:, None], (len(frame), grid.size)
                ).copy()
            elif comp.name == term.tz_var:
                meta.col_tz = names["tz"]
                matrices[names["tz"]] = np.broadcast_to(
                    grid[None, :], (len(frame), grid.size)
                ).copy()
            else:
                _require_columns(table, [comp.name], "exposure value")
                zname = names["z"](comp.name)
                meta.col_z.append(zname)
                sorted_tab = table.sort_values(
                    ["id", term.tz_var], kind="stable"
                )
                per_subject = {
                    k: v[comp.name].to_numpy(dtype=float)
                    for k, v in sorted_tab.groupby("id", sort=False)
                }
                stacked = np.vstack([per_subject[sid] for sid in row_ids])
                matrices[zname] = stacked
        metas.append(meta)

    return PedDataset(
        data=frame, cuts=cuts, matrices=matrices, cumulative=metas
    )


# ---------------------------------------------------------------------------
# one-shot interface

def to_ped(data, formula, cut=None, tdc=None, max_time=None) -> PedDataset:
    """Transform survival data into PED as described by a transform formula."""
    spec = _as_transform_spec(formula)
    if spec.concurrent and spec.cumulative:
        raise PammError(
            "combining concurrent and cumulative terms in one transform is "
            "not supported"
        )
    if spec.concurrent:
        if cut is not None:
            raise PammError(
                "explicit cuts cannot be combined with concurrent terms; "
                "split points follow the measurement times"
            )
        return split_concurrent(data, spec, tdc, max_time=max_time)
    if spec.cumulative:
        return split_cumulative(data, spec, tdc, cuts=cut, max_time=max_time)
    return split_tcc(data, spec, cuts=cut, max_time=max_time)


class PedTransformer(TransformerMixin, BaseEstimator):
    """Estimator-style wrapper around :func:`to_ped`.

    ``fit`` learns the cut points (and checks the formula against the data);
    ``transform`` applies them, so new data is split on the grid learned
    from the training data.
    """

    def __init__(self, formula: str, cut=None, max_time=None):
        self.formula = formula
        self.cut = cut
        self.max_time = max_time

    def fit(self, data, y=None, tdc=None):
        ped = to_ped(
            data, self.formula, cut=self.cut, tdc=tdc, max_time=self.max_time
        )
        self.spec_ = _as_transform_spec(self.formula)
        self.cuts_ = ped.cuts
        return self

    def transform(self, data, tdc=None):
        spec = self.spec_
        if spec.concurrent:
            # measurement grids define the cuts; re-splitting new data keeps
            # the training cuts only when measurements agree
            return split_concurrent(data, spec, tdc, max_time=self.max_time)
        if spec.cumulative:
            return split_cumulative(data, spec, tdc, cuts=self.cuts_)
        return split_tcc(data, spec, cuts=self.cuts_)

    def fit_transform(self, data, y=None, tdc=None):
        return self.fit(data, tdc=tdc).transform(data, tdc=tdc)


# ---------------------------------------------------------------------------
# on-disk bundle

_BUNDLE_META = "meta.json"
_BUNDLE_PED = "ped.csv"


def _atomic_write_text(path: str, text: str):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ped_bundle(ped: PedDataset, path: str):
    """Write a PED dataset as a directory bundle.

    Layout: ``ped.csv`` (flat frame), one ``mat_<name>.csv`` per matrix
    column aligned row-by-row with ``ped.csv``, and ``meta.json`` with cut
    points, exposure grids, lag-lead rules and column roles.  Files are
    written atomically.
    """
    from . import FORMAT_VERSION

    os.makedirs(path, exist_ok=True)
    _atomic_write_text(
        os.path.join(path, _BUNDLE_PED), ped.data.to_csv(index=False)
    )
    for name, mat in ped.matrices.items():
        frame = pd.DataFrame(np.asarray(mat))
        frame.columns = [f"q{j}" for j in range(frame.shape[1])]
        _atomic_write_text(
            os.path.join(path, f"mat_{name}.csv"), frame.to_csv(index=False)
        )
    covariates = {}
    for col in ped.covariate_columns():
        covariates[col] = (
            "numeric"
            if pd.api.types.is_numeric_dtype(ped.data[col])
            else "categorical"
        )
    meta = {
        "format_version": FORMAT_VERSION,
        "cuts": ped.cuts.tolist(),
        "structural": list(STRUCTURAL_COLS),
        "covariates": covariates,
        "matrices": list(ped.matrices.keys()),
        "cumulative": [m.to_dict() for m in ped.cumulative],
    }
    _atomic_write_text(
        os.path.join(path, _BUNDLE_META),
        json.dumps(meta, indent=2, sort_keys=True) + "\n",
    )


def read_ped_bundle(path: str) -> PedDataset:
    """Read a directory bundle written by :func:`write_ped_bundle`."""
    from . import FORMAT_VERSION

    meta_path = os.path.join(path, _BUNDLE_META)
    ped_path = os.path.join(path, _BUNDLE_PED)
    if not (os.path.isfile(meta_path) and os.path.isfile(ped_path)):
        raise NotABundleError(f"{path!r} is not a PED bundle")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise NotABundleError(
            f"unsupported bundle format version {meta.get('format_version')!r}"
        )
    data = pd.read_csv(ped_path)
    for col, role in meta.get("covariates", {}).items():
        if col not in data.columns:
            raise NotABundleError(f"bundle is missing covariate {col!r}")
        if role == "categorical":
            data[col] = data[col].astype(str)
    matrices = {}
    for name in meta.get("matrices", []):
        mat_path = os.path.join(path, f"mat_{name}.csv")
        if not os.path.isfile(mat_path):
            raise NotABundleError(f"bundle is missing matrix file {mat_path!r}")
        mat = pd.read_csv(mat_path).to_numpy(dtype=float)
        if mat.shape[0] != len(data):
            raise NotABundleError(
                f"matrix {name!r} has {mat.shape[0]} rows, ped.csv has "
                f"{len(data)}"
            )
        matrices[name] = mat
    cumulative = [
        CumulativeTermMeta.from_dict(d) for d in meta.get("cumulative", [])
    ]
    return PedDataset(
        data=data,
        cuts=np.asarray(meta["cuts"], dtype=float),
        matrices=matrices,
        cumulative=cumulative,
    )
