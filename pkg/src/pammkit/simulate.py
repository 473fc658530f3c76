"""Simulating survival times with piece-wise constant hazards.

Hazard rates are written as expressions over covariates and time ``t``; the
rate for a follow-up interval is the expression evaluated at the interval
end point.  Survival times are drawn by inverting the piece-wise linear
cumulative hazard.  Cumulative exposure effects enter through ``fcumu``
terms whose weight functions live in :data:`CUMULATIVE_FUNCTIONS`.

Randomness is organized in per-subject substreams: subject ``i`` draws from
a Philox generator keyed by ``(seed, i)``, so results do not change when
other subjects are added or removed, and independent uses (survival draw,
exposure series) occupy separate counter blocks.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .errors import DegenerateDataError
from .formula import (
    CUMULATIVE_FUNCTION_NAMES,
    HazardSpec,
    _dnorm,
    evaluate_expression,
    parse_hazard_expression,
)
from .ped import _check_cuts, _common_grid, _exposure_table, _with_id, make_lag_lead

__all__ = [
    "CUMULATIVE_FUNCTIONS",
    "PexpDist",
    "add_tdc",
    "eval_cumulative_node",
    "f_dlnm",
    "f_elra",
    "f_wce",
    "hazard_rates",
    "rpexp_inverse",
    "sim_pexp",
    "subject_rng",
]

#: counter blocks separating independent uses of one subject's substream
_PURPOSE_SURVIVAL = 0
_PURPOSE_TDC = 1


def subject_rng(seed: int, subject_index: int, purpose: int = 0):
    """Generator for one subject's random draws.

    Streams for different ``(seed, subject_index)`` pairs are independent;
    ``purpose`` selects a disjoint counter block within one stream.
    """
    key = np.array([seed, subject_index], dtype=np.uint64)
    counter = np.array([0, 0, 0, purpose], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


# ---------------------------------------------------------------------------
# the piece-wise exponential distribution

def rpexp_inverse(u, cuts, rates):
    """Survival times solving ``Lambda(T) = -log(u)`` for a piece-wise
    constant hazard.

    ``rates`` holds one row of interval hazards per draw (a single row is
    shared by all draws).  Draws whose target cumulative hazard exceeds
    ``Lambda(cuts[-1])`` return ``inf``.
    """
    cuts = _check_cuts(cuts)
    scalar = np.ndim(u) == 0
    u = np.atleast_1d(np.asarray(u, dtype=float))
    rates = np.asarray(rates, dtype=float)
    if rates.ndim == 1:
        rates = np.broadcast_to(rates, (u.size, rates.size))
    if rates.shape != (u.size, cuts.size - 1):
        raise DegenerateDataError(
            f"rates must have shape ({u.size}, {cuts.size - 1}), got "
            f"{rates.shape}"
        )
    if np.any(rates < 0):
        raise DegenerateDataError("hazard rates must be non-negative")

    widths = np.diff(cuts)
    cumhaz = np.cumsum(rates * widths, axis=1)
    target = -np.log(u)

    j = np.sum(cumhaz < target[:, None], axis=1)
    out = np.full(u.size, np.inf)
    inside = j < widths.size
    jj = j[inside]
    rows = np.nonzero(inside)[0]
    before = np.where(jj > 0, cumhaz[rows, jj - 1], 0.0)
    rate = rates[rows, jj]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cuts[jj] + (target[inside] - before) / rate
    # a zero rate can only be selected when the target sits exactly on the
    # interval boundary
    out[inside] = np.where(rate > 0, t, cuts[jj])
    return float(out[0]) if scalar else out


class PexpDist:
    """Piece-wise exponential distribution over ``[cuts[0], cuts[-1]]``."""

    def __init__(self, cuts, rates):
        self.cuts = _check_cuts(cuts)
        self.rates = np.asarray(rates, dtype=float)
        if self.rates.shape != (self.cuts.size - 1,):
            raise DegenerateDataError(
                f"need one rate per interval, got shape {self.rates.shape}"
            )
        if np.any(self.rates < 0):
            raise DegenerateDataError("hazard rates must be non-negative")

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=float)
        inside = np.clip(
            t[..., None] - self.cuts[:-1], 0.0, np.diff(self.cuts)
        )
        return inside @ self.rates

    def survival(self, t):
        return np.exp(-self.cumulative_hazard(t))

    def sample(self, n: int, rng) -> np.ndarray:
        return rpexp_inverse(rng.uniform(size=n), self.cuts, self.rates)


# ---------------------------------------------------------------------------
# weight functions for cumulative effects

def f_wce(t, tz, z):
    """Exposure effect depending on latency only, scaled by the exposure."""
    return 0.5 * _dnorm(np.asarray(t) - tz, 6.0, 2.5) * z


def f_dlnm(t, tz, z):
    """Latency-weighted nonlinear exposure effect, zero at ``z = -1``."""
    return 20.0 * (
        _dnorm(np.asarray(t) - tz, 6.0, 2.5)
        * (_dnorm(z, 1.25, 2.5) - _dnorm(-1.0, 1.25, 2.5))
    )


def f_elra(t, tz, z):
    """Time-varying exposure effect, zero at ``t = 5``."""
    return (
        5.0
        * (-_dnorm(tz, -1.0, 2.5))
        * (_dnorm(t, 5.0, 1.5) - _dnorm(5.0, 5.0, 1.5))
        * z
    )


CUMULATIVE_FUNCTIONS = {
    "f_wce": f_wce,
    "f_dlnm": f_dlnm,
    "f_elra": f_elra,
}
assert tuple(CUMULATIVE_FUNCTIONS) == CUMULATIVE_FUNCTION_NAMES


def eval_cumulative_node(func, cuts, tz_grid, z, ll) -> np.ndarray:
    """Cumulative effect per subject and interval.

    Approximates ``integral of f(t_j, tz, z(tz)) over the active window``
    by the weighted sum over the exposure grid, evaluated at each interval
    end point.  ``z`` holds one exposure row per subject; the result has
    shape (subjects, intervals).
    """
    cuts = _check_cuts(cuts)
    tz_grid = np.asarray(tz_grid, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    weights = make_lag_lead(cuts, tz_grid, ll)
    tend = cuts[1:]
    vals = func(
        tend[None, :, None], tz_grid[None, None, :], z[:, None, :]
    )
    return np.einsum("jq,njq->nj", weights, vals)


# ---------------------------------------------------------------------------
# simulation

def hazard_rates(data, hazard, cuts, tdc=None) -> np.ndarray:
    """Per-subject, per-interval hazard rates for a hazard expression.

    The expression is evaluated at each interval end point with the
    subject's covariates; cumulative terms add their weighted sums.
    Returns an array of shape (subjects, intervals).
    """
    spec = (
        parse_hazard_expression(hazard) if isinstance(hazard, str) else hazard
    )
    data = _with_id(data)
    cuts = _check_cuts(cuts)
    tend = cuts[1:]

    env = {"t": tend[None, :]}
    for col in data.columns:
        if col == "id":
            continue
        if pd.api.types.is_numeric_dtype(data[col]):
            env[col] = data[col].to_numpy(dtype=float)[:, None]
    eta = evaluate_expression(spec.expr, env)
    eta = np.broadcast_to(
        np.asarray(eta, dtype=float), (len(data), tend.size)
    ).copy()

    ids = list(dict.fromkeys(data["id"].tolist()))
    for node in spec.cumulative:
        func = CUMULATIVE_FUNCTIONS[node.builtin]
        table = _exposure_table(tdc, node.tz_var)
        grid = _common_grid(table, node.tz_var, ids)
        sorted_tab = table.sort_values(["id", node.tz_var], kind="stable")
        per_subject = {
            k: v[node.z_var].to_numpy(dtype=float)
            for k, v in sorted_tab.groupby("id", sort=False)
        }
        z = np.vstack([per_subject[sid] for sid in data["id"]])
        eta += eval_cumulative_node(func, cuts, grid, z, node.ll)

    return np.exp(eta)


def sim_pexp(
    data,
    hazard,
    cuts,
    seed: int,
    tdc=None,
    time_col: str = "time",
    status_col: str = "status",
) -> pd.DataFrame:
    """Draw one survival time per subject from a hazard expression.

    Subjects still alive at the final cut point are censored there with
    status 0.  Draws come from per-subject substreams of ``seed``, so the
    result for a subject does not depend on the rest of the data.
    """
    data = _with_id(data)
    cuts = _check_cuts(cuts)
    rates = hazard_rates(data, hazard, cuts, tdc=tdc)

    u = np.array(
        [
            subject_rng(seed, i, _PURPOSE_SURVIVAL).uniform()
            for i in range(len(data))
        ]
    )
    times = rpexp_inverse(u, cuts, rates)
    out = data.copy()
    out[time_col] = np.minimum(times, cuts[-1])
    out[status_col] = (times <= cuts[-1]).astype(int)
    return out


def add_tdc(
    data,
    tz_grid,
    seed: int,
    tz_name: str = "tz",
    value_name: str = "z",
    ar: tuple[float, float] = (0.8, -0.1),
) -> pd.DataFrame:
    """Simulate one exposure series per subject over a common grid.

    Series follow an AR(2) process with coefficients ``ar`` and unit
    innovations, started from its stationary distribution.  Returns a long
    table with columns (id, tz, value), Q rows per subject.
    """
    data = _with_id(data)
    tz_grid = np.asarray(tz_grid, dtype=float)
    q = tz_grid.size
    if q == 0:
        raise DegenerateDataError("exposure grid must not be empty")

    phi1, phi2 = (float(c) for c in ar)
    if phi1 + phi2 >= 1 or phi2 - phi1 >= 1 or abs(phi2) >= 1:
        raise DegenerateDataError(
            f"AR(2) coefficients ({phi1}, {phi2}) are not stationary"
        )
    # stationary variance and lag-1 autocorrelation for unit innovations
    gamma0 = (1 - phi2) / ((1 + phi2) * ((1 - phi2) ** 2 - phi1**2))
    rho1 = phi1 / (1 - phi2)

    series = np.empty((len(data), q))
    for i in range(len(data)):
        rng = subject_rng(seed, i, _PURPOSE_TDC)
        eps = rng.standard_normal(q)
        z = np.empty(q)
        z[0] = np.sqrt(gamma0) * eps[0]
        if q > 1:
            z[1] = rho1 * z[0] + np.sqrt(gamma0 * (1 - rho1**2)) * eps[1]
        for t in range(2, q):
            z[t] = phi1 * z[t - 1] + phi2 * z[t - 2] + eps[t]
        series[i] = z

    ids = np.repeat(np.asarray(data["id"]), q)
    return pd.DataFrame(
        {
            "id": ids,
            tz_name: np.tile(tz_grid, len(data)),
            value_name: series.ravel(),
        }
    )
