"""Fitting penalized Poisson additive models on PED.

The pipeline is standard: assemble a design matrix from the model terms,
maximize the penalized Poisson log-likelihood by iteratively reweighted
least squares (Newton steps with step-halving), and pick smoothing
parameters by a GCV grid search.  The fitted object carries the posterior
coefficient covariance and everything needed to rebuild design columns for
new data, so prediction does not need the training PED.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg

from .basis import (
    BSplineBasis,
    PenaltyBlock,
    apply_sum_to_zero,
    difference_penalty,
    matrix_smooth_design,
    matrix_tensor_design,
    tensor_design,
)
from .errors import (
    DegenerateDataError,
    DivergedError,
    MixedScalarMatrixTermError,
    NoEventsError,
    NoPenaltyError,
    NotPositiveDefiniteError,
    RankDeficientError,
    UnknownColumnError,
    UnresolvedTermError,
)
from .formula import (
    InterceptTerm,
    LinearTerm,
    ModelSpec,
    SmoothTerm,
    TensorTerm,
    parse_model_formula,
)
from .ped import CumulativeTermMeta, PedDataset, STRUCTURAL_COLS, _atomic_write_text

__all__ = [
    "DesignBundle",
    "FittedPamm",
    "GcvPoint",
    "PammModel",
    "TermDesign",
    "build_design",
    "fit_pamm",
    "load_model",
    "penalized_loglik_and_gradient",
    "pirls",
    "posterior_draws",
    "save_model",
    "select_lambda_gcv",
]

_SPLINE_DEGREE = 3
_PENALTY_ORDER = 2

#: GCV grid: log10 lambda from -3 to 7
_GCV_GRID = 10.0 ** np.arange(-3.0, 8.0)
_GCV_INIT = 100.0


# ---------------------------------------------------------------------------
# term evaluation
#
# Every design block is described by a JSON-serializable recipe ("meta") so
# the same code path produces columns at fit time and for new data.

def _column(frame: pd.DataFrame, name: str) -> pd.Series:
    if name not in frame.columns:
        raise UnresolvedTermError(
            f"model term references unknown column {name!r}"
        )
    return frame[name]


def _numeric_column(frame: pd.DataFrame, name: str) -> np.ndarray:
    col = _column(frame, name)
    if not pd.api.types.is_numeric_dtype(col):
        raise UnresolvedTermError(
            f"column {name!r} is categorical where a numeric column is "
            "required"
        )
    return col.to_numpy(dtype=float)


def _matrix(matrices: dict, name: str) -> np.ndarray:
    if name not in matrices:
        raise UnresolvedTermError(
            f"model term references unknown matrix column {name!r}"
        )
    return np.asarray(matrices[name], dtype=float)


def _by_product_matrix(matrices: dict, names) -> np.ndarray:
    out = _matrix(matrices, names[0]).copy()
    for name in names[1:]:
        out *= _matrix(matrices, name)
    return out


def _dummy_columns(frame, name, levels):
    values = _column(frame, name).astype(str).to_numpy()
    unseen = set(np.unique(values)) - set(levels)
    if unseen:
        raise UnknownColumnError(
            f"column {name!r} contains level(s) not seen in training: "
            f"{sorted(unseen)}"
        )
    return np.column_stack([(values == lv).astype(float) for lv in levels[1:]])


def _level_indicator(frame, name, level):
    values = _column(frame, name).astype(str).to_numpy()
    return (values == level).astype(float)


def _eval_term(meta: dict, frame: pd.DataFrame, matrices: dict) -> np.ndarray:
    """Design columns for one term block on an arbitrary data frame."""
    kind = meta["kind"]
    n = len(frame)
    if kind == "intercept":
        return np.ones((n, 1))

    if kind == "linear":
        if meta["levels"] is not None:
            design = _dummy_columns(frame, meta["name"], meta["levels"])
        else:
            design = _numeric_column(frame, meta["name"])[:, None]
        if meta["times"] is not None:
            design = design * _numeric_column(frame, meta["times"])[:, None]
        return design

    if kind in ("smooth", "tensor"):
        bases = [BSplineBasis.from_dict(d) for d in meta["bases"]]
        if meta["matrix"]:
            if meta["by"]:
                by_mat = _by_product_matrix(matrices, meta["by"])
            else:
                by_mat = np.ones_like(_matrix(matrices, meta["vars"][0]))
            mats = [_matrix(matrices, v) for v in meta["vars"]]
            if kind == "smooth":
                design = matrix_smooth_design(mats[0], by_mat, bases[0])
            else:
                design = matrix_tensor_design(mats, by_mat, bases)
        else:
            margins = [
                b.design_matrix(_numeric_column(frame, v))
                for v, b in zip(meta["vars"], bases)
            ]
            design = margins[0]
            for m in margins[1:]:
                design = (design[:, :, None] * m[:, None, :]).reshape(n, -1)
            if meta["constraint"] is not None:
                design = design @ np.asarray(meta["constraint"])
            for name in meta["by"]:
                design = design * _numeric_column(frame, name)[:, None]
            if meta["by_level"] is not None:
                g, level = meta["by_level"]
                design = design * _level_indicator(frame, g, level)[:, None]
        return design

    raise UnresolvedTermError(f"unknown term kind {kind!r}")


# ---------------------------------------------------------------------------
# design assembly

@dataclass
class TermDesign:
    """One block of design columns with its evaluation recipe."""

    label: str
    kind: str
    cols: slice
    coef_names: list[str]
    meta: dict
    penalty_indices: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "kind": self.kind,
            "start": self.cols.start,
            "stop": self.cols.stop,
            "coef_names": self.coef_names,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TermDesign":
        return cls(
            label=d["label"],
            kind=d["kind"],
            cols=slice(d["start"], d["stop"]),
            coef_names=list(d["coef_names"]),
            meta=d["meta"],
        )


@dataclass
class DesignBundle:
    X: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    penalties: list[PenaltyBlock]
    penalty_labels: list[str]
    terms: list[TermDesign]
    coef_names: list[str]

    @property
    def term_map(self) -> dict:
        return {t.label: t.cols for t in self.terms}

    def penalty_total(self, lambdas) -> np.ndarray:
        """Sum of the penalty blocks scaled by their lambdas, embedded."""
        p = self.X.shape[1]
        S = np.zeros((p, p))
        for lam, block in zip(lambdas, self.penalties):
            sl = block.col_slice
            S[sl, sl] += lam * block.matrix
        return S


class _Draft:
    """A term's design and penalties before column offsets are known."""

    def __init__(self, label, kind, design, coef_base, meta, penalties=()):
        self.label = label
        self.kind = kind
        self.design = design
        self.meta = meta
        self.penalties = list(penalties)
        if isinstance(coef_base, str):
            self.coef_names = [coef_base]
        elif coef_base is not None:
            self.coef_names = list(coef_base)
        else:
            self.coef_names = [
                f"{label}.{i + 1}" for i in range(design.shape[1])
            ]


def _is_categorical(frame, name) -> bool:
    return name in frame.columns and not pd.api.types.is_numeric_dtype(
        frame[name]
    )


def _levels_in_order(frame, name) -> list[str]:
    return list(dict.fromkeys(frame[name].astype(str)))


def _build_linear(term: LinearTerm, frame) -> list[_Draft]:
    times = None
    if term.times is not None:
        times = "tend" if term.times == "t" else term.times
        _numeric_column(frame, times)
    if _is_categorical(frame, term.name):
        levels = _levels_in_order(frame, term.name)
        if len(levels) < 2:
            raise DegenerateDataError(
                f"categorical column {term.name!r} has a single level"
            )
        names = [f"{term.name}{lv}" for lv in levels[1:]]
        if times is not None:
            names = [f"{nm}:{term.times}" for nm in names]
        meta = {
            "kind": "linear",
            "name": term.name,
            "levels": levels,
            "times": times,
        }
    else:
        _numeric_column(frame, term.name)
        levels = None
        names = [term.label]
        meta = {
            "kind": "linear",
            "name": term.name,
            "levels": None,
            "times": times,
        }
    design = _eval_term(meta, frame, {})
    return [_Draft(term.label, "linear", design, names, meta)]


def _classify_by(term, frame, matrices):
    """Split by-variables into numeric columns, one optional categorical
    column, and matrix names."""
    numeric, categorical, mats = [], [], []
    for name in term.by:
        if name in matrices:
            mats.append(name)
        elif _is_categorical(frame, name):
            categorical.append(name)
        else:
            _numeric_column(frame, name)
            numeric.append(name)
    if mats and (numeric or categorical):
        raise MixedScalarMatrixTermError(
            f"term {term.label!r} mixes matrix and scalar by-variables"
        )
    if len(categorical) > 1 or (categorical and numeric):
        raise UnresolvedTermError(
            f"term {term.label!r}: a categorical by-variable must appear "
            "alone"
        )
    return numeric, (categorical[0] if categorical else None), mats


def _build_smooth_like(term, frame, matrices) -> list[_Draft]:
    """Shared builder for s(...) and te(...) terms."""
    if isinstance(term, SmoothTerm):
        variables, ks, kind = (term.var,), (term.k,), "smooth"
    else:
        variables, ks, kind = tuple(term.vars), tuple(term.k), "tensor"

    in_matrices = [v in matrices for v in variables]
    by_numeric, by_factor, by_mats = _classify_by(term, frame, matrices)

    if any(in_matrices):
        if not all(in_matrices):
            raise MixedScalarMatrixTermError(
                f"term {term.label!r} mixes matrix and scalar covariates"
            )
        if by_numeric or by_factor:
            raise MixedScalarMatrixTermError(
                f"term {term.label!r} needs matrix by-variables"
            )
        if by_mats:
            by_mat = _by_product_matrix(matrices, by_mats)
        else:
            by_mat = np.ones_like(_matrix(matrices, variables[0]))
        active = by_mat != 0
        bases = []
        for v, k in zip(variables, ks):
            entries = _matrix(matrices, v)[active]
            bases.append(
                BSplineBasis.from_data(entries, k=k, degree=_SPLINE_DEGREE)
            )
        meta = {
            "kind": kind,
            "vars": list(variables),
            "bases": [b.to_dict() for b in bases],
            "matrix": True,
            "by": list(by_mats),
            "by_level": None,
            "constraint": None,
        }
        design = _eval_term(meta, frame, matrices)
        penalties = _margin_penalties([b.k for b in bases])
        return [_Draft(term.label, kind, design, None, meta, penalties)]

    if by_mats:
        raise MixedScalarMatrixTermError(
            f"term {term.label!r} applies matrix by-variables to scalar "
            "covariates"
        )

    bases = [
        BSplineBasis.from_data(
            _numeric_column(frame, v), k=k, degree=_SPLINE_DEGREE
        )
        for v, k in zip(variables, ks)
    ]
    margins = [
        b.design_matrix(_numeric_column(frame, v))
        for v, b in zip(variables, bases)
    ]
    raw = margins[0]
    for m in margins[1:]:
        raw = (raw[:, :, None] * m[:, None, :]).reshape(len(frame), -1)
    raw_penalties = _margin_penalties([b.k for b in bases])

    constrained = not by_numeric
    if constrained:
        _, Z = apply_sum_to_zero(raw)
        penalties = [
            PenaltyBlock(
                matrix=Z.T @ blk.matrix @ Z,
                null_space_dim=_null_dim(Z.T @ blk.matrix @ Z),
            )
            for blk in raw_penalties
        ]
        constraint = Z.tolist()
    else:
        penalties = raw_penalties
        constraint = None

    base_meta = {
        "kind": kind,
        "vars": list(variables),
        "bases": [b.to_dict() for b in bases],
        "matrix": False,
        "by": list(by_numeric),
        "by_level": None,
        "constraint": constraint,
    }
    if by_factor is None:
        design = _eval_term(base_meta, frame, matrices)
        return [_Draft(term.label, kind, design, None, base_meta, penalties)]

    # categorical by: one centered deviation smooth per non-reference level,
    # each with its own smoothing parameter; the user adds the reference
    # smooth and the factor main effect as separate terms
    levels = _levels_in_order(frame, by_factor)
    if len(levels) < 2:
        raise DegenerateDataError(
            f"by-variable {by_factor!r} has a single level"
        )
    if isinstance(term, SmoothTerm):
        bare = f"s({term.var})"
    else:
        bare = f"te({','.join(term.vars)})"
    drafts = []
    for level in levels[1:]:
        meta = dict(base_meta, by_level=[by_factor, level])
        design = _eval_term(meta, frame, matrices)
        label = f"{bare}:{by_factor}{level}"
        block_copies = [
            PenaltyBlock(matrix=b.matrix.copy(), null_space_dim=b.null_space_dim)
            for b in penalties
        ]
        drafts.append(_Draft(label, kind, design, None, meta, block_copies))
    return drafts


def _margin_penalties(dims: list[int]) -> list[PenaltyBlock]:
    """Difference penalties for each margin, expanded to the product block."""
    singles = [difference_penalty(k, order=_PENALTY_ORDER) for k in dims]
    if len(dims) == 1:
        return singles
    expanded = []
    for m, blk in enumerate(singles):
        parts = [
            blk.matrix if j == m else np.eye(dims[j])
            for j in range(len(dims))
        ]
        full = parts[0]
        for part in parts[1:]:
            full = np.kron(full, part)
        expanded.append(
            PenaltyBlock(matrix=full, null_space_dim=_null_dim(full))
        )
    return expanded


def _null_dim(S: np.ndarray) -> int:
    return S.shape[0] - np.linalg.matrix_rank(S)


def build_design(ped: PedDataset, model) -> DesignBundle:
    """Assemble the design matrix, response, offset and penalties.

    The intercept column comes first, then each term's block in formula
    order.  Categorical covariates are dummy-coded against the first level
    in data order.
    """
    spec = parse_model_formula(model) if isinstance(model, str) else model
    frame = ped.data
    if spec.response not in frame.columns:
        raise UnknownColumnError(
            f"response column {spec.response!r} not found"
        )
    y = frame[spec.response].to_numpy(dtype=float)
    offset = frame["offset"].to_numpy(dtype=float)

    drafts = [
        _Draft("(Intercept)", "intercept", np.ones((len(frame), 1)),
               "(Intercept)", {"kind": "intercept"})
    ]
    for term in spec.terms:
        if isinstance(term, InterceptTerm):
            continue
        if isinstance(term, LinearTerm):
            drafts.extend(_build_linear(term, frame))
        else:
            drafts.extend(_build_smooth_like(term, frame, ped.matrices))

    seen = set()
    for d in drafts:
        if d.label in seen:
            raise UnresolvedTermError(f"duplicate model term {d.label!r}")
        seen.add(d.label)

    X = np.column_stack([d.design for d in drafts])
    if not np.isfinite(X).all():
        raise DegenerateDataError("design matrix contains non-finite values")

    terms: list[TermDesign] = []
    penalties: list[PenaltyBlock] = []
    penalty_labels: list[str] = []
    coef_names: list[str] = []
    start = 0
    for d in drafts:
        stop = start + d.design.shape[1]
        td = TermDesign(
            label=d.label,
            kind=d.kind,
            cols=slice(start, stop),
            coef_names=list(d.coef_names),
            meta=d.meta,
        )
        for i, blk in enumerate(d.penalties):
            blk.col_slice = slice(start, stop)
            td.penalty_indices.append(len(penalties))
            penalties.append(blk)
            suffix = f"[{i + 1}]" if len(d.penalties) > 1 else ""
            penalty_labels.append(d.label + suffix)
        coef_names.extend(td.coef_names)
        terms.append(td)
        start = stop

    return DesignBundle(
        X=X,
        y=y,
        offset=offset,
        penalties=penalties,
        penalty_labels=penalty_labels,
        terms=terms,
        coef_names=coef_names,
    )


# ---------------------------------------------------------------------------
# penalized likelihood machinery

def _poisson_deviance(y, mu) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return 2.0 * float(np.sum(term - (y - mu)))


def penalized_loglik_and_gradient(bundle: DesignBundle, beta, lambdas):
    """Penalized Poisson log-likelihood and its gradient at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    S = bundle.penalty_total(lambdas)
    eta = bundle.X @ beta
    mu = np.exp(eta + bundle.offset)
    value = float(np.sum(bundle.y * eta - mu) - 0.5 * beta @ S @ beta)
    gradient = bundle.X.T @ (bundle.y - mu) - S @ beta
    return value, gradient


def _chol_factor(H: np.ndarray):
    """Cholesky factor of a penalized normal matrix, with escalating jitter.

    Raises RankDeficient with the detected rank when the matrix stays
    singular after the largest jitter.
    """
    p = H.shape[0]
    scale = float(np.mean(np.diag(H)))
    if scale <= 0 or not np.isfinite(scale):
        scale = 1.0
    for jitter in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            return scipy.linalg.cho_factor(
                H + jitter * scale * np.eye(p), lower=True
            )
        except np.linalg.LinAlgError:
            continue
    _, _, rank, _ = scipy.linalg.lapack.dpstrf(H, lower=1)
    raise RankDeficientError(
        f"penalized normal matrix is rank deficient (rank {int(rank)} of "
        f"{p}); remove redundant terms or add penalties"
    )


@dataclass
class PirlsResult:
    beta: np.ndarray
    mu: np.ndarray
    deviance: float
    penalized_deviance: float
    converged: bool
    iterations: int
    hessian: np.ndarray
    chol: tuple


def pirls(bundle: DesignBundle, lambdas, init=None) -> PirlsResult:
    """Maximize the penalized Poisson log-likelihood by Newton steps.

    Convergence: relative change in penalized deviance below 1e-8, at most
    100 iterations, with step-halving whenever a step does not improve.
    """
    X, y, offset = bundle.X, bundle.y, bundle.offset
    n, p = X.shape
    if y.sum() <= 0:
        raise NoEventsError("response contains no events")

    S = bundle.penalty_total(lambdas)
    if init is not None:
        beta = np.asarray(init, dtype=float).copy()
    else:
        beta = np.zeros(p)
        exposure = float(np.sum(np.exp(offset)))
        beta[0] = np.log((y.sum() + 0.5) / exposure)

    def pdev(b, mu):
        return _poisson_deviance(y, mu) + float(b @ S @ b)

    eta = X @ beta
    mu = np.exp(eta + offset)
    if not np.isfinite(mu).all():
        raise DivergedError("starting values give non-finite means")
    current = pdev(beta, mu)

    converged = False
    iterations = 0
    hessian = None
    chol = None
    for iterations in range(1, 101):
        grad = X.T @ (y - mu) - S @ beta
        hessian = (X * mu[:, None]).T @ X + S
        chol = _chol_factor(hessian)
        step = scipy.linalg.cho_solve(chol, grad)

        factor = 1.0
        for _ in range(31):
            cand = beta + factor * step
            eta = X @ cand
            with np.errstate(over="ignore"):
                mu_cand = np.exp(eta + offset)
            if np.isfinite(mu_cand).all():
                new = pdev(cand, mu_cand)
                # tolerate float noise so near-converged steps still pass
                if new <= current + 1e-10 * (abs(current) + 1.0):
                    break
            factor /= 2.0
        else:
            raise DivergedError(
                "step-halving failed to find an improving step"
            )

        beta = cand
        mu = mu_cand
        if abs(current - new) < 1e-8 * (abs(new) + 0.1):
            current = new
            converged = True
            break
        current = new

    # refresh curvature at the accepted coefficients
    hessian = (X * mu[:, None]).T @ X + S
    chol = _chol_factor(hessian)
    return PirlsResult(
        beta=beta,
        mu=mu,
        deviance=_poisson_deviance(y, mu),
        penalized_deviance=current,
        converged=converged,
        iterations=iterations,
        hessian=hessian,
        chol=chol,
    )


# ---------------------------------------------------------------------------
# smoothing-parameter selection

@dataclass
class GcvPoint:
    lambdas: tuple
    score: float
    edf: float


def _edf_diagonal(bundle: DesignBundle, res: PirlsResult) -> np.ndarray:
    """Diagonal of the effective-degrees-of-freedom decomposition."""
    XtWX = (bundle.X * res.mu[:, None]).T @ bundle.X
    return np.diag(scipy.linalg.cho_solve(res.chol, XtWX))


def select_lambda_gcv(bundle: DesignBundle):
    """Coordinate-wise GCV grid search over the penalty blocks.

    Each block's lambda sweeps log10 values -3..7; with several blocks the
    sweep runs twice.  Returns the selected lambdas and the evaluation
    trace.
    """
    n_blocks = len(bundle.penalties)
    if n_blocks == 0:
        raise NoPenaltyError("the model has no penalized terms")
    n = bundle.X.shape[0]

    lambdas = np.full(n_blocks, _GCV_INIT)
    cache: dict = {}
    trace: list[GcvPoint] = []
    warm = {"beta": None}

    def evaluate(lams: np.ndarray):
        key = tuple(lams)
        if key not in cache:
            res = pirls(bundle, lams, init=warm["beta"])
            edf = float(np.sum(_edf_diagonal(bundle, res)))
            score = n * res.deviance / (n - edf) ** 2
            cache[key] = (score, edf, res.beta)
            trace.append(GcvPoint(lambdas=key, score=score, edf=edf))
        return cache[key]

    passes = 1 if n_blocks == 1 else 2
    for _ in range(passes):
        for b in range(n_blocks):
            best_score = np.inf
            best_value = lambdas[b]
            for value in _GCV_GRID:
                cand = lambdas.copy()
                cand[b] = value
                score, _, beta = evaluate(cand)
                if score < best_score:
                    best_score = score
                    best_value = value
                    warm["beta"] = beta
            lambdas[b] = best_value
    return lambdas, trace


# ---------------------------------------------------------------------------
# the fitted model

@dataclass
class FittedPamm:
    """A fitted model plus the metadata needed to predict from it."""

    model: str
    response: str
    coef_names: list[str]
    beta: np.ndarray
    V_beta: np.ndarray
    lambda_: np.ndarray
    lambda_labels: list[str]
    edf: dict
    edf_total: float
    deviance: float
    converged: bool
    n_obs: int
    terms: list[TermDesign]
    cuts: np.ndarray
    cumulative: list[CumulativeTermMeta]
    sample: dict
    gcv_trace: list[GcvPoint] | None = None

    @property
    def term_map(self) -> dict:
        return {t.label: t.cols for t in self.terms}

    def design_for(self, frame: pd.DataFrame, matrices=None) -> np.ndarray:
        """Rebuild design columns for new data using the stored recipes."""
        matrices = matrices if matrices is not None else {}
        X = np.column_stack(
            [_eval_term(t.meta, frame, matrices) for t in self.terms]
        )
        if X.shape[1] != self.beta.size:
            raise DegenerateDataError(
                f"rebuilt design has {X.shape[1]} columns, expected "
                f"{self.beta.size}"
            )
        if not np.isfinite(X).all():
            raise DegenerateDataError(
                "design matrix contains non-finite values"
            )
        return X

    def linear_predictor(self, frame, matrices=None):
        return self.design_for(frame, matrices) @ self.beta

    def term_chi_square(self, label: str) -> float:
        """Wald statistic of one term block against zero."""
        sl = self.term_map[label]
        b = self.beta[sl]
        V = self.V_beta[sl, sl]
        return float(b @ np.linalg.solve(V, b))

    def summary(self) -> str:
        lines = [
            f"model: {self.model}",
            f"observations: {self.n_obs}",
            f"deviance: {self.deviance:.6g}   edf total: "
            f"{self.edf_total:.3f}   converged: {self.converged}",
        ]
        if len(self.lambda_):
            lam = ", ".join(
                f"{lbl}={val:g}"
                for lbl, val in zip(self.lambda_labels, self.lambda_)
            )
            lines.append(f"lambda: {lam}")
        lines.append("terms:")
        for t in self.terms:
            width = t.cols.stop - t.cols.start
            chi2 = self.term_chi_square(t.label)
            lines.append(
                f"  {t.label:<30} cols {width:>3}  edf "
                f"{self.edf[t.label]:>7.3f}  chi2 {chi2:>10.3f}"
            )
        return "\n".join(lines)


def fit_pamm(ped: PedDataset, model, lambda_="gcv") -> FittedPamm:
    """Fit a model on PED.

    ``lambda_`` is ``"gcv"`` (grid-search selection), a scalar applied to
    every penalty block, or a sequence with one value per block.
    """
    spec = parse_model_formula(model) if isinstance(model, str) else model
    bundle = build_design(ped, spec)

    trace = None
    if len(bundle.penalties) == 0:
        lambdas = np.empty(0)
    elif isinstance(lambda_, str):
        if lambda_ != "gcv":
            raise ValueError(
                f"lambda_ must be 'gcv', a number or a sequence, got "
                f"{lambda_!r}"
            )
        lambdas, trace = select_lambda_gcv(bundle)
    elif np.ndim(lambda_) == 0:
        lambdas = np.full(len(bundle.penalties), float(lambda_))
    else:
        lambdas = np.asarray(lambda_, dtype=float)
        if lambdas.size != len(bundle.penalties):
            raise ValueError(
                f"need {len(bundle.penalties)} lambda values, got "
                f"{lambdas.size}"
            )

    res = pirls(bundle, lambdas)
    V_beta = scipy.linalg.cho_solve(res.chol, np.eye(bundle.X.shape[1]))
    V_beta = (V_beta + V_beta.T) / 2.0

    edf_diag = _edf_diagonal(bundle, res)
    edf = {
        t.label: float(np.sum(edf_diag[t.cols])) for t in bundle.terms
    }

    from .predict import sample_info

    covariates = {}
    sample_row = sample_info(ped)
    for col in sample_row.columns:
        if pd.api.types.is_numeric_dtype(ped.data[col]):
            covariates[col] = {
                "kind": "numeric",
                "value": float(sample_row[col].iloc[0]),
            }
        else:
            covariates[col] = {
                "kind": "categorical",
                "value": str(sample_row[col].iloc[0]),
                "levels": _levels_in_order(ped.data, col),
            }
    matrix_means = {
        name: np.asarray(mat, dtype=float).mean(axis=0).tolist()
        for name, mat in ped.matrices.items()
    }

    return FittedPamm(
        model=str(spec),
        response=spec.response,
        coef_names=bundle.coef_names,
        beta=res.beta,
        V_beta=V_beta,
        lambda_=lambdas,
        lambda_labels=bundle.penalty_labels,
        edf=edf,
        edf_total=float(np.sum(edf_diag)),
        deviance=res.deviance,
        converged=res.converged,
        n_obs=bundle.X.shape[0],
        terms=bundle.terms,
        cuts=np.asarray(ped.cuts, dtype=float),
        cumulative=list(ped.cumulative),
        sample={"covariates": covariates, "matrix_means": matrix_means},
        gcv_trace=trace,
    )


def posterior_draws(fit: FittedPamm, n_draws: int, seed: int) -> np.ndarray:
    """Draws from the normal posterior of the coefficients."""
    try:
        L = np.linalg.cholesky(fit.V_beta)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            "posterior covariance is not positive definite"
        ) from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, fit.beta.size))
    return fit.beta[None, :] + z @ L.T


# ---------------------------------------------------------------------------
# persistence

def save_model(fit: FittedPamm, path: str):
    """Write a fitted model as one self-contained JSON file."""
    from . import FORMAT_VERSION

    payload = {
        "format_version": FORMAT_VERSION,
        "model": fit.model,
        "response": fit.response,
        "coef_names": fit.coef_names,
        "beta": fit.beta.tolist(),
        "V_beta": fit.V_beta.tolist(),
        "lambda": fit.lambda_.tolist(),
        "lambda_labels": fit.lambda_labels,
        "edf": fit.edf,
        "edf_total": fit.edf_total,
        "deviance": fit.deviance,
        "converged": fit.converged,
        "n_obs": fit.n_obs,
        "terms": [t.to_dict() for t in fit.terms],
        "cuts": fit.cuts.tolist(),
        "cumulative": [m.to_dict() for m in fit.cumulative],
        "sample": fit.sample,
    }
    _atomic_write_text(
        path, json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def load_model(path: str) -> FittedPamm:
    from . import FORMAT_VERSION
    from .errors import NotABundleError

    if not os.path.isfile(path):
        raise NotABundleError(f"{path!r} is not a model file")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != FORMAT_VERSION:
        raise NotABundleError(
            f"unsupported model format version "
            f"{payload.get('format_version')!r}"
        )
    return FittedPamm(
        model=payload["model"],
        response=payload["response"],
        coef_names=list(payload["coef_names"]),
        beta=np.asarray(payload["beta"], dtype=float),
        V_beta=np.asarray(payload["V_beta"], dtype=float),
        lambda_=np.asarray(payload["lambda"], dtype=float),
        lambda_labels=list(payload["lambda_labels"]),
        edf={k: float(v) for k, v in payload["edf"].items()},
        edf_total=float(payload["edf_total"]),
        deviance=float(payload["deviance"]),
        converged=bool(payload["converged"]),
        n_obs=int(payload["n_obs"]),
        terms=[TermDesign.from_dict(d) for d in payload["terms"]],
        cuts=np.asarray(payload["cuts"], dtype=float),
        cumulative=[
            CumulativeTermMeta.from_dict(d) for d in payload["cumulative"]
        ],
        sample=payload["sample"],
    )


# ---------------------------------------------------------------------------
# estimator-style wrapper

class PammModel:
    """Estimator-style interface: parse once, fit on PED, predict hazards."""

    def __init__(self, formula: str, lambda_="gcv"):
        self.formula = formula
        self.lambda_ = lambda_

    def get_params(self, deep=True):
        return {"formula": self.formula, "lambda_": self.lambda_}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in ("formula", "lambda_"):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, ped: PedDataset, y=None):
        self.model_ = fit_pamm(ped, self.formula, lambda_=self.lambda_)
        return self

    def predict(self, X) -> np.ndarray:
        """Hazard per row of a PED or a prediction frame."""
        if isinstance(X, PedDataset):
            eta = self.model_.linear_predictor(X.data, X.matrices)
        else:
            eta = self.model_.linear_predictor(X)
        return np.exp(eta)
