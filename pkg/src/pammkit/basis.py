"""Spline bases, penalties, identifiability constraints and tensor products.

Smooth terms are built from B-spline bases with equally spaced knots that
extend ``degree`` steps beyond the data range.  With that construction the
coefficient vectors annihilated by an order-2 difference penalty map exactly
onto affine functions of the covariate, so the heavily penalized limit of a
smooth is an ordinary linear effect.

Evaluation outside the training range clamps to the nearest boundary, which
continues every basis function as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import DegenerateDataError, ShapeMismatchError

__all__ = [
    "BSplineBasis",
    "PenaltyBlock",
    "bspline_design",
    "difference_penalty",
    "apply_sum_to_zero",
    "tensor_design",
    "matrix_smooth_design",
    "matrix_tensor_design",
]


@dataclass
class BSplineBasis:
    """A univariate B-spline basis defined by its full knot vector.

    ``knots`` has length ``k + degree + 1`` where ``k`` is the number of
    basis functions.  The basis covers ``[knots[degree], knots[k]]`` and is
    a partition of unity there.
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if np.any(np.diff(self.knots) < 0):
            raise DegenerateDataError("knot vector must be nondecreasing")
        if len(self.knots) < 2 * (self.degree + 1):
            raise DegenerateDataError("too few knots for the requested degree")

    @property
    def k(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[self.k])

    @classmethod
    def from_data(cls, x, k: int, degree: int = 3) -> "BSplineBasis":
        """Equally spaced knots over the observed range of ``x``.

        The knot grid extends ``degree`` steps beyond each end so that all
        ``k`` basis functions are well defined on the data range.
        """
        x = np.asarray(x, dtype=float)
        x = x[np.isfinite(x)]
        if x.size == 0:
            raise DegenerateDataError("no finite values to place knots on")
        if k < degree + 1:
            raise DegenerateDataError(
                f"k = {k} is too small for degree {degree}"
            )
        n_interior = k - degree - 1
        distinct = np.unique(x)
        if distinct.size < max(2, n_interior):
            raise DegenerateDataError(
                f"{distinct.size} distinct values cannot support "
                f"{n_interior} interior knots"
            )
        lo, hi = float(distinct[0]), float(distinct[-1])
        step = (hi - lo) / (k - degree)
        knots = lo + (np.arange(k + degree + 1) - degree) * step
        return cls(knots=knots, degree=degree)

    @classmethod
    def from_knots(cls, knots, degree: int) -> "BSplineBasis":
        return cls(knots=np.asarray(knots, dtype=float), degree=degree)

    def design_matrix(self, x) -> np.ndarray:
        """Evaluate all basis functions at ``x`` (clamped to the domain)."""
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        clamped = np.clip(x.ravel(), lo, hi)
        return BSpline.design_matrix(clamped, self.knots, self.degree).toarray()

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "degree": self.degree}

    @classmethod
    def from_dict(cls, d: dict) -> "BSplineBasis":
        return cls.from_knots(d["knots"], d["degree"])


def bspline_design(x, k: int = 10, degree: int = 3):
    """Build a basis from data and evaluate it there.

    Returns ``(design, basis)`` where ``design`` has one column per basis
    function.
    """
    basis = BSplineBasis.from_data(x, k=k, degree=degree)
    return basis.design_matrix(x), basis


@dataclass
class PenaltyBlock:
    """A quadratic penalty on one term's coefficient block.

    ``matrix`` is positive semidefinite; ``null_space_dim`` is the dimension
    of its unpenalized null space.  ``col_slice`` locates the block inside
    the full coefficient vector once the design is assembled.
    """

    matrix: np.ndarray
    null_space_dim: int
    col_slice: slice | None = None


def difference_penalty(k: int, order: int = 2) -> PenaltyBlock:
    """Forward-difference penalty ``S = D'D`` on ``k`` coefficients.

    ``D`` is the order-th difference matrix with shape ``(k - order, k)``;
    the null space of ``S`` consists of coefficient vectors polynomial in
    the index up to degree ``order - 1``.
    """
    if not 1 <= order < k:
        raise DegenerateDataError(
            f"difference order {order} needs more than {order} coefficients"
        )
    D = np.diff(np.eye(k), n=order, axis=0)
    return PenaltyBlock(matrix=D.T @ D, null_space_dim=order)


def apply_sum_to_zero(X: np.ndarray):
    """Reparameterize a design so its fitted effect sums to zero over rows.

    Returns ``(X @ Z, Z)`` where ``Z`` is an orthonormal basis (``p`` by
    ``p - 1``) of the null space of the column-sum vector; original
    coefficients are recovered as ``Z @ coef``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ShapeMismatchError("need a design with at least two columns")
    colsums = X.sum(axis=0)
    Q, _ = np.linalg.qr(colsums[:, None], mode="complete")
    Z = Q[:, 1:]
    return X @ Z, Z


def tensor_design(designs, penalties):
    """Row-wise Kronecker product of marginal designs.

    ``penalties`` holds one marginal penalty matrix per design.  Returns the
    combined design together with one expanded penalty per margin, each
    acting on the full coefficient block (margin 1 varies slowest).
    """
    if len(designs) != len(penalties):
        raise ShapeMismatchError("one penalty per marginal design required")
    if len(designs) < 2:
        raise ShapeMismatchError("tensor products need at least two margins")
    n = designs[0].shape[0]
    for d in designs:
        if d.shape[0] != n:
            raise ShapeMismatchError("marginal designs must share rows")
    X = designs[0]
    for d in designs[1:]:
        X = (X[:, :, None] * d[:, None, :]).reshape(n, -1)
    dims = [d.shape[1] for d in designs]
    expanded = []
    for m, S in enumerate(penalties):
        parts = [
            S if j == m else np.eye(dims[j]) for j in range(len(designs))
        ]
        full = parts[0]
        for p in parts[1:]:
            full = np.kron(full, p)
        expanded.append(full)
    return X, expanded


def _check_matrix_pair(x_mat, by_mat):
    x_mat = np.asarray(x_mat, dtype=float)
    by_mat = np.asarray(by_mat, dtype=float)
    if x_mat.ndim != 2 or by_mat.ndim != 2:
        raise ShapeMismatchError("matrix covariates must be 2-dimensional")
    if x_mat.shape != by_mat.shape:
        raise ShapeMismatchError(
            f"matrix covariate shapes differ: {x_mat.shape} vs {by_mat.shape}"
        )
    return x_mat, by_mat


def matrix_smooth_design(x_mat, by_mat, basis: BSplineBasis) -> np.ndarray:
    """Design rows of a weighted-sum smooth over a matrix covariate.

    Row ``i`` is ``sum_q B(x_mat[i, q]) * by_mat[i, q]``, so the fitted term
    approximates an integral of a smooth in ``x`` against the weights.
    """
    x_mat, by_mat = _check_matrix_pair(x_mat, by_mat)
    n, q = x_mat.shape
    flat = basis.design_matrix(x_mat.ravel())
    weighted = flat * by_mat.ravel()[:, None]
    return weighted.reshape(n, q, basis.k).sum(axis=1)


def matrix_tensor_design(
    x_mats, by_mat, bases, chunk: int = 256
) -> np.ndarray:
    """Weighted-sum tensor smooth over several aligned matrix covariates.

    Row ``i`` is ``sum_q (B1(x1[i,q]) x B2(x2[i,q]) x ...) * by_mat[i, q]``
    with ``x`` the row-wise Kronecker product.  Evaluation is chunked over
    rows to bound memory.
    """
    by_mat = np.asarray(by_mat, dtype=float)
    mats = []
    for m in x_mats:
        m, _ = _check_matrix_pair(m, by_mat)
        mats.append(m)
    n, q = by_mat.shape
    p = int(np.prod([b.k for b in bases]))
    out = np.empty((n, p))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        rows = stop - start
        block = bases[0].design_matrix(mats[0][start:stop].ravel())
        for mat, basis in zip(mats[1:], bases[1:]):
            other = basis.design_matrix(mat[start:stop].ravel())
            block = (block[:, :, None] * other[:, None, :]).reshape(
                rows * q, -1
            )
        block = block * by_mat[start:stop].ravel()[:, None]
        out[start:stop] = block.reshape(rows, q, p).sum(axis=1)
    return out
