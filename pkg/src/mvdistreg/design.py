"""Design matrices, penalties and identifiability constraints.

Every additive effect is represented by an :class:`EffectTerm`: a design
matrix builder, a symmetric PSD penalty with known rank, an optional
constraint matrix whose null space the coefficients live in, and the
inverse-gamma hyperparameters of the smoothing variance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "EffectTerm",
    "bspline_design",
    "bspline_knots",
    "difference_penalty",
    "mrf_penalty",
    "centering_constraint",
    "constraint_nullspace",
    "intercept_term",
    "linear_term",
    "pspline_term",
    "random_effect_term",
    "mrf_term",
    "evaluate_predictor",
]

DEFAULT_HYPER = 0.001  # a_sk = b_sk default


def bspline_knots(x_min: float, x_max: float, num_inner_knots: int, degree: int):
    """Equidistant knot vector spanning [x_min, x_max] with exterior padding."""
    if x_max <= x_min:
        raise ValueError("degenerate covariate: no spread between min and max")
    step = (x_max - x_min) / num_inner_knots
    return x_min + step * np.arange(-degree, num_inner_knots + degree + 1)


def bspline_design(x, num_inner_knots: int = 20, degree: int = 3, knots=None):
    """B-spline design matrix on equidistant knots.

    Rows form a partition of unity; the basis size is
    ``num_inner_knots + degree``.  Values outside the knot range are clamped
    to it (with a warning), which preserves the partition of unity for
    prediction grids.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("covariate contains non-finite values")
    if num_inner_knots < 1 or degree < 1:
        raise ValueError("need num_inner_knots >= 1 and degree >= 1")
    if knots is None:
        knots = bspline_knots(x.min(), x.max(), num_inner_knots, degree)
    lo, hi = knots[degree], knots[-degree - 1]
    if np.any(x < lo) or np.any(x > hi):
        warnings.warn("covariate values outside the knot range were clamped")
        x = np.clip(x, lo, hi)
    Z = BSpline.design_matrix(x, knots, degree).toarray()
    return Z, knots


def difference_penalty(L: int, order: int = 2) -> np.ndarray:
    """P-spline penalty D_order' D_order; rank L - order."""
    if L <= order:
        raise ValueError(f"basis size {L} must exceed difference order {order}")
    D = np.diff(np.eye(L), n=order, axis=0)
    return D.T @ D


def mrf_penalty(neighbors: dict) -> tuple[np.ndarray, list]:
    """Graph-Laplacian penalty from neighbor lists.

    Returns (K, levels) with ``levels`` fixing the coefficient order.
    The adjacency must be symmetric and free of self-loops.
    """
    levels = sorted(neighbors)
    index = {g: i for i, g in enumerate(levels)}
    G = len(levels)
    K = np.zeros((G, G))
    for g, nbrs in neighbors.items():
        for h in nbrs:
            if h == g:
                raise ValueError(f"self-loop at region {g!r}")
            if h not in index:
                raise ValueError(f"region {h!r} is a neighbor but has no entry")
            if g not in neighbors.get(h, ()):
                raise ValueError(f"asymmetric adjacency between {g!r} and {h!r}")
            K[index[g], index[h]] = -1.0
    np.fill_diagonal(K, -K.sum(axis=1))
    return K, levels


def _laplacian_rank(K: np.ndarray) -> int:
    eigvals = np.linalg.eigvalsh(K)
    return int(np.sum(eigvals > 1e-8 * max(1.0, eigvals.max())))


def centering_constraint(Z: np.ndarray) -> np.ndarray:
    """Single-row constraint A = column means, so A b = 0 centers the effect."""
    Z = np.asarray(Z, dtype=float)
    if Z.size == 0:
        raise ValueError("empty design matrix")
    return Z.mean(axis=0, keepdims=True)


def constraint_nullspace(A: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the null space of A (full row rank assumed)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > 1e-12 * max(1.0, s.max() if s.size else 0.0)))
    return vt[rank:].T


@dataclass
class EffectTerm:
    """One additive effect: design, penalty, constraint, hyperparameters."""

    kind: str
    label: str
    covariates: tuple[str, ...]
    Z: np.ndarray
    K: np.ndarray | None  # None encodes the flat prior K = 0
    rank: int
    A: np.ndarray | None = None
    a: float = DEFAULT_HYPER
    b: float = DEFAULT_HYPER
    # builder metadata used to evaluate the term on new covariate values
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.Z.shape[1]

    @property
    def penalized(self) -> bool:
        return self.K is not None

    def design_for(self, data) -> np.ndarray:
        """Design matrix of this term at new covariate values."""
        n = len(next(iter(data.values()))) if isinstance(data, dict) else len(data)
        if self.kind == "intercept":
            return np.ones((n, 1))
        col = np.asarray(data[self.covariates[0]], dtype=float)
        if self.kind == "linear":
            return col[:, None] - self.meta["center"]
        if self.kind == "pspline":
            Z, _ = bspline_design(
                col, degree=self.meta["degree"], knots=self.meta["knots"]
            )
            return Z
        if self.kind in ("random_effect", "mrf"):
            levels = self.meta["levels"]
            index = {g: i for i, g in enumerate(levels)}
            raw = data[self.covariates[0]]
            Z = np.zeros((n, len(levels)))
            for i, g in enumerate(np.asarray(raw)):
                try:
                    Z[i, index[g]] = 1.0
                except KeyError:
                    raise ValueError(f"unknown level {g!r} for term {self.label}")
            return Z
        raise ValueError(f"unknown term kind {self.kind!r}")


def intercept_term(n: int, prior: str = "flat") -> EffectTerm:
    """Constant shift; flat prior by default, optionally a vague Gaussian."""
    Z = np.ones((n, 1))
    if prior == "flat":
        K, rank = None, 0
    elif prior == "vague":
        K, rank = np.eye(1), 1
    else:
        raise ValueError(f"intercept prior must be 'flat' or 'vague', got {prior!r}")
    return EffectTerm("intercept", "intercept", (), Z, K, rank)


def linear_term(x, name: str, prior: str = "flat", center: bool = True) -> EffectTerm:
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        raise ValueError(f"degenerate covariate {name!r}: constant column")
    c = x.mean() if center else 0.0
    Z = (x - c)[:, None]
    if prior == "flat":
        K, rank = None, 0
    elif prior == "ridge":
        K, rank = np.eye(1), 1
    else:
        raise ValueError(f"linear prior must be 'flat' or 'ridge', got {prior!r}")
    meta = {"center": c}
    return EffectTerm("linear", f"linear({name})", (name,), Z, K, rank, meta=meta)


def pspline_term(
    x,
    name: str,
    num_inner_knots: int = 20,
    degree: int = 3,
    penalty_order: int = 2,
    a: float = DEFAULT_HYPER,
    b: float = DEFAULT_HYPER,
) -> EffectTerm:
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        raise ValueError(f"degenerate covariate {name!r}: constant column")
    Z, knots = bspline_design(x, num_inner_knots, degree)
    K = difference_penalty(Z.shape[1], penalty_order)
    meta = {"knots": knots, "degree": degree}
    return EffectTerm(
        "pspline",
        f"ps({name})",
        (name,),
        Z,
        K,
        Z.shape[1] - penalty_order,
        a=a,
        b=b,
        meta=meta,
    )


def _indicator(codes) -> tuple[np.ndarray, list]:
    codes = np.asarray(codes)
    levels = sorted(set(codes.tolist()))
    index = {g: i for i, g in enumerate(levels)}
    Z = np.zeros((len(codes), len(levels)))
    for i, g in enumerate(codes.tolist()):
        Z[i, index[g]] = 1.0
    return Z, levels


def random_effect_term(
    codes, name: str, a: float = DEFAULT_HYPER, b: float = DEFAULT_HYPER
) -> EffectTerm:
    """Grouping-variable effect with iid Gaussian prior (K = identity)."""
    Z, levels = _indicator(codes)
    G = len(levels)
    return EffectTerm(
        "random_effect",
        f"re({name})",
        (name,),
        Z,
        np.eye(G),
        G,
        a=a,
        b=b,
        meta={"levels": levels},
    )


def mrf_term(
    codes, name: str, neighbors: dict, a: float = DEFAULT_HYPER, b: float = DEFAULT_HYPER
) -> EffectTerm:
    """Discrete spatial effect with a graph-Laplacian (MRF) penalty."""
    K, levels = mrf_penalty(neighbors)
    index = {g: i for i, g in enumerate(levels)}
    codes = np.asarray(codes)
    Z = np.zeros((len(codes), len(levels)))
    for i, g in enumerate(codes.tolist()):
        if g not in index:
            raise ValueError(f"region {g!r} not present in the adjacency")
        Z[i, index[g]] = 1.0
    return EffectTerm(
        "mrf",
        f"mrf({name})",
        (name,),
        Z,
        K,
        _laplacian_rank(K),
        a=a,
        b=b,
        meta={"levels": levels},
    )


def evaluate_predictor(terms, beta_blocks) -> np.ndarray:
    """eta = sum_s Z_s beta_s for one predictor."""
    if len(terms) != len(beta_blocks):
        raise ValueError("one coefficient block per term is required")
    n = terms[0].Z.shape[0]
    eta = np.zeros(n)
    for term, beta in zip(terms, beta_blocks):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (term.size,):
            raise ValueError(
                f"block for {term.label} has shape {beta.shape}, expected ({term.size},)"
            )
        eta += term.Z @ beta
    return eta
