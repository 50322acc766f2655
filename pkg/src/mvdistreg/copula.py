"""Gaussian copula with the modified Cholesky correlation parameterization.

The unrestricted vector ``lam`` fills the strict lower triangle (row-major)
of a unit-diagonal lower-triangular factor L.  The copula correlation is

    Sigma = (L L^T)^{-1},   Omega = diag(Sigma)^{-1/2} Sigma diag(Sigma)^{-1/2}

so any real ``lam`` yields a valid correlation matrix.  Since det L = 1,
det Sigma = 1 and log det Omega = -sum_j log Sigma_jj.

Batched variants operate on arrays with a leading observation axis; they
are the work-horses of the likelihood code, while the single-matrix
``lambda_to_bundle`` is the reference API.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular

__all__ = [
    "CorrelationBundle",
    "n_pairs",
    "pair_indices",
    "lambda_to_bundle",
    "build_lambda_matrix",
    "unit_lower_inverse",
    "batch_bundle",
    "copula_log_density",
    "spearman_rho",
    "gaussianize",
    "sample_joint",
]

PROB_EPS = 1e-12  # clamp for probabilities ahead of the probit


def n_pairs(dim: int) -> int:
    return dim * (dim - 1) // 2


def pair_indices(dim: int) -> list[tuple[int, int]]:
    """Row-major strict-lower-triangle order: (2,1), (3,1), (3,2), ...

    Indices are 0-based (row, col)."""
    return [(r, c) for r in range(1, dim) for c in range(r)]


def build_lambda_matrix(lam, dim: int) -> np.ndarray:
    """Fill the unit-diagonal lower-triangular factor from the lam vector.

    ``lam`` may carry a leading batch axis: shape (..., dim*(dim-1)/2).
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-1] != n_pairs(dim):
        raise ValueError(
            f"lambda vector has length {lam.shape[-1]}, expected {n_pairs(dim)}"
        )
    if not np.all(np.isfinite(lam)):
        raise ValueError("lambda entries must be finite")
    out = np.zeros(lam.shape[:-1] + (dim, dim), dtype=float)
    idx = np.arange(dim)
    out[..., idx, idx] = 1.0
    rows, cols = np.tril_indices(dim, k=-1)
    out[..., rows, cols] = lam
    return out


def unit_lower_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of a (batched) unit lower-triangular matrix by forward substitution."""
    dim = L.shape[-1]
    M = np.zeros_like(L)
    idx = np.arange(dim)
    M[..., idx, idx] = 1.0
    for i in range(1, dim):
        for j in range(i):
            # M[i, j] = -sum_{k=j}^{i-1} L[i, k] M[k, j]
            M[..., i, j] = -np.einsum(
                "...k,...k->...", L[..., i, j:i], M[..., j:i, j]
            )
    return M


@dataclass
class CorrelationBundle:
    """Correlation quantities derived from one lambda vector."""

    lam: np.ndarray
    chol_factor: np.ndarray  # unit-diagonal lower-triangular L
    sigma: np.ndarray  # (L L^T)^{-1}
    omega: np.ndarray  # correlation matrix
    omega_inv: np.ndarray
    log_det_omega: float

    @property
    def dim(self) -> int:
        return self.omega.shape[-1]


def lambda_to_bundle(lam, dim: int) -> CorrelationBundle:
    """Build the correlation bundle for one observation.

    Uses triangular solves against L; no dense inverse of a full matrix is
    ever formed.
    """
    L = build_lambda_matrix(np.asarray(lam, dtype=float).reshape(-1), dim)
    M = solve_triangular(L, np.eye(dim), lower=True, unit_diagonal=True)
    sigma = M.T @ M
    s = np.diag(sigma)
    d = np.sqrt(s)
    omega = sigma / np.outer(d, d)
    # Omega^{-1} = D (L L^T) D with D = diag(sqrt(diag(Sigma)))
    DL = d[:, None] * L
    omega_inv = DL @ DL.T
    log_det = -float(np.sum(np.log(s)))
    return CorrelationBundle(
        lam=np.asarray(lam, dtype=float).reshape(-1),
        chol_factor=L,
        sigma=sigma,
        omega=omega,
        omega_inv=omega_inv,
        log_det_omega=log_det,
    )


def batch_bundle(lam, dim: int):
    """Batched bundle pieces for the likelihood: (L, M, sigma_diag, d, log_det_omega).

    ``lam`` has shape (n, dim*(dim-1)/2); outputs carry the leading axis.
    ``d = sqrt(diag(Sigma))`` and ``log_det_omega = -sum log diag(Sigma)``.
    """
    L = build_lambda_matrix(lam, dim)
    M = unit_lower_inverse(L)
    sdiag = np.einsum("...ij,...ij->...j", M, M)
    d = np.sqrt(sdiag)
    log_det = -np.sum(np.log(sdiag), axis=-1)
    return L, M, sdiag, d, log_det


def batch_omega(lam, dim: int) -> np.ndarray:
    """Correlation matrices for a batch of lambda vectors: shape (..., D, D)."""
    _, M, sdiag, d, _ = batch_bundle(lam, dim)
    sigma = np.einsum("...ir,...ic->...rc", M, M)
    return sigma / (d[..., :, None] * d[..., None, :])


def batch_omega_pairs(lam, dim: int) -> np.ndarray:
    """Strict-lower-triangle entries of Omega, ordered like pair_indices."""
    omega = batch_omega(lam, dim)
    rows, cols = np.tril_indices(dim, k=-1)
    return omega[..., rows, cols]


def copula_log_density(u, bundle: CorrelationBundle) -> float:
    """Log of the Gaussian copula factor: -1/2 log|Omega| - 1/2 u'(Omega^{-1} - I)u."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != bundle.dim:
        raise ValueError(f"u has dimension {u.shape[-1]}, bundle is {bundle.dim}")
    quad = np.einsum("...i,ij,...j->...", u, bundle.omega_inv, u) - np.sum(
        u * u, axis=-1
    )
    return -0.5 * bundle.log_det_omega - 0.5 * quad


def spearman_rho(omega_entry):
    """Spearman rank correlation implied by a copula correlation entry."""
    w = np.asarray(omega_entry, dtype=float)
    if np.any(np.abs(w) > 1.0):
        raise ValueError("correlation entry must lie in [-1, 1]")
    return (6.0 / np.pi) * np.arcsin(0.5 * w)


def gaussianize(y, thetas, families, rng=None):
    """Map responses to copula scale: u_j = probit(F_j(y_j)).

    Discrete margins use a randomized quantile residual, drawing a fresh
    uniform between the CDF's left limit and its value at y; a random
    stream is then required.  Probabilities are clamped to
    [PROB_EPS, 1 - PROB_EPS] so the output stays finite.

    Parameters
    ----------
    y : array (..., D) or sequence of per-margin arrays
    thetas : sequence of per-margin natural parameter arrays (..., K_j)
    families : sequence of MarginFamily
    rng : numpy Generator, required when any margin is discrete
    """
    y = np.asarray(y, dtype=float)
    cols = []
    for j, fam in enumerate(families):
        yj = y[..., j]
        if fam.discrete:
            if rng is None:
                raise ValueError("rng is required for discrete margins")
            b = fam.cdf(yj, thetas[j])
            a = fam.left_limit_cdf(yj, thetas[j])
            zeta = rng.uniform(size=np.shape(b))
            prob = a + zeta * (b - a)
        else:
            prob = fam.cdf(yj, thetas[j])
        prob = np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
        cols.append(special.ndtri(prob))
    return np.stack(cols, axis=-1)


def sample_joint(bundle: CorrelationBundle, thetas, families, n: int, rng):
    """Draw n response vectors from the copula model with fixed bundle.

    Each margin j of the output follows F_j; the dependence is Gaussian
    with correlation Omega.  ``thetas[j]`` is broadcast against n.
    """
    dim = bundle.dim
    chol = np.linalg.cholesky(bundle.omega)
    u = rng.standard_normal(size=(n, dim)) @ chol.T
    return _inverse_transform(u, thetas, families)


def _inverse_transform(u, thetas, families):
    probs = special.ndtr(u)
    cols = []
    for j, fam in enumerate(families):
        pj = np.clip(probs[..., j], PROB_EPS, 1.0 - PROB_EPS)
        theta = np.asarray(thetas[j], dtype=float)
        if theta.ndim == 1:
            theta = np.broadcast_to(theta, pj.shape + (theta.shape[-1],))
        cols.append(fam.quantile(pj, theta))
    return np.stack(cols, axis=-1)


def sample_joint_per_obs(omega, thetas, families, rng):
    """Draw one response vector per row of a batched correlation array.

    ``omega`` has shape (n, D, D); ``thetas[j]`` has shape (n, K_j)."""
    chol = np.linalg.cholesky(omega)
    z = rng.standard_normal(size=omega.shape[:-1])
    u = np.einsum("...ij,...j->...i", chol, z)
    return _inverse_transform(u, thetas, families)
