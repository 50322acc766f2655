"""Joint log-likelihood, exact predictor derivatives, and MAP estimation.

The per-observation log-likelihood couples the marginal log-densities with
the Gaussian copula factor

    l_i = -1/2 log|Omega_i| - 1/2 u_i'(Omega_i^{-1} - I)u_i + sum_j log p_j

where u_ij = probit(F_j(y_ij)) (randomized between the CDF's left limit and
value for discrete margins).  Scores and working weights are exact first
and second derivatives of l with respect to one predictor column, obtained
by chaining closed-form family derivatives through the link, the probit
map, and the modified-Cholesky correlation algebra.  Uniform draws for
randomized residuals are redrawn at every likelihood evaluation but held
fixed inside a single derivative evaluation, so the differentiated
function is smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .copula import PROB_EPS, batch_bundle
from .model import BuiltModel, ParameterState, response_matrix

__all__ = [
    "LikelihoodEvaluator",
    "joint_log_likelihood",
    "score_and_weights",
    "log_posterior",
    "map_estimate",
]

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class Pieces:
    """State-dependent (zeta-independent) evaluation caches."""

    etas: np.ndarray  # (n, K)
    thetas: list  # per margin (n, K_j), natural scale
    logp: np.ndarray  # (n, D) marginal log densities / masses
    Fb: np.ndarray  # (n, D) CDF at y
    Fa: np.ndarray  # (n, D) CDF left limit (equals Fb for continuous margins)
    u_cont: np.ndarray  # (n, D); discrete columns are filled per evaluation
    L: np.ndarray | None  # (n, D, D) unit lower-triangular factor
    M: np.ndarray | None  # (n, D, D) inverse of L
    sdiag: np.ndarray | None  # (n, D) diag of Sigma
    d: np.ndarray | None  # (n, D) sqrt of sdiag
    logdet: np.ndarray | None  # (n,) log det Omega

    def shallow_copy(self) -> "Pieces":
        return Pieces(
            self.etas,
            list(self.thetas),
            self.logp,
            self.Fb,
            self.Fa,
            self.u_cont,
            self.L,
            self.M,
            self.sdiag,
            self.d,
            self.logdet,
        )


class LikelihoodEvaluator:
    """Likelihood services for one model on one data set."""

    def __init__(self, model: BuiltModel, data):
        self.model = model
        self.y = response_matrix(model, data)
        self.n = self.y.shape[0]
        self.discrete = [j for j, f in enumerate(model.families) if f.discrete]
        self.has_discrete = bool(self.discrete)

    # -- zeta -------------------------------------------------------------
    def draw_zeta(self, rng) -> dict:
        if not self.has_discrete:
            return {}
        if rng is None:
            raise ValueError("rng required: model has discrete margins")
        return {j: rng.uniform(size=self.n) for j in self.discrete}

    # -- state-dependent caches -------------------------------------------
    def eta_for(self, pred, beta: np.ndarray) -> np.ndarray:
        eta = np.zeros(self.n)
        for block in pred.blocks:
            eta += block.term.Z @ beta[block.sl]
        return eta

    def eta_matrix(self, beta: np.ndarray) -> np.ndarray:
        etas = np.empty((self.n, self.model.n_predictors))
        for pred in self.model.predictors:
            etas[:, pred.index] = self.eta_for(pred, beta)
        return etas

    def _margin_pieces(self, j: int, etas: np.ndarray):
        model = self.model
        fam = model.families[j]
        cols = model.margin_pred_idx[j]
        theta = np.empty((self.n, fam.n_params))
        for m, (param, k) in enumerate(zip(fam.params, cols)):
            if param.link == "identity":
                theta[:, m] = etas[:, k]
            else:
                theta[:, m] = np.exp(etas[:, k])
        yj = self.y[:, j]
        with np.errstate(all="ignore"):
            logp = fam.log_pdf(yj, theta)
            Fb = fam.cdf(yj, theta)
            Fa = fam.left_limit_cdf(yj, theta) if fam.discrete else Fb
        return theta, logp, Fb, Fa

    def pieces_from_etas(self, etas: np.ndarray) -> Pieces:
        model = self.model
        D = model.dim
        thetas, logp = [], np.empty((self.n, D))
        Fb, Fa = np.empty((self.n, D)), np.empty((self.n, D))
        for j in range(D):
            theta, lp, fb, fa = self._margin_pieces(j, etas)
            thetas.append(theta)
            logp[:, j], Fb[:, j], Fa[:, j] = lp, fb, fa
        u_cont = special.ndtri(np.clip(Fb, PROB_EPS, 1.0 - PROB_EPS))
        if model.univariate:
            return Pieces(etas, thetas, logp, Fb, Fa, u_cont, None, None, None, None, None)
        lam = etas[:, model.copula_pred_idx]
        L, M, sdiag, d, logdet = batch_bundle(lam, D)
        return Pieces(etas, thetas, logp, Fb, Fa, u_cont, L, M, sdiag, d, logdet)

    def update_pieces(self, pieces: Pieces, k: int, eta_k: np.ndarray) -> Pieces:
        """New caches after replacing predictor column k (margins or copula)."""
        model = self.model
        new = pieces.shallow_copy()
        new.etas = pieces.etas.copy()
        new.etas[:, k] = eta_k
        target = model.predictors[k].target
        if target[0] == "margin":
            j = target[1]
            theta, lp, fb, fa = self._margin_pieces(j, new.etas)
            new.thetas = list(pieces.thetas)
            new.thetas[j] = theta
            new.logp = pieces.logp.copy()
            new.Fb = pieces.Fb.copy()
            new.Fa = pieces.Fa.copy()
            new.u_cont = pieces.u_cont.copy()
            new.logp[:, j], new.Fb[:, j], new.Fa[:, j] = lp, fb, fa
            new.u_cont[:, j] = special.ndtri(np.clip(fb, PROB_EPS, 1.0 - PROB_EPS))
        else:
            lam = new.etas[:, model.copula_pred_idx]
            new.L, new.M, new.sdiag, new.d, new.logdet = batch_bundle(lam, model.dim)
        return new

    # -- likelihood evaluation ---------------------------------------------
    def u_matrix(self, pieces: Pieces, zeta: dict) -> np.ndarray:
        if not self.has_discrete:
            return pieces.u_cont
        u = pieces.u_cont.copy()
        for j in self.discrete:
            prob = pieces.Fa[:, j] + zeta[j] * (pieces.Fb[:, j] - pieces.Fa[:, j])
            u[:, j] = special.ndtri(np.clip(prob, PROB_EPS, 1.0 - PROB_EPS))
        return u

    def loglik_per_obs(self, pieces: Pieces, zeta: dict) -> np.ndarray:
        total = pieces.logp.sum(axis=1)
        if self.model.univariate:
            return total
        u = self.u_matrix(pieces, zeta)
        v = np.einsum("nij,ni->nj", pieces.L, pieces.d * u)
        quad = np.einsum("nj,nj->n", v, v) - np.einsum("nj,nj->n", u, u)
        return total - 0.5 * pieces.logdet - 0.5 * quad

    def loglik_from_beta(self, beta: np.ndarray, zeta: dict) -> float:
        value = self.loglik_per_obs(self.pieces_from_etas(self.eta_matrix(beta)), zeta)
        return float(np.sum(value))

    def joint_log_likelihood(self, state: ParameterState, rng=None) -> float:
        return self.loglik_from_beta(state.beta, self.draw_zeta(rng))

    # -- exact derivatives ---------------------------------------------------
    def score_weights(self, pieces: Pieces, k: int, zeta: dict):
        """Exact (score, weight) of the log-likelihood w.r.t. predictor column k.

        weight_i = -d2 l_i / d eta_k^2 (Newton-type, can be negative)."""
        target = self.model.predictors[k].target
        if target[0] == "margin":
            return self._score_weights_margin(pieces, target[1], target[2], k, zeta)
        return self._score_weights_copula(pieces, target[1], zeta)

    def _score_weights_margin(self, pieces, j, m, k, zeta):
        model = self.model
        fam = model.families[j]
        theta = pieces.thetas[j]
        yj = self.y[:, j]
        link = fam.params[m].link
        if link == "identity":
            G1, G2 = 1.0, 0.0
        else:
            G1 = theta[:, m]
            G2 = G1
        d1lp, d2lp = fam.logpdf_derivs(yj, theta, m)
        nu = d1lp * G1
        sec = d2lp * G1 * G1 + d1lp * G2
        if model.univariate:
            return nu, -sec
        # copula contribution through u_j
        u = self.u_matrix(pieces, zeta)
        if fam.discrete:
            z = zeta[j]
            db1, db2 = fam.cdf_derivs(yj, theta, m)
            da1, da2 = fam.cdf_derivs(yj - 1.0, theta, m)
            prob = pieces.Fa[:, j] + z * (pieces.Fb[:, j] - pieces.Fa[:, j])
            dP = da1 + z * (db1 - da1)
            d2P = da2 + z * (db2 - da2)
        else:
            prob = pieces.Fb[:, j]
            dP, d2P = fam.cdf_derivs(yj, theta, m)
        clamped = (prob <= PROB_EPS) | (prob >= 1.0 - PROB_EPS)
        dP = np.where(clamped, 0.0, dP)
        d2P = np.where(clamped, 0.0, d2P)
        uj = u[:, j]
        phi = np.exp(-0.5 * uj * uj) / SQRT_2PI
        inv_phi = 1.0 / phi
        uP1 = inv_phi
        uP2 = uj * inv_phi * inv_phi
        dP_eta = dP * G1
        d2P_eta = d2P * G1 * G1 + dP * G2
        du = uP1 * dP_eta
        d2u = uP2 * dP_eta * dP_eta + uP1 * d2P_eta
        t = pieces.d * u
        v = np.einsum("nij,ni->nj", pieces.L, t)
        Lv = np.einsum("nij,nj->ni", pieces.L, v)
        q_j = pieces.d[:, j] * Lv[:, j] - uj
        A_jj = pieces.d[:, j] ** 2 * np.einsum(
            "nc,nc->n", pieces.L[:, j, :], pieces.L[:, j, :]
        ) - 1.0
        nu = nu - q_j * du
        sec = sec - A_jj * du * du - q_j * d2u
        return nu, -sec

    def _score_weights_copula(self, pieces, pos, zeta):
        model = self.model
        r, c = model.pairs[pos]
        u = self.u_matrix(pieces, zeta)
        M, L = pieces.M, pieces.L
        s0, d0 = pieces.sdiag, pieces.d
        # dM/dlam = -M E M is multilinear in the lambda entries, so d2M = 0
        M1 = -np.einsum("ni,nj->nij", M[:, :, r], M[:, c, :])
        s1 = 2.0 * np.einsum("nij,nij->nj", M, M1)
        s2 = 2.0 * np.einsum("nij,nij->nj", M1, M1)
        d1 = s1 / (2.0 * d0)
        d2 = s2 / (2.0 * d0) - s1 * s1 / (4.0 * s0 * d0)
        t0, t1, t2 = d0 * u, d1 * u, d2 * u
        v0 = np.einsum("nij,ni->nj", L, t0)
        v1 = np.einsum("nij,ni->nj", L, t1)
        v1[:, c] += t0[:, r]
        v2 = np.einsum("nij,ni->nj", L, t2)
        v2[:, c] += 2.0 * t1[:, r]
        ratio = s1 / s0
        nu = 0.5 * ratio.sum(axis=1) - np.einsum("nj,nj->n", v0, v1)
        sec = 0.5 * np.sum(s2 / s0 - ratio * ratio, axis=1) - (
            np.einsum("nj,nj->n", v1, v1) + np.einsum("nj,nj->n", v0, v2)
        )
        return nu, -sec

    # -- priors and posterior ------------------------------------------------
    def log_prior(self, state: ParameterState) -> float:
        total = 0.0
        for block in self.model.blocks:
            if block.tau_index is None:
                continue
            term = block.term
            beta = state.block(block)
            tau2 = state.tau2[block.tau_index]
            quad = float(beta @ term.K @ beta)
            total += -0.5 * term.rank * np.log(tau2) - 0.5 * quad / tau2
            a, b = term.a, term.b
            total += a * np.log(b) - special.gammaln(a) - (a + 1.0) * np.log(tau2) - b / tau2
        return total

    def log_posterior(self, state: ParameterState, rng=None) -> float:
        return self.joint_log_likelihood(state, rng) + self.log_prior(state)

    # -- MAP --------------------------------------------------------------
    def gradient(
        self, state: ParameterState, pieces: Pieces, zeta: dict, frozen=()
    ) -> np.ndarray:
        g = np.zeros(self.model.n_coef)
        for pred in self.model.predictors:
            if frozen and all(b.label in frozen for b in pred.blocks):
                continue
            nu, _ = self.score_weights(pieces, pred.index, zeta)
            for block in pred.blocks:
                if block.label in frozen:
                    continue
                gb = block.term.Z.T @ nu
                if block.tau_index is not None:
                    gb -= block.term.K @ state.block(block) / state.tau2[block.tau_index]
                if block.nullspace is not None:
                    B = block.nullspace
                    gb = B @ (B.T @ gb)
                g[block.sl] = gb
        return g

    def map_estimate(
        self,
        rng=None,
        tol: float = 1e-4,
        max_iter: int = 2000,
        tau_every: int = 10,
        init: ParameterState | None = None,
        frozen=(),
    ):
        """Gradient ascent with backtracking; tau2 at conditional modes.

        Randomized-residual uniforms are drawn once up front, making the
        objective deterministic.  Returns (state, info) where info carries
        the convergence flag and iteration count.
        """
        model = self.model
        state = init.copy() if init is not None else model.new_state()
        self._project_state(state)
        zeta = self.draw_zeta(rng)

        def objective(beta):
            with np.errstate(all="ignore"):
                ll = self.loglik_from_beta(beta, zeta)
                lp = ll + self.log_prior(ParameterState(beta, state.tau2))
            return lp if np.isfinite(lp) else -np.inf

        current = objective(state.beta)
        if not np.isfinite(current):
            return state, {"converged": False, "iterations": 0, "log_posterior": current}
        step = 1.0
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            pieces = self.pieces_from_etas(self.eta_matrix(state.beta))
            g = self.gradient(state, pieces, zeta, frozen=frozen)
            scale = max(1.0, float(np.max(np.abs(state.beta))))
            if np.max(np.abs(g)) < tol * scale:
                converged = True
                break
            step = min(step * 2.0, 1e4)
            improved = False
            for _ in range(40):
                cand = state.beta + step * g
                value = objective(cand)
                if value > current:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                converged = np.max(np.abs(g)) < 10.0 * tol * scale
                break
            state.beta = cand
            current = value
            if it % tau_every == 0 and model.n_tau:
                self._tau_conditional_mode(state)
                current = objective(state.beta)
        return state, {
            "converged": bool(converged),
            "iterations": it,
            "log_posterior": float(current),
        }

    def _tau_conditional_mode(self, state: ParameterState) -> None:
        for block in self.model.blocks:
            if block.tau_index is None:
                continue
            term = block.term
            beta = state.block(block)
            quad = float(beta @ term.K @ beta)
            state.tau2[block.tau_index] = (0.5 * quad + term.b) / (
                0.5 * term.rank + term.a + 1.0
            )

    def _project_state(self, state: ParameterState) -> None:
        for block in self.model.blocks:
            if block.nullspace is not None:
                B = block.nullspace
                state.beta[block.sl] = B @ (B.T @ state.beta[block.sl])


# -- module-level wrappers ---------------------------------------------------

def joint_log_likelihood(state, model, data, rng=None) -> float:
    return LikelihoodEvaluator(model, data).joint_log_likelihood(state, rng)


def score_and_weights(state, model, data, k: int, rng=None):
    ev = LikelihoodEvaluator(model, data)
    pieces = ev.pieces_from_etas(ev.eta_matrix(state.beta))
    return ev.score_weights(pieces, k, ev.draw_zeta(rng))


def log_posterior(state, model, data, rng=None) -> float:
    return LikelihoodEvaluator(model, data).log_posterior(state, rng)


def map_estimate(model, data, rng=None, **kwargs):
    return LikelihoodEvaluator(model, data).map_estimate(rng=rng, **kwargs)
