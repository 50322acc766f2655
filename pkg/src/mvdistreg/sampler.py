"""Block-wise MCMC: IWLS Metropolis-Hastings for coefficients, Gibbs for
smoothing variances.

Each coefficient block gets a Gaussian proposal built from the exact score
and working weights of the joint log-likelihood,

    P = Z'WZ + K/tau^2,   mean = P^{-1} Z'W(z - eta + Z b)

with working response z = eta + W^{-1} nu.  Constrained blocks are
proposed inside the null space of their constraint through a fixed
orthonormal basis, which keeps both proposal densities proper.  The
reverse density is rebuilt at the candidate, as the acceptance ratio
requires.  Smoothing variances have conjugate inverse-gamma full
conditionals and are updated by Gibbs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .likelihood import LikelihoodEvaluator
from .model import Block, BuiltModel, ParameterState

__all__ = ["ChainSettings", "PosteriorDraws", "gibbs_tau", "run_chain", "BlockSampler"]

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ChainSettings:
    iterations: int = 12000
    burnin: int = 2000
    thin: int = 10
    seed: int | None = None
    damping: float = 1.0
    weight_floor: float = 1e-6
    map_init: bool = True
    map_maxiter: int = 2000
    map_tol: float = 1e-4
    store_derived: bool = False
    frozen: tuple = ()  # block labels excluded from updates

    def __post_init__(self):
        if not 0 <= self.burnin < self.iterations:
            raise ValueError("need 0 <= burnin < iterations")
        if self.thin < 1:
            raise ValueError("thinning must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class PosteriorDraws:
    beta: np.ndarray  # (m, n_coef)
    tau2: np.ndarray  # (m, n_tau)
    loglik: np.ndarray  # (m,)
    accept_rates: dict
    fallback_counts: dict
    map_info: dict
    warnings: list
    settings: ChainSettings
    derived: dict = field(default_factory=dict)
    map_state: ParameterState | None = None

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]


def gibbs_tau(beta_sk, K_sk, a_sk: float, b_sk: float, rng, rank: int | None = None):
    """Draw tau^2 from its inverse-gamma full conditional.

    shape = rk(K)/2 + a, rate = beta'K beta / 2 + b."""
    beta_sk = np.asarray(beta_sk, dtype=float)
    K_sk = np.asarray(K_sk, dtype=float)
    quad = float(beta_sk @ K_sk @ beta_sk)
    if quad < -1e-8:
        raise FloatingPointError("negative penalty quadratic form")
    if rank is None:
        eigvals = np.linalg.eigvalsh(K_sk)
        rank = int(np.sum(eigvals > 1e-8 * max(1.0, float(eigvals.max()))))
    shape = 0.5 * rank + a_sk
    rate = 0.5 * max(quad, 0.0) + b_sk
    return rate / rng.gamma(shape)


class BlockSampler:
    """One-block IWLS-MH machinery bound to a likelihood evaluator."""

    def __init__(self, ev: LikelihoodEvaluator, settings: ChainSettings):
        self.ev = ev
        self.model = ev.model
        self.settings = settings

    # -- proposal -----------------------------------------------------------
    def _proposal_params(self, pieces, state: ParameterState, block: Block, zeta):
        """(mean_v, chol_prec, basis) of the damped IWLS proposal in null-space
        coordinates; raises FloatingPointError on a non-finite or singular build."""
        nu, w = self.ev.score_weights(pieces, block.pred_index, zeta)
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(w))):
            raise FloatingPointError("non-finite score or weights")
        w = np.maximum(w, self.settings.weight_floor)
        Z = block.term.Z
        beta_s = state.block(block)
        P = Z.T @ (w[:, None] * Z)
        if block.tau_index is not None:
            P = P + block.term.K / state.tau2[block.tau_index]
        rhs = Z.T @ (nu + w * (Z @ beta_s))
        B = block.nullspace
        if B is not None:
            P = B.T @ P @ B
            rhs = B.T @ rhs
            v_cur = B.T @ beta_s
        else:
            v_cur = beta_s
        try:
            chol = cholesky(P, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FloatingPointError(str(exc)) from None
        mu_v = cho_solve((chol, True), rhs)
        mean_v = v_cur + self.settings.damping * (mu_v - v_cur)
        return mean_v, chol, B

    @staticmethod
    def _log_q(v, mean_v, chol) -> float:
        resid = chol.T @ (v - mean_v)
        return float(
            np.sum(np.log(np.diag(chol)))
            - 0.5 * len(v) * LOG_2PI
            - 0.5 * resid @ resid
        )

    def propose(self, pieces, state: ParameterState, block: Block, rng, zeta):
        """Draw a candidate block; returns (beta_star, log_q_forward, aux)."""
        mean_v, chol, B = self._proposal_params(pieces, state, block, zeta)
        z = rng.standard_normal(len(mean_v))
        v_star = mean_v + solve_triangular(chol.T, z, lower=False)
        beta_star = B @ v_star if B is not None else v_star
        return beta_star, self._log_q(v_star, mean_v, chol), v_star

    # -- one MH step ---------------------------------------------------------
    def mh_step(self, workspace: dict, block: Block, rng):
        """Update one block in place; returns (accepted, used_fallback)."""
        ev, model, settings = self.ev, self.model, self.settings
        state: ParameterState = workspace["state"]
        pieces = workspace["pieces"]
        k = block.pred_index
        fallback = False
        try:
            zeta_fwd = ev.draw_zeta(rng)
            beta_star, log_q_fwd, v_star = self.propose(pieces, state, block, rng, zeta_fwd)
        except FloatingPointError:
            fallback = True
            beta_star, log_q_fwd, v_star = self._fallback_propose(state, block, rng)

        cand_beta = state.beta.copy()
        cand_beta[block.sl] = beta_star
        eta_k = ev.eta_for(model.predictors[k], cand_beta)
        with np.errstate(all="ignore"):
            cand_pieces = ev.update_pieces(pieces, k, eta_k)
            ll_cand = float(np.sum(ev.loglik_per_obs(cand_pieces, ev.draw_zeta(rng))))
        if not np.isfinite(ll_cand):
            return False, fallback

        if ev.has_discrete:
            ll_cur = float(np.sum(ev.loglik_per_obs(pieces, ev.draw_zeta(rng))))
        else:
            ll_cur = workspace["loglik"]

        if fallback:
            log_q_rev = log_q_fwd = 0.0  # symmetric random walk
        else:
            cand_state = ParameterState(cand_beta, state.tau2)
            try:
                zeta_rev = ev.draw_zeta(rng)
                mean_v, chol, B = self._proposal_params(
                    cand_pieces, cand_state, block, zeta_rev
                )
                v_cur = (
                    B.T @ state.block(block) if B is not None else state.block(block)
                )
                log_q_rev = self._log_q(v_cur, mean_v, chol)
            except FloatingPointError:
                return False, fallback

        log_prior_diff = 0.0
        if block.tau_index is not None:
            K = block.term.K
            tau2 = state.tau2[block.tau_index]
            cur = state.block(block)
            log_prior_diff = -0.5 * (
                float(beta_star @ K @ beta_star) - float(cur @ K @ cur)
            ) / tau2

        log_alpha = ll_cand - ll_cur + log_prior_diff + log_q_rev - log_q_fwd
        if np.log(rng.uniform()) < log_alpha:
            state.beta = cand_beta
            workspace["pieces"] = cand_pieces
            workspace["loglik"] = ll_cand
            return True, fallback
        if ev.has_discrete:
            workspace["loglik"] = ll_cur
        return False, fallback

    def _fallback_propose(self, state: ParameterState, block: Block, rng):
        scale = 0.1
        if block.tau_index is not None:
            scale *= float(np.sqrt(state.tau2[block.tau_index]))
        B = block.nullspace
        dim = B.shape[1] if B is not None else block.size
        v_cur = B.T @ state.block(block) if B is not None else state.block(block)
        v_star = v_cur + scale * rng.standard_normal(dim)
        beta_star = B @ v_star if B is not None else v_star
        return beta_star, 0.0, v_star


def run_chain(
    model: BuiltModel,
    data,
    settings: ChainSettings,
    init_state: ParameterState | None = None,
) -> PosteriorDraws:
    """MAP-initialized block MCMC; returns post-burn-in thinned draws.

    ``init_state`` overrides the starting point (frozen blocks keep the
    values it carries); MAP initialization then starts from it as well."""
    rng = np.random.default_rng(settings.seed)
    ev = LikelihoodEvaluator(model, data)
    warn_list: list[str] = []

    if settings.map_init:
        state, map_info = ev.map_estimate(
            rng=np.random.default_rng(rng.integers(2**63)),
            tol=settings.map_tol,
            max_iter=settings.map_maxiter,
            init=init_state,
            frozen=settings.frozen,
        )
        if not map_info["converged"]:
            warn_list.append("MAP initialization did not reach tolerance")
        if not np.all(np.isfinite(state.beta)):
            warn_list.append("MAP failed; starting from zero coefficients")
            state = model.new_state()
            map_info = {"converged": False, "iterations": 0, "log_posterior": np.nan}
    else:
        state = init_state.copy() if init_state is not None else model.new_state()
        map_info = {"converged": False, "iterations": 0, "log_posterior": np.nan}

    map_state = state.copy()
    sampler = BlockSampler(ev, settings)
    pieces = ev.pieces_from_etas(ev.eta_matrix(state.beta))
    loglik = float(np.sum(ev.loglik_per_obs(pieces, ev.draw_zeta(rng))))
    workspace = {"state": state, "pieces": pieces, "loglik": loglik}

    blocks = [b for b in model.blocks if b.label not in settings.frozen]
    attempts = {b.label: 0 for b in blocks}
    accepts = {b.label: 0 for b in blocks}
    fallbacks = {b.label: 0 for b in blocks}

    n_store = (settings.iterations - settings.burnin + settings.thin - 1) // settings.thin
    beta_draws = np.empty((n_store, model.n_coef))
    tau_draws = np.empty((n_store, model.n_tau))
    ll_draws = np.empty(n_store)
    stored = 0

    for it in range(settings.iterations):
        for block in blocks:
            accepted, used_fallback = sampler.mh_step(workspace, block, rng)
            attempts[block.label] += 1
            accepts[block.label] += accepted
            fallbacks[block.label] += used_fallback
        for block in model.blocks:
            if block.tau_index is None:
                continue
            state.tau2[block.tau_index] = gibbs_tau(
                workspace["state"].block(block),
                block.term.K,
                block.term.a,
                block.term.b,
                rng,
                rank=block.term.rank,
            )
        if it >= settings.burnin and (it - settings.burnin) % settings.thin == 0:
            beta_draws[stored] = workspace["state"].beta
            tau_draws[stored] = workspace["state"].tau2
            ll_draws[stored] = workspace["loglik"]
            stored += 1

    accept_rates = {
        label: accepts[label] / max(attempts[label], 1) for label in attempts
    }
    if any(np.isnan(rate) for rate in accept_rates.values()):  # pragma: no cover
        warnings.warn("acceptance bookkeeping produced NaN")

    draws = PosteriorDraws(
        beta=beta_draws[:stored],
        tau2=tau_draws[:stored],
        loglik=ll_draws[:stored],
        accept_rates=accept_rates,
        fallback_counts=fallbacks,
        map_info=map_info,
        warnings=warn_list,
        settings=settings,
        map_state=map_state,
    )
    if settings.store_derived:
        draws.derived = derived_functionals(model, ev, draws)
    return draws


def derived_functionals(model: BuiltModel, ev: LikelihoodEvaluator, draws: PosteriorDraws):
    """Per-draw, per-observation Spearman matrices and marginal moments."""
    from .copula import batch_omega_pairs, spearman_rho

    out: dict = {}
    m = draws.n_draws
    if not model.univariate:
        spear = np.empty((m, ev.n, len(model.pairs)))
    means = np.empty((m, ev.n, model.dim))
    variances = np.empty((m, ev.n, model.dim))
    for i in range(m):
        pieces = ev.pieces_from_etas(ev.eta_matrix(draws.beta[i]))
        if not model.univariate:
            lam = pieces.etas[:, model.copula_pred_idx]
            spear[i] = spearman_rho(batch_omega_pairs(lam, model.dim))
        for j, fam in enumerate(model.families):
            means[i, :, j] = fam.mean(pieces.thetas[j])
            variances[i, :, j] = fam.variance(pieces.thetas[j])
    if not model.univariate:
        out["spearman"] = spear
    out["marginal_mean"] = means
    out["marginal_variance"] = variances
    return out
