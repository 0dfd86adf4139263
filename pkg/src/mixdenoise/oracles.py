"""Exact MMSE estimators, risks, and score functions for the token mixture.

Two reference denoisers anchor every experiment:

* the *oracle* estimator, which sees the true per-token pattern means
  M_Y and shrinks the residual X^t - sqrt(abar_t) M_Y per token;
* the *posterior-mean* (Bayes) estimator E[E | X^t], computed exactly by
  enumerating the latent subset Z and marginalizing token labels in the
  log domain.

Conditioned on its label u, a noised token is Gaussian with mean
sqrt(abar_t) mu_u and isotropic variance abar_t rho^2 + (1 - abar_t), so
both estimators, the closed-form oracle risk, and the exact score
function -E[E|X^t]/sqrt(1-abar_t) follow from Gaussian conditioning.

All risks and score errors use the per-dimension squared-error convention
(Frobenius norm over d*P, no extra 1/2), so Monte-Carlo estimates are
directly comparable with the closed-form oracle risk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import ModelParams, forward, forward_stack
from .patterns import MixtureParams, sample_data, subset_indicators
from .rng import child_generators, seed_seq
from .schedule import NoiseSchedule, TimeSet
from .validation import as_matrix, check_timestep, readonly

# Cap on elements held live while marginalizing subsets.
_GAMMA_BLOCK = 4_000_000


@dataclass(frozen=True)
class PosteriorSummary:
    """Exact label and subset posteriors given one noised datum.

    ``gamma[p, u]`` = P(Y_p = u | X^t); rows sum to 1.  ``log_z_post`` is
    the log posterior over the C(M, K) subsets in lexicographic order and
    log-sums to 0.
    """

    gamma: np.ndarray
    log_z_post: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", readonly(self.gamma))
        lzp = np.asarray(self.log_z_post, dtype=np.float64).copy()
        lzp.setflags(write=False)
        object.__setattr__(self, "log_z_post", lzp)
        if np.abs(self.gamma.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValueError("gamma rows must sum to 1")
        if abs(logsumexp(self.log_z_post)) > 1e-10:
            raise ValueError("log_z_post must log-sum to 0")


@dataclass(frozen=True)
class RiskReport:
    """Evaluated loss and reference risks, with Monte-Carlo standard errors."""

    eval_loss: float
    eval_loss_se: float
    r_oracle_closed: float
    r_oracle_mc: float
    r_oracle_mc_se: float
    r_bayes_mc: float
    r_bayes_mc_se: float
    score_err: float
    score_err_se: float
    snr: float

    def __post_init__(self):
        for name in ("eval_loss_se", "r_oracle_mc_se", "r_bayes_mc_se", "score_err_se"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.r_oracle_closed < 1.0:
            raise ValueError("r_oracle_closed must lie in [0, 1)")


def shrink_coef(t: int, rho: float, sched: NoiseSchedule) -> float:
    """sqrt(1 - abar_t) / (1 - abar_t + rho^2 abar_t)."""
    ab = sched.abar(t)
    return float(np.sqrt(1.0 - ab) / (1.0 - ab + rho * rho * ab))


def oracle_mmse(Xt, MY, t: int, rho: float, sched: NoiseSchedule) -> np.ndarray:
    """Noise estimate given the true mean matrix M_Y.

    coef(t, rho) * (X^t - sqrt(abar_t) M_Y); with rho = 0 this recovers
    the injected noise exactly.
    """
    Xt = as_matrix(Xt, "Xt")
    MY = as_matrix(MY, "MY", rows=Xt.shape[0], cols=Xt.shape[1])
    return shrink_coef(t, rho, sched) * (Xt - np.sqrt(sched.abar(t)) * MY)


def oracle_risk_closed(rho: float, sched: NoiseSchedule, tset: TimeSet) -> float:
    """Closed-form risk of the oracle estimator, averaged over the time set.

    Per step: rho^2 abar_t / (rho^2 abar_t + 1 - abar_t), the per-coordinate
    residual variance after shrinkage with known means.
    """
    tset.validate_for(sched.T)
    ab = sched.alpha_bar[np.array(tset.indices) - 1]
    a = rho * rho * ab
    return float(np.mean(a / (a + 1.0 - ab)))


def _token_logjoint(X: np.ndarray, sab: np.ndarray, var: np.ndarray,
                    params: MixtureParams) -> np.ndarray:
    """log pi_tilde_u + per-token Gaussian log-likelihood, up to constants.

    X: (n, d, P).  Returns (n, P, M).  Constants shared by all components
    cancel in every posterior and are dropped.
    """
    means, pi = params.patterns.means, params.pi_tilde
    cross = X.swapaxes(1, 2) @ means.T                    # (n, P, M)
    xsq = np.einsum("ndp,ndp->np", X, X)
    msq = np.einsum("ud,ud->u", means, means)
    ll = -(xsq[:, :, None] - 2.0 * sab[:, None, None] * cross
           + (sab ** 2)[:, None, None] * msq[None, None, :]) / (2.0 * var[:, None, None])
    return ll + np.log(pi)[None, None, :]


def _subset_lse(T1: np.ndarray, logmask: np.ndarray) -> np.ndarray:
    """Per-token log-sum-exp of T1 over each subset's members: (n, P, C).

    Uses a per-subset max, so the result is finite for every subset even
    when components underflow relative to the global per-token max.
    """
    n, P, M = T1.shape
    C = logmask.shape[1]
    out = np.empty((n, P, C))
    block = max(1, _GAMMA_BLOCK // max(1, P * M * C))
    for a in range(0, n, block):
        b = min(a + block, n)
        tm = T1[a:b, :, None, :] + logmask.T[None, None, :, :]   # (nb, P, C, M)
        out[a:b] = logsumexp(tm, axis=3)
    return out


def _gamma_stack_stable(T1: np.ndarray, log_zmass: np.ndarray,
                        logmask: np.ndarray, P: int) -> tuple[np.ndarray, np.ndarray]:
    """Fully log-domain posterior computation; exact even under underflow."""
    n, _, M = T1.shape
    C = logmask.shape[1]
    lse_pc = _subset_lse(T1, logmask)                     # (n, P, C)
    scores = lse_pc.sum(axis=1) - P * log_zmass[None, :]  # (n, C)
    log_z_post = scores - logsumexp(scores, axis=1, keepdims=True)
    gamma = np.empty((n, P, M))
    block = max(1, _GAMMA_BLOCK // max(1, P * M * C))
    for a in range(0, n, block):
        b = min(a + block, n)
        lg = (T1[a:b, :, :, None] - lse_pc[a:b, :, None, :]
              + log_z_post[a:b, None, None, :] + logmask[None, None, :, :])
        gamma[a:b] = np.exp(logsumexp(lg, axis=3))
    return gamma, log_z_post


def _gamma_stack(X: np.ndarray, sab: np.ndarray, var: np.ndarray,
                 params: MixtureParams) -> tuple[np.ndarray, np.ndarray]:
    """Label and subset posteriors for a stack of noised data.

    X: (n, d, P); sab, var: per-slice sqrt(abar) and token variance.
    Returns gamma (n, P, M) and the log subset posterior (n, C).

    The hot path exponentiates against each token's own max component and
    marginalizes subsets with one masked matrix product; slices where that
    underflows fall back to a per-subset log-domain pass.
    """
    n, P, M = X.shape[0], X.shape[2], params.M
    ZM = subset_indicators(M, params.K).astype(np.float64)
    C = ZM.shape[0]
    log_zmass = np.log(ZM @ params.pi_tilde)              # (C,)
    logmask = np.where(ZM.T > 0, 0.0, -np.inf)            # (M, C)

    T1 = _token_logjoint(X, sab, var, params)
    m = T1.max(axis=2, keepdims=True)
    Q = np.exp(T1 - m)
    S = Q.reshape(n * P, M) @ ZM.T
    S = S.reshape(n, P, C)
    with np.errstate(divide="ignore"):
        lse_pc = m + np.log(S)                            # -inf where S underflows
    scores = lse_pc.sum(axis=1) - P * log_zmass[None, :]
    total = logsumexp(scores, axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        log_z_post = scores - total
    w = np.exp(log_z_post)                                # (n, C)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.where(w[:, None, :] > 0.0, w[:, None, :] / S, 0.0)
    gamma = Q * (R @ ZM)

    ok = (np.isfinite(total[:, 0])
          & np.isfinite(gamma).all(axis=(1, 2))
          & (np.abs(gamma.sum(axis=2) - 1.0).max(axis=1) <= 1e-10))
    if not ok.all():
        idx = np.flatnonzero(~ok)
        g2, l2 = _gamma_stack_stable(T1[idx], log_zmass, logmask, P)
        gamma[idx], log_z_post[idx] = g2, l2
    return gamma, log_z_post


def bayes_posterior(Xt, params: MixtureParams, t: int, sched: NoiseSchedule) -> PosteriorSummary:
    """Exact posteriors over token labels and the latent subset."""
    Xt = as_matrix(Xt, "Xt", rows=params.d)
    check_timestep(t, sched.T)
    ab = sched.abar(t)
    var = ab * params.rho ** 2 + 1.0 - ab
    gamma, lzp = _gamma_stack(Xt[None], np.array([np.sqrt(ab)]), np.array([var]), params)
    return PosteriorSummary(gamma=gamma[0], log_z_post=lzp[0])


def _mmse_from_gamma(X: np.ndarray, gamma: np.ndarray, sab: np.ndarray,
                     coef: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Posterior-mean noise estimate from label posteriors, stacked."""
    post_mean = (gamma @ means).swapaxes(1, 2)            # (n, d, P)
    return coef[:, None, None] * (X - sab[:, None, None] * post_mean)


def bayes_mmse(Xt, params: MixtureParams, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact posterior mean E[E | X^t] of the injected noise."""
    Xt = as_matrix(Xt, "Xt", rows=params.d)
    post = bayes_posterior(Xt, params, t, sched)
    coef = np.array([shrink_coef(t, params.rho, sched)])
    sab = np.array([np.sqrt(sched.abar(t))])
    return _mmse_from_gamma(Xt[None], post.gamma[None], sab, coef, params.patterns.means)[0]


def score_function(Xt, params: MixtureParams, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact gradient of log p_t at X^t: -E[E | X^t] / sqrt(1 - abar_t)."""
    return -bayes_mmse(Xt, params, t, sched) / np.sqrt(1.0 - sched.abar(t))


def score_network(model_params: ModelParams, Xt, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Score estimate induced by the denoiser: -f(X^t, t) / sqrt(1 - abar_t)."""
    return -forward(model_params, Xt, t) / np.sqrt(1.0 - sched.abar(t))


def _stack_coeffs(rho: float, sched: NoiseSchedule, tset: TimeSet):
    ts = np.array(tset.indices)
    ab = sched.alpha_bar[ts - 1]
    sab = np.sqrt(ab)
    var = ab * rho ** 2 + 1.0 - ab
    coef = np.sqrt(1.0 - ab) / var
    return ts, ab, sab, var, coef


def _draw_stack(params: MixtureParams, P: int, sched: NoiseSchedule, tset: TimeSet,
                gen: np.random.Generator):
    """One datum plus its noised stack across the time set (one noise draw)."""
    sample = sample_data(params, P, gen)
    E = gen.standard_normal((params.d, P))
    ab = sched.alpha_bar[np.array(tset.indices) - 1]
    Xt = (np.sqrt(ab)[:, None, None] * sample.x0[None]
          + np.sqrt(1.0 - ab)[:, None, None] * E[None])
    return sample, E, Xt


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), se


def bayes_risk_mc(params: MixtureParams, P: int, sched: NoiseSchedule, tset: TimeSet,
                  n_samples: int, rng) -> tuple[float, float]:
    """Monte-Carlo risk of the exact posterior-mean denoiser, with its s.e."""
    tset.validate_for(sched.T)
    _, _, sab, var, coef = _stack_coeffs(params.rho, sched, tset)
    d = params.d
    vals = np.empty(n_samples)
    for i, gen in enumerate(child_generators(_as_stream_source(rng), n_samples)):
        sample, E, Xt = _draw_stack(params, P, sched, tset, gen)
        gamma, _ = _gamma_stack(Xt, sab, var, params)
        est = _mmse_from_gamma(Xt, gamma, sab, coef, params.patterns.means)
        vals[i] = np.mean(np.sum((E[None] - est) ** 2, axis=(1, 2))) / (d * P)
    return _mean_se(vals)


def oracle_risk_mc(params: MixtureParams, P: int, sched: NoiseSchedule, tset: TimeSet,
                   n_samples: int, rng) -> tuple[float, float]:
    """Monte-Carlo risk of the known-means oracle estimator, with its s.e."""
    tset.validate_for(sched.T)
    _, _, sab, var, coef = _stack_coeffs(params.rho, sched, tset)
    d = params.d
    vals = np.empty(n_samples)
    for i, gen in enumerate(child_generators(_as_stream_source(rng), n_samples)):
        sample, E, Xt = _draw_stack(params, P, sched, tset, gen)
        MY = params.patterns.mean_matrix(sample.y)
        est = coef[:, None, None] * (Xt - sab[:, None, None] * MY[None])
        vals[i] = np.mean(np.sum((E[None] - est) ** 2, axis=(1, 2))) / (d * P)
    return _mean_se(vals)


def score_matching_error(model_params: ModelParams, data_params: MixtureParams, P: int,
                         sched: NoiseSchedule, tset: TimeSet, n_samples: int,
                         rng) -> tuple[float, float]:
    """Per-dimension gap between the model-induced score and the exact score.

    Averages ||s_model - s_exact||_F^2 / (d P) over fresh data and the time
    set; both scores share the 1/sqrt(1-abar_t) scaling, so the gap equals
    the denoiser-vs-posterior-mean gap weighted by 1/(1-abar_t).
    """
    tset.validate_for(min(sched.T, model_params.T))
    ts, ab, sab, var, coef = _stack_coeffs(data_params.rho, sched, tset)
    d = data_params.d
    vals = np.empty(n_samples)
    for i, gen in enumerate(child_generators(_as_stream_source(rng), n_samples)):
        sample, E, Xt = _draw_stack(data_params, P, sched, tset, gen)
        gamma, _ = _gamma_stack(Xt, sab, var, data_params)
        best = _mmse_from_gamma(Xt, gamma, sab, coef, data_params.patterns.means)
        f = forward_stack(model_params, Xt, ts)
        gaps = np.sum((f - best) ** 2, axis=(1, 2)) / (1.0 - ab)
        vals[i] = np.mean(gaps) / (d * P)
    return _mean_se(vals)


def _as_stream_source(rng):
    if isinstance(rng, (int, np.integer)):
        return seed_seq(int(rng))
    if isinstance(rng, (np.random.SeedSequence, np.random.Generator)):
        return rng
    raise TypeError("rng must be an int seed, SeedSequence, or Generator")
