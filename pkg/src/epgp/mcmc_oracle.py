"""Latent-value MCMC with fixed hyperparameters (EP's accuracy oracle).

Elliptical slice sampling alternates between the stacked signal block
(f, or (f, phi) jointly, whose prior is block diagonal but whose
likelihood couples the pair within each observation) and the
log-noise-variance block.  Hyperparameters stay fixed, so the chains
target exactly the posterior that EP approximates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .ep_engine import EPState, LatentPriors, _cexp
from .errors import InitializationError, InputError
from .kernels import LatentKernels, _as_2d, cross_cov

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ChainConfig:
    """Sampler schedule; defaults give ESS well above 1000 for n <= 200."""

    n_samples: int = 20000
    n_burnin: int = 5000
    thinning: int = 2
    seed: int = 0
    sample_v: bool = True
    sample_theta: bool = True
    prior_only: bool = False   # diagnostic: constant likelihood

    def __post_init__(self):
        if self.n_samples <= self.n_burnin:
            raise InputError("n_samples must exceed n_burnin")


@dataclass
class ChainOutput:
    """Stored draws plus mixing diagnostics.

    ``samples`` columns follow the latent layout: the v block (f, then
    phi when coupled) followed by theta.  ``shrink_stats`` holds the
    mean number of slice contractions per update for each block.
    """

    kind: str
    n: int
    samples: np.ndarray
    ess: np.ndarray
    shrink_stats: dict
    seed: int

    @property
    def coupled(self) -> bool:
        return self.kind == "mn"

    def block(self, name: str) -> np.ndarray:
        n = self.n
        if name == "f":
            return self.samples[:, :n]
        if name == "phi":
            if not self.coupled:
                raise InputError("chain has no phi block")
            return self.samples[:, n:2 * n]
        if name == "theta":
            return self.samples[:, -n:]
        raise InputError(f"unknown block {name!r}")


def _ess_update(x, mean, chol, log_lik, threshold_ll, rng):
    """One elliptical slice move; returns the new point and shrink count.

    The slice threshold is ``threshold_ll + log u``; shrinkage of the
    angle bracket guarantees termination with a point on the slice.
    """
    nu = mean + chol @ rng.standard_normal(x.size)
    log_y = threshold_ll + np.log(rng.uniform())
    angle = rng.uniform(0.0, 2.0 * np.pi)
    lo, hi = angle - 2.0 * np.pi, angle
    shrinks = 0
    while True:
        xp = mean + (x - mean) * np.cos(angle) + (nu - mean) * np.sin(angle)
        ll = log_lik(xp)
        if ll > log_y:
            return xp, ll, shrinks
        if angle < 0.0:
            lo = angle
        else:
            hi = angle
        angle = rng.uniform(lo, hi)
        shrinks += 1


def ess_sample(X, y, kernels: LatentKernels, kind: str,
               cfg: ChainConfig | None = None) -> ChainOutput:
    """Sample the latent posterior under fixed hyperparameters.

    ``kind`` is ``'n'`` or ``'mn'`` as in the EP engine.  The chain is
    reproducible bit for bit from ``cfg.seed``.
    """
    if kind not in ("n", "mn"):
        raise InputError(f"unknown model kind {kind!r}")
    cfg = cfg or ChainConfig()
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    coupled = kind == "mn"
    priors = LatentPriors.build(X, kernels, coupled)
    mean_v, mean_t = priors.mean_v, priors.mean_theta
    chol_v, chol_t = priors.chol_v, priors.chol_theta

    if cfg.prior_only:
        def ll_given_theta(v, theta):
            return 0.0
    elif coupled:
        def ll_given_theta(v, theta):
            resid = y - _cexp(0.5 * v[n:]) * v[:n]
            return -0.5 * float(
                np.sum(resid * resid * _cexp(-theta) + theta) + n * LOG_2PI
            )
    else:
        def ll_given_theta(v, theta):
            resid = y - v
            return -0.5 * float(
                np.sum(resid * resid * _cexp(-theta) + theta) + n * LOG_2PI
            )

    rng = np.random.default_rng(cfg.seed)
    v = mean_v.copy()
    theta = mean_t.copy()
    ll = ll_given_theta(v, theta)
    if not np.isfinite(ll):
        raise InitializationError("log-likelihood not finite at the prior mean")

    keep = []
    shrink_v = shrink_t = updates = 0
    for it in range(cfg.n_samples):
        if cfg.sample_v:
            v, ll, s = _ess_update(
                v, mean_v, chol_v, lambda w: ll_given_theta(w, theta), ll, rng
            )
            shrink_v += s
        if cfg.sample_theta:
            theta, ll, s = _ess_update(
                theta, mean_t, chol_t, lambda t: ll_given_theta(v, t), ll, rng
            )
            shrink_t += s
        updates += 1
        if it >= cfg.n_burnin and (it - cfg.n_burnin) % cfg.thinning == 0:
            keep.append(np.concatenate([v, theta]))

    samples = np.array(keep)
    ess = np.array([effective_sample_size(samples[:, j])
                    for j in range(samples.shape[1])])
    stats = {"v": shrink_v / max(updates, 1), "theta": shrink_t / max(updates, 1)}
    return ChainOutput(kind, n, samples, ess, stats, cfg.seed)


def effective_sample_size(x: np.ndarray) -> float:
    """Autocorrelation-time ESS (Geyer's initial positive sequence)."""
    x = np.asarray(x, dtype=float)
    s = x.size
    x = x - x.mean()
    var = float(x @ x) / s
    if var == 0.0:
        return float(s)
    nf = 1 << (2 * s - 1).bit_length()
    f = np.fft.rfft(x, nf)
    acov = np.fft.irfft(f * np.conj(f))[:s] / s
    rho = acov / acov[0]
    tau = 1.0
    k = 1
    while k + 1 < s:
        pair = rho[k] + rho[k + 1]
        if pair < 0.0:
            break
        tau += 2.0 * pair
        k += 2
    return float(min(s, s / max(tau, 1e-12)))


@dataclass
class DiscrepancyReport:
    """Standardized EP-vs-MCMC marginal comparison."""

    mean_discrepancy: np.ndarray   # |mu_EP - mu_MC| / sd_MC per latent
    sd_ratio: np.ndarray           # sd_EP / sd_MC per latent
    min_ess: float
    reliable: bool

    @property
    def max_mean_discrepancy(self) -> float:
        return float(np.max(self.mean_discrepancy))

    @property
    def sd_ratio_range(self) -> tuple:
        return float(np.min(self.sd_ratio)), float(np.max(self.sd_ratio))


def compare_to_ep(chain: ChainOutput, state: EPState) -> DiscrepancyReport:
    """Per-latent discrepancies between chain moments and the EP posterior."""
    post, priors = state.posterior, state.priors
    mu_ep = np.concatenate([priors.mean_v + post.mu_v,
                            priors.mean_theta + post.mu_theta])
    sd_ep = np.sqrt(np.concatenate([np.diag(post.Sigma_v),
                                    np.diag(post.Sigma_theta)]))
    if mu_ep.size != chain.samples.shape[1]:
        raise InputError("chain and EP state have different latent dimensions")
    mu_mc = chain.samples.mean(axis=0)
    sd_mc = chain.samples.std(axis=0, ddof=1)
    disc = np.abs(mu_ep - mu_mc) / sd_mc
    ratio = sd_ep / sd_mc
    min_ess = float(np.min(chain.ess))
    return DiscrepancyReport(disc, ratio, min_ess, reliable=min_ess >= 100.0)


@dataclass
class McPredictive:
    """Rao-Blackwellized predictive from a latent chain."""

    mean: np.ndarray
    var: np.ndarray
    log_density: np.ndarray | None = None


def mc_predictive(chain: ChainOutput, kernels: LatentKernels, X, Xs,
                  y_eval=None, max_draws: int = 2000) -> McPredictive:
    """Average the per-draw Gaussian predictives over the chain.

    Each stored draw is projected to the test points through the GP
    conditionals (analytic given latent values); the per-draw
    predictive moments then follow the same lognormal identities as
    the EP predictive.  Densities are mixture averages over draws.
    """
    X = _as_2d(X)
    Xs = _as_2d(Xs)
    priors = LatentPriors.build(X, kernels, chain.coupled)
    n = chain.n
    step = max(1, chain.samples.shape[0] // max_draws)
    draws = chain.samples[::step]
    S = draws.shape[0]

    def project(block_draws, chol, ks, k_diag, const_mean):
        # conditional mean per draw and the draw-independent conditional var
        A = np.linalg.solve(chol.T, np.linalg.solve(chol, ks))
        mean = const_mean + (block_draws - const_mean) @ A
        var = np.maximum(k_diag - np.einsum("ij,ij->j", ks, A), 0.0)
        return mean, var

    ks_t = cross_cov(X, Xs, kernels.theta)
    t_mean, t_var = project(draws[:, -n:], priors.chol_theta, ks_t,
                            kernels.theta.magnitude, kernels.theta.constant_mean)
    noise = _cexp(t_mean + 0.5 * t_var[None, :])

    if chain.coupled:
        chol_f = priors.chol_v[:n, :n]
        chol_p = priors.chol_v[n:, n:]
        f_mean, f_var = project(draws[:, :n], chol_f,
                                cross_cov(X, Xs, kernels.f),
                                kernels.f.magnitude, kernels.f.constant_mean)
        p_mean, p_var = project(draws[:, n:2 * n], chol_p,
                                cross_cov(X, Xs, kernels.phi),
                                kernels.phi.magnitude, kernels.phi.constant_mean)
        mean_s = _cexp(0.5 * p_mean + 0.125 * p_var[None, :]) * f_mean
        second = _cexp(p_mean + 0.5 * p_var[None, :]) * (f_mean**2 + f_var[None, :])
        var_s = np.maximum(second - mean_s**2, 0.0) + noise
    else:
        f_mean, f_var = project(draws[:, :n], priors.chol_v,
                                cross_cov(X, Xs, kernels.f),
                                kernels.f.magnitude, kernels.f.constant_mean)
        mean_s = f_mean
        var_s = f_var[None, :] + noise

    mean = mean_s.mean(axis=0)
    var = np.mean(var_s + mean_s**2, axis=0) - mean**2
    out = McPredictive(mean, var)
    if y_eval is not None:
        ye = np.asarray(y_eval, dtype=float).ravel()
        log_comp = -0.5 * (LOG_2PI + np.log(var_s) + (ye[None, :] - mean_s) ** 2 / var_s)
        out.log_density = logsumexp(log_comp, axis=0) - np.log(S)
    return out
