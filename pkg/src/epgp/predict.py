"""Posterior-predictive distributions for the EP model tiers."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .ep_engine import EPState, JointPosterior, LatentPriors, _cexp, simpson_weights
from .errors import InputError
from .kernels import LatentKernels, _as_2d, cross_cov

LOG_2PI = float(np.log(2.0 * np.pi))

logger = logging.getLogger(__name__)


@dataclass
class LatentPredictive:
    """Gaussian latent marginals at each test point.

    ``mu_phi``/``var_phi``/``cov_fphi`` are ``None`` for the noise-only
    tier, where ``mu_f``/``var_f`` describe the observed-scale signal.
    """

    mu_f: np.ndarray
    var_f: np.ndarray
    mu_theta: np.ndarray
    var_theta: np.ndarray
    mu_phi: np.ndarray | None = None
    var_phi: np.ndarray | None = None
    cov_fphi: np.ndarray | None = None

    @property
    def coupled(self) -> bool:
        return self.mu_phi is not None


@dataclass
class PredictiveResult:
    """Moment-matched Gaussian predictive of y* per test point."""

    mean_y: np.ndarray
    var_y: np.ndarray
    log_density: np.ndarray | None = None


def _project_block(chol, mean_const, mu_centred, Sigma_post, ks, k_diag):
    """Condition one GP block on its posterior (centred coordinates)."""
    A = cho_solve((chol, True), ks)
    mean = mean_const + A.T @ mu_centred
    var = k_diag - np.einsum("ij,ij->j", ks, A) + np.einsum(
        "ij,ij->j", A, Sigma_post @ A
    )
    return mean, var, A


def latent_predictive(posterior: JointPosterior, kernels: LatentKernels,
                      X, Xs, priors: LatentPriors | None = None) -> LatentPredictive:
    """Project the joint posterior to latent marginals at new inputs.

    For the coupled tier the cross-covariance between the signal and
    amplitude processes at a test point is propagated from the
    posterior's cross blocks (their priors are independent).
    """
    X = _as_2d(X)
    Xs = _as_2d(Xs)
    if priors is None:
        priors = LatentPriors.build(X, kernels, posterior.coupled)
    n = posterior.n

    ks_t = cross_cov(X, Xs, kernels.theta)
    mu_t, var_t, _ = _project_block(
        priors.chol_theta, kernels.theta.constant_mean,
        posterior.mu_theta, posterior.Sigma_theta, ks_t, kernels.theta.magnitude,
    )
    var_t = np.maximum(var_t, 1e-15 * kernels.theta.magnitude)

    if not posterior.coupled:
        ks_f = cross_cov(X, Xs, kernels.f)
        mu_f, var_f, _ = _project_block(
            priors.chol_v, kernels.f.constant_mean,
            posterior.mu_v, posterior.Sigma_v, ks_f, kernels.f.magnitude,
        )
        var_f = np.maximum(var_f, 1e-15 * kernels.f.magnitude)
        return LatentPredictive(mu_f, var_f, mu_t, var_t)

    # coupled tier: chol_v is block-diagonal, so solve per process block
    chol_f = priors.chol_v[:n, :n]
    chol_p = priors.chol_v[n:, n:]
    ks_f = cross_cov(X, Xs, kernels.f)
    ks_p = cross_cov(X, Xs, kernels.phi)
    S = posterior.Sigma_v
    mu_f, var_f, A_f = _project_block(
        chol_f, kernels.f.constant_mean,
        posterior.mu_v[:n], S[:n, :n], ks_f, kernels.f.magnitude,
    )
    mu_p, var_p, A_p = _project_block(
        chol_p, kernels.phi.constant_mean,
        posterior.mu_v[n:], S[n:, n:], ks_p, kernels.phi.magnitude,
    )
    cov_fp = np.einsum("ij,ij->j", A_f, S[:n, n:] @ A_p)

    var_f = np.maximum(var_f, 1e-15 * kernels.f.magnitude)
    var_p = np.maximum(var_p, 1e-15 * kernels.phi.magnitude)
    # repair rounding-induced indefiniteness by shrinking the cross term
    bad = cov_fp * cov_fp >= var_f * var_p
    if np.any(bad):
        shrink = 0.99 * np.sqrt(var_f[bad] * var_p[bad]) / np.abs(cov_fp[bad])
        cov_fp[bad] *= shrink
        logger.warning(
            "shrank %d non-PD predictive cross-covariances (max factor %.3g)",
            int(np.sum(bad)), float(1.0 - shrink.min()),
        )
    return LatentPredictive(mu_f, var_f, mu_t, var_t, mu_p, var_p, cov_fp)


def predictive_y_n(lat: LatentPredictive) -> PredictiveResult:
    """Predictive moments with EP-marginalized noise variance."""
    noise = _cexp(lat.mu_theta + 0.5 * lat.var_theta)
    return PredictiveResult(lat.mu_f.copy(), lat.var_f + noise)


def predictive_y_mn(lat: LatentPredictive) -> PredictiveResult:
    """Predictive moments with marginalized noise and signal variance.

    With (f*, phi*) jointly Gaussian and y* = e^{phi*/2} f* + eps the
    lognormal tilting identities give

        E[y*]            = e^{m_p/2 + v_p/8} (m_f + c/2)
        E[(e^{phi/2}f)^2] = e^{m_p + v_p/2} ((m_f + c)^2 + v_f)

    with c the f-phi cross-covariance; the noise adds
    exp(E[theta*] + V[theta*]/2) as in the noise-only tier.
    """
    if not lat.coupled:
        raise InputError("predictive_y_mn needs coupled latents")
    m_f, v_f = lat.mu_f, lat.var_f
    m_p, v_p, c = lat.mu_phi, lat.var_phi, lat.cov_fphi
    mean = _cexp(0.5 * m_p + 0.125 * v_p) * (m_f + 0.5 * c)
    second = _cexp(m_p + 0.5 * v_p) * ((m_f + c) ** 2 + v_f)
    noise = _cexp(lat.mu_theta + 0.5 * lat.var_theta)
    var_signal = np.maximum(second - mean * mean, 0.0)
    return PredictiveResult(mean, var_signal + noise)


def predictive_log_density(res: PredictiveResult, y_star) -> np.ndarray:
    """log N(y* | mean_y, var_y) per test point."""
    y_star = np.asarray(y_star, dtype=float)
    return -0.5 * (LOG_2PI + np.log(res.var_y) + (y_star - res.mean_y) ** 2 / res.var_y)


def predictive_y_quadrature(lat: LatentPredictive, n_nodes: int = 129,
                            halfwidth: float = 8.0) -> PredictiveResult:
    """Diagnostic predictive moments via explicit latent quadrature.

    Integrates the latent log-variance (and, when present, amplitude)
    marginals numerically instead of using the closed-form lognormal
    identities.  Slower; used to cross-check ``predictive_y_n`` and
    ``predictive_y_mn``.
    """
    # shared standardized grid: E[g(x)] = sum_k w_k g(mu + sd * z_k)
    z = np.linspace(-halfwidth, halfwidth, n_nodes)
    w = simpson_weights(n_nodes, z[1] - z[0]) * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    w = w / np.sum(w)

    t = lat.mu_theta[:, None] + np.sqrt(lat.var_theta)[:, None] * z[None, :]
    noise = np.sum(w[None, :] * _cexp(t), axis=1)

    if not lat.coupled:
        return PredictiveResult(lat.mu_f.copy(), lat.var_f + noise)

    p = lat.mu_phi[:, None] + np.sqrt(lat.var_phi)[:, None] * z[None, :]
    slope = lat.cov_fphi / lat.var_phi
    s2 = lat.var_f - lat.cov_fphi * slope
    m = lat.mu_f[:, None] + slope[:, None] * (p - lat.mu_phi[:, None])
    mean = np.sum(w[None, :] * _cexp(0.5 * p) * m, axis=1)
    second = np.sum(w[None, :] * _cexp(p) * (m * m + s2[:, None]), axis=1)
    return PredictiveResult(mean, np.maximum(second - mean * mean, 0.0) + noise)


def predict_state(state: EPState, Xs, y_star=None) -> PredictiveResult:
    """Moment-matched predictive of y* for a fitted EP state."""
    lat = latent_predictive(state.posterior, state.kernels, state.X, Xs,
                            priors=state.priors)
    res = predictive_y_mn(lat) if lat.coupled else predictive_y_n(lat)
    if y_star is not None:
        res.log_density = predictive_log_density(res, y_star)
    return res
