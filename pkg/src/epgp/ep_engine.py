"""Parallel EP for GP regression with latent noise / signal variances.

Two model tiers share one engine:

* ``'n'``   -- latent log noise variance per observation; the likelihood
  N(y_i | f_i, e^theta_i) is approximated by independent univariate
  Gaussian sites for f_i and theta_i.
* ``'mn'``  -- latent log noise and log signal variance; the likelihood
  N(y_i | e^{phi_i/2} f_i, e^theta_i) gets a coupled bivariate site
  over (f_i, phi_i) and a univariate site for theta_i.

``'mn-factorized'`` is a diagnostic variant of ``'mn'`` whose
(f, phi) sites stay diagonal; it converges noticeably slower and is
never selected by default.

Sites are stored in natural parameters (precision-mean, precision)
throughout; moment form only appears transiently around the
tilted-moment quadrature.

All engine-internal Gaussians (sites, posterior blocks, cavities) live
on latents centred at their constant prior means; the offsets enter
only where the likelihood is evaluated.  This keeps every quadratic
form in the marginal-likelihood assembly well scaled even when a prior
variance is driven to zero to pin a latent at its mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import CavityError, InputError, NumericalError, QuadratureError
from .kernels import LatentKernels, _as_2d, cov_matrix, jittered_cholesky

LOG_2PI = float(np.log(2.0 * np.pi))
# e^x overflows double precision near x = 710; +-30 keeps every derived
# quantity (variances, precisions) far away from both overflow and a
# denormal underflow while spanning 26 orders of magnitude.
EXP_CLAMP = 30.0
# Zhat below this is treated as quadrature underflow for the site.
ZHAT_LOG_FLOOR = -700.0
# Cavity precision must stay above this fraction of the marginal's.
CAVITY_REL_FLOOR = 1e-12


def _cexp(x):
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


# ---------------------------------------------------------------------------
# configuration and quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EPConfig:
    """Knobs of the EP fixed-point iteration."""

    damping: float = 0.8
    max_iter: int = 200
    tol: float = 1e-6            # |delta log Z_EP| between sweeps
    site_tol: float = 1e-6       # max natural-parameter drift per sweep
    grid_nodes: int = 33         # Simpson nodes per quadrature dimension
    grid_halfwidth: float = 6.0  # grid reach in cavity standard deviations
    min_damping: float = 0.1
    halving_skip_fraction: float = 0.1


def simpson_weights(n_nodes: int, spacing: float) -> np.ndarray:
    """Composite Simpson weights for ``n_nodes`` equispaced points."""
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise InputError("Simpson rule needs an odd number of nodes >= 3")
    w = np.ones(n_nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (spacing / 3.0)


@dataclass(frozen=True)
class QuadratureGrid:
    """Cavity-centred Simpson grid, one node/weight array per dimension."""

    nodes: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]

    @property
    def ndim(self) -> int:
        return len(self.nodes)

    @classmethod
    def for_cavity(cls, means, variances, n_nodes: int = 33, halfwidth: float = 6.0):
        """Grid spanning mean +- halfwidth * sd in every dimension."""
        means = np.atleast_1d(np.asarray(means, dtype=float))
        variances = np.atleast_1d(np.asarray(variances, dtype=float))
        nodes, weights = [], []
        for m, v in zip(means, variances):
            sd = np.sqrt(v)
            t = np.linspace(m - halfwidth * sd, m + halfwidth * sd, n_nodes)
            nodes.append(t)
            weights.append(simpson_weights(n_nodes, t[1] - t[0]))
        return cls(tuple(nodes), tuple(weights))


def _batch_grid(mu, var, n_nodes, halfwidth):
    """(n, K) node locations and Simpson weights centred per cavity."""
    sd = np.sqrt(var)
    t = np.linspace(-halfwidth, halfwidth, n_nodes)
    nodes = mu[:, None] + sd[:, None] * t[None, :]
    w = simpson_weights(n_nodes, t[1] - t[0])
    return nodes, sd[:, None] * w[None, :]


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------


@dataclass
class SiteSet:
    """Natural-parameter site approximations for every observation.

    ``nu_*`` are precision-means and ``tau_*`` precisions.  The phi
    fields are present only for the coupled tier, where the (f, phi)
    site of observation i is the bivariate natural-parameter Gaussian
    with precision [[tau_f, tau_fphi], [tau_fphi, tau_phi]]_i.
    """

    nu_f: np.ndarray
    tau_f: np.ndarray
    nu_theta: np.ndarray
    tau_theta: np.ndarray
    nu_phi: np.ndarray | None = None
    tau_phi: np.ndarray | None = None
    tau_fphi: np.ndarray | None = None
    log_zt: np.ndarray = None

    def __post_init__(self):
        if self.log_zt is None:
            self.log_zt = np.zeros_like(self.nu_f)

    @property
    def coupled(self) -> bool:
        return self.nu_phi is not None

    @property
    def n(self) -> int:
        return self.nu_f.size

    @classmethod
    def zeros(cls, n: int, coupled: bool) -> "SiteSet":
        z = lambda: np.zeros(n)
        if coupled:
            return cls(z(), z(), z(), z(), z(), z(), z(), z())
        return cls(z(), z(), z(), z(), log_zt=z())

    def copy(self) -> "SiteSet":
        kw = {
            k: (None if getattr(self, k) is None else getattr(self, k).copy())
            for k in (
                "nu_f", "tau_f", "nu_theta", "tau_theta",
                "nu_phi", "tau_phi", "tau_fphi", "log_zt",
            )
        }
        return SiteSet(**kw)

    def max_drift(self, other: "SiteSet") -> float:
        """Largest relative natural-parameter change versus ``other``."""

        def rel(a, b):
            return np.max(np.abs(a - b) / (1.0 + np.abs(b)), initial=0.0)

        parts = [
            rel(self.nu_f, other.nu_f),
            rel(self.tau_f, other.tau_f),
            rel(self.nu_theta, other.nu_theta),
            rel(self.tau_theta, other.tau_theta),
        ]
        if self.coupled:
            parts += [
                rel(self.nu_phi, other.nu_phi),
                rel(self.tau_phi, other.tau_phi),
                rel(self.tau_fphi, other.tau_fphi),
            ]
        return float(max(parts))


@dataclass
class LatentPriors:
    """Jittered prior covariances (and factors) of the latent blocks."""

    K_v: np.ndarray
    chol_v: np.ndarray
    mean_v: np.ndarray
    K_theta: np.ndarray
    chol_theta: np.ndarray
    mean_theta: np.ndarray
    coupled: bool

    @classmethod
    def build(cls, X, kernels: LatentKernels, coupled: bool) -> "LatentPriors":
        X = _as_2d(X)
        n = X.shape[0]
        K_th_raw = cov_matrix(X, kernels.theta).matrix
        K_th, chol_th, _ = jittered_cholesky(K_th_raw, kernels.theta.magnitude)
        mean_th = np.full(n, kernels.theta.constant_mean)

        K_f_raw = cov_matrix(X, kernels.f).matrix
        K_f, chol_f, _ = jittered_cholesky(K_f_raw, kernels.f.magnitude)
        if coupled:
            if kernels.phi is None:
                raise InputError("coupled tier requires a phi kernel")
            K_p_raw = cov_matrix(X, kernels.phi).matrix
            K_p, chol_p, _ = jittered_cholesky(K_p_raw, kernels.phi.magnitude)
            K_v = np.zeros((2 * n, 2 * n))
            K_v[:n, :n] = K_f
            K_v[n:, n:] = K_p
            chol_v = np.zeros_like(K_v)
            chol_v[:n, :n] = chol_f
            chol_v[n:, n:] = chol_p
            mean_v = np.concatenate(
                [np.full(n, kernels.f.constant_mean),
                 np.full(n, kernels.phi.constant_mean)]
            )
        else:
            K_v, chol_v = K_f, chol_f
            mean_v = np.full(n, kernels.f.constant_mean)
        return cls(K_v, chol_v, mean_v, K_th, chol_th, mean_th, coupled)

    @property
    def n(self) -> int:
        return self.mean_theta.size


@dataclass
class JointPosterior:
    """Gaussian blocks q(v | X, y) and q(theta | X, y)."""

    mu_v: np.ndarray
    Sigma_v: np.ndarray
    mu_theta: np.ndarray
    Sigma_theta: np.ndarray
    chol_v: np.ndarray = None
    chol_theta: np.ndarray = None

    @property
    def coupled(self) -> bool:
        return self.mu_v.size == 2 * self.mu_theta.size

    @property
    def n(self) -> int:
        return self.mu_theta.size

    def theta_marginals(self):
        return self.mu_theta, np.diag(self.Sigma_theta).copy()

    def v_marginals(self):
        """Per-observation marginals of the v block.

        Univariate tier: (mu, var).  Coupled tier: the bivariate
        (f_i, phi_i) marginals as (mu_f, mu_phi, S_ff, S_fphi, S_phiphi).
        """
        n = self.n
        if not self.coupled:
            return self.mu_v, np.diag(self.Sigma_v).copy()
        idx = np.arange(n)
        return (
            self.mu_v[:n],
            self.mu_v[n:],
            self.Sigma_v[idx, idx].copy(),
            self.Sigma_v[idx, n + idx].copy(),
            self.Sigma_v[n + idx, n + idx].copy(),
        )


@dataclass
class EPState:
    """Everything the EP run produced, plus the data it conditioned on."""

    kind: str
    X: np.ndarray
    y: np.ndarray
    kernels: LatentKernels
    priors: LatentPriors
    sites: SiteSet
    posterior: JointPosterior
    log_z_ep: float = np.nan
    iterations: int = 0
    converged: bool = False
    history: list = field(default_factory=list)
    skips: int = 0

    @property
    def coupled(self) -> bool:
        return self.sites.coupled


@dataclass(frozen=True)
class Cavity:
    """Leave-one-out marginal; scalar or bivariate."""

    mean: np.ndarray | float
    cov: np.ndarray | float


@dataclass(frozen=True)
class TiltedMoments:
    """Moment-matched summary of one tilted distribution."""

    log_zhat: float
    v_mean: np.ndarray | float
    v_cov: np.ndarray | float
    theta_mean: float
    theta_var: float


# ---------------------------------------------------------------------------
# cavities
# ---------------------------------------------------------------------------


def compute_cavity(marginal_mean, marginal_cov, site_nu, site_tau) -> Cavity:
    """Remove one site from its posterior marginal in natural parameters.

    Scalars give a univariate cavity; a 2-vector mean with 2x2
    covariance gives the bivariate one.  Raises :class:`CavityError`
    when the leave-one-out precision is not positive definite.
    """
    cov = np.asarray(marginal_cov, dtype=float)
    if cov.ndim == 0:
        prec = 1.0 / float(cov)
        cav_prec = prec - float(site_tau)
        if not cav_prec > CAVITY_REL_FLOOR * prec:
            raise CavityError("negative cavity precision")
        cav_var = 1.0 / cav_prec
        cav_mean = cav_var * (prec * float(marginal_mean) - float(site_nu))
        return Cavity(cav_mean, cav_var)

    mu = np.asarray(marginal_mean, dtype=float)
    P = np.linalg.inv(cov)
    Q = P - np.asarray(site_tau, dtype=float)
    det = Q[0, 0] * Q[1, 1] - Q[0, 1] * Q[1, 0]
    if not (Q[0, 0] > 0.0 and det > 0.0):
        raise CavityError("cavity precision not positive definite")
    cav_cov = np.array([[Q[1, 1], -Q[0, 1]], [-Q[1, 0], Q[0, 0]]]) / det
    cav_mean = cav_cov @ (P @ mu - np.asarray(site_nu, dtype=float))
    return Cavity(cav_mean, cav_cov)


def _cavities_uni(mu, var, nu, tau):
    """Vectorized univariate cavities; returns (mean, var, ok mask)."""
    prec = 1.0 / var
    cav_prec = prec - tau
    ok = cav_prec > CAVITY_REL_FLOOR * prec
    safe = np.where(ok, cav_prec, 1.0)
    cav_var = 1.0 / safe
    cav_mean = cav_var * (prec * mu - nu)
    return np.where(ok, cav_mean, 0.0), np.where(ok, cav_var, 1.0), ok


def _cavities_biv(mu_f, mu_p, S_ff, S_fp, S_pp, nu_f, nu_p, tau_ff, tau_fp, tau_pp):
    """Vectorized bivariate cavities for the coupled tier."""
    det_m = S_ff * S_pp - S_fp * S_fp
    ok = det_m > 0.0
    det_m = np.where(ok, det_m, 1.0)
    # marginal precision and precision-mean
    P11 = S_pp / det_m
    P22 = S_ff / det_m
    P12 = -S_fp / det_m
    nm_f = P11 * mu_f + P12 * mu_p
    nm_p = P12 * mu_f + P22 * mu_p
    # subtract the site
    Q11 = P11 - tau_ff
    Q12 = P12 - tau_fp
    Q22 = P22 - tau_pp
    det_q = Q11 * Q22 - Q12 * Q12
    ok &= (Q11 > CAVITY_REL_FLOOR * P11) & (det_q > CAVITY_REL_FLOOR * (P11 * P22))
    det_q = np.where(ok, det_q, 1.0)
    c_ff = np.where(ok, Q22 / det_q, 1.0)
    c_pp = np.where(ok, Q11 / det_q, 1.0)
    c_fp = np.where(ok, -Q12 / det_q, 0.0)
    rho2 = c_fp * c_fp / (c_ff * c_pp)
    ok &= rho2 < 1.0 - 1e-10
    df = nm_f - nu_f
    dp = nm_p - nu_p
    cm_f = np.where(ok, c_ff * df + c_fp * dp, 0.0)
    cm_p = np.where(ok, c_fp * df + c_pp * dp, 0.0)
    return cm_f, cm_p, c_ff, c_fp, c_pp, ok


# ---------------------------------------------------------------------------
# tilted moments
# ---------------------------------------------------------------------------


def _log_normal_pdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _tilted_n_batch(y, mu_f, v_f, mu_t, v_t, t_nodes, t_w,
                    off_f=0.0, off_t=0.0):
    """Tilted moments for N(y | f, e^theta) against Gaussian cavities.

    All arguments are per-site arrays; ``t_nodes``/``t_w`` hold the
    (n, K) theta grid.  Cavity means, nodes and the returned moments
    are in centred coordinates; ``off_f``/``off_t`` are the constant
    prior means applied inside the likelihood only.  The f-integral is
    analytic per node; only theta is quadratured.
    """
    ye = y - off_f
    e_t = _cexp(t_nodes + off_t)
    var_y = v_f[:, None] + e_t
    log_lik = _log_normal_pdf(ye[:, None], mu_f[:, None], var_y)
    L = log_lik + _log_normal_pdf(t_nodes, mu_t[:, None], v_t[:, None]) + np.log(t_w)
    log_zt = logsumexp(L, axis=1)
    finite = np.isfinite(log_zt) & (log_zt > ZHAT_LOG_FLOOR)
    p = np.exp(L - np.where(finite, log_zt, 0.0)[:, None])

    # Gaussian conditional of f at each theta node.
    e_mt = _cexp(-(t_nodes + off_t))
    prec = 1.0 / v_f[:, None] + e_mt
    v_cond = 1.0 / prec
    m_cond = v_cond * (mu_f[:, None] / v_f[:, None] + ye[:, None] * e_mt)

    dm = m_cond - mu_f[:, None]
    ef = np.sum(p * dm, axis=1)
    ef2 = np.sum(p * (v_cond + dm * dm), axis=1)
    f_mean = mu_f + ef
    f_var = ef2 - ef * ef

    dt = t_nodes - mu_t[:, None]
    et = np.sum(p * dt, axis=1)
    et2 = np.sum(p * dt * dt, axis=1)
    th_mean = mu_t + et
    th_var = et2 - et * et

    ok = finite & (f_var > 0.0) & (th_var > 0.0)
    return log_zt, f_mean, f_var, th_mean, th_var, ok


def _tilted_mn_batch(
    y, mu_f, mu_p, S_ff, S_fp, S_pp, mu_t, v_t,
    p_nodes, p_w, t_nodes, t_w,
    off_f=0.0, off_p=0.0, off_t=0.0,
):
    """Tilted moments for N(y | e^{phi/2} f, e^theta), coupled cavities.

    Uses the conditional split q(f | phi) q(phi): f integrates out
    analytically on every (phi, theta) node, leaving a 2-D Simpson sum.
    Coordinates are centred as in :func:`_tilted_n_batch`.  Returns the
    eight matched moments per site plus a validity mask.
    """
    slope = S_fp / S_pp
    s2 = S_ff - S_fp * slope
    # conditional mean of the *full* signal latent given phi
    m = off_f + mu_f[:, None] + slope[:, None] * (p_nodes - mu_p[:, None])

    # exponentials on the joint grid factor into per-dimension pieces
    e_p = _cexp(p_nodes + off_p)
    e_p2 = _cexp(0.5 * (p_nodes + off_p))
    e_t = _cexp(t_nodes + off_t)
    e_mt = _cexp(-(t_nodes + off_t))

    # f-marginalized likelihood on the (phi, theta) grid
    V = e_t[:, None, :] + (e_p * s2[:, None])[:, :, None]
    resid2 = (y[:, None] - e_p2 * m) ** 2
    lw_p = _log_normal_pdf(p_nodes, mu_p[:, None], S_pp[:, None]) + np.log(p_w)
    lw_t = _log_normal_pdf(t_nodes, mu_t[:, None], v_t[:, None]) + np.log(t_w)
    L = (
        -0.5 * (LOG_2PI + np.log(V) + resid2[:, :, None] / V)
        + lw_p[:, :, None]
        + lw_t[:, None, :]
    )
    L_max = np.max(L, axis=(1, 2))
    P = np.exp(L - L_max[:, None, None])
    z = np.sum(P, axis=(1, 2))
    log_zt = np.log(z) + L_max
    finite = np.isfinite(log_zt) & (log_zt > ZHAT_LOG_FLOOR)
    P /= np.where(z > 0, z, 1.0)[:, None, None]

    # conditional tilted f given (phi, theta)
    v_cond = 1.0 / (1.0 / s2[:, None, None] + e_p[:, :, None] * e_mt[:, None, :])
    m_cond = v_cond * (
        m[:, :, None] / s2[:, None, None]
        + (y[:, None] * e_p2)[:, :, None] * e_mt[:, None, :]
    )

    dm = m_cond - (off_f + mu_f[:, None, None])
    dp = (p_nodes - mu_p[:, None])[:, :, None]
    dt = (t_nodes - mu_t[:, None])[:, None, :]

    Pdm = P * dm
    ef = np.sum(Pdm, axis=(1, 2))
    ef2 = np.sum(P * v_cond + Pdm * dm, axis=(1, 2))
    ep = np.sum(P * dp, axis=(1, 2))
    ep2 = np.sum(P * dp * dp, axis=(1, 2))
    efp = np.sum(Pdm * dp, axis=(1, 2))
    et = np.sum(P * dt, axis=(1, 2))
    et2 = np.sum(P * dt * dt, axis=(1, 2))

    f_mean = mu_f + ef
    f_var = ef2 - ef * ef
    p_mean = mu_p + ep
    p_var = ep2 - ep * ep
    fp_cov = efp - ef * ep
    th_mean = mu_t + et
    th_var = et2 - et * et

    ok = (
        finite
        & (f_var > 0.0)
        & (p_var > 0.0)
        & (th_var > 0.0)
        & (f_var * p_var - fp_cov * fp_cov > 0.0)
    )
    return log_zt, f_mean, f_var, p_mean, p_var, fp_cov, th_mean, th_var, ok


def tilted_moments_n(y_i: float, cavity_f: Cavity, cavity_theta: Cavity,
                     grid: QuadratureGrid) -> TiltedMoments:
    """Moments of Zhat^-1 N(y | f, e^theta) q_-i(f) q_-i(theta)."""
    t = grid.nodes[0][None, :]
    w = grid.weights[0][None, :]
    log_zt, fm, fv, tm, tv, ok = _tilted_n_batch(
        np.array([float(y_i)]),
        np.array([cavity_f.mean]), np.array([cavity_f.cov]),
        np.array([cavity_theta.mean]), np.array([cavity_theta.cov]),
        t, w,
    )
    if not ok[0]:
        raise QuadratureError("tilted quadrature under/overflow")
    return TiltedMoments(float(log_zt[0]), float(fm[0]), float(fv[0]),
                         float(tm[0]), float(tv[0]))


def tilted_moments_mn(y_i: float, cavity_v: Cavity, cavity_theta: Cavity,
                      grid: QuadratureGrid) -> TiltedMoments:
    """Moments of Zhat^-1 N(y | e^{phi/2} f, e^theta) q_-i(f, phi) q_-i(theta).

    ``grid`` holds the (phi, theta) node arrays in that order.
    """
    if grid.ndim != 2:
        raise InputError("coupled tilted moments need a 2-D grid")
    cov = np.asarray(cavity_v.cov, dtype=float)
    rho2 = cov[0, 1] ** 2 / (cov[0, 0] * cov[1, 1])
    if rho2 > 1.0 - 1e-10:
        raise CavityError("degenerate cavity correlation")
    mean = np.asarray(cavity_v.mean, dtype=float)
    out = _tilted_mn_batch(
        np.array([float(y_i)]),
        np.array([mean[0]]), np.array([mean[1]]),
        np.array([cov[0, 0]]), np.array([cov[0, 1]]), np.array([cov[1, 1]]),
        np.array([cavity_theta.mean]), np.array([cavity_theta.cov]),
        grid.nodes[0][None, :], grid.weights[0][None, :],
        grid.nodes[1][None, :], grid.weights[1][None, :],
    )
    log_zt, fm, fv, pm, pv, fpc, tm, tv, ok = out
    if not ok[0]:
        raise QuadratureError("tilted quadrature under/overflow")
    return TiltedMoments(
        float(log_zt[0]),
        np.array([fm[0], pm[0]]),
        np.array([[fv[0], fpc[0]], [fpc[0], pv[0]]]),
        float(tm[0]), float(tv[0]),
    )


# ---------------------------------------------------------------------------
# posterior refresh and marginal likelihood
# ---------------------------------------------------------------------------


def _block_posterior(K, KTau, nu):
    """Moments of a zero-mean prior N(0, K) combined with natural sites.

    Solves (I + K Tau) Sigma = K, which stays well defined for zero or
    (individually) negative site precisions, then verifies positive
    definiteness via Cholesky.  ``KTau`` is the precomputed product
    K @ Tau (the site precision is diagonal or banded, so callers can
    build it by column scaling).
    """
    M = KTau
    M[np.diag_indices_from(M)] += 1.0
    Sigma = np.linalg.solve(M, K)
    Sigma = 0.5 * (Sigma + Sigma.T)
    try:
        chol = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise NumericalError("combined site+prior precision not positive definite")
    return Sigma @ nu, Sigma, chol


def recompute_posterior(priors: LatentPriors, sites: SiteSet) -> JointPosterior:
    """Posterior blocks (centred coordinates) from priors and sites."""
    n = priors.n
    mu_t, S_t, chol_t = _block_posterior(
        priors.K_theta, priors.K_theta * sites.tau_theta[None, :], sites.nu_theta
    )
    K = priors.K_v
    if sites.coupled:
        # Tau has diagonal blocks; K @ Tau reduces to column scalings
        KTau = np.empty_like(K)
        KTau[:, :n] = K[:, :n] * sites.tau_f[None, :] \
            + K[:, n:] * sites.tau_fphi[None, :]
        KTau[:, n:] = K[:, :n] * sites.tau_fphi[None, :] \
            + K[:, n:] * sites.tau_phi[None, :]
        nu = np.concatenate([sites.nu_f, sites.nu_phi])
    else:
        KTau = K * sites.tau_f[None, :]
        nu = sites.nu_f
    mu_v, S_v, chol_v = _block_posterior(K, KTau, nu)
    return JointPosterior(mu_v, S_v, mu_t, S_t, chol_v, chol_t)


def _log_partition_full(mu, chol) -> float:
    """log of the Gaussian exponential-form normalizer Z(m, V)."""
    z = solve_triangular(chol, mu, lower=True)
    return float(
        0.5 * z @ z + np.sum(np.log(np.diag(chol))) + 0.5 * mu.size * LOG_2PI
    )


def _log_partition_uni(mu, var):
    return 0.5 * (mu * mu / var + np.log(var) + LOG_2PI)


def _log_partition_biv(mu_f, mu_p, S_ff, S_fp, S_pp):
    det = S_ff * S_pp - S_fp * S_fp
    quad = (S_pp * mu_f * mu_f - 2.0 * S_fp * mu_f * mu_p + S_ff * mu_p * mu_p) / det
    return 0.5 * (quad + np.log(det)) + LOG_2PI


def log_marginal_ep(state: EPState) -> float:
    """EP approximation of the log marginal likelihood.

    Cavity terms are recomputed from the current posterior and sites;
    the site normalizers come from ``state.sites.log_zt`` (refreshed on
    every sweep), so the value is a function of the state alone.
    """
    sites, post, priors = state.sites, state.posterior, state.priors

    mu_t, var_t = post.theta_marginals()
    cm_t, cv_t, ok_t = _cavities_uni(mu_t, var_t, sites.nu_theta, sites.tau_theta)
    if not np.all(ok_t):
        raise NumericalError("non-positive-definite theta cavity")
    theta_sum = float(
        np.sum(_log_partition_uni(cm_t, cv_t) - _log_partition_uni(mu_t, var_t))
    )

    if sites.coupled:
        mu_f, mu_p, S_ff, S_fp, S_pp = post.v_marginals()
        cmf, cmp, cff, cfp, cpp, ok_v = _cavities_biv(
            mu_f, mu_p, S_ff, S_fp, S_pp,
            sites.nu_f, sites.nu_phi, sites.tau_f, sites.tau_fphi, sites.tau_phi,
        )
        if not np.all(ok_v):
            raise NumericalError("non-positive-definite v cavity")
        v_sum = float(
            np.sum(
                _log_partition_biv(cmf, cmp, cff, cfp, cpp)
                - _log_partition_biv(mu_f, mu_p, S_ff, S_fp, S_pp)
            )
        )
    else:
        mu_v, var_v = post.v_marginals()
        cm_v, cv_v, ok_v = _cavities_uni(mu_v, var_v, sites.nu_f, sites.tau_f)
        if not np.all(ok_v):
            raise NumericalError("non-positive-definite f cavity")
        v_sum = float(
            np.sum(_log_partition_uni(cm_v, cv_v) - _log_partition_uni(mu_v, var_v))
        )

    # zero-mean prior normalizers: only the log-determinant part survives
    prior_v = float(np.sum(np.log(np.diag(priors.chol_v)))) \
        + 0.5 * priors.mean_v.size * LOG_2PI
    prior_t = float(np.sum(np.log(np.diag(priors.chol_theta)))) \
        + 0.5 * priors.mean_theta.size * LOG_2PI
    return (
        _log_partition_full(post.mu_v, post.chol_v)
        + _log_partition_full(post.mu_theta, post.chol_theta)
        + v_sum
        + theta_sum
        - prior_v
        - prior_t
        + float(np.sum(sites.log_zt))
    )


# ---------------------------------------------------------------------------
# parallel site updates
# ---------------------------------------------------------------------------


def _sweep_targets(state: EPState, config: EPConfig):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return _sweep_targets_impl(state, config)


def _sweep_targets_impl(state: EPState, config: EPConfig):
    """Undamped site-update targets for one parallel sweep.

    Computes cavities and tilted moments for every site against the
    same posterior snapshot and returns the full (undamped) new natural
    parameters as a :class:`SiteSet`, the per-site validity mask and
    the skip count.  Sites whose cavity or quadrature failed carry
    their old parameters in the target.  Invalid lanes produce benign
    garbage that never survives the mask, so float warnings are off.
    """
    cfg = config
    sites, post = state.sites, state.posterior
    y = state.y
    coupled = sites.coupled
    factorized = state.kind == "mn-factorized"

    mu_t, var_t = post.theta_marginals()
    cm_t, cv_t, ok_t = _cavities_uni(mu_t, var_t, sites.nu_theta, sites.tau_theta)
    t_nodes, t_w = _batch_grid(cm_t, cv_t, cfg.grid_nodes, cfg.grid_halfwidth)

    priors = state.priors
    off_t = priors.mean_theta[0]
    if coupled:
        mu_f, mu_p, S_ff, S_fp, S_pp = post.v_marginals()
        cmf, cmp, cff, cfp, cpp, ok_v = _cavities_biv(
            mu_f, mu_p, S_ff, S_fp, S_pp,
            sites.nu_f, sites.nu_phi, sites.tau_f, sites.tau_fphi, sites.tau_phi,
        )
        p_nodes, p_w = _batch_grid(cmp, cpp, cfg.grid_nodes, cfg.grid_halfwidth)
        (log_zt, fm, fv, pm, pv, fpc, tm, tv, ok_q) = _tilted_mn_batch(
            y, cmf, cmp, cff, cfp, cpp, cm_t, cv_t,
            p_nodes, p_w, t_nodes, t_w,
            off_f=priors.mean_v[0], off_p=priors.mean_v[-1], off_t=off_t,
        )
    else:
        mu_v, var_v = post.v_marginals()
        cm_v, cv_v, ok_v = _cavities_uni(mu_v, var_v, sites.nu_f, sites.tau_f)
        log_zt, fm, fv, tm, tv, ok_q = _tilted_n_batch(
            y, cm_v, cv_v, cm_t, cv_t, t_nodes, t_w,
            off_f=priors.mean_v[0], off_t=off_t,
        )

    ok = ok_t & ok_v & ok_q
    target = sites.copy()

    def _pick(full, old):
        return np.where(ok, full, old)

    # tilted natural parameters minus cavity natural parameters
    target.tau_theta = _pick(1.0 / tv - 1.0 / cv_t, sites.tau_theta)
    target.nu_theta = _pick(tm / tv - cm_t / cv_t, sites.nu_theta)
    if coupled:
        if factorized:
            # project onto independent marginals: diagonal precision
            tilt_tff = 1.0 / fv
            tilt_tpp = 1.0 / pv
            tilt_tfp = np.zeros_like(fv)
            tilt_nf = fm / fv
            tilt_np = pm / pv
        else:
            det = fv * pv - fpc * fpc
            tilt_tff = pv / det
            tilt_tpp = fv / det
            tilt_tfp = -fpc / det
            tilt_nf = tilt_tff * fm + tilt_tfp * pm
            tilt_np = tilt_tfp * fm + tilt_tpp * pm
        det_c = cff * cpp - cfp * cfp
        cav_tff = cpp / det_c
        cav_tpp = cff / det_c
        cav_tfp = -cfp / det_c
        cav_nf = cav_tff * cmf + cav_tfp * cmp
        cav_np = cav_tfp * cmf + cav_tpp * cmp
        target.tau_f = _pick(tilt_tff - cav_tff, sites.tau_f)
        target.tau_phi = _pick(tilt_tpp - cav_tpp, sites.tau_phi)
        target.tau_fphi = _pick(tilt_tfp - cav_tfp, sites.tau_fphi)
        target.nu_f = _pick(tilt_nf - cav_nf, sites.nu_f)
        target.nu_phi = _pick(tilt_np - cav_np, sites.nu_phi)
    else:
        target.tau_f = _pick(1.0 / fv - 1.0 / cv_v, sites.tau_f)
        target.nu_f = _pick(fm / fv - cm_v / cv_v, sites.nu_f)
    target.log_zt = _pick(log_zt, sites.log_zt)

    return target, ok, int(np.sum(~ok))


def _blend_sites(old: SiteSet, target: SiteSet, ok, delta: float) -> SiteSet:
    """Damped convex step from ``old`` toward the sweep targets."""
    new = old.copy()
    fields = ["nu_f", "tau_f", "nu_theta", "tau_theta"]
    if old.coupled:
        fields += ["nu_phi", "tau_phi", "tau_fphi"]
    for name in fields:
        o = getattr(old, name)
        t = getattr(target, name)
        setattr(new, name, np.where(ok, o + delta * (t - o), o))
    new.log_zt = np.where(ok, target.log_zt, old.log_zt)
    return new


def update_sites_parallel(state: EPState, delta: float,
                          config: EPConfig | None = None):
    """One parallel sweep of damped site updates.

    All tilted moments are computed against the same posterior snapshot
    before any site changes.  Sites whose cavity or quadrature fails
    keep their previous parameters for this sweep, and the sweep's
    damping is halved (down to ``min_damping``) when the failure
    fraction exceeds ``halving_skip_fraction``.

    Returns ``(new_sites, n_skipped, max_drift)``.
    """
    if not 0.0 < delta <= 1.0:
        raise InputError("damping factor must lie in (0, 1]")
    cfg = config or EPConfig()
    target, ok, n_skipped = _sweep_targets(state, cfg)
    eff_delta = delta
    if n_skipped > cfg.halving_skip_fraction * state.sites.n:
        eff_delta = max(delta / 2.0, cfg.min_damping)
    new = _blend_sites(state.sites, target, ok, eff_delta)
    return new, n_skipped, new.max_drift(state.sites)


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def run_ep(X, y, kernels: LatentKernels, model_kind: str = "n",
           config: EPConfig | None = None,
           init_sites: SiteSet | None = None) -> EPState:
    """Run parallel EP to convergence and return the final state.

    ``model_kind`` is ``'n'`` (latent noise variance), ``'mn'``
    (coupled noise + signal variance) or ``'mn-factorized'`` (the
    diagnostic diagonal-site variant of ``'mn'``).  Non-convergence is
    reported through ``converged=False`` on the returned state, never
    as an exception; genuine numerical breakdown of the posterior
    refresh raises :class:`NumericalError`.
    """
    if model_kind not in ("n", "mn", "mn-factorized"):
        raise InputError(f"unknown model kind {model_kind!r}")
    cfg = config or EPConfig()
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    coupled = model_kind in ("mn", "mn-factorized")
    if y.size != X.shape[0]:
        raise InputError("X and y disagree on the number of observations")

    priors = LatentPriors.build(X, kernels, coupled)
    if init_sites is not None:
        if init_sites.coupled != coupled or init_sites.n != y.size:
            raise InputError("init_sites incompatible with data / model kind")
        sites = init_sites.copy()
    else:
        sites = SiteSet.zeros(y.size, coupled)
    posterior = recompute_posterior(priors, sites)
    state = EPState(model_kind, X, y, kernels, priors, sites, posterior)

    prev_lz = None
    for it in range(1, cfg.max_iter + 1):
        target, ok, skipped = _sweep_targets(state, cfg)
        delta = cfg.damping
        if skipped > cfg.halving_skip_fraction * sites.n:
            delta = max(delta / 2.0, cfg.min_damping)
        # a too-aggressive parallel step can break posterior definiteness;
        # halve the damping toward the previous (valid) sites before giving up
        while True:
            new_sites = _blend_sites(sites, target, ok, delta)
            try:
                posterior = recompute_posterior(priors, new_sites)
                break
            except NumericalError:
                if delta <= cfg.min_damping:
                    raise
                delta = max(delta / 2.0, cfg.min_damping)
        drift = new_sites.max_drift(sites)
        sites = new_sites
        state.sites = sites
        state.posterior = posterior
        state.skips += skipped
        state.iterations = it
        try:
            lz = log_marginal_ep(state)
        except NumericalError:
            lz = np.nan
        state.log_z_ep = lz
        state.history.append(lz)
        if (
            prev_lz is not None
            and np.isfinite(lz)
            and np.isfinite(prev_lz)
            and abs(lz - prev_lz) < cfg.tol
            and drift < cfg.site_tol
        ):
            state.converged = True
            break
        prev_lz = lz
    return state
