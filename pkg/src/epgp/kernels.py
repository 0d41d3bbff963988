"""Squared-exponential ARD covariances for the latent processes.

Three latent processes share this kernel: the (unscaled) signal, the
log signal variance and the log noise variance.  Hyperparameters are
kept in log space so that positivity never has to be enforced by the
optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError, NumericalError

# Jitter ladder: start at JITTER_BASE * magnitude and escalate by 10x per
# failed Cholesky, giving up at JITTER_CAP * magnitude.
JITTER_BASE = 1e-8
JITTER_CAP = 1e-2


@dataclass(frozen=True)
class KernelParams:
    """SE-ARD hyperparameters plus a constant prior mean for one process.

    Parameters
    ----------
    log_magnitude : float
        log of the signal variance sigma_f^2.
    log_lengthscales : array_like
        log length-scales; either one per input dimension or a single
        value applied isotropically to every dimension.
    constant_mean : float
        Constant prior mean of the process.  Zero for the signal
        process; the log-variance processes use it to set their level.
    """

    log_magnitude: float
    log_lengthscales: np.ndarray
    constant_mean: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        if ls.ndim != 1 or ls.size == 0:
            raise InputError("log_lengthscales must be a non-empty 1-D sequence")
        object.__setattr__(self, "log_lengthscales", ls)

    @property
    def magnitude(self) -> float:
        return float(np.exp(self.log_magnitude))

    def lengthscales(self, dim: int) -> np.ndarray:
        """Length-scales broadcast to ``dim`` entries (isotropic mode)."""
        ls = np.exp(self.log_lengthscales)
        if ls.size == dim:
            return ls
        if ls.size == 1:
            return np.full(dim, ls[0])
        raise InputError(
            f"kernel has {ls.size} length-scales but inputs have dimension {dim}"
        )

    def with_mean(self, mean: float) -> "KernelParams":
        return replace(self, constant_mean=mean)


@dataclass
class CovMatrix:
    """Dense symmetric covariance matrix with the jitter it carries."""

    matrix: np.ndarray
    jitter: float = 0.0


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError("inputs must be an (n, d) matrix")
    return X


def _scaled_sqdist(X: np.ndarray, X2: np.ndarray, ls: np.ndarray) -> np.ndarray:
    # Broadcasted differences keep the matrix exactly symmetric when X2 is X.
    diff = X[:, None, :] - X2[None, :, :]
    return np.einsum("ijk,k->ij", diff * diff, 0.5 / (ls * ls))


def se_ard(x, x2, params: KernelParams) -> float:
    """Squared-exponential covariance between two input vectors."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise InputError(f"input dimensions differ: {x.shape} vs {x2.shape}")
    ls = params.lengthscales(x.size)
    z = (x - x2) / ls
    return params.magnitude * float(np.exp(-0.5 * np.dot(z, z)))


def cov_matrix(X, params: KernelParams, jitter: float = 0.0) -> CovMatrix:
    """Pairwise SE-ARD covariance of the rows of ``X`` plus diagonal jitter."""
    X = _as_2d(X)
    ls = params.lengthscales(X.shape[1])
    K = params.magnitude * np.exp(-_scaled_sqdist(X, X, ls))
    if jitter:
        K[np.diag_indices_from(K)] += jitter
    return CovMatrix(K, jitter)


def cross_cov(X, Xs, params: KernelParams) -> np.ndarray:
    """Covariance between training rows ``X`` and test rows ``Xs`` (n x m)."""
    X = _as_2d(X)
    Xs = _as_2d(Xs)
    if X.shape[1] != Xs.shape[1]:
        raise InputError(
            f"input dimensions differ: {X.shape[1]} vs {Xs.shape[1]}"
        )
    ls = params.lengthscales(X.shape[1])
    return params.magnitude * np.exp(-_scaled_sqdist(X, Xs, ls))


def jittered_cholesky(
    K: np.ndarray, magnitude: float, initial: float = JITTER_BASE
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lower Cholesky factor of ``K`` with an escalating diagonal jitter.

    The first attempt uses ``initial * magnitude`` on the diagonal
    (pass ``initial=0`` to try the matrix as given); each failure
    multiplies the jitter by 10 up to ``JITTER_CAP * magnitude``.
    Returns the jittered matrix, its factor and the jitter used, or
    raises :class:`NumericalError` once the cap is exceeded.
    """
    ladder = [initial * magnitude]
    level = JITTER_BASE * magnitude
    while level <= JITTER_CAP * magnitude * (1 + 1e-12):
        if level > ladder[-1]:
            ladder.append(level)
        level *= 10.0
    for jitter in ladder:
        Kj = K
        if jitter > 0.0:
            Kj = K.copy()
            Kj[np.diag_indices_from(Kj)] += jitter
        try:
            return Kj, np.linalg.cholesky(Kj), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"covariance not positive definite with jitter up to {JITTER_CAP:g} x magnitude"
    )


@dataclass(frozen=True)
class LatentKernels:
    """Kernel bundle for one model tier.

    ``f`` covers the signal process: the observed-scale signal for the
    noise-only tier, or the unit-magnitude unscaled signal when the
    amplitude process is present (its ``log_magnitude`` is then fixed
    at 0 and the level is carried by ``phi``).
    """

    f: KernelParams
    theta: KernelParams
    phi: KernelParams | None = None

    @property
    def coupled(self) -> bool:
        return self.phi is not None
