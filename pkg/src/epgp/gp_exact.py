"""Exact GP regression with constant noise (the plain-GP baseline)."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import InputError
from .kernels import KernelParams, _as_2d, cov_matrix, cross_cov, jittered_cholesky

LOG_2PI = float(np.log(2.0 * np.pi))


class ExactGPModel:
    """GP regression model with Gaussian likelihood of fixed variance.

    The Cholesky factor of ``K + sigma^2 I`` and the solve against the
    (mean-centred) targets are cached at construction, so an instance
    is immutable and cheap to query.
    """

    def __init__(self, X, y, kernel: KernelParams, log_noise_variance: float):
        self.X = _as_2d(X)
        self.y = np.asarray(y, dtype=float).ravel()
        if self.y.size != self.X.shape[0]:
            raise InputError("X and y disagree on the number of observations")
        self.kernel = kernel
        self.log_noise_variance = float(log_noise_variance)

        noise = np.exp(self.log_noise_variance)
        self._K_f = cov_matrix(self.X, kernel).matrix
        Ky = self._K_f + noise * np.eye(self.y.size)
        # sigma^2 I usually regularizes enough; escalate only on failure.
        self._Ky, self._chol, self.jitter = jittered_cholesky(
            Ky, kernel.magnitude, initial=0.0
        )
        self._resid = self.y - kernel.constant_mean
        self._alpha = cho_solve((self._chol, True), self._resid)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))

    def log_marginal(self) -> float:
        """Exact log marginal likelihood of the targets."""
        return float(
            -0.5 * self._resid @ self._alpha
            - np.sum(np.log(np.diag(self._chol)))
            - 0.5 * self.n * LOG_2PI
        )

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance of y* at the rows of ``Xs``."""
        Xs = _as_2d(Xs)
        ks = cross_cov(self.X, Xs, self.kernel)
        mean = self.kernel.constant_mean + ks.T @ self._alpha
        V = solve_triangular(self._chol, ks, lower=True)
        var_f = self.kernel.magnitude - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var_f, 0.0) + self.noise_variance

    def lml_gradient(self) -> np.ndarray:
        """Gradient of the log marginal over the log hyperparameters.

        Layout matches (log_magnitude, log_lengthscales..., log_noise);
        a single stored length-scale on multi-dimensional inputs yields
        one (summed) entry.
        """
        Ky_inv = cho_solve((self._chol, True), np.eye(self.n))
        A = np.outer(self._alpha, self._alpha) - Ky_inv

        grads = [0.5 * np.sum(A * self._K_f)]
        ls = self.kernel.lengthscales(self.X.shape[1])
        n_ls = self.kernel.log_lengthscales.size
        sq = (self.X[:, None, :] - self.X[None, :, :]) ** 2 / (ls * ls)
        if n_ls == 1:
            dK = self._K_f * sq.sum(axis=2)
            grads.append(0.5 * np.sum(A * dK))
        else:
            for j in range(n_ls):
                grads.append(0.5 * np.sum(A * (self._K_f * sq[:, :, j])))
        grads.append(0.5 * self.noise_variance * np.trace(A))
        return np.array(grads)

    def log_density(self, Xs, ys) -> np.ndarray:
        """Per-point log predictive density of ``ys`` at ``Xs``."""
        mean, var = self.predict(Xs)
        ys = np.asarray(ys, dtype=float).ravel()
        return -0.5 * (LOG_2PI + np.log(var) + (ys - mean) ** 2 / var)
