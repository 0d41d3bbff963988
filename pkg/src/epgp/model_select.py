"""Hyperparameter search over the (EP) evidence and MLPD evaluation."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .datasets import Dataset
from .ep_engine import EPConfig, EPState, run_ep
from .errors import InputError, NumericalError, OptimizationError
from .gp_exact import ExactGPModel
from .kernels import KernelParams, LatentKernels
from .predict import predict_state, predictive_log_density

LOG_2PI = float(np.log(2.0 * np.pi))

logger = logging.getLogger(__name__)

MODEL_KINDS = ("gp", "ep-n", "ep-mn")
# run_ep's name for each CLI-facing tier
_EP_KIND = {"ep-n": "n", "ep-mn": "mn"}


@dataclass
class HyperConfig:
    """Search settings for evidence maximization.

    ``fixed`` maps parameter names (see :func:`param_names`) to frozen
    values excluded from the search.  ``hyperprior`` optionally maps
    names to Gaussian (mean, sd) penalties in log space, turning the
    objective into an unnormalized posterior density.
    """

    n_starts: int = 3
    max_evals: int = 400
    xatol: float = 0.02
    fatol: float = 0.02
    bound: float = 20.0
    perturb_scale: float = 0.5
    seed: int = 0
    ard: bool = False
    fixed: dict = field(default_factory=dict)
    hyperprior: dict | None = None
    ep: EPConfig = field(default_factory=EPConfig)


def param_names(kind: str, d: int, ard: bool = False) -> list[str]:
    """Free-parameter layout for one model tier on d-dimensional inputs.

    The signal process gets per-dimension length-scales in ARD mode;
    the variance processes are always isotropic.  In the coupled tier
    the signal magnitude is carried by the amplitude process, so the
    signal kernel has no magnitude parameter.
    """
    if kind not in MODEL_KINDS:
        raise InputError(f"unknown model kind {kind!r}")
    n_ls = d if ard else 1
    f_ls = [f"f.log_ls{j}" for j in range(n_ls)]
    if kind == "gp":
        return ["f.log_magnitude", *f_ls, "noise.log_variance"]
    theta = ["theta.log_magnitude", "theta.log_ls", "theta.mean"]
    if kind == "ep-n":
        return ["f.log_magnitude", *f_ls, *theta]
    return [*f_ls, "phi.log_magnitude", "phi.log_ls", "phi.mean", *theta]


def _heuristic_init(X, y, kind: str, ard: bool) -> dict:
    """Data-driven starting point in log space."""
    vy = max(float(np.var(y)), 1e-8)
    ranges = np.maximum(X.max(axis=0) - X.min(axis=0), 1e-3)
    half = np.log(ranges / 2.0)
    iso_half = float(np.log(np.mean(ranges) / 2.0))
    n_ls = X.shape[1] if ard else 1
    ls = {f"f.log_ls{j}": (half[j] if ard else float(np.mean(half)))
          for j in range(n_ls)}
    init = {
        "f.log_magnitude": float(np.log(vy)),
        **ls,
        "noise.log_variance": float(np.log(0.1 * vy)),
        "theta.log_magnitude": 0.0,
        "theta.log_ls": iso_half,
        "theta.mean": float(np.log(0.1 * vy)),
        "phi.log_magnitude": 0.0,
        "phi.log_ls": iso_half,
        "phi.mean": float(np.log(0.5 * vy)),
    }
    return init


def unpack(kind: str, names: list[str], values: np.ndarray, d: int):
    """Build kernels from a packed parameter vector.

    Returns ``(KernelParams, log_noise)`` for the exact-GP tier and a
    :class:`LatentKernels` bundle for the EP tiers.
    """
    p = dict(zip(names, values))
    f_ls = np.array([p[k] for k in names if k.startswith("f.log_ls")])
    if kind == "gp":
        return KernelParams(p["f.log_magnitude"], f_ls), p["noise.log_variance"]
    theta = KernelParams(p["theta.log_magnitude"], np.array([p["theta.log_ls"]]),
                         constant_mean=p["theta.mean"])
    if kind == "ep-n":
        return LatentKernels(KernelParams(p["f.log_magnitude"], f_ls), theta)
    phi = KernelParams(p["phi.log_magnitude"], np.array([p["phi.log_ls"]]),
                       constant_mean=p["phi.mean"])
    return LatentKernels(KernelParams(0.0, f_ls), theta, phi)


@dataclass
class FittedModel:
    """One tier fitted to one training set."""

    kind: str
    names: list[str]
    values: np.ndarray
    log_evidence: float
    gp: ExactGPModel | None = None
    state: EPState | None = None
    n_evals: int = 0

    @property
    def params(self) -> dict:
        return dict(zip(self.names, self.values))

    def predict(self, Xs):
        """Predictive mean and variance of y* at the rows of ``Xs``."""
        if self.kind == "gp":
            return self.gp.predict(Xs)
        res = predict_state(self.state, Xs)
        return res.mean_y, res.var_y

    def log_density(self, Xs, ys) -> np.ndarray:
        """Per-point log predictive density of observed values."""
        if self.kind == "gp":
            return self.gp.log_density(Xs, ys)
        res = predict_state(self.state, Xs)
        return predictive_log_density(res, np.asarray(ys, dtype=float).ravel())


def _make_objective(X, y, kind, names, free_idx, base, cfg, warm):
    """Negative (penalized) log evidence over the free coordinates."""
    d = X.shape[1]
    prior = cfg.hyperprior or {}

    def objective(free_vals):
        if np.any(np.abs(free_vals) > cfg.bound):
            return np.inf
        values = base.copy()
        values[free_idx] = free_vals
        try:
            if kind == "gp":
                kernel, log_noise = unpack(kind, names, values, d)
                ev = ExactGPModel(X, y, kernel, log_noise).log_marginal()
            else:
                kernels = unpack(kind, names, values, d)
                state = run_ep(X, y, kernels, _EP_KIND[kind], cfg.ep,
                               init_sites=warm.get("sites"))
                if not state.converged:
                    logger.debug("EP did not converge at %s", dict(zip(names, values)))
                    return np.inf
                warm["sites"] = state.sites
                ev = state.log_z_ep
        except NumericalError:
            return np.inf
        if not np.isfinite(ev):
            return np.inf
        for name, (m, s) in prior.items():
            v = values[names.index(name)]
            ev += -0.5 * ((v - m) / s) ** 2 - np.log(s) - 0.5 * LOG_2PI
        return -ev

    return objective


def optimize_hyperparams(X, y, kind: str, cfg: HyperConfig | None = None) -> FittedModel:
    """Multi-start Nelder-Mead maximization of the (EP) log evidence.

    EP evaluations warm-start their sites from the previous converged
    evaluation of the same start; non-converged or numerically failed
    evaluations score minus infinity.  The returned model is refit at
    the best parameters from a cold start, so its EP state (and the
    iteration count) is independent of the search path.  Raises
    :class:`OptimizationError` when every start fails.
    """
    cfg = cfg or HyperConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    d = X.shape[1]
    names = param_names(kind, d, cfg.ard)
    init = _heuristic_init(X, y, kind, cfg.ard)
    base = np.array([cfg.fixed.get(k, init[k]) for k in names])
    free_idx = np.array([i for i, k in enumerate(names) if k not in cfg.fixed])
    if free_idx.size == 0:
        raise InputError("no free hyperparameters to optimize")

    rng = np.random.default_rng(cfg.seed)
    best_val, best_x, best_state = np.inf, None, None
    n_evals = 0
    for start in range(cfg.n_starts):
        x0 = base[free_idx].copy()
        if start > 0:
            x0 = x0 + rng.normal(0.0, cfg.perturb_scale, x0.size)
        warm: dict = {}
        track = {"val": np.inf, "x": None}
        objective = _make_objective(X, y, kind, names, free_idx, base, cfg, warm)

        def tracked(v):
            nonlocal n_evals
            n_evals += 1
            out = objective(v)
            if out < track["val"]:
                track["val"], track["x"] = out, v.copy()
            return out

        simplex = np.vstack([x0] + [x0 + 0.5 * e for e in np.eye(x0.size)])
        res = minimize(
            tracked, x0, method="Nelder-Mead",
            options={
                "maxfev": cfg.max_evals, "xatol": cfg.xatol, "fatol": cfg.fatol,
                "initial_simplex": simplex, "adaptive": x0.size > 4,
            },
        )
        if track["val"] < best_val:
            best_val, best_x = track["val"], track["x"]

    if best_x is None or not np.isfinite(best_val):
        raise OptimizationError(
            f"all {cfg.n_starts} starts failed for {kind} "
            f"({n_evals} evaluations penalized)"
        )

    values = base.copy()
    values[free_idx] = best_x
    if kind == "gp":
        kernel, log_noise = unpack(kind, names, values, d)
        model = ExactGPModel(X, y, kernel, log_noise)
        return FittedModel(kind, names, values, model.log_marginal(),
                           gp=model, n_evals=n_evals)
    kernels = unpack(kind, names, values, d)
    state = run_ep(X, y, kernels, _EP_KIND[kind], cfg.ep)
    return FittedModel(kind, names, values, state.log_z_ep,
                       state=state, n_evals=n_evals)


# ---------------------------------------------------------------------------
# MLPD
# ---------------------------------------------------------------------------


def test_mlpd(model: FittedModel, Xs, true_mean, true_noise_sd=0.0) -> float:
    """Expected log predictive density against a Gaussian truth.

    With predictive N(m, v) and truth N(mu, sd^2) the integral is
    -log(2 pi v)/2 - ((mu - m)^2 + sd^2) / (2 v) per point; sd = 0
    scores the density at the noiseless target values.
    """
    mean, var = model.predict(Xs)
    mu = np.asarray(true_mean, dtype=float).ravel()
    sd = np.broadcast_to(np.asarray(true_noise_sd, dtype=float), mu.shape)
    pointwise = -0.5 * (LOG_2PI + np.log(var)) \
        - ((mu - mean) ** 2 + sd**2) / (2.0 * var)
    return float(np.mean(pointwise))


def kfold_partition(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic shuffled partition of range(n) into k test folds."""
    if k < 2 or k > n:
        raise InputError("need 2 <= k <= n folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


@dataclass
class EvalReport:
    """Cross-validated MLPD for one method on one dataset."""

    method: str
    mlpd: float
    per_fold: list
    fold_sizes: list
    ep_iterations: list
    wall_clock: float
    seed: int
    k: int
    failed_folds: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failed_folds)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mlpd": self.mlpd,
            "per_fold": self.per_fold,
            "fold_sizes": self.fold_sizes,
            "ep_iterations": self.ep_iterations,
            "wall_clock": self.wall_clock,
            "seed": self.seed,
            "k": self.k,
            "failed_folds": self.failed_folds,
            "partial": self.partial,
        }


def _fit_and_score_fold(args):
    """Worker for one CV fold: returns per-point log densities."""
    X, y, test_idx, kind, cfg = args
    mask = np.ones(y.size, dtype=bool)
    mask[test_idx] = False
    try:
        model = optimize_hyperparams(X[mask], y[mask], kind, cfg)
        dens = model.log_density(X[test_idx], y[test_idx])
        iters = model.state.iterations if model.state is not None else 0
        return dens, iters, None
    except (OptimizationError, NumericalError) as exc:
        return None, 0, str(exc)


def n_jobs() -> int:
    """Worker count for fold/repetition parallelism (EPGP_JOBS)."""
    try:
        return max(1, int(os.environ.get("EPGP_JOBS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Map ``fn`` over ``items``, in processes when EPGP_JOBS > 1."""
    jobs = n_jobs()
    items = list(items)
    if jobs == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def kfold_mlpd(ds: Dataset, k: int, kind: str,
               cfg: HyperConfig | None = None, seed: int = 0) -> EvalReport:
    """k-fold cross-validated mean log predictive density.

    Hyperparameters are re-optimized on every fold's training split
    (the fold seed also seeds the optimizer restarts).  Failed folds
    are recorded and excluded from the aggregate, flagging the report
    as partial.
    """
    cfg = cfg or HyperConfig()
    folds = kfold_partition(ds.n, k, seed)
    t0 = time.time()
    args = [
        (ds.X, ds.y, fold, kind, replace(cfg, seed=seed + 1000 * i))
        for i, fold in enumerate(folds)
    ]
    results = parallel_map(_fit_and_score_fold, args)

    per_fold, iters, failed, all_dens = [], [], [], []
    for i, (dens, it, err) in enumerate(results):
        if dens is None:
            failed.append(i)
            logger.warning("fold %d failed: %s", i, err)
            per_fold.append(None)
        else:
            per_fold.append(float(np.mean(dens)))
            all_dens.append(dens)
            iters.append(it)
    if not all_dens:
        raise OptimizationError(f"every fold failed for {kind}")
    mlpd = float(np.mean(np.concatenate(all_dens)))
    return EvalReport(kind, mlpd, per_fold, [len(f) for f in folds], iters,
                      time.time() - t0, seed, k, failed)
