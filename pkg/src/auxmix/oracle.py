"""Exact-posterior references: grid quadrature (1-2 parameters) and adaptive random-walk MH.

Both target the exact Poisson posterior, with no augmentation and no
mixture approximation, so they are independent of every sampler path they
validate.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .model import PoissonLGM, exact_poisson_loglik
from .samplers import ChainOutput, ConfigError, SamplerConfig

log = logging.getLogger(__name__)


class OracleError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class GridPosterior:
    grid: np.ndarray
    log_post: np.ndarray
    density: np.ndarray
    cdf_values: np.ndarray

    @classmethod
    def from_log_density(cls, grid, log_post):
        grid = np.asarray(grid, dtype=float)
        log_post = np.asarray(log_post, dtype=float)
        dens = np.exp(log_post - log_post.max())
        dx = np.diff(grid)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dx)])
        total = cum[-1]
        return cls(grid, log_post, dens / total, cum / total)

    @property
    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.density, self.grid))

    @property
    def sd(self) -> float:
        m = self.mean
        return float(np.sqrt(np.trapezoid((self.grid - m) ** 2 * self.density, self.grid)))

    @property
    def mode(self) -> float:
        return float(self.grid[np.argmax(self.log_post)])

    def cdf(self, x):
        return np.interp(x, self.grid, self.cdf_values, left=0.0, right=1.0)

    def quantile(self, p):
        return np.interp(p, self.cdf_values, self.grid)


def _log_post_intercept(mu, y, t, prior_mean, prior_var):
    mu = np.asarray(mu, dtype=float)[..., None]
    ll = np.sum(y * (mu + np.log(t)) - t * np.exp(mu) - special.gammaln(y + 1.0), axis=-1)
    return ll - 0.5 * (mu[..., 0] - prior_mean) ** 2 / prior_var - 0.5 * np.log(2 * np.pi * prior_var)


def grid_posterior_1d(model: PoissonLGM, prior_mean: float = 0.0, prior_var: float | None = None,
                      resolution: int = 4001, half_width_sd: float = 8.0) -> GridPosterior:
    """Posterior of the intercept of an intercept-only Poisson model by trapezoid quadrature.

    A Newton pre-pass finds the mode and curvature; the grid spans
    ``2 * half_width_sd`` posterior standard deviations around the mode.
    """
    if model.p != 1 or model.Q or (model.n and not np.allclose(model.X[:, 0], 1.0)):
        raise ValueError("grid_posterior_1d needs an intercept-only model")
    v = float(model.V0[0, 0]) if prior_var is None else float(prior_var)
    y, t = model.y.astype(float), model.t
    mu = np.log((y.sum() + 0.5) / t.sum()) if model.n else prior_mean
    for _ in range(100):
        grad = y.sum() - np.sum(t * np.exp(mu)) - (mu - prior_mean) / v
        hess = -np.sum(t * np.exp(mu)) - 1.0 / v
        step = grad / hess
        mu -= step
        if abs(step) < 1e-13:
            break
    sd = 1.0 / np.sqrt(-hess)
    grid = np.linspace(mu - half_width_sd * sd, mu + half_width_sd * sd, resolution)
    lp = _log_post_intercept(grid, y, t, prior_mean, v)
    if not np.all(np.isfinite(lp[1:-1])):
        raise OracleError("non-finite log posterior inside the grid")
    return GridPosterior.from_log_density(grid, lp)


def grid_posterior_2d(model: PoissonLGM, resolution: int = 401, half_width_sd: float = 8.0):
    """Marginal posteriors of a two-coefficient fixed-effects model on a rectangular grid.

    Returns one :class:`GridPosterior` per coefficient.
    """
    if model.p != 2 or model.Q:
        raise ValueError("grid_posterior_2d needs exactly two fixed effects and no random effects")
    X, y, t = model.X, model.y.astype(float), model.t
    P0 = model.V0_inv
    beta = np.zeros(2)
    if np.allclose(X[:, 0], 1.0):
        beta[0] = np.log((y.mean() + 0.5) / t.mean())
    for _ in range(200):
        mu = t * np.exp(X @ beta)
        grad = X.T @ (y - mu) - P0 @ beta
        hess = -(X.T * mu) @ X - P0
        step = np.linalg.solve(hess, grad)
        beta -= step
        if np.max(np.abs(step)) < 1e-12:
            break
    cov = np.linalg.inv(-hess)
    sd = np.sqrt(np.diag(cov))
    g0 = np.linspace(beta[0] - half_width_sd * sd[0], beta[0] + half_width_sd * sd[0], resolution)
    g1 = np.linspace(beta[1] - half_width_sd * sd[1], beta[1] + half_width_sd * sd[1], resolution)
    B0, B1 = np.meshgrid(g0, g1, indexing="ij")
    eta = B0[..., None] * X[:, 0] + B1[..., None] * X[:, 1]
    ll = np.sum(y * (eta + np.log(t)) - t * np.exp(eta), axis=-1)
    lp = ll - 0.5 * (P0[0, 0] * B0 ** 2 + 2 * P0[0, 1] * B0 * B1 + P0[1, 1] * B1 ** 2)
    if not np.all(np.isfinite(lp)):
        raise OracleError("non-finite log posterior on the grid")
    dens = np.exp(lp - lp.max())
    m0 = np.trapezoid(dens, g1, axis=1)
    m1 = np.trapezoid(dens, g0, axis=0)
    return (
        GridPosterior.from_log_density(g0, np.log(np.maximum(m0, 1e-300))),
        GridPosterior.from_log_density(g1, np.log(np.maximum(m1, 1e-300))),
    )


@dataclass
class ExactPosterior:
    """Unnormalized exact log posterior over theta = (beta, gamma_1..Q, log sigma2_1..Q)."""

    model: PoissonLGM
    sizes: list = field(init=False)

    def __post_init__(self):
        self.sizes = [self.model.p] + [b.m for b in self.model.blocks] + [1] * self.model.Q
        self.V0_inv = self.model.V0_inv

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def split(self, theta):
        parts = np.split(theta, np.cumsum(self.sizes)[:-1])
        Q = self.model.Q
        beta = parts[0]
        gammas = parts[1:1 + Q]
        log_s2 = np.array([p[0] for p in parts[1 + Q:]])
        return beta, gammas, log_s2

    def __call__(self, theta) -> float:
        beta, gammas, log_s2 = self.split(theta)
        lp = exact_poisson_loglik(beta, gammas, self.model) - 0.5 * beta @ self.V0_inv @ beta
        for blk, g, ls in zip(self.model.blocks, gammas, log_s2):
            s2 = np.exp(ls)
            lp += -0.5 * blk.rank * ls - 0.5 * (g @ blk.K @ g) / s2 + blk.prior.log_density(s2) + ls
        return float(lp)

    def to_natural(self, theta) -> np.ndarray:
        beta, gammas, log_s2 = self.split(theta)
        return np.concatenate([beta, *gammas, np.exp(log_s2)])


def rwmh_reference(model: PoissonLGM, config: SamplerConfig, rng: np.random.Generator | None = None,
                   max_dim: int = 50) -> ChainOutput:
    """Adaptive random-walk MH on the exact posterior.

    During burn-in the proposal covariance tracks the running sample
    covariance (scaled 2.38^2/d) and a global log-scale is tuned toward the
    optimal acceptance rate; both are frozen at the end of burn-in.
    """
    if not config.iterations > config.burn_in >= 0:
        raise ConfigError("need iterations > burn_in >= 0")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    target = ExactPosterior(model)
    d = target.dim
    if d > max_dim:
        raise ValueError(f"RWMH reference limited to {max_dim} parameters, model has {d}")
    t_start = time.perf_counter()
    theta = np.zeros(d)
    if model.n and np.allclose(model.X[:, 0], 1.0):
        theta[0] = np.log((model.y.mean() + 0.5) / model.t.mean())
    lp = target(theta)
    goal = 0.44 if d == 1 else 0.234
    base_cov = np.eye(d) * 0.01
    log_scale = 0.0
    mean = theta.copy()
    M2 = np.zeros((d, d))
    chol = np.linalg.cholesky(base_cov) * 2.38 / np.sqrt(d)
    frozen_chol = None
    names = model.parameter_names()
    draws = np.empty((config.n_kept, d))
    accepted = proposed = 0
    kept = 0
    for it in range(config.iterations):
        adapting = it < config.burn_in
        L = chol if adapting else frozen_chol
        prop = theta + np.exp(log_scale) * (L @ rng.standard_normal(d))
        lp_prop = target(prop)
        log_alpha = lp_prop - lp
        accept = np.isfinite(lp_prop) and (log_alpha >= 0 or np.log(rng.random()) < log_alpha)
        if accept:
            theta, lp = prop, lp_prop
        if adapting:
            k = it + 1
            delta = theta - mean
            mean = mean + delta / k
            M2 = M2 + np.outer(delta, theta - mean)
            log_scale += (float(accept) - goal) / np.sqrt(k)
            if k >= 100 and k % 50 == 0:
                emp = M2 / (k - 1) + 1e-10 * np.eye(d)
                try:
                    chol = np.linalg.cholesky(emp) * 2.38 / np.sqrt(d)
                except np.linalg.LinAlgError:
                    pass
            if it == config.burn_in - 1:
                frozen_chol = chol.copy()
        else:
            if frozen_chol is None:
                frozen_chol = chol.copy()
            proposed += 1
            accepted += int(accept)
            if (it - config.burn_in + 1) % config.thinning == 0:
                draws[kept] = target.to_natural(theta)
                kept += 1
    rate = accepted / proposed if proposed else float("nan")
    if not 0.05 <= rate <= 0.7:
        log.warning("RWMH acceptance %.3f outside [0.05, 0.7] after adaptation", rate)
    elapsed = time.perf_counter() - t_start
    out = ChainOutput(
        names=names, draws=draws, acceptance={"joint": (accepted, proposed)}, algorithm="RWMH",
        chosen_algorithm="RWMH", monitor=None, timings={"total": elapsed, "sampling": elapsed,
                                                         "sampling_iterations": config.iterations},
        config=config, obs_index=np.empty(0, dtype=np.int64), slot=np.empty(0, dtype=np.int64),
        nu=np.empty(0),
    )
    out.proposal_factor = frozen_chol * np.exp(log_scale)
    out.acceptance_warning = not 0.05 <= rate <= 0.7
    return out
