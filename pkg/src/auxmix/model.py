"""Poisson latent Gaussian model: likelihoods, label sampling and Gaussian full conditionals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .mixture import LOG_2PI, GaussianMixture
from .nlg import nlg_log_density_unchecked

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-8)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Sigma2Prior:
    """Prior for a random-effect scale: ``invgamma`` (shape a, scale b) or ``gamma`` (shape a, rate b)."""

    kind: str = "invgamma"
    a: float = 1.0
    b: float = 0.001

    def __post_init__(self):
        if self.kind not in ("invgamma", "gamma"):
            raise ValueError(f"unknown sigma2 prior {self.kind!r}")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("prior hyperparameters must be positive")

    def log_density(self, sigma2: float) -> float:
        if self.kind == "invgamma":
            return -(self.a + 1) * np.log(sigma2) - self.b / sigma2
        return (self.a - 1) * np.log(sigma2) - self.b * sigma2


@dataclass(frozen=True, eq=False)
class RandomEffectBlock:
    """gamma_q | sigma2_q ~ N(0, sigma2_q * K_q^-), with K_q the prior precision structure."""

    Z: np.ndarray
    K: np.ndarray
    prior: Sigma2Prior = field(default_factory=Sigma2Prior)
    rank: int | None = None
    name: str = ""

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if K.shape != (Z.shape[1], Z.shape[1]):
            raise ValueError("precision K_q must be m_q x m_q with m_q = columns of Z_q")
        if not np.allclose(K, K.T, atol=1e-10):
            raise ValueError("precision K_q must be symmetric")
        eig = np.linalg.eigvalsh(K)
        if eig.min() < -1e-8 * max(1.0, eig.max()):
            raise ValueError("precision K_q must be non-negative definite")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "K", K)
        if self.rank is None:
            object.__setattr__(self, "rank", int(np.sum(eig > 1e-9 * max(1.0, eig.max()))))

    @property
    def m(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True, eq=False)
class PoissonLGM:
    y: np.ndarray
    X: np.ndarray
    t: np.ndarray | None = None
    blocks: tuple = ()
    V0: np.ndarray | None = None
    names: tuple | None = None

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or np.any(y < 0) or not np.all(np.mod(y, 1) == 0):
            raise ValueError("y must be a vector of non-negative integer counts")
        y = y.astype(np.int64)
        n = y.size
        X = np.asarray(self.X, dtype=float).reshape(n, -1) if n else np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != n:
            raise ValueError("X must be n x (P+1)")
        t = np.ones(n) if self.t is None else np.asarray(self.t, dtype=float)
        if t.shape != (n,) or np.any(~(t > 0)):
            raise ValueError("offsets must be positive, one per observation")
        blocks = tuple(self.blocks)
        for b in blocks:
            if b.Z.shape[0] != n:
                raise ValueError("random-effect design rows must equal n")
        p = X.shape[1]
        V0 = 1000.0 * np.eye(p) if self.V0 is None else np.atleast_2d(np.asarray(self.V0, dtype=float))
        if V0.shape != (p, p) or not np.allclose(V0, V0.T):
            raise ValueError("V0 must be a symmetric (P+1) x (P+1) matrix")
        try:
            np.linalg.cholesky(V0)
        except np.linalg.LinAlgError:
            raise ValueError("V0 must be positive definite") from None
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "V0", V0)
        object.__setattr__(self, "V0_inv", np.linalg.inv(V0))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def Q(self) -> int:
        return len(self.blocks)

    def parameter_names(self) -> list[str]:
        names = [f"beta{k}" for k in range(self.p)]
        for q, b in enumerate(self.blocks, start=1):
            names += [f"gamma{q}_{j}" for j in range(1, b.m + 1)]
        names += [f"sigma2_{q}" for q in range(1, self.Q + 1)]
        return names

    def linear_predictor(self, beta, gammas=()) -> np.ndarray:
        eta = self.X @ beta
        for b, g in zip(self.blocks, gammas):
            eta = eta + b.Z @ g
        return eta


def exact_poisson_loglik(beta, gammas, model: PoissonLGM) -> float:
    """sum_i y_i (eta_i + log t_i) - t_i exp(eta_i) - log y_i!, constants included.

    Returns -inf (with a logged warning) when exp(eta) overflows.
    """
    eta = model.linear_predictor(np.asarray(beta, dtype=float), gammas)
    with np.errstate(over="ignore"):
        mu = model.t * np.exp(eta)
    if not np.all(np.isfinite(mu)):
        log.warning("exp(eta) overflow in Poisson likelihood")
        return -np.inf
    return float(np.sum(model.y * (eta + np.log(model.t)) - mu - special.gammaln(model.y + 1.0)))


class MixtureTable:
    """Per-row Gaussian mixtures packed into padded (rows x Kmax) arrays.

    Padding components get log-weight -inf. Rows that share a mixture share
    its parameters; the table is rebuilt only when the row-to-mixture map
    changes (once, after RIAMS monitoring).
    """

    def __init__(self, mixtures: list[GaussianMixture]):
        self.mixtures = list(mixtures)
        uniq: dict[int, int] = {}
        keys = []
        distinct = []
        for mix in self.mixtures:
            k = id(mix)
            if k not in uniq:
                uniq[k] = len(distinct)
                distinct.append(mix)
            keys.append(uniq[k])
        kmax = max((m.K for m in distinct), default=1)
        nd = len(distinct)
        logc = np.full((nd, kmax), -np.inf)
        mean = np.zeros((nd, kmax))
        var = np.ones((nd, kmax))
        for i, mix in enumerate(distinct):
            with np.errstate(divide="ignore"):
                logc[i, : mix.K] = np.log(mix.weights) - 0.5 * (LOG_2PI + np.log(mix.variances))
            mean[i, : mix.K] = mix.means
            var[i, : mix.K] = mix.variances
        idx = np.asarray(keys, dtype=np.int64)
        self.logc = logc[idx]
        self.mean = mean[idx]
        self.var = var[idx]
        self.half_prec = 0.5 / self.var
        self.rows = np.arange(len(keys))
        self.kmax = kmax

    def terms(self, eps: np.ndarray) -> np.ndarray:
        d = eps[:, None] - self.mean
        return self.logc - d * d * self.half_prec

    def log_density(self, eps: np.ndarray) -> np.ndarray:
        t = self.terms(eps)
        top = t.max(axis=1)
        return top + np.log(np.exp(t - top[:, None]).sum(axis=1))


def _underflow_fallback(terms, eps, table):
    bad = np.nonzero(~np.isfinite(terms.max(axis=1)))[0]
    if bad.size == 0:
        return terms
    terms = terms.copy()
    for row in bad:
        valid = np.isfinite(table.logc[row])
        k = int(np.argmin(np.where(valid, np.abs(table.mean[row] - eps[row]), np.inf)))
        log.warning("row %d: all component densities underflowed; using nearest mean (component %d)", row, k)
        terms[row] = -np.inf
        terms[row, k] = 0.0
    return terms


def sample_labels_and_density(eps, table: MixtureTable, rng: np.random.Generator):
    """Draw labels with P[r=k] proportional to w_k phi(eps; m_k, s2_k), row by row.

    Also returns each row's mixture log-density log g(eps), which the MH
    variants reuse for the current state.
    """
    terms = table.terms(eps)
    top = terms.max(axis=1)
    if not np.all(np.isfinite(top)):
        terms = _underflow_fallback(terms, eps, table)
        top = terms.max(axis=1)
    cum = np.cumsum(np.exp(terms - top[:, None]), axis=1)
    total = cum[:, -1]
    u = rng.random(terms.shape[0]) * total
    labels = (cum < u[:, None]).sum(axis=1)
    np.minimum(labels, terms.shape[1] - 1, out=labels)
    return labels, top + np.log(total)


def sample_labels(residuals, table: MixtureTable, rng: np.random.Generator) -> np.ndarray:
    return sample_labels_and_density(np.asarray(residuals, dtype=float), table, rng)[0]


def _cholesky_with_jitter(prec: np.ndarray) -> np.ndarray:
    scale = np.mean(np.abs(np.diag(prec))) if prec.size else 1.0
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(prec + jitter * scale * np.eye(prec.shape[0]))
        except np.linalg.LinAlgError:
            continue
    cond = np.linalg.cond(prec)
    raise NumericalError(f"full-conditional precision not positive definite (condition number {cond:.3g})")


def gaussian_posterior(design: np.ndarray, target: np.ndarray, s2: np.ndarray, prior_prec: np.ndarray):
    """N(mean, cov) for coefficients c in target = design @ c + N(0, diag(s2)), prior N(0, prior_prec^-1).

    Returns the mean and a lower-triangular factor of the covariance.
    """
    w = design / s2[:, None] if design.shape[0] else design
    prec = prior_prec + design.T @ w if design.shape[0] else prior_prec.copy()
    L = _cholesky_with_jitter(prec)
    rhs = w.T @ target if design.shape[0] else np.zeros(prec.shape[0])
    # cov = L^-T L^-1; a lower factor is the flipped Cholesky of the reversed precision
    Linv = np.linalg.inv(L)
    cov = Linv.T @ Linv
    mean = cov @ rhs
    factor = np.linalg.cholesky(cov) if cov.shape[0] > 1 else np.sqrt(cov)
    return mean, factor


def gaussian_full_conditional(block, beta, gammas, sigma2, design, ystar, m_r, s2_r, model: PoissonLGM):
    """Mean and covariance factor of beta (``block='beta'``) or gamma_q (``block=q``).

    ``m_r`` and ``s2_r`` are the label-selected component means and
    variances for every auxiliary row.
    """
    resid = ystar - design.offset - m_r
    if block == "beta":
        for Zq, g in zip(design.Z, gammas):
            resid = resid - Zq @ g
        return gaussian_posterior(design.X, resid, s2_r, model.V0_inv)
    q = int(block)
    resid = resid - design.X @ beta
    for j, (Zj, g) in enumerate(zip(design.Z, gammas)):
        if j != q:
            resid = resid - Zj @ g
    blk = model.blocks[q]
    return gaussian_posterior(design.Z[q], resid, s2_r, blk.K / sigma2[q])


def sample_mvn(mean, factor, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    return mean + np.asarray(factor) @ rng.standard_normal(mean.shape[0])


@dataclass
class Sigma2Updater:
    """Step 5 for one block: conjugate inverse-gamma draw, or log-scale random-walk MH for a gamma prior.

    The MH step size adapts toward 0.44 acceptance while ``adapting`` is set.
    """

    prior: Sigma2Prior
    rank: int
    log_step: float = 0.0
    adapting: bool = True
    accepted: int = 0
    proposed: int = 0
    _n: int = 0

    def log_conditional(self, log_s2: float, quad: float) -> float:
        s2 = np.exp(log_s2)
        # prior density of sigma2 times the Gaussian prior of gamma, plus the log Jacobian
        return self.prior.log_density(s2) - 0.5 * self.rank * log_s2 - 0.5 * quad / s2 + log_s2

    def update(self, gamma, K, sigma2: float, rng: np.random.Generator) -> float:
        quad = float(gamma @ K @ gamma)
        if quad < -1e-10 * max(1.0, float(np.abs(K).max())):
            raise NumericalError(f"negative quadratic form gamma'K gamma = {quad}")
        quad = max(quad, 0.0)
        if self.prior.kind == "invgamma":
            shape = self.prior.a + 0.5 * self.rank
            scale = self.prior.b + 0.5 * quad
            return scale / rng.standard_gamma(shape)
        cur = np.log(sigma2)
        prop = cur + np.exp(self.log_step) * rng.standard_normal()
        log_alpha = self.log_conditional(prop, quad) - self.log_conditional(cur, quad)
        accept = np.log(rng.random()) < log_alpha
        self.proposed += 1
        self.accepted += int(accept)
        if self.adapting:
            self._n += 1
            self.log_step += (float(accept) - 0.44) / np.sqrt(self._n)
        return float(np.exp(prop)) if accept else float(sigma2)


def augmented_loglik(beta, gammas, design, ystar, law, table: MixtureTable | None = None) -> float:
    """Sum over auxiliary rows of log f(eps) (``law='exact'``) or log g(eps) (mixture laws).

    ``table`` supplies the per-row mixtures; for the adjusted law it is the
    table where flagged rows carry the adjusted mixture.
    """
    if design.n_rows == 0:
        return 0.0
    eps = residuals(beta, gammas, design, ystar)
    if law == "exact":
        nu = design.nu
        return float(np.sum(nlg_log_density_unchecked(eps, nu, special.gammaln(nu))))
    if table is None:
        raise ValueError(f"law {law!r} requires a mixture table")
    return float(np.sum(table.log_density(eps)))


def residuals(beta, gammas, design, ystar) -> np.ndarray:
    eps = ystar - design.offset - design.X @ beta
    for Zq, g in zip(design.Z, gammas):
        eps = eps - Zq @ g
    return eps
