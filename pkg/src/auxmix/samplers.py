"""Chain drivers: AMS, IAMS, MH-IAMS, RIAMS and the Automatic sampler.

All variants share one kernel. A sweep draws fresh auxiliary variables given
the current coefficients, samples mixture labels, then updates beta, each
gamma_q and each sigma2_q. The MH variants treat the label draw plus the
Gaussian full-conditional draw as a proposal that is reversible with respect
to the mixture-approximated posterior. The acceptance ratio is therefore
L(prop)/L(cur) * L_a(cur)/L_a(prop), with L the exact NLG augmented
likelihood and L_a its mixture approximation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import augmentation as aug
from .mixture import MixtureBank
from .model import (
    MixtureTable,
    PoissonLGM,
    Sigma2Updater,
    gaussian_full_conditional,
    sample_labels_and_density,
    sample_mvn,
)
from .nlg import nlg_log_density_unchecked

log = logging.getLogger(__name__)

ALGORITHMS = ("AMS", "IAMS", "MH_IAMS", "RIAMS", "AUTO")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    algorithm: str = "IAMS"
    iterations: int = 11_000
    burn_in: int = 1_000
    T1: int = 500
    T2: int = 250
    p_L: float = 0.05
    p_U: float = 0.05
    seed: int = 0
    thinning: int = 1
    store_residuals: bool = False
    residual_every: int = 1

    def validate(self) -> "SamplerConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not (self.iterations > self.burn_in >= 0):
            raise ConfigError("need iterations > burn_in >= 0")
        if self.thinning < 1 or self.residual_every < 1:
            raise ConfigError("thinning and residual_every must be >= 1")
        if not (0 <= self.p_L <= 1 and 0 <= self.p_U <= 1):
            raise ConfigError("p_L and p_U must lie in [0, 1]")
        if self.algorithm in ("RIAMS", "AUTO"):
            if self.T1 < 1 or self.T2 < 1:
                raise ConfigError("T1 and T2 must be >= 1 for RIAMS/AUTO")
            if self.burn_in < self.T1 + self.T2:
                raise ConfigError("burn_in must cover the T1 + T2 training iterations")
        return self

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning


@dataclass
class TailMonitor:
    """Per-residual tail-excursion proportions from the monitoring phase.

    A residual is identified by its (observation, slot) pair; ``flags`` marks
    the residuals that switch to the tail-adjusted mixture.
    """

    kappa_U: np.ndarray
    kappa_L: np.ndarray | None
    flags: np.ndarray
    chosen_algorithm: str
    obs_index: np.ndarray
    slot: np.ndarray
    T2: int

    def summary(self) -> dict:
        out = {
            "chosen_algorithm": self.chosen_algorithm,
            "T2": self.T2,
            "n_flagged": int(self.flags.sum()),
            "flagged": [[int(i) + 1, int(j)] for i, j in zip(self.obs_index[self.flags], self.slot[self.flags])],
            "max_kappa_U": float(self.kappa_U.max()) if self.kappa_U.size else 0.0,
        }
        if self.kappa_L is not None:
            out["max_kappa_L"] = float(self.kappa_L.max()) if self.kappa_L.size else 0.0
            out["n_lower_exceed"] = int(np.sum(self.kappa_L > 0))
        return out


def select_algorithm(kappa_L, kappa_U, p_L: float, p_U: float) -> str:
    """Escalation rule of the Automatic sampler (exceedance means strictly greater)."""
    if np.any(np.asarray(kappa_U) > p_U):
        return "RIAMS"
    if kappa_L is not None and np.any(np.asarray(kappa_L) > p_L):
        return "MH_IAMS"
    return "IAMS"


def tail_proportions(eps_stream, xi_L, xi_U):
    """kappa^L and kappa^U from a (T2 x rows) stream of monitored residuals."""
    eps_stream = np.atleast_2d(eps_stream)
    return np.mean(eps_stream < xi_L, axis=0), np.mean(eps_stream > xi_U, axis=0)


@dataclass
class LatentState:
    beta: np.ndarray
    gammas: list
    sigma2: np.ndarray
    ystar: np.ndarray | None = None
    labels: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, *self.gammas, self.sigma2])

    def copy(self) -> "LatentState":
        return LatentState(
            self.beta.copy(), [g.copy() for g in self.gammas], self.sigma2.copy(),
            None if self.ystar is None else self.ystar.copy(),
            None if self.labels is None else self.labels.copy(),
        )


@dataclass
class ChainOutput:
    names: list
    draws: np.ndarray
    acceptance: dict
    algorithm: str
    chosen_algorithm: str
    monitor: TailMonitor | None
    timings: dict
    config: SamplerConfig
    obs_index: np.ndarray
    slot: np.ndarray
    nu: np.ndarray
    residual_trace: np.ndarray | None = None
    ystar_trace: np.ndarray | None = None
    trace_draw_index: np.ndarray | None = None
    flags: np.ndarray | None = None
    bank: MixtureBank | None = field(default=None, repr=False)

    def acceptance_rate(self, block: str) -> float:
        acc, prop = self.acceptance.get(block, (0, 0))
        return acc / prop if prop else float("nan")

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


def mh_log_ratio(log_f_prop, log_f_cur, log_g_cur, log_g_prop) -> float:
    """log of L(prop)/L(cur) * L_a(cur)/L_a(prop) from per-row log densities."""
    return float(np.sum(log_f_prop - log_f_cur) + np.sum(log_g_cur - log_g_prop))


def mh_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    if not np.isfinite(log_ratio):
        log.warning("non-finite MH log ratio %r; rejecting", log_ratio)
        return False
    return log_ratio >= 0 or np.log(rng.random()) < log_ratio


def initial_beta(model: PoissonLGM, max_steps: int = 100) -> np.ndarray:
    """Mode of the exact posterior of beta with the random effects held at zero.

    Damped Newton from the log-mean intercept. Falls back to that starting
    point if the iteration does not settle.
    """
    X, y = model.X, model.y.astype(float)
    log_t = np.log(model.t)
    beta = np.zeros(model.p)
    if model.n and np.allclose(X[:, 0], 1.0):
        beta[0] = np.log((y.mean() + 0.5) / model.t.mean())
    start = beta.copy()

    def objective(b):
        eta = X @ b + log_t
        return float(y @ eta - np.exp(eta).sum() - 0.5 * b @ model.V0_inv @ b)

    current = objective(beta)
    for _ in range(max_steps):
        mu = np.exp(X @ beta + log_t)
        grad = X.T @ (y - mu) - model.V0_inv @ beta
        hess = (X.T * mu) @ X + model.V0_inv
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return start
        scale = 1.0
        while scale > 1e-6:
            cand = beta + scale * step
            value = objective(cand)
            if np.isfinite(value) and value >= current:
                break
            scale *= 0.5
        else:
            break
        beta, current = cand, value
        if np.max(np.abs(scale * step)) < 1e-10:
            return beta
    return beta if np.all(np.isfinite(beta)) else start


class ChainKernel:
    """Fixed per-chain machinery: expanded design, mixture tables, random stream."""

    def __init__(self, model: PoissonLGM, scheme: str, bank: MixtureBank, rng: np.random.Generator):
        self.model = model
        self.scheme = scheme
        self.bank = bank
        self.rng = rng
        self.layout = aug.build_layout(model.y, scheme)
        self.design = aug.flatten_augmented(model, self.layout)
        self.nu = self.layout.nu
        self.lgamma_nu = special.gammaln(self.nu)
        self.log_t = np.log(model.t)
        bank.prefetch(np.unique(self.nu))
        self.base_mixtures = [bank.base(v) for v in self.nu]
        self.base_table = MixtureTable(self.base_mixtures)
        self.table = self.base_table
        self.flags = np.zeros(self.layout.n_rows, dtype=bool)
        self.sigma2_updaters = [Sigma2Updater(b.prior, b.rank) for b in model.blocks]

    def set_flags(self, flags: np.ndarray) -> None:
        self.flags = np.asarray(flags, dtype=bool)
        if self.flags.any():
            mixtures = [self.bank.adjusted(v) if f else m for v, f, m in zip(self.nu, self.flags, self.base_mixtures)]
            self.table = MixtureTable(mixtures)
        else:
            self.table = self.base_table

    def thresholds(self):
        th = [self.bank.thresholds(v) for v in self.nu]
        return np.array([t.xi_L for t in th]), np.array([t.xi_U for t in th])

    def initial_state(self) -> LatentState:
        m = self.model
        return LatentState(initial_beta(m), [np.zeros(b.m) for b in m.blocks], np.ones(m.Q))

    def log_lambda(self, state: LatentState) -> np.ndarray:
        return self.model.linear_predictor(state.beta, state.gammas) + self.log_t

    def augment(self, state: LatentState) -> np.ndarray:
        """Step 1; returns the residuals eps = y* - log(t lambda) at the current coefficients."""
        log_lam = self.log_lambda(state)
        state.ystar = aug.augment(self.layout, log_lam, self.rng)
        return state.ystar - log_lam[self.layout.obs_index]

    def exact_logpdf(self, eps: np.ndarray) -> np.ndarray:
        return nlg_log_density_unchecked(eps, self.nu, self.lgamma_nu)

    def _labels(self, state, eps, table):
        labels, log_g = sample_labels_and_density(eps, table, self.rng)
        state.labels = labels
        rows = table.rows
        return table.mean[rows, labels], table.var[rows, labels], log_g

    def _propose(self, block, state, m_r, s2_r):
        mean, factor = gaussian_full_conditional(
            block, state.beta, state.gammas, state.sigma2, self.design, state.ystar, m_r, s2_r, self.model
        )
        return sample_mvn(mean, factor, self.rng)

    def _update_sigma2(self, state: LatentState) -> None:
        for q, (blk, upd) in enumerate(zip(self.model.blocks, self.sigma2_updaters)):
            state.sigma2[q] = upd.update(state.gammas[q], blk.K, state.sigma2[q], self.rng)

    def gibbs_sweep(self, state: LatentState) -> np.ndarray:
        """Steps 1-5 without rejection. Returns the residuals after Step 1 (used by the monitor)."""
        eps = self.augment(state)
        m_r, s2_r, _ = self._labels(state, eps, self.table)
        state.beta = self._propose("beta", state, m_r, s2_r)
        for q in range(self.model.Q):
            state.gammas[q] = self._propose(q, state, m_r, s2_r)
        self._update_sigma2(state)
        return eps

    def mh_block(self, block, state: LatentState, eps: np.ndarray):
        """Labels, full-conditional proposal under the active table, accept/reject.

        Returns (accepted, residuals at the retained value).
        """
        table = self.table
        m_r, s2_r, log_g_cur = self._labels(state, eps, table)
        prop = self._propose(block, state, m_r, s2_r)
        if block == "beta":
            delta = self.design.X @ (prop - state.beta)
        else:
            delta = self.design.Z[block] @ (prop - state.gammas[block])
        eps_prop = eps - delta
        log_ratio = mh_log_ratio(
            self.exact_logpdf(eps_prop), self.exact_logpdf(eps), log_g_cur, table.log_density(eps_prop)
        )
        if not mh_accept(log_ratio, self.rng):
            return False, eps
        if block == "beta":
            state.beta = prop
        else:
            state.gammas[block] = prop
        return True, eps_prop

    def mh_sweep(self, state: LatentState, counts: dict | None) -> np.ndarray:
        eps = self.augment(state)
        blocks = ["beta", *range(self.model.Q)]
        for block in blocks:
            accepted, eps = self.mh_block(block, state, eps)
            if counts is not None:
                key = "beta" if block == "beta" else f"gamma{block + 1}"
                a, p = counts[key]
                counts[key] = (a + int(accepted), p + 1)
        self._update_sigma2(state)
        return eps


def gibbs_sweep(kernel: ChainKernel, state: LatentState) -> LatentState:
    kernel.gibbs_sweep(state)
    return state


def mh_accept_block(kernel: ChainKernel, block, state: LatentState, eps: np.ndarray):
    return kernel.mh_block(block, state, eps)


def automatic_pretrain(kernel: ChainKernel, state: LatentState, config: SamplerConfig, track_lower: bool = True):
    """Warm-up (T1 IAMS sweeps) then T2 monitored IAMS sweeps.

    Residuals are checked after Step 1 of each monitored sweep against the
    tail cut-offs of their own NLG shape. Returns (chosen algorithm, monitor,
    warm state); the kernel's active table is switched to the adjusted mixture
    on the flagged residuals.
    """
    for _ in range(config.T1):
        kernel.gibbs_sweep(state)
    xi_L, xi_U = kernel.thresholds()
    upper = np.zeros(kernel.layout.n_rows)
    lower = np.zeros(kernel.layout.n_rows)
    for _ in range(config.T2):
        eps = kernel.gibbs_sweep(state)
        upper += eps > xi_U
        lower += eps < xi_L
    kappa_U = upper / config.T2
    kappa_L = lower / config.T2 if track_lower else None
    flags = kappa_U > config.p_U
    chosen = select_algorithm(kappa_L, kappa_U, config.p_L, config.p_U) if track_lower else "RIAMS"
    kernel.set_flags(flags)
    monitor = TailMonitor(kappa_U, kappa_L, flags, chosen, kernel.layout.obs_index, kernel.layout.slot, config.T2)
    return chosen, monitor, state


def run_chain(config: SamplerConfig, model: PoissonLGM, rng: np.random.Generator | None = None,
              bank: MixtureBank | None = None, init: LatentState | None = None) -> ChainOutput:
    config.validate()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    bank = MixtureBank() if bank is None else bank
    scheme = aug.AMS if config.algorithm == "AMS" else aug.IAMS
    t_start = time.perf_counter()
    kernel = ChainKernel(model, scheme, bank, rng)
    state = kernel.initial_state() if init is None else init.copy()
    timings = {"setup": time.perf_counter() - t_start}

    algorithm = config.algorithm
    monitor = None
    b = 0
    if algorithm in ("RIAMS", "AUTO"):
        t0 = time.perf_counter()
        chosen, monitor, state = automatic_pretrain(kernel, state, config, track_lower=algorithm == "AUTO")
        timings["pretrain"] = time.perf_counter() - t0
        b = config.T1 + config.T2
    else:
        chosen = algorithm

    use_mh = chosen in ("MH_IAMS", "RIAMS")
    blocks = ["beta"] + [f"gamma{q}" for q in range(1, model.Q + 1)]
    counts = {k: (0, 0) for k in blocks} if use_mh else {}
    names = model.parameter_names()
    draws = np.empty((config.n_kept, len(names)))
    n_trace = -(-config.n_kept // config.residual_every) if config.store_residuals else 0
    res_trace = np.empty((n_trace, kernel.layout.n_rows)) if n_trace else None
    ys_trace = np.empty_like(res_trace) if n_trace else None
    trace_idx = np.empty(n_trace, dtype=np.int64) if n_trace else None

    kept = 0
    traced = 0
    t0 = time.perf_counter()
    for it in range(b, config.iterations):
        in_sampling = it >= config.burn_in
        if it == config.burn_in:
            for upd in kernel.sigma2_updaters:
                upd.adapting = False
        if use_mh:
            kernel.mh_sweep(state, counts if in_sampling else None)
        else:
            kernel.gibbs_sweep(state)
        if in_sampling and (it - config.burn_in + 1) % config.thinning == 0:
            draws[kept] = state.vector()
            if res_trace is not None and kept % config.residual_every == 0:
                log_lam = kernel.log_lambda(state)
                res_trace[traced] = state.ystar - log_lam[kernel.layout.obs_index]
                ys_trace[traced] = state.ystar
                trace_idx[traced] = kept
                traced += 1
            kept += 1
    timings["sampling"] = time.perf_counter() - t0
    timings["sampling_iterations"] = config.iterations - b
    timings["total"] = time.perf_counter() - t_start

    for q, upd in enumerate(kernel.sigma2_updaters, start=1):
        if upd.prior.kind == "gamma":
            counts[f"sigma2_{q}"] = (upd.accepted, upd.proposed)
    return ChainOutput(
        names=names, draws=draws, acceptance=counts, algorithm=algorithm, chosen_algorithm=chosen,
        monitor=monitor, timings=timings, config=config,
        obs_index=kernel.layout.obs_index, slot=kernel.layout.slot, nu=kernel.nu,
        residual_trace=res_trace, ystar_trace=ys_trace, trace_draw_index=trace_idx,
        flags=kernel.flags.copy(), bank=bank,
    )
