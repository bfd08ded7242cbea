"""Step-1 data augmentation: auxiliary variables y* for the AMS and IAMS schemes.

The ``*_det`` kernels take the raw random inputs as arguments so they can be
checked by hand; the vectorized kernels below them are what the samplers
call every sweep, and the random wrappers own the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AMS = "AMS"
IAMS = "IAMS"


class ContractViolation(ValueError):
    pass


def ams_augment_det(y: int, lam: float, uniforms, zeta: float) -> np.ndarray:
    """-log of the y+1 inter-arrival times on [0, 1] plus the overshoot.

    ``uniforms`` are the y sorted arrival times; the last interval runs from
    the final arrival past t=1 to the next jump, ``1 - u_(y) + zeta/lam``.
    """
    u = np.asarray(uniforms, dtype=float).ravel()
    if u.size != y:
        raise ContractViolation(f"expected {y} arrival times, got {u.size}")
    if zeta <= 0 or lam <= 0:
        raise ContractViolation("zeta and lambda must be positive")
    if y and (np.any(np.diff(u) <= 0) or u[0] <= 0 or u[-1] >= 1):
        raise ContractViolation("arrival times must be strictly increasing inside (0, 1)")
    last = u[-1] if y else 0.0
    tau = np.append(np.diff(np.concatenate([[0.0], u])), 1.0 - last + zeta / lam)
    return -np.log(tau)


def iams_augment_det(y: int, lam: float, beta_draw: float | None, zeta: float) -> tuple[float, float | None]:
    """Returns (y*_1, y*_2); y*_2 is None when y == 0.

    ``beta_draw`` is the arrival time of the y-th jump, a Beta(y, 1) variate.
    """
    if zeta <= 0 or lam <= 0:
        raise ContractViolation("zeta and lambda must be positive")
    if y == 0:
        return float(-np.log1p(zeta / lam)), None
    if beta_draw is None:
        raise ContractViolation("y > 0 requires the Beta(y, 1) draw")
    if not 0 < beta_draw < 1:
        raise ContractViolation("beta draw must lie in (0, 1)")
    tau1 = 1.0 - beta_draw + zeta / lam
    return float(-np.log(tau1)), float(-np.log(beta_draw))


def beta_y1_from_uniform(u, y):
    """Beta(y, 1) variate as u**(1/y); returned on the log scale, log(u)/y."""
    return np.log(u) / y


@dataclass(frozen=True, eq=False)
class AugmentedLayout:
    """Row structure of the expanded data: which observation and slot each auxiliary row is.

    The layout depends only on the counts and the scheme, so it is built once
    per chain; the y* values change every sweep.
    """

    scheme: str
    y: np.ndarray
    obs_index: np.ndarray
    slot: np.ndarray
    nu: np.ndarray
    # IAMS bookkeeping
    slot1_rows: np.ndarray = field(default=None)
    slot2_rows: np.ndarray = field(default=None)
    positive: np.ndarray = field(default=None)
    # AMS bookkeeping
    last_rows: np.ndarray = field(default=None)
    arrival_rows: np.ndarray = field(default=None)
    arrival_obs: np.ndarray = field(default=None)

    @property
    def n_rows(self) -> int:
        return self.obs_index.size


def build_layout(y, scheme: str) -> AugmentedLayout:
    y = np.asarray(y)
    if np.any(y < 0) or not np.all(np.equal(np.mod(y, 1), 0)):
        raise ContractViolation("counts must be non-negative integers")
    y = y.astype(np.int64)
    n = y.size
    if scheme == IAMS:
        per = np.where(y > 0, 2, 1)
        obs = np.repeat(np.arange(n), per)
        starts = np.concatenate([[0], np.cumsum(per)[:-1]])
        slot = np.arange(obs.size) - starts[obs] + 1
        nu = np.where(slot == 2, y[obs], 1).astype(float)
        positive = y > 0
        return AugmentedLayout(
            IAMS, y, obs, slot, nu,
            slot1_rows=starts, slot2_rows=starts[positive] + 1, positive=positive,
        )
    if scheme == AMS:
        per = y + 1
        obs = np.repeat(np.arange(n), per)
        starts = np.concatenate([[0], np.cumsum(per)[:-1]])
        slot = np.arange(obs.size) - starts[obs] + 1
        last = starts + y
        is_arrival = np.ones(obs.size, dtype=bool)
        is_arrival[last] = False
        arrival_rows = np.nonzero(is_arrival)[0]
        return AugmentedLayout(
            AMS, y, obs, slot, np.ones(obs.size),
            last_rows=last, arrival_rows=arrival_rows, arrival_obs=obs[arrival_rows],
        )
    raise ValueError(f"unknown augmentation scheme {scheme!r}")


def iams_augment_vec(layout: AugmentedLayout, log_lam: np.ndarray, log_u: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Vectorized IAMS kernel.

    ``log_u`` holds log-uniforms for the observations with y > 0 (in order),
    ``zeta`` one Exp(1) draw per observation. Works on the log scale so that
    1 - tau_2 keeps precision for large counts.
    """
    ystar = np.empty(layout.n_rows)
    ratio = zeta * np.exp(-log_lam)
    pos = layout.positive
    log_tau2 = log_u / layout.y[pos]
    one_minus = np.ones(layout.y.size)
    one_minus[pos] = -np.expm1(log_tau2)
    ystar[layout.slot1_rows] = -np.log(one_minus + ratio)
    ystar[layout.slot2_rows] = -log_tau2
    return ystar


def ams_augment_vec(layout: AugmentedLayout, log_lam: np.ndarray, sorted_u: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Vectorized AMS kernel; ``sorted_u`` are arrival times sorted within each observation."""
    n = layout.y.size
    ystar = np.empty(layout.n_rows)
    prev = np.empty_like(sorted_u)
    if sorted_u.size:
        prev[1:] = sorted_u[:-1]
        first = np.ones(sorted_u.size, dtype=bool)
        first[1:] = layout.arrival_obs[1:] != layout.arrival_obs[:-1]
        prev[first] = 0.0
    ystar[layout.arrival_rows] = -np.log(sorted_u - prev)
    last_u = np.zeros(n)
    if sorted_u.size:
        # last arrival per observation with y > 0
        ends = np.nonzero(np.append(layout.arrival_obs[1:] != layout.arrival_obs[:-1], True))[0]
        last_u[layout.arrival_obs[ends]] = sorted_u[ends]
    ystar[layout.last_rows] = -np.log(1.0 - last_u + zeta * np.exp(-log_lam))
    return ystar


def augment(layout: AugmentedLayout, log_lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw fresh auxiliary variables given log(t_i * lambda_i) for every observation."""
    zeta = rng.standard_exponential(layout.y.size)
    if layout.scheme == IAMS:
        log_u = np.log(rng.random(int(layout.positive.sum())))
        return iams_augment_vec(layout, log_lam, log_u, zeta)
    u = rng.random(layout.arrival_rows.size)
    order = np.lexsort((u, layout.arrival_obs))
    return ams_augment_vec(layout, log_lam, u[order], zeta)


@dataclass(frozen=True, eq=False)
class AugmentedDesign:
    """Row-expanded design: X*, Z*_q and per-row offsets log t_i."""

    layout: AugmentedLayout
    X: np.ndarray
    Z: tuple
    offset: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.layout.n_rows

    @property
    def nu(self) -> np.ndarray:
        return self.layout.nu


def flatten_augmented(model, layout: AugmentedLayout) -> AugmentedDesign:
    if layout.y.size != model.n or not np.array_equal(layout.y, model.y):
        raise ContractViolation("layout counts do not match the model")
    idx = layout.obs_index
    return AugmentedDesign(
        layout=layout,
        X=np.ascontiguousarray(model.X[idx]),
        Z=tuple(np.ascontiguousarray(b.Z[idx]) for b in model.blocks),
        offset=np.log(model.t)[idx],
    )
