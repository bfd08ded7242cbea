"""Approximation and chain diagnostics: the per-residual log-density gap, ESS, acceptance summaries."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from .model import MixtureTable
from .nlg import nlg_log_density_unchecked
from .samplers import ChainOutput

log = logging.getLogger(__name__)


class UsageError(ValueError):
    pass


@dataclass
class DiscrepancyReport:
    delta: np.ndarray
    obs_index: np.ndarray
    slot: np.ndarray
    nu: np.ndarray
    n_iterations: int
    nonfinite: int
    law: str

    def extremes(self, k: int = 5) -> np.ndarray:
        """Row indices of the ``k`` largest |delta|."""
        order = np.argsort(-np.abs(self.delta), kind="stable")
        return order[:k]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "obs", "slot", "nu", "delta"])
        for r, (i, j, v, d) in enumerate(zip(self.obs_index, self.slot, self.nu, self.delta)):
            w.writerow([r + 1, int(i) + 1, int(j), repr(float(v)), repr(float(d))])
        return buf.getvalue()


def _approx_table(chain: ChainOutput, law: str) -> MixtureTable:
    bank = chain.bank
    if bank is None:
        raise UsageError("chain output carries no mixture bank")
    if law == "mixture":
        return MixtureTable([bank.base(v) for v in chain.nu])
    if law == "adjusted":
        flags = chain.flags if chain.flags is not None else np.zeros(chain.nu.size, dtype=bool)
        return MixtureTable([bank.adjusted(v) if f else bank.base(v) for v, f in zip(chain.nu, flags)])
    raise UsageError(f"law must be 'mixture' or 'adjusted', got {law!r}")


def log_gap_matrix(residuals: np.ndarray, nu: np.ndarray, approx_logpdf) -> np.ndarray:
    """log g(eps) - log f(eps) for a (iterations x rows) residual matrix."""
    exact = nlg_log_density_unchecked(residuals, nu, special.gammaln(nu))
    return approx_logpdf(residuals) - exact


def delta_discrepancy(chain: ChainOutput, law: str = "mixture", approx_logpdf=None) -> DiscrepancyReport:
    """Average over stored iterations of log g(eps_ij) - log f(eps_ij), per auxiliary row.

    ``approx_logpdf`` overrides the approximate law with any callable mapping
    a residual matrix to log densities of the same shape.
    """
    trace = chain.residual_trace
    if trace is None:
        raise UsageError("residual traces were not stored; rerun with store_residuals=True")
    if approx_logpdf is None:
        table = _approx_table(chain, law)
        approx_logpdf = lambda eps: np.stack([table.log_density(row) for row in eps])  # noqa: E731
    gaps = log_gap_matrix(trace, chain.nu, approx_logpdf)
    finite = np.isfinite(gaps)
    nonfinite = int((~finite).sum())
    if nonfinite:
        log.warning("%d non-finite gap terms excluded", nonfinite)
    counts = finite.sum(axis=0)
    delta = np.where(finite, gaps, 0.0).sum(axis=0) / np.maximum(counts, 1)
    return DiscrepancyReport(delta, chain.obs_index, chain.slot, chain.nu, trace.shape[0], nonfinite, law)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(trace, return_flag: bool = False):
    """ESS by Geyer's initial monotone sequence estimator.

    Pairs of autocorrelations are summed until the first non-positive pair
    and forced to be non-increasing. Antithetic chains can exceed the trace
    length; the estimate is capped at ``N * log10(N)``. A constant trace
    returns N and sets the degeneracy flag.
    """
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError(f"effective_sample_size needs at least 10 draws, got {n}")
    if np.ptp(x) == 0 or not np.isfinite(np.var(x)) or np.var(x) == 0:
        return (float(n), True) if return_flag else float(n)
    rho = autocorrelation(x)
    m_max = (n - 1) // 2
    pairs = rho[: 2 * m_max].reshape(m_max, 2).sum(axis=1)
    total = 0.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = -1.0 + 2.0 * total
    cap = n * np.log10(n)
    ess = cap if tau <= n / cap else n / tau
    return (float(ess), False) if return_flag else float(ess)


def ess_table(chain: ChainOutput) -> list[dict]:
    rows = []
    for k, name in enumerate(chain.names):
        col = chain.draws[:, k]
        ess, degenerate = effective_sample_size(col, return_flag=True) if col.size >= 10 else (float("nan"), True)
        sec = chain.timings.get("total", float("nan"))
        rows.append({"parameter": name, "ess": ess, "ess_per_sec": ess / sec if sec else float("nan"),
                     "degenerate": degenerate})
    return rows


def acceptance_summary(chain: ChainOutput) -> dict:
    return {k: (a / p if p else float("nan")) for k, (a, p) in chain.acceptance.items()}


def write_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def text_report(chain: ChainOutput, discrepancy: DiscrepancyReport | None = None) -> str:
    lines = [f"algorithm: {chain.algorithm} (chosen: {chain.chosen_algorithm})",
             f"kept draws: {chain.draws.shape[0]}"]
    for k, v in acceptance_summary(chain).items():
        lines.append(f"acceptance[{k}]: {v:.4f}")
    for row in ess_table(chain):
        lines.append(f"ess[{row['parameter']}]: {row['ess']:.1f}")
    if discrepancy is not None:
        lines.append(f"delta law: {discrepancy.law}, iterations: {discrepancy.n_iterations}")
        for r in discrepancy.extremes():
            lines.append(
                f"  row {r + 1} (obs {int(discrepancy.obs_index[r]) + 1}, slot {int(discrepancy.slot[r])}, "
                f"nu {discrepancy.nu[r]:g}): delta {discrepancy.delta[r]:+.4f}"
            )
    return "\n".join(lines) + "\n"
