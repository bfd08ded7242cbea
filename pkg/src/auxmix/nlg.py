"""Negative Log-Gamma distribution.

If ``G ~ Gamma(nu, 1)`` then ``U = -log G`` follows NLG(nu, 1), with density

    f(u) = exp(-nu * u - exp(-u)) / Gamma(nu).

This is the exact law of the residuals of the augmented Poisson model. All
functions broadcast over ``u``/``p``; ``nu`` may be a scalar or an array
broadcastable against the first argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


class DomainError(ValueError):
    """Argument outside the domain of an NLG function."""


@dataclass(frozen=True, order=True)
class NLGShape:
    nu: float

    def __post_init__(self):
        nu = float(self.nu)
        if not np.isfinite(nu) or nu <= 0:
            raise DomainError(f"NLG shape must be positive and finite, got {self.nu!r}")
        object.__setattr__(self, "nu", nu)

    @property
    def mode(self) -> float:
        return -float(np.log(self.nu))


def _nu(shape) -> np.ndarray:
    nu = np.asarray(shape.nu if isinstance(shape, NLGShape) else shape, dtype=float)
    if np.any(~np.isfinite(nu)) or np.any(nu <= 0):
        raise DomainError("NLG shape must be positive and finite")
    return nu


def nlg_log_density(u, shape):
    u_arr = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(u_arr)):
        raise DomainError("NLG log-density requires finite arguments")
    nu = _nu(shape)
    out = -u_arr * nu - np.exp(-u_arr) - special.gammaln(nu)
    return out if out.ndim else float(out)


def nlg_log_density_unchecked(u: np.ndarray, nu: np.ndarray, lgamma_nu: np.ndarray) -> np.ndarray:
    """Hot-path variant for the samplers: no validation, precomputed logGamma(nu).

    Overflow of ``exp(-u)`` for very negative residuals yields ``-inf``, which
    is the correct limit.
    """
    with np.errstate(over="ignore"):
        return -u * nu - np.exp(-u) - lgamma_nu


def nlg_moments(shape) -> tuple[float, float]:
    """Mean ``-digamma(nu)`` and variance ``trigamma(nu)``."""
    nu = _nu(shape)
    mean = -special.digamma(nu)
    var = special.polygamma(1, nu)
    if mean.ndim:
        return mean, var
    return float(mean), float(var)


def nlg_cdf(u, shape):
    """P(U <= u) = Q(nu, exp(-u)), the upper regularized incomplete gamma."""
    nu = _nu(shape)
    with np.errstate(over="ignore"):
        out = special.gammaincc(nu, np.exp(-np.asarray(u, dtype=float)))
    return out if np.ndim(out) else float(out)


def nlg_sf(u, shape):
    nu = _nu(shape)
    u = np.asarray(u, dtype=float)
    with np.errstate(over="ignore", under="ignore"):
        out = special.gammainc(nu, np.exp(-u))
        # far right tail: P(nu, x) ~ x**nu / Gamma(nu + 1) once exp(-u) is tiny
        far = np.broadcast_to(u > 600.0, np.broadcast(u, nu).shape)
        if np.any(far):
            out = np.where(far, np.exp(-nu * u - special.gammaln(nu + 1.0)), out)
    return out if np.ndim(out) else float(out)


def _check_prob(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise DomainError("probability must lie strictly inside (0, 1)")
    return p


def nlg_quantile(p, shape):
    """Inverse of :func:`nlg_cdf`; monotone increasing in ``p``.

    For upper-tail probabilities too close to 1 to be represented (e.g.
    ``1 - 1e-16``) use :func:`nlg_isf` with the tail mass instead.
    """
    p = _check_prob(p)
    nu = _nu(shape)
    out = -np.log(special.gammainccinv(nu, p))
    return out if out.ndim else float(out)


def nlg_isf(q, shape):
    """Upper quantile: the ``u`` with P(U > u) = q."""
    q = _check_prob(q)
    nu = _nu(shape)
    x = special.gammaincinv(nu, q)
    with np.errstate(divide="ignore"):
        out = -np.log(x)
    # gammaincinv underflows for tiny q and small nu; invert the leading term instead
    small = x < 1e-250
    if np.any(small):
        out = np.where(small, -(np.log(q) + special.gammaln(nu + 1.0)) / nu, out)
    return out if out.ndim else float(out)


def nlg_from_gamma(g):
    """Deterministic kernel of the sampler: maps Gamma(nu, 1) draws to NLG draws."""
    return -np.log(g)


def nlg_sample(shape, rng: np.random.Generator, size=None):
    nu = _nu(shape)
    return nlg_from_gamma(rng.standard_gamma(nu, size=size))
