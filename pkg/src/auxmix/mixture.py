"""Gaussian-mixture approximations of the NLG(nu, 1) density.

Mixtures are fitted from first principles by minimizing KL(f || g) on a
fixed quadrature grid. The module also locates the tail cut-offs where the
approximation breaks down (absolute log-density gap above 1) and builds the
tail-adjusted mixture used as an MH proposal for right-tail residuals.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special

from .nlg import NLGShape, nlg_isf, nlg_log_density, nlg_moments, nlg_quantile

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
GAP = 1.0
N_TAIL_COMPONENTS = 30
LARGE_NU = 1e4


class MixtureFitError(RuntimeError):
    """Raised when the optimizer fails; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    nu: float = 1.0
    adjusted: bool = False
    n_base: int | None = None
    central_error: float | None = None
    kl: float | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        m = np.array(self.means, dtype=float).ravel()
        v = np.array(self.variances, dtype=float).ravel()
        if not (w.size == m.size == v.size) or w.size == 0:
            raise ValueError("mixture needs K >= 1 components with matching lengths")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
        if np.any(~(v > 0)) or np.any(~np.isfinite(m)):
            raise ValueError("variances must be positive and means finite")
        for arr in (w, m, v):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "nu", float(self.nu))
        if self.n_base is None:
            object.__setattr__(self, "n_base", w.size)

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> NLGShape:
        return NLGShape(self.nu)

    @property
    def tail_weight(self) -> float:
        return float(self.weights[self.n_base:].sum())

    def log_component_terms(self, z) -> np.ndarray:
        """log w_k + log phi(z; m_k, s2_k), shape ``z.shape + (K,)``."""
        z = np.asarray(z, dtype=float)[..., None]
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw - 0.5 * (LOG_2PI + np.log(self.variances)) - 0.5 * (z - self.means) ** 2 / self.variances

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.variances, other.variances)
            and self.nu == other.nu
            and self.adjusted == other.adjusted
        )

    __hash__ = None


def mixture_log_density(mix: GaussianMixture, z):
    z_arr = np.asarray(z, dtype=float)
    if np.any(~np.isfinite(z_arr)):
        raise ValueError("mixture log-density requires finite arguments")
    out = special.logsumexp(mix.log_component_terms(z_arr), axis=-1)
    return out if np.ndim(out) else float(out)


def moment_matched(shape) -> GaussianMixture:
    nu = NLGShape(shape.nu if isinstance(shape, NLGShape) else shape).nu
    mean, var = nlg_moments(nu)
    return GaussianMixture([1.0], [mean], [var], nu=nu)


def default_components(nu: float) -> int:
    """Component-count schedule: the NLG density becomes Gaussian as nu grows."""
    if nu <= 10:
        return 10
    if nu <= 100:
        return 7
    if nu <= LARGE_NU:
        return 4
    return 1


@dataclass(frozen=True)
class FitConfig:
    grid_points: int = 2048
    tail_mass: float = 1e-6
    central: tuple[float, float] = (0.005, 0.995)
    n_starts: int = 4
    em_iterations: int = 150
    max_iterations: int = 600
    spike_penalty: float = 1e-3
    seed: int = 20240101

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def fit_grid(nu: float, config: FitConfig) -> tuple[np.ndarray, np.ndarray]:
    """Uniform grid over the central 1 - 2*tail_mass region and normalized weights."""
    lo = nlg_quantile(config.tail_mass, nu)
    hi = nlg_isf(config.tail_mass, nu)
    u = np.linspace(lo, hi, config.grid_points)
    logf = nlg_log_density(u, nu)
    w = np.exp(logf - logf.max())
    w[0] *= 0.5
    w[-1] *= 0.5
    return u, w / w.sum()


def _lse_rows(terms):
    top = terms.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(terms - top).sum(axis=1, keepdims=True)))[:, 0]


def _unpack(theta, K):
    a, m, v = theta[:K], theta[K:2 * K], theta[2 * K:]
    return a - special.logsumexp(a), m, v


def _objective(theta, u, wq, K, pen):
    logpi, m, v = _unpack(theta, K)
    s2 = np.exp(v)
    diff = u[:, None] - m
    terms = logpi - 0.5 * (LOG_2PI + v) - 0.5 * diff ** 2 / s2
    logg = _lse_rows(terms)
    resp = np.exp(terms - logg[:, None]) * wq[:, None]
    nk = resp.sum(axis=0)
    value = -wq @ logg + pen * np.exp(-v).sum()
    g_a = -(nk - np.exp(logpi))
    g_m = -(resp * diff).sum(axis=0) / s2
    g_v = -(resp * (-0.5 + 0.5 * diff ** 2 / s2)).sum(axis=0) - pen * np.exp(-v)
    return value, np.concatenate([g_a, g_m, g_v])


def _em(u, wq, logpi, m, s2, iterations, floor):
    for _ in range(iterations):
        terms = logpi - 0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (u[:, None] - m) ** 2 / s2
        logg = _lse_rows(terms)[:, None]
        resp = np.exp(terms - logg) * wq[:, None]
        nk = np.maximum(resp.sum(axis=0), 1e-300)
        m = (resp * u[:, None]).sum(axis=0) / nk
        s2 = np.maximum((resp * (u[:, None] - m) ** 2).sum(axis=0) / nk, floor)
        logpi = np.log(nk) - np.log(nk.sum())
    return logpi, m, s2


def _starts(nu, K, config):
    rng = np.random.default_rng(config.seed)
    _, var = nlg_moments(nu)
    probs = (np.arange(K) + 0.5) / K
    yield nlg_quantile(probs, nu), np.full(K, var / K)
    # Tail-leaning spread: more components towards both tails.
    stretched = special.expit(special.logit(probs) * 1.6)
    yield nlg_quantile(stretched, nu), np.full(K, var / K)
    for _ in range(max(config.n_starts - 2, 0)):
        p = np.sort(rng.uniform(0.01, 0.99, K))
        yield nlg_quantile(p, nu), np.full(K, var / K) * rng.uniform(0.3, 2.0, K)


def central_log_error(mix: GaussianMixture, u=None, central=(0.005, 0.995), points=4001) -> float:
    """Max |log f - log g| over the central region ``[q_lo, q_hi]``."""
    if u is None:
        u = np.linspace(nlg_quantile(central[0], mix.nu), nlg_quantile(central[1], mix.nu), points)
    return float(np.max(np.abs(nlg_log_density(u, mix.nu) - mixture_log_density(mix, u))))


def fit_mixture(shape, K: int | None = None, config: FitConfig | None = None) -> GaussianMixture:
    """Fit a K-component Gaussian mixture to NLG(nu, 1) by grid KL minimization.

    Deterministic: fixed grid, fixed start order, fixed seed. The returned
    mixture records its KL on the grid and its certified central error.
    """
    nu = NLGShape(shape.nu if isinstance(shape, NLGShape) else shape).nu
    config = config or FitConfig()
    K = default_components(nu) if K is None else int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    if nu > LARGE_NU and K == 1:
        mix = moment_matched(nu)
        return dataclasses.replace(mix, central_error=central_log_error(mix, central=config.central))

    u, wq = fit_grid(nu, config)
    h = u[1] - u[0]
    pen = config.spike_penalty * h ** 2
    floor = (2 * h) ** 2
    logf_grid = nlg_log_density(u, nu)
    entropy_term = wq @ logf_grid

    # Multi-start EM, then quasi-Newton polish of the best EM solution.
    theta0, value0 = None, np.inf
    for m0, s20 in _starts(nu, K, config):
        logpi, m, s2 = _em(u, wq, np.full(K, -np.log(K)), m0, s20, config.em_iterations, floor)
        theta = np.concatenate([logpi, m, np.log(s2)])
        value = _objective(theta, u, wq, K, pen)[0]
        if value < value0:
            theta0, value0 = theta, value
    best = optimize.minimize(
        _objective, theta0, args=(u, wq, K, pen), jac=True, method="L-BFGS-B",
        options={"maxiter": config.max_iterations, "ftol": 1e-14, "gtol": 1e-9},
    )

    logpi, m, v = _unpack(best.x, K)
    w = np.exp(logpi)
    w = w / w.sum()
    order = np.argsort(m, kind="stable")
    mix = GaussianMixture(w[order], m[order], np.exp(v[order]), nu=nu)
    kl = float(entropy_term - wq @ mixture_log_density(mix, u))
    lo, hi = (nlg_quantile(p, nu) for p in config.central)
    inner = u[(u >= lo) & (u <= hi)]
    err = float(np.max(np.abs(logf_grid[(u >= lo) & (u <= hi)] - mixture_log_density(mix, inner))))
    mix = dataclasses.replace(mix, central_error=err, kl=kl)
    if not np.isfinite(best.fun):
        raise MixtureFitError(f"mixture fit for nu={nu} did not converge", best=mix)
    return mix


@dataclass(frozen=True)
class TailThresholds:
    xi_L: float
    xi_U: float
    nu: float
    lower_open: bool = False
    upper_open: bool = False

    @property
    def shape(self) -> NLGShape:
        return NLGShape(self.nu)


def log_gap(mix: GaussianMixture, u) -> np.ndarray:
    return np.abs(nlg_log_density(u, mix.nu) - mixture_log_density(mix, u))


def _march(mix, start, stop, step):
    """Return the first crossing of the gap level on the segment, or None."""
    n = int(np.ceil(abs(stop - start) / step)) + 1
    u = np.linspace(start, stop, n)
    over = np.nonzero(log_gap(mix, u) > GAP)[0]
    if over.size == 0:
        return None
    k = over[0]
    a, b = u[k - 1], u[k]
    fa = log_gap(mix, a) - GAP
    for _ in range(200):
        c = 0.5 * (a + b)
        fc = log_gap(mix, c) - GAP
        if (fc > 0) == (fa > 0):
            a, fa = c, fc
        else:
            b = c
        if abs(b - a) < 1e-12:
            break
    return 0.5 * (a + b)


def compute_tail_thresholds(shape, mix: GaussianMixture, scan_tail: float = 1e-14, step: float = 1e-3) -> TailThresholds:
    """Locate the cut-offs either side of the mode where the log gap first exceeds 1.

    Marches outward from the mode on a grid of spacing ``step`` and refines the
    crossing by bisection. When no crossing exists inside the scan window the
    threshold is set to the window edge and flagged open.
    """
    nu = NLGShape(shape.nu if isinstance(shape, NLGShape) else shape).nu
    mode = -np.log(nu)
    lo = nlg_quantile(scan_tail, nu)
    hi = nlg_isf(scan_tail, nu)
    xi_u = _march(mix, mode, hi, step)
    xi_l = _march(mix, mode, lo, step)
    return TailThresholds(
        xi_L=lo if xi_l is None else float(xi_l),
        xi_U=hi if xi_u is None else float(xi_u),
        nu=nu,
        lower_open=xi_l is None,
        upper_open=xi_u is None,
    )


def tail_knots(nu: float, xi_u: float) -> np.ndarray:
    """Centres of the added components: xi_U then 29 equally spaced knots."""
    right = 2.5 * nlg_isf(1e-16, nu) + 1.5 * np.log(nu)
    return np.linspace(xi_u, right, N_TAIL_COMPONENTS)


def _golden(fn, a, b, tol=1e-8, max_iter=200):
    invphi = (np.sqrt(5) - 1) / 2
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return c if fc <= fd else d


def build_adjusted_mixture(shape, base: GaussianMixture, thresholds: TailThresholds) -> GaussianMixture:
    """Append 30 right-tail components to ``base`` (the tail-adjusted mixture).

    Each new component sits on a knot; its weight makes it reproduce the NLG
    density at its own knot and its variance minimizes the log gap at the next
    knot. Weights are renormalized after every addition.
    """
    nu = NLGShape(shape.nu if isinstance(shape, NLGShape) else shape).nu
    if thresholds.upper_open:
        return base
    knots = tail_knots(nu, thresholds.xi_U)
    spacing = knots[1] - knots[0]
    targets = np.append(knots[1:], knots[-1] + spacing)
    span = knots[-1] - knots[0]
    logf_knot = nlg_log_density(knots, nu)
    logf_target = nlg_log_density(targets, nu)

    w = base.weights.copy()
    m = base.means.copy()
    s2 = base.variances.copy()
    for c, logf_c, t, logf_t in zip(knots, logf_knot, targets, logf_target):
        def logg_at_target(log_var, c=c, logf_c=logf_c, t=t):
            var = np.exp(log_var)
            # Unnormalized weight so the component's own density at c equals f(c).
            wk = np.exp(logf_c + 0.5 * (LOG_2PI + log_var))
            terms = np.append(
                np.log(w) - 0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (t - m) ** 2 / s2,
                np.log(wk) - 0.5 * (LOG_2PI + log_var) - 0.5 * (t - c) ** 2 / var,
            )
            return special.logsumexp(terms) - np.log1p(wk), wk

        lv = _golden(lambda x: abs(logf_t - logg_at_target(x)[0]), np.log(1e-4), np.log(span ** 2))
        _, wk = logg_at_target(lv)
        w = np.append(w, wk) / (1.0 + wk)
        w = w / w.sum()
        m = np.append(m, c)
        s2 = np.append(s2, np.exp(lv))
    return GaussianMixture(w, m, s2, nu=nu, adjusted=True, n_base=base.K,
                           central_error=base.central_error, kl=base.kl)


CENTRAL_TOLERANCE = 0.05
CACHE_FORMAT = "auxmix-nlg-mixture"
CACHE_VERSION = 1


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dump_mixture(mix: GaussianMixture, thresholds: TailThresholds | None, config_hash: str) -> str:
    """Serialize a fitted mixture (and its thresholds) to the cache text format.

    JSON with every float written to 17 significant digits so reloading is
    bit-exact.
    """
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "fit_config_hash": config_hash,
        "nu": _fmt(mix.nu),
        "K": mix.K,
        "central_error": _fmt(mix.central_error if mix.central_error is not None else float("nan")),
        "kl": _fmt(mix.kl if mix.kl is not None else float("nan")),
    }
    lines = ["{"]
    for key, value in header.items():
        raw = value if key in ("nu", "central_error", "kl") else json.dumps(value)
        if key in ("central_error", "kl") and value == "nan":
            raw = "null"
        lines.append(f'  "{key}": {raw},')
    if thresholds is not None:
        lines.append(
            '  "thresholds": {"xi_L": %s, "xi_U": %s, "lower_open": %s, "upper_open": %s},'
            % (_fmt(thresholds.xi_L), _fmt(thresholds.xi_U),
               json.dumps(thresholds.lower_open), json.dumps(thresholds.upper_open))
        )
    comps = [f"    [{_fmt(w)}, {_fmt(m)}, {_fmt(v)}]" for w, m, v in zip(mix.weights, mix.means, mix.variances)]
    lines.append('  "components": [\n' + ",\n".join(comps) + "\n  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_mixture(text: str) -> tuple[GaussianMixture, TailThresholds | None, str]:
    data = json.loads(text)
    if data.get("format") != CACHE_FORMAT or data.get("version") != CACHE_VERSION:
        raise ValueError("not an auxmix mixture cache file")
    comps = np.array(data["components"], dtype=float)
    nu = float(data["nu"])
    w = comps[:, 0]
    mix = GaussianMixture(
        w / w.sum() if abs(w.sum() - 1) > 1e-12 else w, comps[:, 1], comps[:, 2], nu=nu,
        central_error=data.get("central_error"), kl=data.get("kl"),
    )
    th = data.get("thresholds")
    thresholds = None
    if th is not None:
        thresholds = TailThresholds(th["xi_L"], th["xi_U"], nu, th["lower_open"], th["upper_open"])
    return mix, thresholds, data["fit_config_hash"]


def default_cache_dir() -> Path:
    env = os.environ.get("AUXMIX_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "auxmix"


@dataclass
class MixtureBank:
    """Memoized per-shape mixtures, tail thresholds and adjusted mixtures.

    With ``cache_dir`` set, fitted mixtures and thresholds persist across
    processes, one file per (nu, K, fit config hash). Writes go through a
    temp file and ``os.replace`` under a file lock, so concurrent readers
    never see a partial file.
    """

    config: FitConfig = field(default_factory=FitConfig)
    cache_dir: Path | None = None
    _base: dict = field(default_factory=dict, repr=False)
    _thresholds: dict = field(default_factory=dict, repr=False)
    _adjusted: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _path(self, nu: float, K: int) -> Path:
        return Path(self.cache_dir) / f"nlg_nu{_fmt(nu)}_K{K}_{self.config.hash()}.json"

    def _fit(self, nu: float):
        K = default_components(nu)
        if K == 1:
            mix = fit_mixture(nu, 1, self.config)
            return mix, compute_tail_thresholds(nu, mix)
        path = self._path(nu, K) if self.cache_dir is not None else None
        if path is not None and path.exists():
            mix, th, _ = load_mixture(path.read_text())
            if th is not None:
                return mix, th
        mix = fit_mixture(nu, K, self.config)
        while mix.central_error > CENTRAL_TOLERANCE and mix.K < 20:
            log.warning("nu=%g: central error %.3g with K=%d, refitting", nu, mix.central_error, mix.K)
            mix = fit_mixture(nu, mix.K + 3, self.config)
        th = compute_tail_thresholds(nu, mix)
        if path is not None:
            self._store(path, mix, th)
        return mix, th

    def _store(self, path: Path, mix, th):
        from filelock import FileLock

        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            tmp.write_text(dump_mixture(mix, th, self.config.hash()))
            os.replace(tmp, path)

    def _ensure(self, nu: float):
        nu = float(nu)
        with self._lock:
            if nu not in self._base:
                self._base[nu], self._thresholds[nu] = self._fit(nu)
        return nu

    def base(self, nu: float) -> GaussianMixture:
        return self._base[self._ensure(nu)]

    def thresholds(self, nu: float) -> TailThresholds:
        return self._thresholds[self._ensure(nu)]

    def adjusted(self, nu: float) -> GaussianMixture:
        nu = self._ensure(nu)
        with self._lock:
            if nu not in self._adjusted:
                self._adjusted[nu] = build_adjusted_mixture(nu, self._base[nu], self._thresholds[nu])
        return self._adjusted[nu]

    def prefetch(self, shapes) -> None:
        for nu in sorted(set(float(s) for s in shapes)):
            self._ensure(nu)
