"""Dataset CSV and run-config handling for the command-line front end."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .model import PoissonLGM, RandomEffectBlock, Sigma2Prior
from .samplers import ConfigError, SamplerConfig

SCHEMA_VERSION = 1


def write_dataset(path, columns: dict[str, np.ndarray]) -> None:
    """Headered UTF-8 CSV; floats written with repr so parsing back is bit-exact."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(n):
            w.writerow([_cell(columns[k][i]) for k in names])


def _cell(v) -> str:
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))


def read_dataset(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty data file")
    header, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in body]
        try:
            if all(_is_int(v) for v in vals):
                out[name] = np.array([int(v) for v in vals], dtype=np.int64)
            else:
                out[name] = np.array([float(v) for v in vals], dtype=float)
        except ValueError as exc:
            raise ConfigError(f"{path}: column {name!r} is not numeric") from exc
    return out


def _is_int(s: str) -> bool:
    s = s.strip()
    return s.lstrip("-").isdigit()


@dataclass
class RandomEffectSpec:
    name: str
    columns: list = field(default_factory=list)
    group: str | None = None
    precision: str = "identity"
    prior: dict = field(default_factory=lambda: {"kind": "invgamma", "a": 1.0, "b": 0.001})


@dataclass
class RunConfig:
    data: str
    response: str = "y"
    offset: str | None = None
    fixed_effects: list = field(default_factory=list)
    intercept: bool = True
    prior_variance: float = 1000.0
    random_effects: list = field(default_factory=list)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    output: str = "auxmix-out"
    chains: int = 1
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["schema_version"] = SCHEMA_VERSION
        return d

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=str(path.parent), overrides=overrides)


def config_from_dict(raw: dict, base_dir: str = ".", overrides: dict | None = None) -> RunConfig:
    raw = dict(raw)
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    model = dict(raw.get("model", {}))
    sampler = dict(raw.get("sampler", {}))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in ("algorithm", "iterations", "burn_in", "seed", "thinning", "T1", "T2", "p_L", "p_U", "store_residuals"):
        if key in overrides:
            sampler[key] = overrides.pop(key)
    known = {f.name for f in dataclasses.fields(SamplerConfig)}
    unknown = set(sampler) - known
    if unknown:
        raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
    try:
        sc = SamplerConfig(**sampler).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    res = []
    for i, spec in enumerate(model.get("random_effects", []) or []):
        spec = dict(spec)
        spec.setdefault("name", f"re{i + 1}")
        res.append(RandomEffectSpec(**spec))
    data = overrides.pop("data", raw.get("data"))
    if not data:
        raise ConfigError("config needs a data path")
    cfg = RunConfig(
        data=str(data),
        response=model.get("response", "y"),
        offset=model.get("offset"),
        fixed_effects=list(model.get("fixed_effects", [])),
        intercept=bool(model.get("intercept", True)),
        prior_variance=float(model.get("prior_variance", 1000.0)),
        random_effects=res,
        sampler=sc,
        output=str(overrides.pop("output", raw.get("output", "auxmix-out"))),
        chains=int(overrides.pop("chains", raw.get("chains", 1))),
        base_dir=base_dir,
    )
    if cfg.chains < 1:
        raise ConfigError("chains must be >= 1")
    return cfg


def _read_matrix(path: Path) -> np.ndarray:
    try:
        K = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot parse precision matrix {path}: {exc}") from exc
    return K


def build_model(cfg: RunConfig, data: dict | None = None) -> PoissonLGM:
    data = read_dataset(cfg.resolve(cfg.data)) if data is None else data
    need = [cfg.response, *cfg.fixed_effects] + ([cfg.offset] if cfg.offset else [])
    missing = [c for c in need if c not in data]
    if missing:
        raise ConfigError(f"columns missing from data: {missing}")
    y = data[cfg.response]
    n = y.size
    cols = ([np.ones(n)] if cfg.intercept else []) + [np.asarray(data[c], dtype=float) for c in cfg.fixed_effects]
    if not cols:
        raise ConfigError("model needs at least one fixed effect or the intercept")
    X = np.column_stack(cols)
    t = np.asarray(data[cfg.offset], dtype=float) if cfg.offset else None
    blocks = []
    for spec in cfg.random_effects:
        if spec.group:
            if spec.group not in data:
                raise ConfigError(f"group column {spec.group!r} missing")
            levels, codes = np.unique(data[spec.group], return_inverse=True)
            Z = np.zeros((n, levels.size))
            Z[np.arange(n), codes] = 1.0
        else:
            missing = [c for c in spec.columns if c not in data]
            if missing or not spec.columns:
                raise ConfigError(f"random effect {spec.name!r}: bad columns {missing or spec.columns}")
            Z = np.column_stack([np.asarray(data[c], dtype=float) for c in spec.columns])
        if spec.precision == "identity":
            K = np.eye(Z.shape[1])
        else:
            K = _read_matrix(cfg.resolve(spec.precision))
        try:
            blocks.append(RandomEffectBlock(Z=Z, K=K, prior=Sigma2Prior(**spec.prior), name=spec.name))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"random effect {spec.name!r}: {exc}") from exc
    try:
        return PoissonLGM(y=y, X=X, t=t, blocks=tuple(blocks), V0=cfg.prior_variance * np.eye(X.shape[1]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
