"""Command-line front end: simulate, fit, compare, diagnose.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import __version__
from .diagnostics import (
    UsageError,
    acceptance_summary,
    delta_discrepancy,
    effective_sample_size,
    ess_table,
    text_report,
    write_csv,
)
from .io import SCHEMA_VERSION, RunConfig, build_model, load_config, read_dataset, write_dataset
from .mixture import MixtureBank, MixtureFitError, default_cache_dir
from .model import NumericalError, PoissonLGM
from .nlg import DomainError
from .oracle import OracleError, grid_posterior_1d, grid_posterior_2d, rwmh_reference
from .samplers import ConfigError, ChainOutput, SamplerConfig, run_chain
from .toy import simulate_toy

log = logging.getLogger("auxmix")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (NumericalError, OracleError, MixtureFitError, FloatingPointError, np.linalg.LinAlgError)
QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
KDE_POINTS = 256


class NumericalFailure(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial or []


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("AUXMIX_WORKERS", "1")))
    except ValueError:
        raise ConfigError("AUXMIX_WORKERS must be an integer")


def _bank(cache_dir) -> MixtureBank:
    return MixtureBank(cache_dir=Path(cache_dir) if cache_dir else default_cache_dir())


def _chain_job(args):
    sampler, model, seed_seq, cache_dir = args
    rng = np.random.default_rng(seed_seq)
    out = run_chain(sampler, model, rng=rng, bank=_bank(cache_dir))
    out.bank = None
    return out


def run_chains(cfg: RunConfig, model: PoissonLGM, workers: int = 1, cache_dir=None,
               sampler: SamplerConfig | None = None) -> list[ChainOutput]:
    """Run ``cfg.chains`` chains with independent streams spawned from the seed.

    Results are returned in chain order whatever the completion order, so the
    outputs depend only on the configuration and seed.
    """
    sampler = cfg.sampler if sampler is None else sampler
    children = np.random.SeedSequence(sampler.seed).spawn(cfg.chains)
    bank = _bank(cache_dir)
    bank.prefetch(_shapes(model))
    jobs = [(sampler, model, ss, cache_dir) for ss in children]
    if workers > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.chains)) as pool:
            futures = [pool.submit(_chain_job, j) for j in jobs]
            outs, errors = [], []
            for f in futures:
                try:
                    outs.append(f.result())
                except NUMERICAL_ERRORS as exc:
                    errors.append(exc)
            if errors:
                raise NumericalFailure(str(errors[0]), outs)
        for o in outs:
            o.bank = bank
        return outs
    outs = []
    for ss in children:
        try:
            outs.append(run_chain(sampler, model, rng=np.random.default_rng(ss), bank=bank))
        except NUMERICAL_ERRORS as exc:
            raise NumericalFailure(str(exc), outs) from exc
    return outs


def _shapes(model: PoissonLGM) -> list[float]:
    y = model.y[model.y > 0]
    return [1.0] + sorted({float(v) for v in y})


def _draws_csv(chain: ChainOutput) -> str:
    lines = [",".join(chain.names)]
    lines += [",".join(repr(float(v)) for v in row) for row in chain.draws]
    return "\n".join(lines) + "\n"


def _summary(chains: list[ChainOutput]) -> dict:
    draws = np.concatenate([c.draws for c in chains])
    params = {}
    for k, name in enumerate(chains[0].names):
        col = draws[:, k]
        ess = [effective_sample_size(c.draws[:, k]) if c.draws.shape[0] >= 10 else float("nan") for c in chains]
        params[name] = {
            "mean": float(col.mean()),
            "sd": float(col.std(ddof=1)) if col.size > 1 else float("nan"),
            "quantiles": {str(q): float(v) for q, v in zip(QUANTILES, np.quantile(col, QUANTILES))},
            "ess": float(np.sum(ess)),
        }
    per_chain = []
    for i, c in enumerate(chains, start=1):
        per_chain.append({
            "chain": i,
            "algorithm": c.algorithm,
            "chosen_algorithm": c.chosen_algorithm,
            "acceptance": acceptance_summary(c),
            "tail_flags": c.monitor.summary() if c.monitor is not None else None,
        })
    return {"parameters": params, "chains": per_chain}


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _manifest(cfg: RunConfig, command: str, outputs: list[str], timings, status="ok", **extra) -> dict:
    return {
        "auxmix_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": cfg.sampler.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "outputs": sorted(outputs),
        "timings": timings,
        "status": status,
        **extra,
    }


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    data = simulate_toy(args.n, args.c, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, data)
    if args.config_out:
        cfg = {
            "schema_version": SCHEMA_VERSION,
            "data": os.path.relpath(out.resolve(), Path(args.config_out).resolve().parent),
            "model": {"response": "y", "fixed_effects": ["x1"], "intercept": True},
            "sampler": {"algorithm": "AUTO", "iterations": 11000, "burn_in": 1000, "seed": args.seed},
            "output": "fit-out",
            "chains": 1,
        }
        _write(Path(args.config_out), yaml.safe_dump(cfg, sort_keys=False))
    print(f"wrote {out} ({args.n} rows)")
    return EXIT_OK


def _load(args) -> RunConfig:
    overrides = {
        "algorithm": getattr(args, "algorithm", None),
        "iterations": getattr(args, "iterations", None),
        "burn_in": getattr(args, "burn_in", None),
        "seed": getattr(args, "seed", None),
        "thinning": getattr(args, "thinning", None),
        "T1": getattr(args, "T1", None),
        "T2": getattr(args, "T2", None),
        "p_L": getattr(args, "p_L", None),
        "p_U": getattr(args, "p_U", None),
        "data": getattr(args, "data", None),
        "output": getattr(args, "output", None),
        "chains": getattr(args, "chains", None),
    }
    return load_config(args.config, overrides)


def cmd_fit(args) -> int:
    cfg = _load(args)
    model = build_model(cfg)
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    workers = args.workers or default_workers()
    try:
        chains = run_chains(cfg, model, workers=workers, cache_dir=args.cache_dir)
        failure = None
    except NumericalFailure as exc:
        chains, failure = exc.partial, str(exc)
    outputs = []
    for i, c in enumerate(chains, start=1):
        name = f"draws_chain{i}.csv"
        _write(outdir / name, _draws_csv(c))
        outputs.append(name)
    if chains:
        _write_json(outdir / "summary.json", _summary(chains))
        outputs.append("summary.json")
    timings = {"wall": time.perf_counter() - t0, "chains": [c.timings for c in chains]}
    chosen = [c.chosen_algorithm for c in chains]
    if failure is not None:
        _write_json(outdir / "failure.json", {"error": failure, "completed_chains": len(chains)})
        outputs.append("failure.json")
    _write_json(outdir / "manifest.json", _manifest(
        cfg, "fit", outputs + ["manifest.json"], timings, status="ok" if failure is None else "numerical_failure",
        chosen_algorithm=chosen[0] if len(set(chosen)) == 1 else chosen, workers=workers))
    if failure is not None:
        print(f"numerical failure: {failure}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"wrote {len(outputs) + 1} files to {outdir}")
    return EXIT_OK


def _oracle(model: PoissonLGM, kind: str, sampler: SamplerConfig, n_draws: int):
    """Returns ({parameter: GridPosterior}, None) or (None, RWMH draws ChainOutput)."""
    if kind == "auto":
        kind = "grid" if model.Q == 0 and model.p <= 2 else "rwmh"
    if kind == "grid":
        if model.Q or model.p > 2:
            raise ConfigError("grid oracle needs at most two fixed effects and no random effects")
        if model.p == 1:
            if not np.allclose(model.X[:, 0], 1.0):
                raise ConfigError("1-parameter grid oracle needs an intercept-only model")
            grids = (grid_posterior_1d(model, prior_var=float(model.V0[0, 0])),)
        else:
            grids = grid_posterior_2d(model)
        return dict(zip(model.parameter_names(), grids)), None
    burn = max(sampler.burn_in, 2000)
    rw_cfg = SamplerConfig(algorithm="IAMS", iterations=burn + n_draws * 5, burn_in=burn, thinning=5,
                           seed=sampler.seed)
    return None, rwmh_reference(model, rw_cfg, rng=np.random.default_rng([sampler.seed, 7]))


def _kde(sample: np.ndarray, grid: np.ndarray) -> np.ndarray:
    sd = sample.std(ddof=1)
    if not np.isfinite(sd) or sd == 0:
        return np.zeros_like(grid)
    return stats.gaussian_kde(sample, bw_method="silverman")(grid)


def cmd_compare(args) -> int:
    cfg = _load(args)
    model = build_model(cfg)
    algorithms = list(dict.fromkeys(args.algorithms))
    if "IAMS" not in algorithms:
        algorithms.insert(0, "IAMS")
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    workers = args.workers or default_workers()
    runs: dict[str, ChainOutput] = {}
    t0 = time.perf_counter()
    try:
        for alg in algorithms:
            sampler = replace(cfg.sampler, algorithm=alg).validate()
            runs[alg] = run_chains(replace(cfg, chains=1), model, workers=workers,
                                   cache_dir=args.cache_dir, sampler=sampler)[0]
        grids, ref = (None, None) if args.no_oracle else _oracle(model, args.oracle, cfg.sampler,
                                                                  cfg.sampler.n_kept)
    except NumericalFailure as exc:
        _write_json(outdir / "failure.json", {"error": str(exc)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NUMERICAL_ERRORS as exc:
        _write_json(outdir / "failure.json", {"error": str(exc)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    names = model.parameter_names()
    samples = {alg: {n: runs[alg].column(n) for n in names} for alg in algorithms}
    if ref is not None:
        samples["oracle"] = {n: ref.column(n) for n in names}

    dens_rows, ks_rows = [], []
    for n in names:
        pooled = np.concatenate([s[n] for s in samples.values()])
        lo, hi = np.quantile(pooled, [0.0005, 0.9995])
        pad = 0.1 * (hi - lo) if hi > lo else 1.0
        grid = np.linspace(lo - pad, hi + pad, KDE_POINTS)
        for src, s in samples.items():
            for x, d in zip(grid, _kde(s[n], grid)):
                dens_rows.append({"parameter": n, "source": src, "x": float(x), "density": float(d)})
        if grids is not None:
            g = grids[n]
            for x, d in zip(grid, np.interp(grid, g.grid, g.density, left=0.0, right=0.0)):
                dens_rows.append({"parameter": n, "source": "oracle", "x": float(x), "density": float(d)})
        for alg in algorithms:
            if grids is not None:
                ks = stats.kstest(samples[alg][n], grids[n].cdf).statistic
            elif ref is not None:
                ks = stats.ks_2samp(samples[alg][n], samples["oracle"][n]).statistic
            else:
                continue
            ks_rows.append({"algorithm": alg, "parameter": n, "ks": float(ks)})

    acc_rows = []
    for alg in algorithms:
        rates = acceptance_summary(runs[alg])
        row = {"algorithm": alg, "chosen_algorithm": runs[alg].chosen_algorithm}
        row.update({k: float(v) for k, v in rates.items()})
        acc_rows.append(row)
    blocks = sorted({k for r in acc_rows for k in r} - {"algorithm", "chosen_algorithm"})
    acc_rows = [{**{"algorithm": r["algorithm"], "chosen_algorithm": r["chosen_algorithm"]},
                 **{b: r.get(b, float("nan")) for b in blocks}} for r in acc_rows]

    per_it = {alg: runs[alg].timings["total"] / cfg.sampler.iterations for alg in algorithms}
    time_rows = [{"algorithm": alg, "seconds_per_iteration": per_it[alg],
                  "relative_to_IAMS": per_it[alg] / per_it["IAMS"]} for alg in algorithms]

    files = {"densities.csv": dens_rows, "acceptance.csv": acc_rows, "timing.csv": time_rows}
    if ks_rows:
        files["ks.csv"] = ks_rows
    for fname, rows in files.items():
        _write(outdir / fname, write_csv(rows))
    for alg in algorithms:
        _write(outdir / f"draws_{alg}.csv", _draws_csv(runs[alg]))
    outputs = list(files) + [f"draws_{a}.csv" for a in algorithms] + ["manifest.json"]
    _write_json(outdir / "manifest.json", _manifest(
        cfg, "compare", outputs, {"wall": time.perf_counter() - t0,
                                  "per_algorithm": {a: runs[a].timings for a in algorithms}},
        algorithms=algorithms, oracle="none" if args.no_oracle else ("grid" if grids is not None else "rwmh")))
    print(write_csv(time_rows), end="")
    if ks_rows:
        print(write_csv(ks_rows), end="")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.draws:
        data = read_dataset(args.draws)
        rows = []
        for name, col in data.items():
            ess, degenerate = effective_sample_size(np.asarray(col, float), return_flag=True)
            rows.append({"parameter": name, "ess": ess, "degenerate": degenerate})
        print(write_csv(rows), end="")
        return EXIT_OK
    if not args.config:
        raise ConfigError("diagnose needs --config or --draws")
    cfg = _load(args)
    cfg = replace(cfg, chains=1, sampler=replace(cfg.sampler, store_residuals=True).validate())
    model = build_model(cfg)
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        chain = run_chains(cfg, model, workers=1, cache_dir=args.cache_dir)[0]
        report = delta_discrepancy(chain, law=args.law)
    except NumericalFailure as exc:
        _write_json(outdir / "failure.json", {"error": str(exc)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UsageError as exc:
        raise ConfigError(str(exc)) from exc
    _write(outdir / "delta.csv", report.to_csv())
    _write(outdir / "ess.csv", write_csv(ess_table(chain)))
    _write(outdir / "draws_chain1.csv", _draws_csv(chain))
    text = text_report(chain, report)
    _write(outdir / "report.txt", text)
    _write_json(outdir / "manifest.json", _manifest(
        cfg, "diagnose", ["delta.csv", "ess.csv", "draws_chain1.csv", "report.txt", "manifest.json"],
        chain.timings, law=args.law, chosen_algorithm=chain.chosen_algorithm))
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--data", help="override the dataset path")
    p.add_argument("--output", help="output directory")
    p.add_argument("--chains", type=int)
    p.add_argument("--algorithm", choices=["AMS", "IAMS", "MH_IAMS", "RIAMS", "AUTO"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--T1", type=int)
    p.add_argument("--T2", type=int)
    p.add_argument("--p-L", dest="p_L", type=float)
    p.add_argument("--p-U", dest="p_U", type=float)
    p.add_argument("--workers", type=int, help="parallel chains (default: $AUXMIX_WORKERS or 1)")
    p.add_argument("--cache-dir", help="mixture cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxmix", description="Auxiliary mixture samplers for Poisson LGMs")
    parser.add_argument("--version", action="version", version=f"auxmix {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the omitted-covariate toy dataset")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--c", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--config-out", help="also write a config fitting y ~ x1")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run chains and write draws, summary and manifest")
    _sampler_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="run several algorithms against an oracle")
    _sampler_flags(p)
    p.add_argument("--algorithms", nargs="+", default=["IAMS", "MH_IAMS", "RIAMS", "AUTO"],
                   choices=["AMS", "IAMS", "MH_IAMS", "RIAMS", "AUTO"])
    p.add_argument("--oracle", choices=["auto", "grid", "rwmh"], default="auto")
    p.add_argument("--no-oracle", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="per-residual discrepancy and ESS report")
    _sampler_flags(p)
    p._option_string_actions["--config"].required = False
    p.add_argument("--law", choices=["mixture", "adjusted"], default="mixture")
    p.add_argument("--draws", help="only compute ESS for an existing draws CSV")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
