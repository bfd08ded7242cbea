"""The omitted-covariate toy experiment: y ~ Poisson(exp(0.1 + x1 + c*x2)), fitted without x2."""

from __future__ import annotations

import numpy as np

from .model import PoissonLGM


def simulate_toy(n: int, c: float, seed: int) -> dict[str, np.ndarray]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    y = rng.poisson(np.exp(0.1 + x1 + c * x2))
    return {"y": y.astype(np.int64), "x1": x1, "x2": x2}


def toy_model(data: dict, include_x2: bool = False, V0=None) -> PoissonLGM:
    cols = [np.ones_like(data["x1"]), data["x1"]]
    if include_x2:
        cols.append(data["x2"])
    return PoissonLGM(y=data["y"], X=np.column_stack(cols), V0=V0)
