import os

import numpy as np
import pytest

from auxmix.mixture import MixtureBank


@pytest.fixture(scope="session", autouse=True)
def mixture_cache(tmp_path_factory):
    """Every test shares one throwaway mixture cache; the user's cache is never touched."""
    path = tmp_path_factory.mktemp("mixture-cache")
    old = os.environ.get("AUXMIX_CACHE_DIR")
    os.environ["AUXMIX_CACHE_DIR"] = str(path)
    yield path
    if old is None:
        os.environ.pop("AUXMIX_CACHE_DIR", None)
    else:
        os.environ["AUXMIX_CACHE_DIR"] = old


@pytest.fixture(scope="session")
def bank(mixture_cache):
    return MixtureBank(cache_dir=mixture_cache)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
