from typing import Dict, Sequence

import numpy as np
import pytest

from multires.models.linkage import Dataset, YearGrid
from multires.schemas.chain import ChainConfig
from multires.schemas.linkage import Observation
from multires.schemas.synth import SynthConfig
from multires.services.linkage import LinkageService, acs_period_table, build_graph, write_dataset
from multires.services.synth import generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run long sampler checks.")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running sampler checks, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(
    counties: Sequence[str],
    membership: Dict[str, Sequence[str]],
    observations: Sequence[Observation],
    T: int = 3,
    P: int = 2,
    first_year: int = 2010,
    periods=None,
    predictors: np.ndarray = None,
) -> Dataset:
    grid = YearGrid(years=tuple(range(first_year, first_year + T)))
    if predictors is None:
        predictors = np.ones((len(counties), P, T))
        for i in range(len(counties)):
            for p in range(1, P):
                predictors[i, p] = 1.0 + 0.5 * p + 0.25 * i + 0.1 * np.arange(T)
    return Dataset(
        grid=grid,
        periods=periods if periods is not None else acs_period_table(T),
        graph=build_graph(counties, membership, observations),
        observations=tuple(observations),
        predictors=predictors,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset() -> Dataset:
    """Three counties over 2010-2012; c1 publishes every period, c2 only the full one,
    c3 is seen only through the super-block S."""
    observations = [
        Observation(block="c1", period=1, y=4.0, sigma2=1.0),
        Observation(block="c1", period=2, y=4.5, sigma2=1.0),
        Observation(block="c1", period=3, y=5.0, sigma2=1.0),
        Observation(block="c1", period=4, y=13.0, sigma2=0.5),
        Observation(block="c2", period=4, y=9.0, sigma2=0.5),
        Observation(block="S", period=1, y=10.0, sigma2=2.0),
        Observation(block="S", period=2, y=11.0, sigma2=2.0),
        Observation(block="S", period=3, y=12.5, sigma2=2.0),
    ]
    membership = {"c1": ["c1"], "c2": ["c2"], "S": ["c1", "c2", "c3"]}
    return make_dataset(["c1", "c2", "c3"], membership, observations)


@pytest.fixture
def tiny_linkage(tiny_dataset) -> LinkageService:
    return LinkageService(tiny_dataset)


@pytest.fixture
def bundle_dir(tmp_path, tiny_dataset):
    write_dataset(tiny_dataset, tmp_path / "bundle")
    return tmp_path / "bundle"


@pytest.fixture
def fast_config() -> ChainConfig:
    return ChainConfig(n_burn=3, n_keep=4, thin=1, seed=3, cache_check_every=1, progress_every=1)


@pytest.fixture
def small_synth():
    config = SynthConfig(n_counties=6, T=5, P=2, n_super_blocks=2, seed=11)
    return generate(config)
