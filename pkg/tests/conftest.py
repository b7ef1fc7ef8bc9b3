import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from mapalign.map_io import synthesize_map  # noqa: E402
from mapalign.pipeline import RunConfig, prepare  # noqa: E402
from mapalign.synthetic import random_chain, transformed_pair  # noqa: E402

# property tests draw the same cases on every run
settings.register_profile("repro", derandomize=True, database=None)
settings.load_profile("repro")

# 5 A fixtures are sampled at 2 A throughout the suite
FIXTURE_INTERVAL = 2.0


@pytest.fixture(scope="session")
def config():
    return RunConfig(sampling_interval=FIXTURE_INTERVAL)


@pytest.fixture(scope="session")
def single_blob():
    # odd grid, blob exactly on the centre voxel
    return synthesize_map([[0.0, 0.0, 0.0]], [1.0], resolution=5.0, voxel_size=1.0, padding=10.0)


@pytest.fixture(scope="session")
def chain_map():
    rng = np.random.default_rng(7)
    centers = random_chain(60, rng)
    return synthesize_map(centers, rng.uniform(0.6, 1.4, len(centers)), resolution=5.0, voxel_size=1.0, padding=8.0)


@pytest.fixture(scope="session")
def chain_prepared(chain_map, config):
    return prepare(chain_map, config)


@pytest.fixture(scope="session")
def global_pair():
    return transformed_pair(3, n_atoms=80)
