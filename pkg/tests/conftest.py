import numpy as np
import pytest

from livealloc import feedsim
from livealloc.dataset import read_log, split_by_trajectory


@pytest.fixture(scope="session")
def default_sim_config():
    return feedsim.SimConfig()


@pytest.fixture(scope="session")
def small_log(tmp_path_factory, default_sim_config):
    """A modest logged dataset shared across test modules."""
    path = tmp_path_factory.mktemp("logs") / "small.ndjson"
    feedsim.generate_log(
        default_sim_config, "group_heuristic", num_users=60, max_steps=80, out_path=path, seed=11
    )
    return path


@pytest.fixture(scope="session")
def small_dataset(small_log):
    return read_log(small_log)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return split_by_trajectory(small_dataset, eval_fraction=0.25, seed=7)


def rng_of(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
