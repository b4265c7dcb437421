import numpy as np
import pytest

from vlmreward.config import build_provider, build_reward_model, default_config
from vlmreward.embedding import SyntheticEmbedder, SyntheticEmbedderConfig
from vlmreward.env import EnvConfig, GoalGridEnv
from vlmreward.reward import RewardModel, RewardModelConfig, TaskSet


@pytest.fixture
def env_config():
    return EnvConfig(seed=0)


@pytest.fixture
def goals(env_config):
    return env_config.goals()


@pytest.fixture
def env(env_config):
    return GoalGridEnv(env_config)


@pytest.fixture
def provider(goals):
    return SyntheticEmbedder(SyntheticEmbedderConfig(fidelity=1.0, seed=0), goals)


@pytest.fixture
def reward_model(provider, goals):
    return RewardModel(provider, RewardModelConfig(seed=0), TaskSet.from_goals(goals))


@pytest.fixture
def run_config():
    return default_config()


def random_unit(rng, d, n=None):
    v = rng.standard_normal((n, d) if n else d)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
