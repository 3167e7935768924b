import numpy as np
import pytest

from liveseg import data, model, suites

CACHE = __file__.rsplit("/", 1)[0] + "/.cache"


@pytest.fixture(scope="session")
def pretrained_base() -> model.BaseWeights:
    """The suite's pretrained base model; trained once and cached on disk."""
    return suites.pretrained_base(CACHE)


@pytest.fixture(scope="session")
def tiny_base() -> model.BaseWeights:
    """Untrained weights for protocol tests that don't need model quality."""
    return model.init_base_weights(123)


@pytest.fixture(scope="session")
def small_video() -> data.VideoBundle:
    spec = data.ScenarioSpec("camouflage", frames=8, size=48, seed=9,
                             radius_min=6, radius_max=9)
    return data.generate_video(spec)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
