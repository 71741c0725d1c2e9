import os

import numpy as np
import pytest

from latent_lab import tensor as T
from latent_lab.model import CausalTransformer, ModelConfig
from latent_lab.prosqa import GenerationSettings, generate_instance
from latent_lab.tokenizer import Vocabulary

SMALL_SETTINGS = GenerationSettings(n_nodes=10, min_path=2, max_path=4)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("LATENT_LAB_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set LATENT_LAB_SLOW=1 to run desk-scale checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def float64():
    """Run the test with float64 tensors."""
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.for_prosqa()


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(vocab_size=len(vocab), n_layer=2, d_model=16, n_head=2, d_ff=32, context_length=512, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return CausalTransformer(tiny_config)


@pytest.fixture
def tiny_model64(float64, tiny_config):
    return CausalTransformer(tiny_config)


@pytest.fixture(scope="session")
def small_instances():
    return [generate_instance(11, "train", i, SMALL_SETTINGS)[0] for i in range(6)]


@pytest.fixture(scope="session")
def small_examples(small_instances):
    return [instance.example for instance in small_instances]
