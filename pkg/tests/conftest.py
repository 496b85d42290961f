import numpy as np
import pytest

from fewshot_probe.synthetic import write_envelope_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def envelope_dataset(tmp_path_factory):
    """180 synthetic recordings (3 envelope classes x 60) on disk."""
    return write_envelope_dataset(tmp_path_factory.mktemp("envelope"), n_per_class=60, seed=0)
