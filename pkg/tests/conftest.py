import numpy as np
import pytest
import yaml
from hypothesis import settings

from imblab.dataset import (
    FrequencySpec,
    InputDistribution,
    simple_imbalanced,
    zipf_dataset,
)

settings.register_profile(
    "imblab", database=None, max_examples=25, deadline=None
)
settings.load_profile("imblab")


@pytest.fixture()
def small_dataset():
    """Zipf dataset with 6 classes, 60 samples in 5 dimensions, 3 groups."""
    return zipf_dataset(
        c=6,
        exponent=1.0,
        n=60,
        d=5,
        dist=InputDistribution("uniform01"),
        seed=0,
        num_groups=3,
    )


@pytest.fixture()
def two_class_simple():
    """Simple imbalanced setting with two equally frequent classes."""
    return simple_imbalanced(FrequencySpec.from_counts([0.5, 0.5]))


@pytest.fixture()
def rng():
    """Seeded generator for random test instances."""
    return np.random.default_rng(12345)


@pytest.fixture()
def minimal_config() -> dict:
    """Smallest softmax experiment: c=2 simple setting, sign descent."""
    return {
        "schema_version": 1,
        "kind": "softmax",
        "name": "minimal",
        "dataset": {
            "generator": "simple_imbalanced",
            "counts": [0.5, 0.5],
            "num_groups": 2,
        },
        "model": {"bias": False},
        "optimizers": [{"family": "sign", "alpha": 0.05}],
        "steps": 10,
        "checkpoints": {"kind": "every", "interval": 2},
    }


@pytest.fixture()
def write_config(tmp_path):
    """Factory writing a config dictionary to a YAML file in tmp_path."""

    def _write(content: dict, filename: str = "config.yaml"):
        path = tmp_path / filename
        with open(path, "w") as f:
            yaml.safe_dump(content, f)
        return path

    return _write
