import numpy as np
import pytest

from icr.phantom import PhantomConfig, generate_case
from icr.session import preprocess_case
from icr.volume import Grid3

TINY_GRID = Grid3((16, 16, 16))
TINY_PHANTOM = PhantomConfig(
    grid=TINY_GRID, tumor_radius_range=(2.0, 4.0), n_distractors=(0, 0), seed=42
)


@pytest.fixture(scope="session")
def tiny_cases():
    """Ten preprocessed 16^3 phantoms shared by module tests."""
    return [preprocess_case(generate_case(TINY_PHANTOM, i)) for i in range(10)]


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Ten raw 16^3 phantom cases on disk with a manifest."""
    from icr.phantom import generate_dataset

    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(TINY_PHANTOM, 10, root)
    return root


def random_mask(rng: np.random.Generator, dims, p=0.4) -> np.ndarray:
    return (rng.random(dims) < p).astype(np.uint8)
