import numpy as np
import pytest
import torch

from herbage.data_model import IRISH, load_manifest
from herbage.synthetic import SyntheticConfig, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """A small two-domain synthetic dataset shared by unit tests (read-only)."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    cfg = SyntheticConfig(out_dir=out, ground_size=64, drone_size=256, drone_blur_sigma=2.0)
    generate_synthetic_dataset(5, 6, 2, cfg)
    return load_manifest(out / "manifest.json")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def irish():
    return IRISH


def random_label(rng: np.random.Generator, schema=IRISH):
    """A valid random label for metric tests."""
    from herbage.data_model import BiomassLabel

    comp = rng.dirichlet(np.ones(len(schema.composition_classes)))
    return BiomassLabel(
        composition={c: float(f) for c, f in zip(schema.composition_classes, comp)},
        herbage_mass=float(rng.uniform(500, 3500)),
        height=float(rng.uniform(2, 18)),
    )
