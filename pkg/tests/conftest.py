import numpy as np
import pytest

from facegaze.dataset import load_manifest
from facegaze.geometry import CameraModel, NormalizationSpace
from facegaze.synth import SynthConfig, generate


def make_space(size: int = 64, distance: float = 600.0, focal: float | None = None) -> NormalizationSpace:
    focal = focal if focal is not None else 4.0 * size
    proj = np.array([[focal, 0.0, size / 2.0], [0.0, focal, size / 2.0], [0.0, 0.0, 1.0]])
    return NormalizationSpace(distance, CameraModel(proj, size, size))


@pytest.fixture(scope="session")
def space():
    return make_space(64, 600.0, 256.0)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A small synthetic dataset shared across test modules."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = SynthConfig(persons=4, samples_per_person=15, image_size=(200, 150),
                      focal=240.0, seed=7)
    samples, manifest = generate(cfg, out)
    return cfg, samples, manifest


@pytest.fixture(scope="session")
def small_samples(small_synth):
    _, _, manifest = small_synth
    return load_manifest(manifest)
