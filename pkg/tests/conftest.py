import numpy as np
import pytest

from sitfuse.raster import RasterScene
from sitfuse.synthetic import SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    """A 48x48 synthetic scene and its truth, shared by read-only tests."""
    return generate_scene(SceneSpec(width=48, height=48, seed=3))


def make_scene(data, valid=None, gt=(0.0, 1.0, 0.0, 0.0, 0.0, 1.0), **kw):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    if valid is None:
        valid = np.ones(data.shape[1:], dtype=bool)
    return RasterScene(data, valid, gt, **kw)
