import numpy as np
import pytest

from refsr.image import ImagePlane, gaussian_blur


def random_plane(shape, seed, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return ImagePlane(rng.uniform(lo, hi, size=shape))


def smooth_plane(shape, seed, sigma=1.5):
    """Band-limited random texture, rescaled to span most of [0,1]."""
    base = random_plane(shape, seed)
    sm = gaussian_blur(base, sigma).data
    sm = (sm - sm.min()) / max(sm.max() - sm.min(), 1e-12)
    return ImagePlane(0.05 + 0.9 * sm)


@pytest.fixture
def rng():
    return np.random.default_rng(20240819)
