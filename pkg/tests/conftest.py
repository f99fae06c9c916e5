import numpy as np
import pytest

from gshadow.gaussian_core import AnisoGaussian, Ray


def random_gaussian(rng, amp_range=(0.2, 3.0)):
    while True:
        rot6 = rng.normal(size=6)
        a, b = rot6[:3], rot6[3:]
        # keep well away from the parallel-rows rejection threshold
        if np.linalg.norm(np.cross(a, b)) > 0.1 * np.linalg.norm(a) * np.linalg.norm(b):
            break
    return AnisoGaussian(rng.uniform(-1, 1, 3), rng.uniform(0.05, 0.6, 3), rot6,
                         rng.uniform(*amp_range))


def random_ray(rng, target=None, spread=0.5):
    """A ray starting ~2.5 units away and aimed near ``target``."""
    target = np.zeros(3) if target is None else np.asarray(target)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    origin = target - 2.5 * d + rng.normal(scale=spread, size=3)
    return Ray(origin, target + rng.normal(scale=spread, size=3) - origin)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bundled_scene():
    from gshadow.scene import load_scene

    return load_scene()
