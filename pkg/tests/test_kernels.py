import os
import subprocess
import sys

import numpy as np
import pytest

from gshadow import kernels
from gshadow.gaussian_core import GaussianSet, Ray, transmittance
from gshadow.oracle import nerf_style_shadow

from conftest import random_gaussian


@pytest.fixture
def scene_rays(rng):
    gs = [random_gaussian(rng) for _ in range(12)]
    n = 300
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = rng.uniform(-1.5, 1.5, (n, 3))
    return gs, GaussianSet.from_gaussians(gs), o, d


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_batch_matches_scalar(scene_rays, backend):
    gs, gset, o, d = scene_rays
    got = kernels.transmittance_batch(gset, o, d, backend=backend)
    expected = [transmittance(gs, Ray(a, b)) for a, b in zip(o, d)]
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_finite_segments(scene_rays, backend):
    gs, gset, o, d = scene_rays
    t0 = np.linspace(0, 0.5, len(o))
    t1 = t0 + np.linspace(0.1, 3, len(o))
    got = kernels.transmittance_batch(gset, o, d, t0, t1, backend=backend)
    expected = [transmittance(gs, Ray(a, b, lo, hi)) for a, b, lo, hi in zip(o, d, t0, t1)]
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_sampled_matches_scalar_oracle(scene_rays, backend):
    gs, gset, o, d = scene_rays
    for jitter in (True, False):
        got = kernels.sampled_transmittance_batch(gset, o[:1], d[:1], 16, seed=9, jitter=jitter, backend=backend)
        expected = nerf_style_shadow(gs, Ray(o[0], d[0]), 16, seed=9, jitter=jitter)
        assert got[0] == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_backends_agree(scene_rays):
    if len(kernels.BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    _, gset, o, d = scene_rays
    a = kernels.transmittance_batch(gset, o, d, backend="cython")
    b = kernels.transmittance_batch(gset, o, d, backend="python")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    a = kernels.sampled_transmittance_batch(gset, o, d, 32, seed=3, backend="cython")
    b = kernels.sampled_transmittance_batch(gset, o, d, 32, seed=3, backend="python")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_thread_count_does_not_change_results(scene_rays):
    _, gset, o, d = scene_rays
    a = kernels.transmittance_batch(gset, o, d, n_threads=1)
    b = kernels.transmittance_batch(gset, o, d, n_threads=3)
    np.testing.assert_array_equal(a, b)


def test_empty_inputs(scene_rays):
    _, gset, o, d = scene_rays
    empty = GaussianSet.from_gaussians([])
    np.testing.assert_array_equal(kernels.transmittance_batch(empty, o, d), 1.0)
    np.testing.assert_array_equal(kernels.sampled_transmittance_batch(empty, o, d, 8), 1.0)
    assert kernels.transmittance_batch(gset, o[:0], d[:0]).shape == (0,)


def test_sampled_converges(scene_rays):
    _, gset, o, d = scene_rays
    exact = kernels.transmittance_batch(gset, o, d)
    errs = [np.mean(np.abs(kernels.sampled_transmittance_batch(gset, o, d, n) - exact)) for n in (4, 32, 256)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("GSC_THREADS", "3")
    assert kernels.resolve_threads() == 3
    assert kernels.resolve_threads(2) == 2
    monkeypatch.setenv("GSC_THREADS", "0")
    assert kernels.resolve_threads() >= 1


def test_forced_fallback():
    env = dict(os.environ, GSC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import gshadow.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
