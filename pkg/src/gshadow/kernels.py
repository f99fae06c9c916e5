"""Batched ray kernels with backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Setting ``GSC_PURE_PYTHON=1``
forces the fallback. Both backends produce the same numbers up to the last
few ulps of libm's ``erf``/``exp``.
"""

from __future__ import annotations

import logging
import math
import os

import numpy as np

from . import _pykernels
from .gaussian_core import GaussianSet

log = logging.getLogger(__name__)

try:
    if os.environ.get("GSC_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python forced by GSC_PURE_PYTHON")
    from . import _ckernels as _backend

    BACKEND = "cython"
except ImportError as exc:  # pragma: no cover - depends on build
    log.debug("compiled kernels unavailable (%s); using numpy fallback", exc)
    _backend = _pykernels
    BACKEND = "python"

BACKENDS = {"python": _pykernels}
if BACKEND == "cython":
    BACKENDS["cython"] = _backend


def resolve_threads(n_threads: int | None = None) -> int:
    """Worker count: explicit value, else ``GSC_THREADS`` (0 = all cores)."""
    if n_threads is None:
        n_threads = int(os.environ.get("GSC_THREADS", "0") or 0)
    if n_threads <= 0:
        n_threads = os.cpu_count() or 1
    return n_threads


def _ray_arrays(origins, dirs, t_min, t_max):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    n = len(origins)
    t_min = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)))
    t_max = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    return origins, dirs, t_min, t_max


def transmittance_batch(gset: GaussianSet, origins, dirs, t_min=0.0, t_max=math.inf,
                        n_threads: int | None = None, backend: str | None = None) -> np.ndarray:
    """Analytic transmittance of many rays through one Gaussian set."""
    origins, dirs, t_min, t_max = _ray_arrays(origins, dirs, t_min, t_max)
    if len(origins) == 0:
        return np.ones(0)
    if len(gset) == 0:
        return np.ones(len(origins))
    impl = BACKENDS[backend] if backend else _backend
    return impl.transmittance_rays(
        gset.means, gset.packed_precisions(), gset.amplitudes,
        origins, dirs, t_min, t_max, resolve_threads(n_threads),
    )


def sample_bounds(gset: GaussianSet, origins, dirs, t_min, t_max):
    """Near/far sample range per ray: the chord through the set's bounding sphere."""
    c, r = gset.bounding_sphere()
    proj = np.einsum("ni,ni->n", c - origins, dirs)
    near = np.maximum(t_min, proj - r)
    far = np.minimum(t_max, proj + r)
    return near, far


def sampled_transmittance_batch(gset: GaussianSet, origins, dirs, n_samples: int,
                                t_min=0.0, t_max=math.inf, seed: int = 0, jitter: bool = True,
                                n_threads: int | None = None,
                                backend: str | None = None) -> np.ndarray:
    """NeRF-style shadow value: stratified density samples, alpha-composited."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    origins, dirs, t_min, t_max = _ray_arrays(origins, dirs, t_min, t_max)
    if len(gset) == 0 or len(origins) == 0:
        return np.ones(len(origins))
    near, far = sample_bounds(gset, origins, dirs, t_min, t_max)
    impl = BACKENDS[backend] if backend else _backend
    return impl.sampled_transmittance_rays(
        gset.means, gset.packed_precisions(), gset.amplitudes, origins, dirs,
        np.ascontiguousarray(near), np.ascontiguousarray(far), int(n_samples),
        int(seed) & 0xFFFFFFFFFFFFFFFF, bool(jitter), resolve_threads(n_threads),
    )
