# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray kernels. Semantics match gshadow._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, erf, erfc, sqrt, log, isinf
from libc.stdint cimport uint64_t

cnp.import_array()

cdef double CULL_AMPLITUDE = 1e-12
cdef double SQRT_HALF_PI = 1.2533141373155002512
cdef double SQRT2 = 1.41421356237309504880


cdef inline uint64_t splitmix64(uint64_t x) noexcept nogil:
    x = x + <uint64_t>0x9E3779B97F4A7C15
    x = (x ^ (x >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    x = (x ^ (x >> 27)) * <uint64_t>0x94D049BB133111EB
    return x ^ (x >> 31)


cdef inline double erf_diff(double a, double b) noexcept nogil:
    if a >= 0.0:
        return erfc(a) - erfc(b)
    if b <= 0.0:
        return erfc(-b) - erfc(-a)
    return erf(b) - erf(a)


def transmittance_rays(const double[:, ::1] means, const double[:, ::1] prec6,
                       const double[::1] amps, const double[:, ::1] origins,
                       const double[:, ::1] dirs, const double[::1] t_min,
                       const double[::1] t_max, int n_threads=1):
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t n_g = means.shape[0]
    out_arr = np.empty(n_rays, dtype=np.float64)
    cdef double[::1] out = out_arr
    # skip a Gaussian when exp(-e/2) * amp < CULL_AMPLITUDE, i.e. e > cut
    cut_arr = np.full(n_g, -1.0)
    cdef double[::1] cut = cut_arr
    cdef Py_ssize_t i, g
    for g in range(n_g):
        if amps[g] >= CULL_AMPLITUDE:
            cut[g] = 2.0 * log(amps[g] / CULL_AMPLITUDE)
    cdef double ox, oy, oz, dx, dy, dz, ex, ey, ez, px, py, pz
    cdef double dd, mu, q, expo, sig, s2, depth, a, b
    if n_threads < 1:
        n_threads = 1
    for i in prange(n_rays, nogil=True, num_threads=n_threads, schedule="static"):
        ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
        dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
        depth = 0.0
        for g in range(n_g):
            if cut[g] < 0.0:
                continue
            ex = means[g, 0] - ox
            ey = means[g, 1] - oy
            ez = means[g, 2] - oz
            px = prec6[g, 0] * dx + prec6[g, 1] * dy + prec6[g, 2] * dz
            py = prec6[g, 1] * dx + prec6[g, 3] * dy + prec6[g, 4] * dz
            pz = prec6[g, 2] * dx + prec6[g, 4] * dy + prec6[g, 5] * dz
            dd = px * dx + py * dy + pz * dz
            mu = (px * ex + py * ey + pz * ez) / dd
            q = (prec6[g, 0] * ex * ex + prec6[g, 3] * ey * ey + prec6[g, 5] * ez * ez
                 + 2.0 * (prec6[g, 1] * ex * ey + prec6[g, 2] * ex * ez + prec6[g, 4] * ey * ez))
            expo = q - mu * mu * dd
            if expo < 0.0:
                expo = 0.0
            if expo > cut[g]:
                continue
            sig = 1.0 / sqrt(dd)
            s2 = sig * SQRT2
            a = (t_min[i] - mu) / s2
            if isinf(t_max[i]):
                b = 1e300
            else:
                b = (t_max[i] - mu) / s2
            depth = depth + amps[g] * exp(-0.5 * expo) * sig * SQRT_HALF_PI * erf_diff(a, b)
        out[i] = exp(-depth)
    return out_arr


def sampled_transmittance_rays(const double[:, ::1] means, const double[:, ::1] prec6,
                               const double[::1] amps, const double[:, ::1] origins,
                               const double[:, ::1] dirs, const double[::1] t_near,
                               const double[::1] t_far, int n_samples,
                               unsigned long long seed, bint jitter=True,
                               int n_threads=1):
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t n_g = means.shape[0]
    out_arr = np.empty(n_rays, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef uint64_t key = splitmix64(<uint64_t>seed)
    cdef Py_ssize_t i, k, g
    cdef double delta, t, u, x, y, z, ex, ey, ez, q, dens, depth
    if n_threads < 1:
        n_threads = 1
    for i in prange(n_rays, nogil=True, num_threads=n_threads, schedule="static"):
        depth = 0.0
        if t_far[i] > t_near[i]:
            delta = (t_far[i] - t_near[i]) / n_samples
            for k in range(n_samples):
                if jitter:
                    u = <double>(splitmix64(key ^ <uint64_t>(i * n_samples + k)) >> 11) * 1.1102230246251565e-16
                else:
                    u = 0.5
                t = t_near[i] + (k + u) * delta
                x = origins[i, 0] + t * dirs[i, 0]
                y = origins[i, 1] + t * dirs[i, 1]
                z = origins[i, 2] + t * dirs[i, 2]
                dens = 0.0
                for g in range(n_g):
                    ex = x - means[g, 0]
                    ey = y - means[g, 1]
                    ez = z - means[g, 2]
                    q = (prec6[g, 0] * ex * ex + prec6[g, 3] * ey * ey + prec6[g, 5] * ez * ez
                         + 2.0 * (prec6[g, 1] * ex * ey + prec6[g, 2] * ex * ez + prec6[g, 4] * ey * ez))
                    dens = dens + amps[g] * exp(-0.5 * q)
                depth = depth + dens * delta
        out[i] = exp(-depth)
    return out_arr
