"""Pure numpy versions of the ray kernels, used when the extension is not built."""

import numpy as np
from scipy.special import erf, erfc

CULL_AMPLITUDE = 1e-12
SQRT_HALF_PI = np.sqrt(0.5 * np.pi)
_CHUNK_PAIRS = 1 << 21

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + _M1
        x = (x ^ (x >> np.uint64(30))) * _M2
        x = (x ^ (x >> np.uint64(27))) * _M3
    return x ^ (x >> np.uint64(31))


def _erf_diff(a, b):
    out = erf(b) - erf(a)
    hi = a >= 0.0
    out[hi] = erfc(a[hi]) - erfc(b[hi])
    lo = b <= 0.0
    out[lo] = erfc(-b[lo]) - erfc(-a[lo])
    return out


def _quad(prec6, e):
    # e: (..., 3) offsets, prec6 broadcast against the leading axes
    p = prec6
    return (p[..., 0] * e[..., 0] ** 2 + p[..., 3] * e[..., 1] ** 2 + p[..., 5] * e[..., 2] ** 2
            + 2.0 * (p[..., 1] * e[..., 0] * e[..., 1] + p[..., 2] * e[..., 0] * e[..., 2]
                     + p[..., 4] * e[..., 1] * e[..., 2]))


def _pmul(prec6, d):
    p = prec6
    return np.stack([
        p[..., 0] * d[..., 0] + p[..., 1] * d[..., 1] + p[..., 2] * d[..., 2],
        p[..., 1] * d[..., 0] + p[..., 3] * d[..., 1] + p[..., 4] * d[..., 2],
        p[..., 2] * d[..., 0] + p[..., 4] * d[..., 1] + p[..., 5] * d[..., 2],
    ], axis=-1)


def transmittance_rays(means, prec6, amps, origins, dirs, t_min, t_max, n_threads=1):
    n_rays, n_g = len(origins), len(means)
    out = np.empty(n_rays)
    keep = amps >= CULL_AMPLITUDE
    means, prec6, amps = means[keep], prec6[keep], amps[keep]
    n_g = len(means)
    if n_g == 0:
        out[:] = 1.0
        return out
    cut = 2.0 * np.log(amps / CULL_AMPLITUDE)
    step = max(1, _CHUNK_PAIRS // n_g)
    for s in range(0, n_rays, step):
        o = origins[s:s + step, None, :]
        d = dirs[s:s + step, None, :]
        e = means[None, :, :] - o
        pd = _pmul(prec6[None], d)
        dd = np.sum(pd * d, axis=-1)
        mu = np.sum(pd * e, axis=-1) / dd
        q = _quad(prec6[None], e)
        expo = np.maximum(q - mu * mu * dd, 0.0)
        live = expo <= cut[None, :]
        sig = 1.0 / np.sqrt(dd[live])
        s2 = sig * np.sqrt(2.0)
        m = mu[live]
        tmin = np.broadcast_to(t_min[s:s + step, None], mu.shape)[live]
        tmax = np.broadcast_to(t_max[s:s + step, None], mu.shape)[live]
        contrib = np.zeros(mu.shape)
        contrib[live] = (np.broadcast_to(amps[None, :], mu.shape)[live] * np.exp(-0.5 * expo[live])
                         * sig * SQRT_HALF_PI * _erf_diff((tmin - m) / s2, (tmax - m) / s2))
        out[s:s + step] = np.exp(-contrib.sum(axis=1))
    return out


def sampled_transmittance_rays(means, prec6, amps, origins, dirs, t_near, t_far,
                               n_samples, seed, jitter=True, n_threads=1):
    n_rays, n_g = len(origins), len(means)
    out = np.ones(n_rays)
    if n_g == 0 or n_rays == 0:
        return out
    key = splitmix64(np.uint64(seed))
    ks = np.arange(n_samples, dtype=np.uint64)
    step = max(1, _CHUNK_PAIRS // (n_g * n_samples))
    for s in range(0, n_rays, step):
        idx = np.arange(s, min(s + step, n_rays), dtype=np.uint64)
        tn, tf = t_near[idx], t_far[idx]
        delta = np.where(tf > tn, (tf - tn) / n_samples, 0.0)
        if jitter:
            h = splitmix64(key ^ (idx[:, None] * np.uint64(n_samples) + ks[None, :]))
            u = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        else:
            u = np.full((len(idx), n_samples), 0.5)
        t = tn[:, None] + (ks[None, :].astype(np.float64) + u) * delta[:, None]
        x = origins[idx][:, None, :] + t[..., None] * dirs[idx][:, None, :]
        e = x[:, :, None, :] - means[None, None, :, :]
        dens = np.exp(-0.5 * _quad(prec6[None, None], e)) @ amps
        out[idx] = np.exp(-dens.sum(axis=1) * delta)
    return out
