"""Numeric primitives shared by every other module.

Vectors and matrices are plain float64 numpy arrays. The norm exponent ``p``
is a float where ``math.inf`` stands for the max-norm.
"""

import math

import numpy as np
from scipy.special import ndtr

# p values this close to 1, or above P_INF_CUTOFF, take the exact limit paths.
P_ONE_TOL = 1e-9
P_INF_CUTOFF = 1e6


class InvalidParameterError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def check_p(p):
    p = float(p)
    if math.isnan(p) or p < 1.0:
        raise InvalidParameterError(f"norm exponent p must be in [1, inf], got {p}")
    return p


def is_p_one(p):
    return p - 1.0 <= P_ONE_TOL


def is_p_inf(p):
    return p > P_INF_CUTOFF


def lp_norm(v, p, axis=-1):
    """Lp norm of ``v`` along ``axis``; ``p=math.inf`` gives the max-norm.

    The sum is taken on magnitudes rescaled by their maximum so that large
    exponents do not overflow.
    """
    p = check_p(p)
    a = np.abs(np.asarray(v, dtype=np.float64))
    if a.shape[axis] == 0:
        return a.sum(axis=axis)[()]
    m = a.max(axis=axis, keepdims=True)
    if p == math.inf:
        return np.squeeze(m, axis=axis)[()]
    if p == 1.0:
        return a.sum(axis=axis)[()]
    if p == 2.0:
        return np.sqrt(np.sum(a * a, axis=axis))[()]
    safe = np.where(m > 0, m, 1.0)
    s = np.sum((a / safe) ** p, axis=axis) ** (1.0 / p)
    return (np.squeeze(m, axis=axis) * s)[()]


def dual_exponent(p):
    """Exponent q with 1/p + 1/q = 1 (1 <-> inf)."""
    p = check_p(p)
    if p == math.inf:
        return 1.0
    if p == 1.0:
        return math.inf
    return p / (p - 1.0)


def gaussian_cdf(z):
    """Standard normal CDF, exact to float64 rounding (scipy ``ndtr``)."""
    out = ndtr(np.asarray(z, dtype=np.float64))
    return out[()] if np.ndim(out) == 0 else out


def gaussian_sf(z):
    """Upper tail 1 - Phi(z) without cancellation for large z."""
    return gaussian_cdf(-np.asarray(z, dtype=np.float64))


def make_rng(seed=0):
    """Seeded PCG64 generator; the only RNG type used in the package."""
    return np.random.default_rng(seed)


def standard_normals(rng, shape):
    """Box-Muller transform of the generator's uniform stream."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * half)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(shape)


def gaussian_sample(rng, mu, sigma, n):
    """``n`` draws from N(mu, sigma^2)."""
    if sigma < 0:
        raise InvalidParameterError(f"sigma must be non-negative, got {sigma}")
    return mu + sigma * standard_normals(rng, n)
