"""Worst-case Lp perturbations of a linearised loss and their regularisers.

For a loss gradient ``g`` and budget ``sigma``, the perturbation maximising
``g . eps`` over the ball ``||eps||_p <= sigma`` is

    eps = sigma * sign(g) * (|g| / ||g||_q) ** (1 / (p - 1)),   1/p + 1/q = 1

with the sign method at ``p = inf`` and a single-coordinate spike at
``p = 1``. All functions accept one gradient ``(d,)`` or a batch ``(N, d)``
and operate row-wise.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import model as mdl
from .numcore import (InvalidParameterError, check_p, dual_exponent, is_p_inf,
                      is_p_one, lp_norm)


@dataclass(frozen=True)
class PerturbSpec:
    p: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "p", check_p(self.p))
        if not self.sigma > 0:
            raise InvalidParameterError(f"perturbation budget must be positive, got {self.sigma}")

    @property
    def dual(self):
        return dual_exponent(self.p)


def epsilon_sign(grad, sigma):
    """``sigma * sign(grad)`` with sign(0) = 0."""
    return sigma * np.sign(np.asarray(grad, dtype=np.float64))


def epsilon_argmax(grad, sigma):
    """Whole budget on the largest-magnitude coordinate, keeping its sign.

    Ties go to the lowest index; an all-zero row gives a zero row.
    """
    g = np.asarray(grad, dtype=np.float64)
    g2 = np.atleast_2d(g)
    idx = np.argmax(np.abs(g2), axis=1)
    rows = np.arange(len(g2))
    out = np.zeros_like(g2)
    out[rows, idx] = sigma * np.sign(g2[rows, idx])
    return out if g.ndim == 2 else out[0]


def epsilon_l2(grad, sigma):
    g = np.asarray(grad, dtype=np.float64)
    n = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
    return np.where(n > 0, sigma * g / np.where(n > 0, n, 1.0), 0.0)


def worst_case_epsilon(grad, spec):
    p = spec.p
    if is_p_inf(p):
        return epsilon_sign(grad, spec.sigma)
    if is_p_one(p):
        return epsilon_argmax(grad, spec.sigma)
    if p == 2.0:
        return epsilon_l2(grad, spec.sigma)
    g = np.asarray(grad, dtype=np.float64)
    a = np.abs(g)
    nq = np.asarray(lp_norm(a, dual_exponent(p), axis=-1))[..., None]
    ratio = np.where(nq > 0, a / np.where(nq > 0, nq, 1.0), 0.0)
    # ratio <= 1, so large exponents can only underflow towards 0.
    return spec.sigma * np.sign(g) * ratio ** (1.0 / (p - 1.0))


def regularizer_value(grad, spec):
    """Penalty ``sigma * ||grad||_q`` induced by the worst-case perturbation."""
    return spec.sigma * lp_norm(grad, spec.dual, axis=-1)


def _pair_argmax(a, b, c, r, iters=60):
    """Maximise a*w**r + b*(c-w)**r over w in [0, c] by bisection on the slope."""
    if a <= 0.0:
        return 0.0
    if b <= 0.0:
        return c
    if r >= 1.0:
        return c if a >= b else 0.0
    lo, hi = 0.0, c
    la, lb, rm1 = math.log(a), math.log(b), r - 1.0
    for _ in range(iters):
        w = 0.5 * (lo + hi)
        if w <= 0.0 or w >= c:
            break
        # sign of the derivative, compared in logs
        if la + rm1 * math.log(w) > lb + rm1 * math.log(c - w):
            lo = w
        else:
            hi = w
    return 0.5 * (lo + hi)


def oracle_epsilon(grad, spec, iterations=2000, rng=None, max_sweeps=500):
    """Numerical maximiser of ``grad . eps`` over the p-ball; a test oracle.

    Samples ``iterations`` random directions scaled onto the sphere, keeps
    the best, then runs coordinate ascent from it: single coordinates for
    ``p = inf``, mass exchanges between coordinate pairs otherwise. It never
    evaluates the closed-form solution.
    """
    g = np.asarray(grad, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(0)
    p, sigma = spec.p, spec.sigma
    p_norm = math.inf if is_p_inf(p) else (1.0 if is_p_one(p) else p)

    cand = rng.standard_normal((iterations, g.size))
    norms = np.asarray(lp_norm(cand, p_norm, axis=1))
    cand = sigma * cand / norms[:, None]
    best = cand[np.argmax(cand @ g)].copy()

    if p_norm == math.inf:
        for i in range(g.size):
            # maximise g_i * u_i over u_i in [-sigma, sigma]
            if g[i] != 0.0:
                best[i] = sigma if g[i] > 0 else -sigma
        return best

    # Coordinate mass w_i = |u_i|^p / sigma^p lives on the simplex and the
    # objective sum |g_i| w_i^(1/p) is concave there.
    signs = np.where(g != 0, np.sign(g), np.sign(best))
    w = (np.abs(best) / sigma) ** p_norm
    w = list(w / w.sum())
    mag = list(np.abs(g))
    r = 1.0 / p_norm
    d = g.size

    def objective(ws):
        return sum(m * wi ** r for m, wi in zip(mag, ws))

    value = objective(w)
    for _ in range(max_sweeps):
        for i in range(d):
            for j in range(i + 1, d):
                c = w[i] + w[j]
                if c <= 0.0:
                    continue
                wi = _pair_argmax(mag[i], mag[j], c, r)
                w[i], w[j] = wi, c - wi
        new_value = objective(w)
        if new_value - value <= 1e-15 * max(abs(new_value), 1e-300):
            value = new_value
            break
        value = new_value
    return sigma * signs * np.asarray(w) ** r


class Decomposition(NamedTuple):
    residual: np.ndarray  # y - t
    components: np.ndarray  # (K, d), row k is class k's share of eps
    degenerate: bool  # input gradient was zero


def decompose_perturbation(model, x, t, sigma):
    """Split the p=2 perturbation into per-class parts (y_k - t_k) * dO_k/dx.

    The rows of ``components`` sum to ``epsilon_l2(grad_x, sigma)``.
    """
    t = np.asarray(t, dtype=np.float64)
    trace = mdl.forward(model, x)
    residual = trace.probs() - t
    grad = mdl.backprop(model, x, t, trace=trace).grad_input
    gnorm = float(np.linalg.norm(grad))
    jac = mdl.presoftmax_jacobian(model, x)
    if gnorm == 0.0:
        return Decomposition(residual, np.zeros_like(jac), True)
    return Decomposition(residual, (sigma / gnorm) * residual[:, None] * jac, False)


def scale_sigma_for_dim(sigma_ref, d_ref, d_new):
    """Keep the per-pixel perturbation size when the input dimension changes."""
    if d_ref <= 0 or d_new <= 0:
        raise InvalidParameterError("dimensions must be positive")
    return sigma_ref * math.sqrt(d_new / d_ref)
