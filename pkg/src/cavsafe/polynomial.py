"""Vectorized helpers for cubic polynomials in absolute time.

Coefficients are stored in descending order ``[c3, c2, c1, c0]`` along the last
axis, so an array of shape ``(K, 4)`` holds ``K`` cubics. All routines broadcast
over the leading axes.
"""

from __future__ import annotations

import numpy as np


def polyval(coef: np.ndarray, t) -> np.ndarray:
    coef = np.asarray(coef, dtype=float)
    t = np.asarray(t, dtype=float)
    return ((coef[..., 0] * t + coef[..., 1]) * t + coef[..., 2]) * t + coef[..., 3]


def derivative(coef: np.ndarray) -> np.ndarray:
    """Derivative of a cubic, returned as a cubic with zero leading term."""
    coef = np.asarray(coef, dtype=float)
    out = np.zeros_like(coef)
    out[..., 1] = 3.0 * coef[..., 0]
    out[..., 2] = 2.0 * coef[..., 1]
    out[..., 3] = coef[..., 2]
    return out


def _stationary_points(coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real roots of ``3 c3 t^2 + 2 c2 t + c1``; NaN where a root does not exist."""
    qa = 3.0 * coef[..., 0]
    qb = 2.0 * coef[..., 1]
    qc = coef[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = qb * qb - 4.0 * qa * qc
        sq = np.sqrt(np.where(disc >= 0.0, disc, np.nan))
        sgn = np.where(qb >= 0.0, 1.0, -1.0)
        q = -0.5 * (qb + sgn * sq)
        quad = qa != 0.0
        r1 = np.where(quad, q / qa, np.where(qb != 0.0, -qc / qb, np.nan))
        r2 = np.where(quad & (q != 0.0), qc / q, np.nan)
    return r1, r2


def interval_min(coef, lo, hi) -> np.ndarray:
    """Exact minimum of each cubic over ``[lo, hi]``.

    The minimum of a cubic on a closed interval is attained at an endpoint or
    at an interior stationary point, so only those candidates are evaluated.
    Empty intervals (``lo > hi``) yield ``+inf``.
    """
    coef = np.asarray(coef, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    shape = np.broadcast_shapes(coef.shape[:-1], lo.shape, hi.shape)
    coef = np.broadcast_to(coef, shape + (4,))
    lo = np.broadcast_to(lo, shape)
    hi = np.broadcast_to(hi, shape)

    best = np.minimum(polyval(coef, lo), polyval(coef, hi))
    for r in _stationary_points(coef):
        inside = np.isfinite(r) & (r > lo) & (r < hi)
        val = polyval(coef, np.where(inside, r, lo))
        best = np.where(inside, np.minimum(best, val), best)
    return np.where(lo > hi, np.inf, best)


def invert_increasing(coef, target, lo, hi, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Solve ``p(t) = target`` for cubics increasing on ``[lo, hi]``.

    Safeguarded Newton: iterates stay inside a shrinking bracket and fall back
    to bisection whenever a Newton step would leave it. Targets outside
    ``[p(lo), p(hi)]`` are clamped to the nearest endpoint.
    """
    coef = np.asarray(coef, dtype=float)
    target = np.asarray(target, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    shape = np.broadcast_shapes(coef.shape[:-1], target.shape, lo.shape, hi.shape)
    coef = np.broadcast_to(coef, shape + (4,))
    target = np.broadcast_to(target, shape)
    a = np.array(np.broadcast_to(lo, shape), dtype=float)
    b = np.array(np.broadcast_to(hi, shape), dtype=float)
    dcoef = derivative(coef)

    pa = polyval(coef, a) - target
    pb = polyval(coef, b) - target
    below = pa >= 0.0
    above = pb <= 0.0
    span = np.where(pb - pa > 0.0, pb - pa, 1.0)
    t = np.clip(a - pa * (b - a) / span, a, b)

    for _ in range(max_iter):
        f = polyval(coef, t) - target
        done = np.abs(f) <= tol
        if np.all(done | below | above):
            break
        neg = f < 0.0
        a = np.where(neg, t, a)
        b = np.where(neg, b, t)
        df = polyval(dcoef, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t - f / df
        ok = np.isfinite(tn) & (tn > a) & (tn < b)
        tn = np.where(ok, tn, 0.5 * (a + b))
        t = np.where(done, t, tn)
        if np.all((b - a) <= 4.0 * np.finfo(float).eps * np.maximum(np.abs(b), 1.0)):
            break

    t = np.where(below, np.broadcast_to(lo, shape), t)
    t = np.where(above & ~below, np.broadcast_to(hi, shape), t)
    return t
