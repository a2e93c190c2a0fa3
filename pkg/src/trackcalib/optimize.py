"""Scalar search utilities: golden-section minimization and bisection.

Both come in scalar and lockstep-vectorized forms; the vectorized forms
drive the per-frame calibration solves where hundreds of independent
1-D problems are iterated together.
"""

from __future__ import annotations

import math

import numpy as np

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_INV_PHI2 = (3.0 - math.sqrt(5.0)) / 2.0


def golden_section(f, a: float, b: float, tol: float = 1e-6) -> float:
    """Minimize a unimodal scalar function on [a, b] to interval width tol."""
    a, b = min(a, b), max(a, b)
    h = b - a
    if h <= tol:
        return 0.5 * (a + b)
    n = int(math.ceil(math.log(tol / h) / math.log(_INV_PHI)))
    c = a + _INV_PHI2 * h
    d = a + _INV_PHI * h
    yc, yd = f(c), f(d)
    for _ in range(n - 1):
        if yc < yd:
            b, d, yd = d, c, yc
            h *= _INV_PHI
            c = a + _INV_PHI2 * h
            yc = f(c)
        else:
            a, c, yc = c, d, yd
            h *= _INV_PHI
            d = a + _INV_PHI * h
            yd = f(d)
    return 0.5 * (a + b) if yc < yd else 0.5 * (c + b)


def bisect(f, lo: float, hi: float, tol: float, max_iter: int = 200) -> float:
    """Root of a scalar function with a sign change on [lo, hi]."""
    flo = f(lo)
    fhi = f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise ValueError("bisect interval does not bracket a root")
    while hi - lo > tol and max_iter > 0:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if flo * fm < 0:
            hi = mid
        else:
            lo, flo = mid, fm
        max_iter -= 1
    return 0.5 * (lo + hi)


def bisect_many(f, lo: np.ndarray, hi: np.ndarray, tol: float, max_iter: int = 200) -> np.ndarray:
    """Lockstep bisection of f: (n,) -> (n,) with per-element brackets.

    Elements whose bracket has no sign change come back as NaN.
    """
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    flo = f(lo)
    fhi = f(hi)
    bad = ~(np.sign(flo) * np.sign(fhi) <= 0) | ~np.isfinite(flo) | ~np.isfinite(fhi)
    for _ in range(max_iter):
        if np.all((hi - lo) <= tol):
            break
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        take_hi = np.sign(flo) * np.sign(fm) <= 0
        hi = np.where(take_hi, mid, hi)
        new_lo = np.where(take_hi, lo, mid)
        flo = np.where(take_hi, flo, fm)
        lo = new_lo
    out = 0.5 * (lo + hi)
    out[bad] = np.nan
    return out
