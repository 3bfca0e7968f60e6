"""Directional norms a_lambda and their polar duals.

Two evaluators back the cone/surcharge machinery:

* FreeNorm -- the beta=0 norm in closed form.  For the killed simple random
  walk the decay rate of the conjugate partition function solves a one-line
  tilt condition: a_lambda(y) = max{ h.y : (1/d) sum_i cosh(h_i) = e^lambda },
  and the maximizer satisfies sinh(h_i) = s*y_i for a scalar s, so evaluating
  the norm is a scalar root-find.  This is the exact oracle for every beta=0
  test and the frozen geometry used by beta>0 cone experiments.

* PolygonNorm -- gauge of the convex hull of measured fan points x_k/a_k
  (d=2), the estimator-backed evaluator.  It upper-bounds the true norm and
  refines with fan density.

Both expose value(y), dual(h), and dual_point(direction) with the same
meaning; anything that consumes "a norm" takes either.
"""

import math
from typing import Sequence, Tuple

import numpy as np


def fan_directions(d: int, height: int = 2) -> list:
    """All lattice directions with coprime coordinates and max |coord| <= height.

    d=2, height=2 gives the 16-direction fan used by default.
    """
    if d == 1:
        return [(1,), (-1,)]
    rng = range(-height, height + 1)
    out = set()
    def gcd_all(t):
        g = 0
        for c in t:
            g = math.gcd(g, abs(c))
        return g
    import itertools
    for t in itertools.product(rng, repeat=d):
        if any(t) and gcd_all(t) == 1:
            out.add(t)
    return sorted(out)


class FreeNorm:
    """Exact beta=0 norm a_lambda on Z^d for lambda > 0."""

    def __init__(self, lam: float, d: int):
        if lam <= 0:
            raise ValueError("FreeNorm needs lambda > 0 (ball degenerates at 0)")
        self.lam = float(lam)
        self.d = int(d)
        self._target = d * math.exp(lam)

    def value(self, y) -> float:
        y = np.asarray(y, dtype=float)
        if not np.any(y):
            return 0.0
        # solve sum_i sqrt(1 + s^2 y_i^2) = d e^lambda for s >= 0
        lo, hi = 0.0, 1.0
        def f(s):
            return float(np.sum(np.sqrt(1.0 + (s * y) ** 2))) - self._target
        while f(hi) < 0:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) < 0:
                lo = mid
            else:
                hi = mid
        s = 0.5 * (lo + hi)
        h = np.arcsinh(s * y)
        return float(np.dot(h, y))

    def dual(self, h) -> float:
        """Polar norm a*_lambda(h) = inf{t>0 : LogMgf(h/t) <= lambda}."""
        h = np.asarray(h, dtype=float)
        if not np.any(h):
            return 0.0
        def g(t):
            return float(np.log(np.sum(np.cosh(h / t)) / self.d)) - self.lam
        lo, hi = 1e-12, 1.0
        while g(hi) > 0:
            hi *= 2.0
        while g(lo) < 0 and lo > 1e-300:
            lo *= 0.5
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if g(mid) > 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def dual_point(self, direction) -> Tuple[float, ...]:
        """The h on the dual unit sphere with h.direction = a_lambda(direction)."""
        y = np.asarray(direction, dtype=float)
        if not np.any(y):
            raise ValueError("direction must be nonzero")
        lo, hi = 0.0, 1.0
        def f(s):
            return float(np.sum(np.sqrt(1.0 + (s * y) ** 2))) - self._target
        while f(hi) < 0:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) < 0:
                lo = mid
            else:
                hi = mid
        return tuple(float(v) for v in np.arcsinh(0.5 * (lo + hi) * y))


def axis_dual_height(lam: float, d: int) -> float:
    """Closed form a_lambda(e1) = arccosh(d e^lambda - (d-1)) for the free walk."""
    return math.acosh(d * math.exp(lam) - (d - 1))


class PolygonNorm:
    """d=2 norm from measured fan values: gauge of conv{x_k / a_k}."""

    def __init__(self, fan: Sequence[Tuple[int, int]], values: Sequence[float]):
        pts = []
        for x, a in zip(fan, values):
            if a <= 0 or not math.isfinite(a):
                raise ValueError("fan values must be positive finite")
            v = np.asarray(x, dtype=float)
            pts.append(v / a)
            pts.append(-v / a)
        pts = np.unique(np.round(np.array(pts), 15), axis=0)
        order = np.argsort(np.arctan2(pts[:, 1], pts[:, 0]))
        self.vertices = pts[order]
        # keep only hull vertices (drop points inside the polygon)
        self.vertices = self._hull(self.vertices)

    @staticmethod
    def _hull(pts: np.ndarray) -> np.ndarray:
        pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
        def half(points):
            out = []
            for p in points:
                while len(out) >= 2 and np.cross(out[-1] - out[-2], p - out[-2]) <= 0:
                    out.pop()
                out.append(p)
            return out
        lower = half(pts)
        upper = half(pts[::-1])
        return np.array(lower[:-1] + upper[:-1])

    def value(self, y) -> float:
        """Gauge: smallest t with y/t inside the hull (max over edge functionals)."""
        y = np.asarray(y, dtype=float)
        if not np.any(y):
            return 0.0
        verts = self.vertices
        best = 0.0
        m = len(verts)
        for i in range(m):
            a, b = verts[i], verts[(i + 1) % m]
            n = np.array([a[1] - b[1], b[0] - a[0]])  # outward-ish edge normal
            c = float(np.dot(n, a))
            if c < 0:
                n, c = -n, -c
            if c > 1e-14:
                best = max(best, float(np.dot(n, y)) / c)
        return best

    def dual(self, h) -> float:
        h = np.asarray(h, dtype=float)
        if not np.any(h):
            return 0.0
        return float(max(np.dot(self.vertices, h).max(), 0.0))

    def dual_point(self, direction):
        raise NotImplementedError("estimated norms do not expose exact dual points")


def polar_norm(norm, fan: Sequence[tuple], h) -> float:
    """Lower bound max_{x in fan} h.x / a(x) to the polar norm."""
    if not fan:
        raise ValueError("empty direction fan")
    h = np.asarray(h, dtype=float)
    if not np.any(h):
        return 0.0
    best = 0.0
    for x in fan:
        a = norm.value(x)
        if a <= 0:
            raise ValueError(f"norm not positive at {x}")
        best = max(best, float(np.dot(h, x)) / a)
    return best
