"""Nearest-neighbor lattice paths and their per-path weights.

A path gamma = (gamma_0, ..., gamma_n) carries three weight ingredients on top
of the simple-random-walk reference measure P(gamma) = (2d)^{-n}:

    pull      exp(h . X(gamma)),  X(gamma) = gamma_n - gamma_0
    mass      exp(-lambda n)
    potential exp(-beta sum_{i=1..n} V(gamma_i))        (quenched)
              exp(-sum_x phi_beta(ell_gamma(x)))        (annealed)

The potential sum starts at i=1: gamma_0 is never counted.  That convention
makes E_env[quenched weight] equal the annealed weight exactly (sites are
independent, so the expectation factorizes into one mgf per visited site) and
makes weights multiplicative under concatenation at a shared site without
double counting.

All weights are returned in log domain; -inf encodes a visited trap.
"""

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .environment import Environment, PotentialDistribution
from .logspace import NEG_INF

Site = Tuple[int, ...]


@dataclass(frozen=True)
class WeightParams:
    """Inverse temperature beta, mass per step lam, pulling force h."""

    beta: float = 0.0
    lam: float = 0.0
    h: Tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be >= 0")
        if not all(math.isfinite(x) for x in (self.beta, self.lam, *self.h)):
            raise ValueError("weight parameters must be finite")
        object.__setattr__(self, "h", tuple(float(x) for x in self.h))

    @property
    def dim(self) -> int:
        return len(self.h)


class LatticePath:
    """Ordered site sequence with unit l1 steps; starts at the origin by default."""

    __slots__ = ("sites",)

    def __init__(self, sites: Sequence[Site], allow_shifted_start: bool = False):
        pts = tuple(tuple(int(c) for c in s) for s in sites)
        if not pts:
            raise ValueError("path needs at least one site")
        d = len(pts[0])
        for a, b in zip(pts, pts[1:]):
            if len(b) != d or sum(abs(x - y) for x, y in zip(a, b)) != 1:
                raise ValueError("consecutive sites must differ by one unit step")
        if any(c != 0 for c in pts[0]) and not allow_shifted_start:
            raise ValueError("gamma_0 must be the origin (use shifted() for other starts)")
        self.sites = pts

    @staticmethod
    def from_steps(steps: Sequence[Site], start: Site | None = None) -> "LatticePath":
        d = len(steps[0]) if steps else (len(start) if start else 1)
        pos = tuple(start) if start is not None else (0,) * d
        pts = [pos]
        for e in steps:
            pos = tuple(p + int(c) for p, c in zip(pos, e))
            pts.append(pos)
        return LatticePath(pts, allow_shifted_start=start is not None)

    def shifted(self, origin: Site) -> "LatticePath":
        """Same steps, started at `origin` instead."""
        base = self.sites[0]
        return LatticePath(
            [tuple(c - b + o for c, b, o in zip(s, base, origin)) for s in self.sites],
            allow_shifted_start=True)

    def __len__(self) -> int:
        return len(self.sites) - 1

    def __eq__(self, other) -> bool:
        return isinstance(other, LatticePath) and self.sites == other.sites

    def __hash__(self) -> int:
        return hash(self.sites)

    @property
    def dim(self) -> int:
        return len(self.sites[0])

    def reverse(self) -> "LatticePath":
        return LatticePath(self.sites[::-1], allow_shifted_start=True)

    def concat(self, other: "LatticePath") -> "LatticePath":
        """Concatenate other (translated to start at this path's endpoint)."""
        moved = other.shifted(self.sites[-1])
        return LatticePath(self.sites + moved.sites[1:], allow_shifted_start=True)

    def save(self, path: str) -> None:
        with open(path, "w", newline="\n") as fh:
            for s in self.sites:
                fh.write(" ".join(str(c) for c in s) + "\n")

    @staticmethod
    def load(path: str) -> "LatticePath":
        with open(path) as fh:
            pts = [tuple(int(x) for x in ln.split()) for ln in fh if ln.strip()]
        return LatticePath(pts, allow_shifted_start=True)


def extension(path: LatticePath) -> Tuple[int, ...]:
    """Spatial extension X(gamma) = gamma_n - gamma_0."""
    a, b = path.sites[0], path.sites[-1]
    return tuple(y - x for x, y in zip(a, b))


def local_times(path: LatticePath) -> Counter:
    """Visit counts over times 1..n (gamma_0 excluded; see module docstring)."""
    return Counter(path.sites[1:])


def log_reference(path: LatticePath) -> float:
    return -len(path) * math.log(2 * path.dim)


def log_quenched_weight(path: LatticePath, env: Environment,
                        p: WeightParams) -> float:
    """log q(gamma) = h.X - lam*n - beta*sum_{i>=1} V(gamma_i) + n log(1/2d).

    Returns -inf exactly when beta > 0 and a trap is visited at time >= 1.
    At beta = 0 the environment is invisible (0 * inf := 0 here).
    """
    n = len(path)
    x = extension(path)
    out = sum(hc * xc for hc, xc in zip(p.h, x)) - p.lam * n + n * math.log(1 / (2 * path.dim))
    if p.beta > 0:
        pot = 0.0
        for s in path.sites[1:]:
            v = env.value(s)
            if v == math.inf:
                return NEG_INF
            pot += v
        out -= p.beta * pot
    else:
        for s in path.sites[1:]:
            env.value(s)  # still an error to leave the box
    return out


def log_annealed_weight(path: LatticePath, dist: PotentialDistribution,
                        p: WeightParams) -> float:
    """log a(gamma) = h.X - lam*n - sum_x phi_beta(ell_gamma(x)) + n log(1/2d)."""
    n = len(path)
    x = extension(path)
    out = sum(hc * xc for hc, xc in zip(p.h, x)) - p.lam * n + n * math.log(1 / (2 * path.dim))
    if p.beta > 0:
        for _, ell in local_times(path).items():
            val = dist.phi_beta(p.beta, ell)
            if val == math.inf:
                return NEG_INF
            out -= val
    return out


def random_path(rng: np.random.Generator, d: int, n: int) -> LatticePath:
    """Simple-random-walk path of length n (test utility)."""
    axes = rng.integers(0, d, size=n)
    signs = rng.integers(0, 2, size=n) * 2 - 1
    steps = np.zeros((n, d), dtype=int)
    steps[np.arange(n), axes] = signs
    return LatticePath.from_steps([tuple(row) for row in steps])
