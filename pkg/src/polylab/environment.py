"""I.i.d. random potential fields on lattice boxes.

A potential is a nonnegative (possibly +inf, "trap") i.i.d. field V over the
sites of a finite box.  The catalog of distributions is restricted to families
with closed-form negative-exponential moments, because the annealed potential
phi_beta(ell) = -log E exp(-beta*ell*V) and the tilting cumulant
g(delta) = -log E exp(-delta*(V ^ 1)) must be exact, not quadrature-based.

Sampling is inverse-CDF on a per-site uniform stream (see polylab.rng), so a
field regenerates bit-identically from (dist, box, seed), sub-boxes agree with
the parent box, and an exponentially tilted field couples to the base field
site by site (delta=0 reproduces it exactly).
"""

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Tuple

import numpy as np

from .rng import site_uniforms

INF = float("inf")

Box = Tuple[Tuple[int, int], ...]


def _check_box(box) -> Box:
    box = tuple((int(lo), int(hi)) for lo, hi in box)
    if not box:
        raise ValueError("box must have at least one dimension")
    for lo, hi in box:
        if hi < lo:
            raise ValueError(f"empty box extent ({lo}, {hi})")
    return box


@dataclass(frozen=True)
class PotentialDistribution:
    """Site-potential law as a finite list of (value, prob) atoms, or uniform(0, b).

    kind: 'bernoulli' | 'finite-discrete' | 'uniform'.  For the continuous
    uniform law `atoms` is empty and `b` holds the upper endpoint.
    """

    kind: str
    atoms: Tuple[Tuple[float, float], ...] = ()
    b: float = 0.0
    degenerate_ok: bool = False
    traps_ok: bool = False

    def __post_init__(self):
        if self.kind not in ("bernoulli", "finite-discrete", "uniform"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "uniform":
            if not (self.b > 0) or not math.isfinite(self.b):
                raise ValueError("uniform(0, b) needs finite b > 0")
            return
        atoms = tuple(sorted(((float(v), float(p)) for v, p in self.atoms),
                             key=lambda a: a[0]))
        object.__setattr__(self, "atoms", atoms)
        total = sum(p for _, p in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"atom probabilities sum to {total}, not 1")
        for v, p in atoms:
            if p < 0:
                raise ValueError("negative atom probability")
            if v < 0:
                raise ValueError("potential values must be >= 0")
            if v == INF and not self.traps_ok:
                raise ValueError("atom at +inf requires traps_ok=True")
        support = [v for v, p in atoms if p > 0]
        if not self.degenerate_ok:
            if 0.0 not in support:
                raise ValueError("0 must lie in the support (pass degenerate_ok"
                                 " to waive, testing only)")
            if len(support) < 2:
                raise ValueError("distribution is a point mass (pass"
                                 " degenerate_ok to waive, testing only)")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def bernoulli(p: float, v1: float, **flags) -> "PotentialDistribution":
        """P(V=v1)=p, P(V=0)=1-p."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be a probability")
        return PotentialDistribution("bernoulli", ((0.0, 1.0 - p), (float(v1), p)),
                                     **flags)

    @staticmethod
    def finite(atoms: Sequence[Tuple[float, float]], **flags) -> "PotentialDistribution":
        return PotentialDistribution("finite-discrete", tuple(atoms), **flags)

    @staticmethod
    def uniform(b: float, **flags) -> "PotentialDistribution":
        return PotentialDistribution("uniform", (), float(b), **flags)

    # -- moments -----------------------------------------------------------

    def mgf_neg(self, s: float) -> float:
        """E[exp(-s V)] in closed form, for s >= 0; traps contribute 0 mass.

        At s=0 the answer is exactly 1 (the weight of an unvisited site),
        which for trap distributions differs from the s->0+ limit.
        """
        if s < 0:
            raise ValueError("mgf_neg requires s >= 0")
        if s == 0.0:
            return 1.0
        if self.kind == "uniform":
            return (1.0 - math.exp(-s * self.b)) / (s * self.b)
        acc = 0.0
        for v, p in self.atoms:
            if p == 0.0:
                continue
            acc += 0.0 if v == INF else p * math.exp(-s * v)
        return acc

    def phi_beta(self, beta: float, ell: int) -> float:
        """Annealed one-site potential -log E exp(-beta*ell*V); +inf if no mass."""
        if beta < 0 or ell < 0:
            raise ValueError("phi_beta requires beta >= 0 and ell >= 0")
        m = self.mgf_neg(beta * ell)
        return INF if m == 0.0 else -math.log(m)

    def tilt_g(self, delta: float) -> float:
        """Tilting cumulant g with exp(-g(delta)) = E exp(-delta*(V ^ 1)).

        V ^ 1 is bounded, so g is finite for every real delta (negative
        arguments are needed by the change-of-measure cost identity).
        """
        if self.kind == "uniform":
            d, b = delta, self.b
            if d == 0.0:
                return 0.0
            top = min(1.0, b)
            # integral of exp(-d v) dv / b over [0, top], plus the clipped tail
            acc = (1.0 - math.exp(-d * top)) / (d * b)
            if b > 1.0:
                acc += (1.0 - 1.0 / b) * math.exp(-d)
            return -math.log(acc)
        acc = 0.0
        for v, p in self.atoms:
            acc += p * math.exp(-delta * min(v, 1.0))
        return -math.log(acc)

    def mean_clipped(self) -> float:
        """E[V ^ 1], used by tilting sanity checks."""
        if self.kind == "uniform":
            top = min(1.0, self.b)
            return top * top / (2.0 * self.b) + (1.0 - top / self.b)
        return sum(p * min(v, 1.0) for v, p in self.atoms)

    # -- inverse-CDF sampling ---------------------------------------------

    def quantile(self, u: np.ndarray, delta: float = 0.0) -> np.ndarray:
        """Inverse CDF at u in [0,1), under the delta-tilted law.

        Tilted law: dP~/dP = exp(-delta*(V^1) + g(delta)).  Atoms keep their
        canonical (ascending-value, +inf last) order, so delta=0 reproduces
        the base draw bit-exactly and small tilts couple monotonically.
        """
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            if delta == 0.0:
                return u * self.b
            g = self.tilt_g(delta)
            # piecewise closed-form CDF inversion; density ~ exp(-delta*(v^1))/Z
            z = math.exp(-g)
            out = np.empty_like(u)
            top = min(1.0, self.b)
            w_head = (1.0 - math.exp(-delta * top)) / (delta * self.b * z)
            head = u < w_head
            # invert (1 - exp(-delta v)) / (delta b z) = u on [0, top]
            out[head] = -np.log(1.0 - u[head] * delta * self.b * z) / delta
            if self.b > 1.0:
                tail = ~head
                dens = math.exp(-delta) / (self.b * z)
                out[tail] = 1.0 + (u[tail] - w_head) / dens
            else:
                out[~head] = top
            return np.clip(out, 0.0, self.b)
        w = np.array([p for _, p in self.atoms], dtype=float)
        vals = np.array([v for v, _ in self.atoms], dtype=float)
        if delta != 0.0:
            w = w * np.exp(-delta * np.minimum(vals, 1.0))
            w = w / w.sum()
        edges = np.cumsum(w)
        idx = np.searchsorted(edges, u, side="right")
        idx = np.minimum(idx, len(vals) - 1)
        return vals[idx]

    def spec_string(self) -> str:
        if self.kind == "uniform":
            return f"uniform(0,{self.b!r})"
        inner = ";".join(f"{v!r}:{p!r}" for v, p in self.atoms)
        return f"{self.kind}[{inner}]"

    @staticmethod
    def from_spec_string(s: str) -> "PotentialDistribution":
        s = s.strip()
        if s.startswith("uniform(0,"):
            return PotentialDistribution.uniform(float(s[len("uniform(0,"):-1]))
        kind, rest = s.split("[", 1)
        pairs = []
        for chunk in rest[:-1].split(";"):
            v, p = chunk.split(":")
            pairs.append((float(v), float(p)))
        flags = dict(traps_ok=any(v == INF for v, _ in pairs), degenerate_ok=True)
        return PotentialDistribution(kind, tuple(pairs), **flags)


@dataclass(frozen=True)
class TiltSpec:
    """Exponential tilt of magnitude delta applied inside `region`."""

    delta: float
    region: Box

    def __post_init__(self):
        if not math.isfinite(self.delta):
            raise ValueError("tilt delta must be finite")
        object.__setattr__(self, "region", _check_box(self.region))


class Environment:
    """One realization of the potential on a box, immutable after construction."""

    def __init__(self, box, values: np.ndarray, dist: PotentialDistribution,
                 seed: int, tilt: TiltSpec | None = None):
        self.box = _check_box(box)
        self.dist = dist
        self.seed = int(seed)
        self.tilt = tilt
        shape = tuple(hi - lo + 1 for lo, hi in self.box)
        values = np.asarray(values, dtype=float).reshape(shape)
        values.setflags(write=False)
        self.values = values
        self._lo = np.array([lo for lo, _ in self.box], dtype=int)

    @property
    def dim(self) -> int:
        return len(self.box)

    def contains(self, site) -> bool:
        return all(lo <= int(c) <= hi for c, (lo, hi) in zip(site, self.box))

    def value(self, site) -> float:
        if not self.contains(site):
            raise KeyError(f"site {tuple(site)} outside box {self.box}")
        idx = tuple(int(c) - lo for c, (lo, _) in zip(site, self.box))
        return float(self.values[idx])

    def value_array(self) -> np.ndarray:
        """Read-only ndarray of the field; index i maps to coordinate lo+i."""
        return self.values

    def offset(self) -> np.ndarray:
        return self._lo.copy()

    def sites(self) -> Iterator[tuple]:
        ranges = [range(lo, hi + 1) for lo, hi in self.box]
        idx = np.indices([len(r) for r in ranges]).reshape(len(ranges), -1).T
        for row in idx:
            yield tuple(int(c + lo) for c, (lo, _) in zip(row, self.box))

    def save(self, path: str) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(f"dim={self.dim}\n")
            fh.write("box=" + ",".join(f"{lo}:{hi}" for lo, hi in self.box) + "\n")
            fh.write(f"dist={self.dist.spec_string()}\n")
            fh.write(f"seed={self.seed}\n")
            flat = self.values.reshape(-1)
            for site, v in zip(self.sites(), flat):
                sval = "inf" if v == INF else repr(float(v))
                fh.write(" ".join(str(c) for c in site) + f" {sval}\n")

    @staticmethod
    def load(path: str) -> "Environment":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        dim = int(lines[0].split("=", 1)[1])
        box = tuple(tuple(int(x) for x in part.split(":"))
                    for part in lines[1].split("=", 1)[1].split(","))
        dist = PotentialDistribution.from_spec_string(lines[2].split("=", 1)[1])
        seed = int(lines[3].split("=", 1)[1])
        shape = tuple(hi - lo + 1 for lo, hi in box)
        vals = np.empty(shape, dtype=float).reshape(-1)
        for i, ln in enumerate(lines[4:4 + vals.size]):
            parts = ln.split()
            assert len(parts) == dim + 1
            vals[i] = INF if parts[-1] == "inf" else float(parts[-1])
        return Environment(box, vals.reshape(shape), dist, seed)


def _site_grid(box: Box) -> np.ndarray:
    ranges = [np.arange(lo, hi + 1) for lo, hi in box]
    mesh = np.meshgrid(*ranges, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def sample_environment(dist: PotentialDistribution, box, seed: int) -> Environment:
    """Draw one i.i.d. field; deterministic in (dist, box, seed)."""
    box = _check_box(box)
    coords = _site_grid(box)
    u = site_uniforms(seed, coords)
    vals = dist.quantile(u)
    shape = tuple(hi - lo + 1 for lo, hi in box)
    return Environment(box, vals.reshape(shape), dist, seed)


def sample_tilted(dist: PotentialDistribution, tilt: TiltSpec, box,
                  seed: int) -> Environment:
    """Field with the tilted law inside tilt.region, base law outside.

    Product structure is preserved (per-site independent streams); the
    inverse-CDF coupling makes delta=0 reproduce sample_environment exactly.
    """
    box = _check_box(box)
    for (rlo, rhi), (blo, bhi) in zip(tilt.region, box):
        if rlo < blo or rhi > bhi:
            raise ValueError("tilt region must lie within the box")
    g = dist.tilt_g(tilt.delta)
    if not math.isfinite(g):
        raise ValueError("tilt produces non-finite cumulant")
    coords = _site_grid(box)
    u = site_uniforms(seed, coords)
    inside = np.ones(len(coords), dtype=bool)
    for j, (rlo, rhi) in enumerate(tilt.region):
        inside &= (coords[:, j] >= rlo) & (coords[:, j] <= rhi)
    vals = dist.quantile(u)
    if tilt.delta != 0.0:
        vals = np.where(inside, dist.quantile(u, delta=tilt.delta), vals)
    shape = tuple(hi - lo + 1 for lo, hi in box)
    return Environment(box, vals.reshape(shape), dist, seed, tilt=tilt)


# module-level conveniences mirroring the operation names used elsewhere
def mgf_neg(dist: PotentialDistribution, s: float) -> float:
    return dist.mgf_neg(s)


def phi_beta(dist: PotentialDistribution, beta: float, ell: int) -> float:
    return dist.phi_beta(beta, ell)


def tilt_g(dist: PotentialDistribution, delta: float) -> float:
    return dist.tilt_g(delta)
