"""Cones, cone points, K-skeletons, surcharges, irreducible decomposition.

Forward cone at drift h on the dual unit sphere (a*_lam(h) = 1):

    Y> = { y != 0 : s(y) < delta * a_lam(y) },   s(y) = a_lam(y) - h.y,

backward cone Y< = -Y>.  Index k is a cone point of gamma when every other
site of the path lies in (gamma_k + Y>) u (gamma_k + Y<); a repeat visit to
gamma_k itself disqualifies k (zero displacement belongs to neither cone),
which is what makes weights factorize at cone points: the two halves share
only the splice site.

For axis-aligned h on Z^2 with delta < 1, purely transverse displacements
(0, w) sit in neither cone, so a path can cross the splice column only at the
splice site itself; cone points therefore split the path time-monotonically
and the decomposition machinery is exact.  Off-axis drifts are supported, but
the exactness arguments (and the tests) are pinned to lattice-adapted
directions.

The K-skeleton follows a greedy first-exit construction: v_i is the last site
inside the closed ball K*U(u_{i-1}) before the first exit, and u_i is the
first site from which the path never re-enters any ball claimed so far.
Pieces are confined to pairwise disjoint fresh regions G_i (so annealed
weights factorize exactly over pieces), hairs carry the remainder, and
re-assembling pieces and hairs in order restores the path bit for bit.
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .norms import FreeNorm
from .paths import LatticePath

Site = Tuple[int, ...]


@dataclass
class ConeSpec:
    """Aperture delta in (0,1), drift h with a*(h)=1, and the norm evaluator."""

    h: Tuple[float, ...]
    delta: float
    norm: object

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("cone aperture delta must lie in (0,1)")
        self.h = tuple(float(x) for x in self.h)
        self._code: Dict[Site, int] = {}

    @property
    def dim(self) -> int:
        return len(self.h)

    def surcharge_vec(self, y) -> float:
        a = self.norm.value(y)
        return a - float(np.dot(self.h, np.asarray(y, dtype=float)))

    def code(self, y: Site) -> int:
        """0: neither cone, 1: forward, 2: backward, 3: zero displacement."""
        y = tuple(int(c) for c in y)
        got = self._code.get(y)
        if got is not None:
            return got
        if not any(y):
            c = 3
        else:
            a = self.norm.value(y)
            hy = float(np.dot(self.h, np.asarray(y, dtype=float)))
            if a - hy < self.delta * a:
                c = 1
            elif a + hy < self.delta * a:
                c = 2
            else:
                c = 0
        self._code[y] = c
        return c

    def in_forward(self, y) -> bool:
        return self.code(tuple(y)) == 1

    def in_backward(self, y) -> bool:
        return self.code(tuple(y)) == 2

    def code_table(self, radius: int) -> np.ndarray:
        """Dense code lookup over [-radius, radius]^d for vectorized counting."""
        import itertools
        d = self.dim
        out = np.zeros((2 * radius + 1,) * d, dtype=np.int8)
        for idx in itertools.product(range(2 * radius + 1), repeat=d):
            out[idx] = self.code(tuple(i - radius for i in idx))
        return out


def axis_cone(lam: float, d: int, delta: float, axis: int = 0) -> ConeSpec:
    """Exact beta=0 cone for the on-axis dual drift at mass lam."""
    norm = FreeNorm(lam, d)
    e = tuple(1 if j == axis else 0 for j in range(d))
    h = [0.0] * d
    h[axis] = norm.value(e)
    return ConeSpec(tuple(h), delta, norm)


def cone_points(path_or_sites, cone: ConeSpec) -> List[int]:
    """All indices k with every other site in gamma_k's forward/backward cones."""
    sites = path_or_sites.sites if isinstance(path_or_sites, LatticePath) else \
        tuple(tuple(s) for s in path_or_sites)
    n = len(sites)
    out = []
    for k in range(n):
        xk = sites[k]
        ok = True
        for t in range(n):
            if t == k:
                continue
            c = cone.code(tuple(a - b for a, b in zip(sites[t], xk)))
            if c != 1 and c != 2:
                ok = False
                break
        if ok:
            out.append(k)
    return out


def count_cone_points_block(pos: np.ndarray, cone: ConeSpec,
                            radius: int) -> np.ndarray:
    """#cone(gamma) for an (N, n, d) enumeration position block."""
    N, n, d = pos.shape
    table = cone.code_table(radius)
    full = np.concatenate([np.zeros((N, 1, d), dtype=pos.dtype), pos], axis=1)
    counts = np.zeros(N, dtype=np.int64)
    for k in range(n + 1):
        diff = full - full[:, k:k + 1, :]
        idx = tuple(diff[:, :, j] + radius for j in range(d))
        codes = table[idx]
        good = (codes == 1) | (codes == 2)
        good[:, k] = True
        counts += np.all(good, axis=1)
    return counts


# ---------------------------------------------------------------------------
# K-skeletons
# ---------------------------------------------------------------------------

@dataclass
class SkeletonDecomposition:
    """Pieces/hairs as closed index ranges into the path, plus the vertex chain.

    chain = (u_0, ..., u_{m-1}, x) is what the skeleton surcharge sums over
    (the final vertex is the path endpoint); exit points v_i sit on the inner
    boundary of ball i, so confined pieces live in disjoint fresh regions.
    """

    path: LatticePath
    K: float
    pieces: List[Tuple[int, int]]
    hairs: List[Tuple[int, int]]
    exits: List[Site]
    centers: List[Site]
    chain: List[Site]
    ended_inside: bool = False

    @property
    def m(self) -> int:
        return len(self.hairs)

    def reassemble(self) -> LatticePath:
        idx: List[int] = []
        segs: List[Tuple[int, int]] = []
        for i, pc in enumerate(self.pieces):
            segs.append(pc)
            if i < len(self.hairs):
                segs.append(self.hairs[i])
        for a, b in segs:
            start = a if not idx else a + 1
            idx.extend(range(start, b + 1))
        return LatticePath([self.path.sites[i] for i in idx],
                           allow_shifted_start=True)

    def piece_site_sets(self) -> List[set]:
        """Visited-at-times>=1 site sets per confined piece (piece start excluded)."""
        return [set(self.path.sites[a + 1:b + 1]) for a, b in self.pieces]

    def piece_paths(self) -> List[LatticePath]:
        return [LatticePath(self.path.sites[a:b + 1], allow_shifted_start=True)
                for a, b in self.pieces if b > a or (a, b) == self.pieces[0]]


def build_skeleton(path: LatticePath, K: float, norm) -> SkeletonDecomposition:
    """Greedy first-exit K-skeleton; reconstruction exactness is enforced."""
    if K <= 0:
        raise ValueError("scale K must be positive")
    sites = path.sites
    n = len(path)
    cache: Dict[Site, bool] = {}

    def in_ball(y: Site, c: Site) -> bool:
        key = tuple(a - b for a, b in zip(y, c))
        got = cache.get(key)
        if got is None:
            got = norm.value(key) <= K
            cache[key] = got
        return got

    pieces: List[Tuple[int, int]] = []
    hairs: List[Tuple[int, int]] = []
    exits: List[Site] = []
    centers: List[Site] = [sites[0]]
    t = 0
    ended_inside = False
    while True:
        center = sites[t]
        tau = None
        for s in range(t + 1, n + 1):
            if not in_ball(sites[s], center):
                tau = s
                break
        if tau is None:
            pieces.append((t, n))
            break
        pieces.append((t, tau - 1))
        exits.append(sites[tau - 1])
        last_in = tau - 1
        for s in range(tau, n + 1):
            if any(in_ball(sites[s], c) for c in centers):
                last_in = s
        sigma = last_in + 1
        if sigma > n:
            hairs.append((tau - 1, n))
            centers.append(sites[n])
            pieces.append((n, n))
            ended_inside = True
            break
        hairs.append((tau - 1, sigma))
        centers.append(sites[sigma])
        t = sigma
    m = len(hairs)
    chain = list(centers[:m]) + [sites[n]] if m else [sites[n]]
    skel = SkeletonDecomposition(path, K, pieces, hairs, exits, centers, chain,
                                 ended_inside)
    if skel.reassemble().sites != path.sites:
        raise AssertionError("skeleton reconstruction failed")
    return skel


def surcharge(obj, h, norm, tol: float = 1e-6) -> float:
    """Surcharge of a displacement vector or of a skeleton's vertex chain.

    h must lie on the dual unit sphere: a*(h) = 1 within tol.
    """
    dual = norm.dual(h)
    if abs(dual - 1.0) > tol:
        raise ValueError(f"h is not dual-normalized: a*(h) = {dual}")
    h = np.asarray(h, dtype=float)
    if isinstance(obj, SkeletonDecomposition):
        total = 0.0
        for a, b in zip(obj.chain, obj.chain[1:]):
            y = tuple(q - p for p, q in zip(a, b))
            total += norm.value(y) - float(np.dot(h, np.asarray(y, dtype=float)))
        return total
    y = np.asarray(obj, dtype=float)
    return norm.value(tuple(int(c) for c in y)) - float(np.dot(h, y))


# ---------------------------------------------------------------------------
# irreducible decomposition
# ---------------------------------------------------------------------------

@dataclass
class IrreducibleSplit:
    """Prefix/interior/suffix split of a path at its cone points.

    With r cone points (r >= 2) there are r-1 interior pieces; when r < 2 the
    whole path is returned as the prefix and flagged, never silently dropped.
    """

    prefix: LatticePath
    interior: List[LatticePath]
    suffix: Optional[LatticePath]
    cone_indices: List[int]
    flagged: bool = False

    def reassemble(self) -> LatticePath:
        out = self.prefix
        for pc in self.interior:
            out = LatticePath(out.sites + pc.sites[1:], allow_shifted_start=True)
        if self.suffix is not None:
            out = LatticePath(out.sites + self.suffix.sites[1:],
                              allow_shifted_start=True)
        return out


def irreducible_decompose(path: LatticePath, cone: ConeSpec) -> IrreducibleSplit:
    cps = cone_points(path, cone)
    sites = path.sites
    if len(cps) < 2:
        return IrreducibleSplit(path, [], None, cps, flagged=True)
    prefix = LatticePath(sites[:cps[0] + 1], allow_shifted_start=True)
    interior = [LatticePath(sites[a:b + 1], allow_shifted_start=True)
                for a, b in zip(cps, cps[1:])]
    suffix = LatticePath(sites[cps[-1]:], allow_shifted_start=True)
    return IrreducibleSplit(prefix, interior, suffix, cps)


# ---------------------------------------------------------------------------
# exact conjugate-ensemble enumeration (beta=0) and the surcharge tail test
# ---------------------------------------------------------------------------

def paths_to_dfs(x: Site, max_len: int) -> Iterator[Tuple[Site, ...]]:
    """All nearest-neighbor paths 0 -> x with |gamma| <= max_len (pruned DFS)."""
    d = len(x)
    steps = []
    for j in range(d):
        e = [0] * d
        e[j] = 1
        steps.append(tuple(e))
        e2 = [0] * d
        e2[j] = -1
        steps.append(tuple(e2))
    x = tuple(int(c) for c in x)
    sites: List[Site] = [(0,) * d]
    iters = [iter(steps)]
    while iters:
        it = iters[-1]
        advanced = False
        for e in it:
            pos = sites[-1]
            child = tuple(p + q for p, q in zip(pos, e))
            depth = len(sites)  # length after the step
            slack = max_len - depth
            dist = sum(abs(a - b) for a, b in zip(child, x))
            if dist > slack:
                continue
            sites.append(child)
            if child == x:
                yield tuple(sites)
            if depth < max_len:
                iters.append(iter(steps))
            else:
                sites.pop()
                continue
            advanced = True
            break
        if not advanced:
            iters.pop()
            if sites:
                sites.pop()


def cramer_rate(v, d: int) -> float:
    """Chernoff rate I(v) = sup_h h.v - log((1/d) sum cosh h_i) for the SRW."""
    v = np.asarray(v, dtype=float)
    l1 = float(np.sum(np.abs(v)))
    if l1 >= 1.0:
        return math.inf if l1 > 1.0 else math.log(2 * d) * 0 + _corner_rate(v, d)
    if l1 == 0.0:
        return 0.0
    lo, hi = float(d), float(d)
    while np.sum(np.sqrt(1.0 + (v * hi) ** 2)) > hi:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sum(np.sqrt(1.0 + (v * mid) ** 2)) > mid:
            lo = mid
        else:
            hi = mid
    S = 0.5 * (lo + hi)
    h = np.arcsinh(v * S)
    return float(np.dot(h, v) - math.log(S / d))


def _corner_rate(v, d: int) -> float:
    # |v|_1 = 1: single admissible step mix; rate = log(2d) - entropy of mix
    v = np.abs(np.asarray(v, dtype=float))
    ent = -float(np.sum([p * math.log(p) for p in v if p > 0]))
    return math.log(2 * d) - ent


def conjugate_tail_bound(x: Site, max_len: int, lam: float) -> float:
    """Upper bound on sum_{n > max_len} e^{-lam n} P_n(0 -> x), via Chernoff."""
    d = len(x)
    l1 = sum(abs(c) for c in x)
    total = 0.0
    n = max_len + 1
    if (n - l1) % 2 == 1:
        n += 1
    while True:
        v = np.asarray(x, dtype=float) / n
        term = math.exp(-(lam + cramer_rate(v, d)) * n)
        total += term
        if term < 1e-22 * max(total, 1e-300) or n > 400 * max(l1, 1):
            break
        n += 2
    return total


def surcharge_tail_test(lam: float, d: int, sizes, eps: float, K: float,
                        delta: float = 0.45, extra_len: int = 6,
                        axis: int = 0) -> dict:
    """Exceedance of {skeleton surcharge > 2 eps |x|} under the conjugate
    ensemble at beta=0, dual-aligned on-axis drift, by exact enumeration.

    Paths are enumerated up to |x|_1 + extra_len steps; the neglected tail is
    bounded by Chernoff and folded conservatively into the exceedance upper
    bound.  No sampling error.
    """
    cone = axis_cone(lam, d, delta, axis)
    norm = cone.norm
    h = cone.h
    report = {"lam": lam, "eps": eps, "K": K, "sizes": {}}
    for size in sizes:
        x = tuple(size if j == axis else 0 for j in range(d))
        max_len = size + extra_len
        threshold = 2.0 * eps * abs(size)
        den = 0.0
        num = 0.0
        count = 0
        for sites in paths_to_dfs(x, max_len):
            n = len(sites) - 1
            w = math.exp(-lam * n) * (2 * d) ** (-float(n))
            pth = LatticePath(sites, allow_shifted_start=True)
            skel = build_skeleton(pth, K, norm)
            s = surcharge(skel, h, norm)
            den += w
            count += 1
            if s > threshold:
                num += w
        tail = conjugate_tail_bound(x, max_len, lam)
        exceed = num / den
        exceed_upper = (num + tail) / den
        bound = math.exp(-eps * abs(size))
        report["sizes"][size] = {
            "paths": count, "exceedance": exceed, "exceedance_upper": exceed_upper,
            "tail_fraction_bound": tail / den, "bound": bound,
            "ok": exceed_upper <= bound,
        }
    report["ok"] = all(v["ok"] for v in report["sizes"].values())
    return report


# ---------------------------------------------------------------------------
# cone-point density under the fixed-length measures
# ---------------------------------------------------------------------------

def _tilted_step_probs(h, d: int) -> np.ndarray:
    from .ensembles import unit_steps
    logits = unit_steps(d) @ np.asarray(h, dtype=float)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def forward_survival(cone: ConeSpec, h_measure, n: int) -> np.ndarray:
    """S[k] = P(tilted walk stays strictly inside Y> for times 1..k), k=0..n."""
    from .ensembles import unit_steps
    d = cone.dim
    probs = _tilted_step_probs(h_measure, d)
    steps = [tuple(r) for r in unit_steps(d)]
    cur: Dict[Site, float] = {(0,) * d: 1.0}
    out = [1.0]
    for _ in range(n):
        nxt: Dict[Site, float] = {}
        for y, w in cur.items():
            for e, pe in zip(steps, probs):
                z = tuple(a + b for a, b in zip(y, e))
                if cone.code(z) == 1:
                    nxt[z] = nxt.get(z, 0.0) + w * pe
        cur = nxt
        out.append(math.fsum(cur.values()))
    return np.array(out)


def expected_cone_density(cone: ConeSpec, h_measure, n: int) -> float:
    """Exact E[#cone]/n under the beta=0 fixed-length measure (on-axis h).

    Uses the time-resolved splitting: k is a cone point iff the reversed
    pre-k walk and the post-k walk each stay strictly inside Y>, and the two
    halves are independent; both halves have the same step law.
    """
    S = forward_survival(cone, h_measure, n)
    return float(sum(S[k] * S[n - k] for k in range(n + 1))) / n


def cone_density_test(cone: ConeSpec, h_measure, lambda_of_h: float,
                      n_grid, *, seed: int = 0, samples: int = 4000,
                      density_floor: float = 0.0) -> dict:
    """Cone-point density report under A_n^h at beta=0.

    Refuses non-ballistic drifts (lambda_of_h <= 0).  Exact mean density from
    the survival product; the empirical distribution of #cone/n from exact
    tilted-step samples.
    """
    if lambda_of_h <= 1e-9:
        raise ValueError("cone density requires a ballistic drift (Lambda(h) > 0)")
    from .ensembles import unit_steps
    d = cone.dim
    probs = _tilted_step_probs(h_measure, d)
    gen = np.random.default_rng(seed)
    steps = unit_steps(d)
    out = {"n": {}, "ballistic_lambda": lambda_of_h}
    for n in n_grid:
        mean_density = expected_cone_density(cone, h_measure, n)
        codes = gen.choice(2 * d, size=(samples, n), p=probs)
        pos = np.cumsum(steps[codes], axis=1)
        counts = count_cone_points_block(pos, cone, n)
        dens = counts / n
        out["n"][n] = {
            "exact_mean_density": mean_density,
            "sample_mean_density": float(dens.mean()),
            "sample_sd": float(dens.std(ddof=1)),
            "below_floor_fraction": float(np.mean(dens < density_floor)),
        }
    return out
