"""Exact partition functions and path measures.

Two independent computational routes coexist on purpose:

* brute-force enumeration over all (2d)^n step sequences (the universal
  oracle; vectorized over paths, chunked to bound memory), evaluating every
  path weight from its definition -- including the local-time interaction of
  the annealed weight, which no transfer recursion can see;

* a transfer ("dynamic programming") recursion for quenched weights, valid
  because the quenched weight is a product of per-step factors:
      Z_n(x) = sum_{|e|=1} Z_{n-1}(x-e) * (1/2d) e^{h.e - lam} * e^{-beta V(x)}.

Wherever both run they must agree to ~1e-10 relative; that equivalence is the
module's load-bearing test.  Conjugate (fixed-endpoint, summed-over-length)
partition functions are truncated geometric sums with an explicit reported
tail bound; the lam > 0 mass makes the truncation principled.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .environment import Environment, PotentialDistribution
from .logspace import NEG_INF, log_sum_exp
from .paths import LatticePath, WeightParams
from . import rng as rngmod

ENUM_CAPS = {1: 22, 2: 14, 3: 12}
_CHUNK = 1 << 20


class EnumerationCapExceeded(ValueError):
    pass


def unit_steps(d: int) -> np.ndarray:
    """Step order: +e1, -e1, +e2, -e2, ...; fixed, relied on by samplers."""
    out = np.zeros((2 * d, d), dtype=np.int64)
    for j in range(d):
        out[2 * j, j] = 1
        out[2 * j + 1, j] = -1
    return out


def _check_cap(d: int, n: int) -> None:
    cap = ENUM_CAPS.get(d)
    if cap is None or n > cap:
        raise EnumerationCapExceeded(f"enumeration cap exceeded: d={d}, n={n}")


def enumerate_positions(d: int, n: int, chunk: int = _CHUNK) -> Iterator[np.ndarray]:
    """Yield (N, n, d) position arrays (origin excluded) covering all (2d)^n paths."""
    steps = unit_steps(d)
    total = (2 * d) ** n
    base = 2 * d
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        codes = np.empty((len(idx), n), dtype=np.int8)
        rem = idx.copy()
        for k in range(n):
            codes[:, n - 1 - k] = (rem % base).astype(np.int8)
            rem //= base
        pos = np.cumsum(steps[codes], axis=1)
        yield pos


def _potential_on_box(env: Environment, lo: np.ndarray, shape: tuple) -> np.ndarray:
    """Environment values re-indexed onto an arbitrary box (must be inside env.box)."""
    for j, (blo, bhi) in enumerate(env.box):
        if lo[j] < blo or lo[j] + shape[j] - 1 > bhi:
            raise ValueError("requested box exceeds the environment's box")
    sl = tuple(slice(int(lo[j] - env.box[j][0]), int(lo[j] - env.box[j][0] + shape[j]))
               for j in range(env.dim))
    return env.value_array()[sl]


def _quenched_potential_sums(pos: np.ndarray, env: Environment) -> np.ndarray:
    """sum_i V(gamma_i) per path; inf if a trap is visited."""
    n, d = pos.shape[1], pos.shape[2]
    lo = np.array([-n] * d)
    shape = tuple(2 * n + 1 for _ in range(d))
    V = _potential_on_box(env, lo, shape)
    flat = np.zeros(pos.shape[0], dtype=float)
    mult = np.cumprod((1,) + shape[::-1][:-1])[::-1]
    idx = ((pos + n) * mult[None, None, :]).sum(axis=2)
    flat = V.reshape(-1)[idx].sum(axis=1)
    return flat


def _annealed_phi_sums(pos: np.ndarray, dist: PotentialDistribution,
                       beta: float) -> np.ndarray:
    """sum_x phi_beta(ell_gamma(x)) per path, via sorted run lengths."""
    N, n, d = pos.shape
    keys = np.zeros((N, n), dtype=np.int64)
    for j in range(d):
        keys |= (pos[:, :, j].astype(np.int64) + 32) << (16 * j)
    keys = np.sort(keys, axis=1)
    newrun = np.ones((N, n), dtype=bool)
    newrun[:, 1:] = keys[:, 1:] != keys[:, :-1]
    j_idx = np.broadcast_to(np.arange(n), (N, n))
    runstart = np.maximum.accumulate(np.where(newrun, j_idx, 0), axis=1)
    counts = j_idx - runstart + 1
    phi = np.array([0.0] + [dist.phi_beta(beta, k) for k in range(1, n + 1)])
    inc = phi[counts] - phi[counts - 1]
    return inc.sum(axis=1)


def _loop_moments(pos: np.ndarray) -> np.ndarray:
    """sum_x ell_gamma(x)^2 per path (= sum over visits of 2*visit_index - 1)."""
    N, n, d = pos.shape
    keys = np.zeros((N, n), dtype=np.int64)
    for j in range(d):
        keys |= (pos[:, :, j].astype(np.int64) + 32) << (16 * j)
    keys = np.sort(keys, axis=1)
    newrun = np.ones((N, n), dtype=bool)
    newrun[:, 1:] = keys[:, 1:] != keys[:, :-1]
    j_idx = np.broadcast_to(np.arange(n), (N, n))
    runstart = np.maximum.accumulate(np.where(newrun, j_idx, 0), axis=1)
    counts = j_idx - runstart + 1
    return (2 * counts - 1).sum(axis=1).astype(float)


def path_log_weights(pos: np.ndarray, kind: str, p: WeightParams,
                     dist: Optional[PotentialDistribution] = None,
                     env: Optional[Environment] = None) -> np.ndarray:
    """Per-path log weights for an (N, n, d) position block."""
    N, n, d = pos.shape
    h = np.asarray(p.h, dtype=float)
    out = pos[:, -1, :] @ h - p.lam * n - n * math.log(2 * d)
    if p.beta > 0:
        if kind == "quenched":
            pot = _quenched_potential_sums(pos, env)
            with np.errstate(invalid="ignore"):
                out = np.where(np.isinf(pot), NEG_INF, out - p.beta * pot)
        elif kind == "annealed":
            out = out - _annealed_phi_sums(pos, dist, p.beta)
        else:
            raise ValueError(f"unknown kind {kind!r}")
    return out


@dataclass
class EnumerationResult:
    kind: str
    n: int
    log_value: float
    endpoint_logs: Dict[tuple, float]
    constraint: tuple = ("free",)


def enumerate_partition(kind: str, p: WeightParams, n: int, *,
                        dist: Optional[PotentialDistribution] = None,
                        env: Optional[Environment] = None,
                        constraint: tuple = ("free",)) -> EnumerationResult:
    """Exact fixed-length partition function by full path enumeration.

    constraint: ("free",) sums everything; ("endpoint", x) restricts to
    X(gamma)=x; ("slab", N, axis) sums over h.x = N, which is only defined
    for on-axis drifts (h.x then runs over integer multiples of |h|).
    """
    d = p.dim
    _check_cap(d, n)
    if kind == "quenched" and env is None:
        raise ValueError("quenched enumeration needs an environment")
    if kind == "annealed" and dist is None and p.beta > 0:
        raise ValueError("annealed enumeration needs a distribution")
    acc: Dict[tuple, float] = {}
    shift = None
    sums: Dict[tuple, float] = {}
    for pos in enumerate_positions(d, n):
        w = path_log_weights(pos, kind, p, dist=dist, env=env)
        if shift is None:
            shift = float(np.max(w))
            if shift == NEG_INF:
                shift = 0.0
        ends = pos[:, -1, :]
        keys = np.zeros(len(ends), dtype=np.int64)
        for j in range(d):
            keys |= (ends[:, j].astype(np.int64) + 32) << (16 * j)
        uniq, inv = np.unique(keys, return_inverse=True)
        with np.errstate(over="ignore"):
            contrib = np.bincount(inv, weights=np.exp(w - shift), minlength=len(uniq))
        for k_enc, c in zip(uniq, contrib):
            if c <= 0.0:
                continue
            site = tuple(int(((int(k_enc) >> (16 * j)) & 0xFFFF) - 32) for j in range(d))
            sums[site] = sums.get(site, 0.0) + float(c)
    endpoint_logs = {s: math.log(c) + shift for s, c in sums.items()}
    if constraint[0] == "free":
        vals = list(endpoint_logs.values())
        logv = log_sum_exp(vals)
    elif constraint[0] == "endpoint":
        logv = endpoint_logs.get(tuple(constraint[1]), NEG_INF)
    elif constraint[0] == "slab":
        target, axis = int(constraint[1]), int(constraint[2])
        if any(c != 0.0 for j, c in enumerate(p.h) if j != axis):
            raise ValueError("slab sums are defined for on-axis drifts only")
        vals = [v for s, v in endpoint_logs.items() if s[axis] == target]
        logv = log_sum_exp(vals)
    else:
        raise ValueError(f"unknown constraint {constraint!r}")
    return EnumerationResult(kind, n, logv, endpoint_logs, constraint)


# ---------------------------------------------------------------------------
# transfer recursion (quenched DP; also the beta=0 annealed table)
# ---------------------------------------------------------------------------

def _shift(a: np.ndarray, vec, fill: float = NEG_INF) -> np.ndarray:
    """out[x] = a[x - vec] with absorbing fill outside."""
    out = np.full_like(a, fill)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    for ax, s in enumerate(vec):
        if s > 0:
            dst[ax], src[ax] = slice(s, None), slice(None, -s)
        elif s < 0:
            dst[ax], src[ax] = slice(None, s), slice(-s, None)
    out[tuple(dst)] = a[tuple(src)]
    return out


@dataclass
class PartitionTable:
    """Log-domain table of Z_n(x) on a box, for n = 0..nmax.

    kind is 'quenched' (environment-backed) or 'annealed' (beta=0 / zero
    potential, where the two coincide).  Entries at sites on the box boundary
    are truncated by the absorbing boundary and flagged as such.
    """

    kind: str
    params: WeightParams
    box: tuple
    nmax: int
    logs: list            # logs[n]: ndarray over the box
    env: Optional[Environment] = None

    @property
    def dim(self) -> int:
        return len(self.box)

    def _index(self, x) -> tuple:
        idx = []
        for c, (lo, hi) in zip(x, self.box):
            if not lo <= int(c) <= hi:
                raise KeyError(f"site {tuple(x)} outside table box {self.box}")
            idx.append(int(c) - lo)
        return tuple(idx)

    def log_value(self, x, n: int) -> float:
        return float(self.logs[n][self._index(x)])

    def endpoint_array(self, n: int) -> np.ndarray:
        return self.logs[n]

    def log_fixed_length_total(self, n: int) -> float:
        return log_sum_exp(self.logs[n].reshape(-1))

    def is_boundary(self, x) -> bool:
        return any(int(c) in (lo, hi) for c, (lo, hi) in zip(x, self.box))

    def boundary_log_mass(self, n: int) -> float:
        a = self.logs[n]
        if a.ndim == 0:
            return NEG_INF
        mask = np.zeros(a.shape, dtype=bool)
        for ax in range(a.ndim):
            sl = [slice(None)] * a.ndim
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return log_sum_exp(a[mask].reshape(-1))

    def sites(self) -> Iterator[tuple]:
        ranges = [range(lo, hi + 1) for lo, hi in self.box]
        import itertools
        return itertools.product(*ranges)


def _default_box(d: int, nmax: int) -> tuple:
    r = nmax + 2
    return tuple((-r, r) for _ in range(d))


def quenched_dp(env: Optional[Environment], p: WeightParams, nmax: int,
                box: Optional[tuple] = None) -> PartitionTable:
    """Fixed-length quenched partition table by the per-step transfer recursion.

    env=None (or beta=0) gives the zero-potential table, which is exactly the
    annealed table at beta=0.  The default box radius nmax+2 makes the
    absorbing boundary irrelevant: length-n paths cannot exit radius n.
    """
    d = p.dim
    box = tuple(box) if box is not None else _default_box(d, nmax)
    shape = tuple(hi - lo + 1 for lo, hi in box)
    lo = np.array([b[0] for b in box])
    origin = tuple(-b[0] for b in box)
    if any(not (b[0] <= 0 <= b[1]) for b in box):
        raise ValueError("DP box must contain the origin")
    site_term = np.zeros(shape)
    if env is not None and p.beta > 0:
        V = _potential_on_box(env, lo, shape)
        with np.errstate(invalid="ignore"):
            site_term = np.where(np.isinf(V), NEG_INF, -p.beta * V)
    steps = unit_steps(d)
    h = np.asarray(p.h, dtype=float)
    step_pull = steps @ h
    const = -p.lam - math.log(2 * d)
    logs = [np.full(shape, NEG_INF)]
    logs[0][origin] = 0.0
    cur = logs[0]
    for _ in range(nmax):
        stack = [_shift(cur, steps[k]) + step_pull[k] for k in range(2 * d)]
        nxt = np.logaddexp.reduce(stack) + const + site_term
        logs.append(nxt)
        cur = nxt
    kind = "quenched" if (env is not None and p.beta > 0) else "annealed"
    return PartitionTable(kind, p, box, nmax, logs, env=env)


@dataclass
class ConjugateValue:
    """Truncated conjugate partition function sum_{n<=n_star} Z_n(x)."""

    x: tuple
    log_value: float
    n_star: int
    log_tail_bound: float
    per_length: dict = field(default_factory=dict)


def conjugate_partition(p: WeightParams, x, *, env: Optional[Environment] = None,
                        tol: float = 1e-12,
                        box: Optional[tuple] = None) -> ConjugateValue:
    """Q_lambda(x) (or A_lambda(x) at beta=0) = sum over all lengths.

    Requires lam > 0 strictly: each length-n slab weighs at most
    e^{h.x} e^{-lam n}, so truncating at n* = ceil(-log(tol)/lam) + |x|_1
    leaves a tail below e^{h.x} e^{-lam n*}/(1 - e^{-lam}), which is reported.
    """
    if p.lam <= 0:
        raise ValueError("conjugate sums need lam > 0")
    d = p.dim
    x = tuple(int(c) for c in x)
    l1 = sum(abs(c) for c in x)
    n_star = int(math.ceil(-math.log(tol) / p.lam)) + l1
    if box is None:
        r = (n_star - l1) // 2 + 2
        box = tuple((min(0, c) - r, max(0, c) + r) for c in x)
    table = quenched_dp(env, p, n_star, box=box)
    vals = [table.log_value(x, n) for n in range(n_star + 1)]
    hx = float(np.dot(np.asarray(p.h), np.asarray(x, dtype=float)))
    log_tail = hx - p.lam * (n_star + 1) - math.log1p(-math.exp(-p.lam)) + math.log1p(0)
    per_length = {n: v for n, v in enumerate(vals) if v > NEG_INF}
    return ConjugateValue(x, log_sum_exp(vals), n_star, log_tail, per_length)


# ---------------------------------------------------------------------------
# exact moments and samplers
# ---------------------------------------------------------------------------

@dataclass
class EnsembleStats:
    n: int
    kind: str
    mean_extension: np.ndarray
    covariance: np.ndarray
    char_fn: dict
    loop_moment: Optional[float]
    log_partition: float


def ensemble_stats(kind: str, p: WeightParams, n: int, *,
                   dist: Optional[PotentialDistribution] = None,
                   env: Optional[Environment] = None,
                   alpha_grid: Sequence = (),
                   want_loop: bool = False,
                   table: Optional[PartitionTable] = None) -> EnsembleStats:
    """Exact expectations under the fixed-length path measure.

    Annealed statistics (and any local-time observable such as the loop
    moment) are enumeration-backed; quenched extension moments may instead be
    read off a DP table, which scales to much larger n.
    """
    d = p.dim
    use_dp = kind == "quenched" and not want_loop
    if table is not None and not want_loop:
        use_dp = True
    if use_dp:
        if table is None:
            table = quenched_dp(env, p, n)
        a = table.endpoint_array(n)
        logz = table.log_fixed_length_total(n)
        w = np.exp(a - logz)
        grids = np.meshgrid(*[np.arange(lo, hi + 1) for lo, hi in table.box],
                            indexing="ij")
        xs = np.stack([g.reshape(-1) for g in grids], axis=1).astype(float)
        pw = w.reshape(-1)
        mean = xs.T @ pw
        cov = (xs * pw[:, None]).T @ xs - np.outer(mean, mean)
        char = {}
        for alpha in alpha_grid:
            al = np.asarray(alpha, dtype=float)
            char[tuple(al)] = complex(np.sum(pw * np.exp(1j * (xs @ al))))
        return EnsembleStats(n, kind, mean, cov, char, None, logz)
    _check_cap(d, n)
    tot = 0.0
    shift = None
    s1 = np.zeros(d)
    s2 = np.zeros((d, d))
    loop = 0.0
    char_acc = {tuple(np.atleast_1d(np.asarray(a, dtype=float))): 0.0 + 0.0j
                for a in alpha_grid}
    for pos in enumerate_positions(d, n):
        w = path_log_weights(pos, kind, p, dist=dist, env=env)
        if shift is None:
            shift = float(np.max(w))
            if shift == NEG_INF:
                shift = 0.0
        ew = np.exp(w - shift)
        ends = pos[:, -1, :].astype(float)
        tot += float(ew.sum())
        s1 += ends.T @ ew
        s2 += (ends * ew[:, None]).T @ ends
        if want_loop:
            loop += float(np.dot(_loop_moments(pos), ew))
        for key in char_acc:
            al = np.asarray(key)
            char_acc[key] += complex(np.sum(ew * np.exp(1j * (ends @ al))))
    mean = s1 / tot
    cov = s2 / tot - np.outer(mean, mean)
    char = {k: v / tot for k, v in char_acc.items()}
    return EnsembleStats(n, kind, mean, cov, char,
                         loop / tot if want_loop else None,
                         math.log(tot) + shift)


def sample_paths(kind: str, p: WeightParams, n: int, count: int, seed: int, *,
                 dist: Optional[PotentialDistribution] = None,
                 env: Optional[Environment] = None,
                 table: Optional[PartitionTable] = None) -> list:
    """Exact i.i.d. samples from the fixed-length path measure.

    quenched: backward conditional sampling through the DP table.
    annealed, beta=0: i.i.d. tilted steps (the measure factorizes).
    annealed, beta>0: enumeration-weighted sampling (small n only).
    """
    gen = rngmod.generator(seed, "sample_paths", kind, n, count)
    d = p.dim
    if kind == "annealed" and p.beta == 0.0:
        h = np.asarray(p.h, dtype=float)
        steps = unit_steps(d)
        logits = steps @ h
        probs = np.exp(logits - log_sum_exp(logits))
        codes = gen.choice(2 * d, size=(count, n), p=probs)
        return [LatticePath.from_steps([tuple(s) for s in unit_steps(d)[c]])
                for c in codes]
    if kind == "annealed":
        _check_cap(d, n)
        if (2 * d) ** n > _CHUNK:
            raise ValueError("annealed beta>0 sampling limited to (2d)^n <= 2^20")
        pos = next(enumerate_positions(d, n, chunk=(2 * d) ** n))
        w = path_log_weights(pos, kind, p, dist=dist, env=env)
        pr = np.exp(w - log_sum_exp(w))
        pr = pr / pr.sum()
        idx = gen.choice(len(pr), size=count, p=pr)
        steps = unit_steps(d)
        out = []
        for i in idx:
            pts = np.vstack([np.zeros((1, d), dtype=int), pos[i]])
            out.append(LatticePath([tuple(r) for r in pts]))
        return out
    if kind != "quenched":
        raise ValueError(f"unknown kind {kind!r}")
    if table is None:
        table = quenched_dp(env, p, n)
    # endpoint draw, then walk the recursion backwards with Gumbel-max picks
    a = table.endpoint_array(n).reshape(-1)
    logz = log_sum_exp(a)
    pr = np.exp(a - logz)
    pr = np.where(np.isfinite(pr), pr, 0.0)
    pr = pr / pr.sum()
    flat_idx = gen.choice(len(pr), size=count, p=pr)
    shape = table.endpoint_array(n).shape
    cur = np.stack(np.unravel_index(flat_idx, shape), axis=1)
    lo = np.array([b[0] for b in table.box])
    cur = cur + lo[None, :]
    steps = unit_steps(d)
    h = np.asarray(p.h, dtype=float)
    step_pull = steps @ h
    positions = np.empty((count, n + 1, d), dtype=np.int64)
    positions[:, n, :] = cur
    for k in range(n, 0, -1):
        prev = table.endpoint_array(k - 1)
        cand = np.empty((count, 2 * d))
        for s_i in range(2 * d):
            y = cur - steps[s_i]
            inside = np.all((y >= lo) & (y <= lo + np.array(prev.shape) - 1), axis=1)
            vals = np.full(count, NEG_INF)
            yy = y[inside] - lo
            if yy.size:
                vals[inside] = prev[tuple(yy.T)]
            cand[:, s_i] = vals + step_pull[s_i]
        g = gen.gumbel(size=cand.shape)
        with np.errstate(invalid="ignore"):
            pick = np.argmax(np.where(np.isfinite(cand), cand + g, NEG_INF), axis=1)
        cur = cur - steps[pick]
        positions[:, k - 1, :] = cur
    out = []
    for i in range(count):
        pts = positions[i] - positions[i, 0]
        out.append(LatticePath([tuple(r) for r in pts]))
    return out
