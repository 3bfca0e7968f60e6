"""Irreducible weight tables, renewal identities, and the implicit step law.

Cone-confined partition functions t_{x,n} (all paths 0 -> x of length n whose
sites stay strictly inside Y> from the start and strictly inside x + Y< from
the end) and their irreducible refinement f_{x,n} (confined paths whose only
cone points are the endpoints) satisfy the exact convolution identity

    t_{x,n} = sum_{m=1..n} sum_y f_{y,m} t_{x-y,n-m},     t_{0,0} = 1,

because splitting a confined path at its first interior cone point is a
weight-preserving bijection (see polylab.coarse for why this is exact for
lattice-adapted drifts).  Two independent routes build the tables:

* enumerate-and-classify: depth-first enumeration of confined paths with
  incremental cone-point candidate tracking; defines t and f from their
  definitions (any beta, annealed or quenched);

* transfer recursion per endpoint ("diamond DP", valid whenever weights
  factorize per step: beta=0, or quenched at any beta) for t, after which f
  is recovered by triangular inversion of the identity.

Their agreement on the overlap IS the renewal-identity verification; the
inversion route then extends the tables far enough that the truncation
deficit 1 - sum f drops below 1e-6.

After drift/mass calibration (sum f = 1), f is the step law of an effective
directed random walk (Y, M); kappa = E[M], the speed is v = E[Y]/E[M], and
the implicit function mu(z) solving sum e^{-mu n + z.x} f_{x,n} = 1 carries
the LLN/CLT data: grad mu(0) = v and Hess mu(0) is the CLT covariance.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .coarse import ConeSpec
from .environment import Environment, PotentialDistribution
from .paths import WeightParams

Site = Tuple[int, ...]
TableDict = Dict[Tuple[Site, int], float]


def _l1(x) -> int:
    return sum(abs(int(c)) for c in x)


def _steps(d: int) -> List[Site]:
    out = []
    for j in range(d):
        e = [0] * d
        e[j] = 1
        out.append(tuple(e))
        e = [0] * d
        e[j] = -1
        out.append(tuple(e))
    return out


# ---------------------------------------------------------------------------
# route 1: enumerate and classify
# ---------------------------------------------------------------------------

def enumerate_confined(cone: ConeSpec, p: WeightParams, nmax: int, *,
                       kind: str = "annealed",
                       dist: Optional[PotentialDistribution] = None,
                       env: Optional[Environment] = None,
                       start: Optional[Site] = None) -> Tuple[TableDict, TableDict]:
    """Exact (t, f) tables from path enumeration with cone-point classification.

    Weights are relative displacements from `start` (default origin); the
    quenched potential reads the environment at absolute sites.
    """
    d = cone.dim
    steps = _steps(d)
    origin = (0,) * d
    start = tuple(int(c) for c in (start or origin))
    h = np.asarray(p.h, dtype=float)
    step_w = [math.exp(float(h @ np.array(e)) - p.lam) / (2 * d) for e in steps]
    phi = None
    if kind == "annealed" and p.beta > 0:
        phi = [0.0] + [dist.phi_beta(p.beta, k) for k in range(1, nmax + 1)]
    t_out: TableDict = {(origin, 0): 1.0}
    f_out: TableDict = {}
    sites: List[Site] = [origin]
    codes_hist: List[List[int]] = []
    counts: Dict[Site, int] = {}

    def visit(pos: Site, w: float, cand: List[int]) -> None:
        n = len(sites) - 1
        codes = [cone.code(tuple(a - b for a, b in zip(pos, s))) for s in sites]
        backward_ok = all(c == 1 for c in codes)
        new_cand = [k for k in cand if codes[k] in (1, 2)]
        if all(c in (1, 2) for c in codes):
            new_cand.append(n + 1)
        sites.append(pos)
        m = n + 1
        if backward_ok:
            t_out[(pos, m)] = t_out.get((pos, m), 0.0) + w
            if new_cand == [0, m]:
                f_out[(pos, m)] = f_out.get((pos, m), 0.0) + w
        if m < nmax:
            for e, we in zip(steps, step_w):
                child = tuple(a + b for a, b in zip(pos, e))
                if cone.code(child) != 1:
                    continue
                cw = w * we
                if kind == "quenched" and p.beta > 0:
                    v = env.value(tuple(a + b for a, b in zip(child, start)))
                    if v == math.inf:
                        continue
                    cw *= math.exp(-p.beta * v)
                elif phi is not None:
                    c0 = counts.get(child, 0)
                    counts[child] = c0 + 1
                    cw *= math.exp(-(phi[c0 + 1] - phi[c0]))
                visit(child, cw, new_cand)
                if phi is not None:
                    c0 = counts[child] - 1
                    if c0 == 0:
                        del counts[child]
                    else:
                        counts[child] = c0
        sites.pop()

    for e, we in zip(steps, step_w):
        child = e
        if cone.code(child) != 1:
            continue
        cw = we
        if kind == "quenched" and p.beta > 0:
            v = env.value(tuple(a + b for a, b in zip(child, start)))
            if v == math.inf:
                continue
            cw *= math.exp(-p.beta * v)
        elif phi is not None:
            counts[child] = 1
            cw *= math.exp(-phi[1])
        visit(child, cw, [0])
        if phi is not None:
            del counts[child]
    return t_out, f_out


# ---------------------------------------------------------------------------
# route 2: per-endpoint transfer recursion for t, then triangular inversion
# ---------------------------------------------------------------------------

def cone_sites(cone: ConeSpec, nmax: int) -> List[Site]:
    """Forward-cone sites reachable within nmax steps (BFS inside Y>)."""
    d = cone.dim
    steps = _steps(d)
    seen = set()
    frontier = [(0,) * d]
    for _ in range(nmax):
        nxt = []
        for y in frontier:
            for e in steps:
                z = tuple(a + b for a, b in zip(y, e))
                if z not in seen and cone.code(z) == 1 and _l1(z) <= nmax:
                    seen.add(z)
                    nxt.append(z)
        frontier = nxt
    return sorted(seen)


def confined_dp_t(cone: ConeSpec, p: WeightParams, nmax: int, *,
                  env: Optional[Environment] = None,
                  start: Optional[Site] = None) -> TableDict:
    """t_{x,n} for every cone endpoint by a masked transfer recursion.

    Valid whenever the weight is a product of per-step/per-arrival factors:
    beta=0 (the annealed table), or quenched weights at any beta.
    """
    d = cone.dim
    steps = _steps(d)
    origin = (0,) * d
    start = tuple(int(c) for c in (start or origin))
    h = np.asarray(p.h, dtype=float)
    step_w = np.array([math.exp(float(h @ np.array(e)) - p.lam) / (2 * d)
                       for e in steps])
    out: TableDict = {(origin, 0): 1.0}
    for x in cone_sites(cone, nmax):
        region = [y for y in cone_sites(cone, nmax)
                  if _l1(y) + _l1(tuple(a - b for a, b in zip(x, y))) <= nmax
                  and cone.code(tuple(a - b for a, b in zip(y, x))) == 2]
        idx = {y: i for i, y in enumerate(region)}
        nsite = len(region)
        site_factor = np.ones(nsite + 1)
        if env is not None and p.beta > 0:
            for y, i in idx.items():
                v = env.value(tuple(a + b for a, b in zip(y, start)))
                site_factor[i] = 0.0 if v == math.inf else math.exp(-p.beta * v)
            vx = env.value(tuple(a + b for a, b in zip(x, start)))
            site_factor[nsite] = 0.0 if vx == math.inf else math.exp(-p.beta * vx)
        # transitions: (source index or -1 for origin) -> target index; x is nsite
        trans = []
        for k, e in enumerate(steps):
            pairs = []
            for y, i in idx.items():
                src = tuple(a - b for a, b in zip(y, e))
                if src == origin:
                    pairs.append((-1, i))
                elif src in idx:
                    pairs.append((idx[src], i))
            src_x = tuple(a - b for a, b in zip(x, e))
            if src_x == origin:
                pairs.append((-1, nsite))
            elif src_x in idx:
                pairs.append((idx[src_x], nsite))
            trans.append(pairs)
        vec = np.zeros(nsite + 1)
        at_origin = 1.0
        lx = _l1(x)
        for n in range(1, nmax + 1):
            nxt = np.zeros(nsite + 1)
            for k, pairs in enumerate(trans):
                w = step_w[k]
                for src, tgt in pairs:
                    amt = at_origin if src == -1 else vec[src]
                    if amt != 0.0:
                        nxt[tgt] += amt * w
            at_origin = 0.0
            nxt *= site_factor
            if nxt[nsite] > 0.0 and n >= lx:
                out[(x, n)] = out.get((x, n), 0.0) + float(nxt[nsite])
            nxt[nsite] = 0.0
            vec = nxt
    return out


def invert_to_f(t: TableDict, nmax: int) -> TableDict:
    """Triangular inversion f = t - f*t of the renewal identity (annealed)."""
    by_n: Dict[int, Dict[Site, float]] = {}
    for (x, n), v in t.items():
        if 1 <= n <= nmax:
            by_n.setdefault(n, {})[x] = v
    f_by_n: Dict[int, Dict[Site, float]] = {}
    for n in range(1, nmax + 1):
        cur = dict(by_n.get(n, {}))
        for m in range(1, n):
            fm = f_by_n.get(m, {})
            tr = by_n.get(n - m, {})
            for y, fv in fm.items():
                for z, tv in tr.items():
                    x = tuple(a + b for a, b in zip(y, z))
                    if x in cur or True:
                        cur[x] = cur.get(x, 0.0) - fv * tv
        f_by_n[n] = {x: v for x, v in cur.items() if abs(v) > 1e-300}
    out: TableDict = {}
    for n, d_ in f_by_n.items():
        for x, v in d_.items():
            out[(x, n)] = v
    return out


def renewal_residual(t: TableDict, f: TableDict, nmax: int) -> float:
    """Max |t_{x,n} - sum f*t| over n <= nmax, relative to max t at each n."""
    worst = 0.0
    t_by_n: Dict[int, Dict[Site, float]] = {}
    for (x, n), v in t.items():
        t_by_n.setdefault(n, {})[x] = v
    f_by_n: Dict[int, Dict[Site, float]] = {}
    for (x, n), v in f.items():
        f_by_n.setdefault(n, {})[x] = v
    for n in range(1, nmax + 1):
        conv: Dict[Site, float] = {}
        for m in range(1, n + 1):
            for y, fv in f_by_n.get(m, {}).items():
                if m == n:
                    conv[y] = conv.get(y, 0.0) + fv
                    continue
                for z, tv in t_by_n.get(n - m, {}).items():
                    x = tuple(a + b for a, b in zip(y, z))
                    conv[x] = conv.get(x, 0.0) + fv * tv
        scale = max((abs(v) for v in t_by_n.get(n, {}).values()), default=1.0)
        scale = max(scale, 1e-300)
        keys = set(conv) | set(t_by_n.get(n, {}))
        for x in keys:
            r = abs(conv.get(x, 0.0) - t_by_n.get(n, {}).get(x, 0.0)) / scale
            worst = max(worst, r)
    return worst


# ---------------------------------------------------------------------------
# the table object
# ---------------------------------------------------------------------------

@dataclass
class IrreducibleTable:
    """Confined (t) and irreducible (f) weights on a frozen cone geometry.

    Reweighting by e^{dh.x - dlam n} is exact (geometry is frozen), which is
    how drift/mass calibration realizes h on the boundary of the dual ball.
    """

    kind: str
    params: WeightParams
    cone: ConeSpec
    nmax: int
    f: TableDict
    t: TableDict
    enum_nmax: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.cone.dim

    def f_totals(self) -> np.ndarray:
        out = np.zeros(self.nmax + 1)
        for (x, n), v in self.f.items():
            out[n] += v
        return out

    def t_totals(self) -> np.ndarray:
        out = np.zeros(self.nmax + 1)
        for (x, n), v in self.t.items():
            out[n] += v
        return out

    def total_f(self) -> float:
        return float(self.f_totals().sum())

    def deficit(self) -> float:
        return 1.0 - self.total_f()

    def reweight(self, dh=None, dlam: float = 0.0) -> "IrreducibleTable":
        d = self.dim
        dh = np.zeros(d) if dh is None else np.asarray(dh, dtype=float)
        def rw(tbl: TableDict) -> TableDict:
            out = {}
            for (x, n), v in tbl.items():
                out[(x, n)] = v * math.exp(float(dh @ np.array(x, dtype=float))
                                           - dlam * n)
            return out
        p = self.params
        newp = WeightParams(p.beta, p.lam + dlam,
                            tuple(a + b for a, b in zip(p.h, dh)))
        return IrreducibleTable(self.kind, newp, self.cone, self.nmax,
                                rw(self.f), rw(self.t), self.enum_nmax,
                                dict(self.meta))

    def step_law(self, tol: float = 1e-6) -> "EffectiveStepLaw":
        return EffectiveStepLaw.from_table(self, tol)

    def save(self, path: str) -> None:
        p = self.params
        with open(path, "w", newline="\n") as fh:
            fh.write(f"dim={self.dim}\n")
            fh.write(f"kind={self.kind}\n")
            fh.write(f"beta={p.beta!r}\nlam={p.lam!r}\n")
            fh.write("h=" + ",".join(repr(c) for c in p.h) + "\n")
            fh.write(f"delta={self.cone.delta!r}\nnmax={self.nmax}\n")
            keys = sorted(set(self.f) | set(self.t))
            for (x, n) in keys:
                lf = self.f.get((x, n))
                lt = self.t.get((x, n))
                def enc(v):
                    if v is None or v <= 0.0:
                        return "-inf"
                    return repr(math.log(v))
                fh.write(" ".join(str(c) for c in x) +
                         f" {n} {enc(lf)} {enc(lt)}\n")

    @staticmethod
    def load(path: str, cone: ConeSpec) -> "IrreducibleTable":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        hdr = dict(ln.split("=", 1) for ln in lines[:7])
        d = int(hdr["dim"])
        p = WeightParams(float(hdr["beta"]), float(hdr["lam"]),
                         tuple(float(c) for c in hdr["h"].split(",")))
        f: TableDict = {}
        t: TableDict = {}
        for ln in lines[7:]:
            parts = ln.split()
            x = tuple(int(c) for c in parts[:d])
            n = int(parts[d])
            lf, lt = parts[d + 1], parts[d + 2]
            if lf != "-inf":
                f[(x, n)] = math.exp(float(lf))
            if lt != "-inf":
                t[(x, n)] = math.exp(float(lt))
        return IrreducibleTable(hdr["kind"], p, cone, int(hdr["nmax"]), f, t)


def build_irreducible_tables(cone: ConeSpec, p: WeightParams, nmax: int, *,
                             kind: str = "annealed",
                             dist: Optional[PotentialDistribution] = None,
                             env: Optional[Environment] = None,
                             enum_nmax: Optional[int] = None,
                             cross_check_tol: float = 1e-10) -> IrreducibleTable:
    """Build (t, f) with both routes and verify them against each other.

    For beta=0 (or quenched) tables the transfer recursion carries t to nmax
    and f follows by inversion; the enumeration route, run to enum_nmax,
    must agree with both t and the inverted f there -- that agreement is the
    renewal identity at work, not an assumption.  Annealed beta>0 tables are
    enumeration-only (the local-time interaction breaks the recursion), so
    nmax is capped accordingly.
    """
    per_step_ok = (p.beta == 0.0) or (kind == "quenched")
    if enum_nmax is None:
        enum_nmax = min(nmax, 11)
    if not per_step_ok:
        nmax = min(nmax, enum_nmax if enum_nmax else nmax)
        t_e, f_e = enumerate_confined(cone, p, nmax, kind=kind, dist=dist, env=env)
        t_e[((0,) * cone.dim, 0)] = 1.0
        res = renewal_residual(t_e, f_e, nmax)
        tab = IrreducibleTable(kind, p, cone, nmax, f_e, t_e, nmax,
                               {"renewal_residual": res})
        if res > cross_check_tol:
            raise AssertionError(f"renewal identity residual {res} too large")
        return tab
    t_dp = confined_dp_t(cone, p, nmax, env=env)
    f_inv = invert_to_f(t_dp, nmax)
    meta = {}
    if enum_nmax and enum_nmax >= 1:
        t_e, f_e = enumerate_confined(cone, p, enum_nmax, kind=kind,
                                      dist=dist, env=env)
        worst = 0.0
        keys = {k for k in (set(t_e) | set(t_dp)) if 1 <= k[1] <= enum_nmax}
        for k in keys:
            a, b = t_e.get(k, 0.0), t_dp.get(k, 0.0)
            worst = max(worst, abs(a - b) / max(abs(a), abs(b), 1e-300))
        keys_f = {k for k in (set(f_e) | set(f_inv)) if 1 <= k[1] <= enum_nmax}
        worst_f = 0.0
        for k in keys_f:
            a, b = f_e.get(k, 0.0), f_inv.get(k, 0.0)
            worst_f = max(worst_f, abs(a - b) / max(abs(a), abs(b), 1e-300))
        meta["t_enum_vs_dp"] = worst
        meta["f_enum_vs_inverted"] = worst_f
        if worst > cross_check_tol or worst_f > cross_check_tol:
            raise AssertionError(
                f"confined-table cross-check failed: t {worst}, f {worst_f}")
    return IrreducibleTable(kind, p, cone, nmax, f_inv, t_dp,
                            enum_nmax or 0, meta)


def calibrate_lambda(table: IrreducibleTable, tol: float = 1e-10,
                     span: float = 3.0) -> Tuple[float, IrreducibleTable]:
    """Shift lam (frozen geometry) so that sum f = 1; bisection, monotone."""
    lam0 = table.params.lam
    per_n = table.f_totals()
    ns = np.arange(table.nmax + 1)
    def total(lam):
        return float(np.sum(per_n * np.exp(-(lam - lam0) * ns)))
    lo, hi = lam0 - span, lam0 + span
    if total(lo) < 1.0:
        raise ValueError("calibration bracket failure (total < 1 at lower end)")
    if total(hi) > 1.0:
        raise ValueError("calibration bracket failure (total > 1 at upper end)")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    lam_star = 0.5 * (lo + hi)
    return lam_star, table.reweight(dlam=lam_star - lam0)


def calibrate_drift(table: IrreducibleTable, lam_target: float,
                    direction=None, tol: float = 1e-10,
                    span: float = 3.0) -> Tuple[float, IrreducibleTable]:
    """Scale h along `direction` so that sum f = 1 at lam_target.

    Realizes h on the boundary of the estimated dual ball at mass lam_target;
    returns the scale factor applied to the direction (default: h itself).
    """
    p = table.params
    base = np.asarray(direction if direction is not None else p.h, dtype=float)
    if not np.any(base):
        raise ValueError("need a nonzero drift direction")
    per = {}
    for (x, n), v in table.f.items():
        per[(x, n)] = v
    xs = np.array([list(x) for (x, n) in per], dtype=float)
    ns = np.array([n for (x, n) in per], dtype=float)
    vs = np.array(list(per.values()))
    proj = xs @ base
    dlam = lam_target - p.lam
    def total(s):
        return float(np.sum(vs * np.exp((s - 1.0) * proj - dlam * ns)))
    lo, hi = 0.0, 1.0
    while total(hi) < 1.0:
        hi *= 1.5
        if hi > 50:
            raise ValueError("drift calibration bracket failure")
    while total(lo) > 1.0:
        lo -= 0.5
        if lo < -50:
            raise ValueError("drift calibration bracket failure")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    dh = (s - 1.0) * base
    return s, table.reweight(dh=dh, dlam=dlam)


# ---------------------------------------------------------------------------
# effective step law, renewal limits, and the implicit function mu(z)
# ---------------------------------------------------------------------------

@dataclass
class EffectiveStepLaw:
    """Probability atoms (y, m) -> f_{y,m} of the effective directed step."""

    atoms: TableDict
    dim: int

    @staticmethod
    def from_table(table: IrreducibleTable, tol: float = 1e-6) -> "EffectiveStepLaw":
        total = table.total_f()
        if abs(total - 1.0) > tol:
            raise ValueError(f"step law not normalized: sum f = {total}")
        return EffectiveStepLaw(dict(table.f), table.dim)

    def marginal_n(self) -> Dict[int, float]:
        out: Dict[int, float] = {}
        for (x, n), v in self.atoms.items():
            out[n] = out.get(n, 0.0) + v
        return out

    def moments(self):
        EY = np.zeros(self.dim)
        EM = 0.0
        for (x, n), v in self.atoms.items():
            EY += v * np.array(x, dtype=float)
            EM += v * n
        return EY, EM

    def speed(self) -> np.ndarray:
        EY, EM = self.moments()
        return EY / EM

    def clt_covariance(self) -> np.ndarray:
        """Hess mu(0) = E[(Y - vM)(Y - vM)^T] / E[M], by implicit differentiation."""
        EY, EM = self.moments()
        v = EY / EM
        H = np.zeros((self.dim, self.dim))
        for (x, n), w in self.atoms.items():
            r = np.array(x, dtype=float) - v * n
            H += w * np.outer(r, r)
        return H / EM

    def kappa(self) -> float:
        return self.moments()[1]


@dataclass
class RenewalAsymptotics:
    kappa: float
    limit: float
    tail_rate: float
    tail_r2: float
    v: np.ndarray
    xi_inv: np.ndarray
    t_series: np.ndarray


def renewal_sequence(law: EffectiveStepLaw, nmax: int) -> np.ndarray:
    """t_n = sum_m f_m t_{n-m} with t_0 = 1 (aggregated convolution)."""
    f_n = np.zeros(nmax + 1)
    for (x, n), v in law.atoms.items():
        if n <= nmax:
            f_n[n] += v
    t = np.zeros(nmax + 1)
    t[0] = 1.0
    for n in range(1, nmax + 1):
        t[n] = float(np.dot(f_n[1:n + 1], t[n - 1::-1][:n]))
    return t


def renewal_limit(law: EffectiveStepLaw, nmax: int = 60) -> RenewalAsymptotics:
    """kappa from moments, t_n -> 1/kappa, and the exponential approach fit."""
    total = sum(law.atoms.values())
    if abs(total - 1.0) > 1e-6:
        raise ValueError("renewal_limit needs a normalized step law")
    t = renewal_sequence(law, nmax)
    kappa = law.kappa()
    gaps = np.abs(t[1:] - 1.0 / kappa)
    lo = max(2, (nmax + 1) // 2)
    ns = np.arange(1, nmax + 1)[lo:]
    g = gaps[lo:]
    mask = g > 1e-15
    if mask.sum() >= 3:
        yy = np.log(g[mask])
        xx = ns[mask].astype(float)
        A = np.vstack([xx, np.ones_like(xx)]).T
        coef, res, _, _ = np.linalg.lstsq(A, yy, rcond=None)
        rate = -coef[0]
        ss_tot = float(np.sum((yy - yy.mean()) ** 2))
        ss_res = float(res[0]) if len(res) else float(np.sum((yy - A @ coef) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    else:
        rate, r2 = math.inf, 1.0
    EY, EM = law.moments()
    return RenewalAsymptotics(kappa, 1.0 / kappa, rate, r2, EY / EM,
                              law.clt_covariance(), t)


def solve_mu(law: EffectiveStepLaw, z, tol: float = 1e-12,
             max_iter: int = 200):
    """mu(z) solving sum e^{-mu n + z.x} f = 1 (Newton, bisection fallback).

    Real z gives a real root (F is monotone in mu); imaginary/complex z is
    solved by complex Newton seeded at the real solution of Re z.
    """
    xs = np.array([list(x) for (x, n) in law.atoms], dtype=float)
    ns = np.array([n for (x, n) in law.atoms], dtype=float)
    ws = np.array(list(law.atoms.values()))
    z = np.asarray(z, dtype=complex)
    zx = xs @ z
    if np.all(np.abs(zx.imag) < 1e-15):
        zxr = zx.real
        def F(mu):
            return float(np.sum(ws * np.exp(-mu * ns + zxr))) - 1.0
        lo, hi = -5.0, 5.0
        flo, fhi = F(lo), F(hi)
        while flo < 0:
            lo -= 5
            flo = F(lo)
        while fhi > 0:
            hi += 5
            fhi = F(hi)
        mu = 0.0 if lo < 0 < hi else 0.5 * (lo + hi)
        for _ in range(max_iter):
            val = np.sum(ws * np.exp(-mu * ns + zxr))
            g = float(val) - 1.0
            if abs(g) < tol:
                return float(mu)
            dg = float(np.sum(-ns * ws * np.exp(-mu * ns + zxr)))
            step = g / dg
            nxt = mu - step
            if not lo < nxt < hi:
                if g > 0:
                    lo = mu
                else:
                    hi = mu
                nxt = 0.5 * (lo + hi)
            else:
                if g > 0:
                    lo = mu
                else:
                    hi = mu
            mu = nxt
        raise RuntimeError("mu solver did not converge")
    mu = complex(solve_mu(law, z.real, tol))
    for _ in range(max_iter):
        val = np.sum(ws * np.exp(-mu * ns + zx))
        g = val - 1.0
        if abs(g) < tol:
            return complex(mu)
        dg = np.sum(-ns * ws * np.exp(-mu * ns + zx))
        mu = mu - g / dg
    raise RuntimeError("complex mu solver did not converge")


def mu_gradient_fd(law: EffectiveStepLaw, step: float = 1e-5) -> np.ndarray:
    d = law.dim
    out = np.zeros(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        out[j] = (solve_mu(law, e) - solve_mu(law, -e)) / (2 * step)
    return out


def mu_hessian_fd(law: EffectiveStepLaw, step: float = 1e-4) -> np.ndarray:
    d = law.dim
    H = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            ei = np.zeros(d); ei[i] = step
            ej = np.zeros(d); ej[j] = step
            H[i, j] = (solve_mu(law, ei + ej) - solve_mu(law, ei - ej)
                       - solve_mu(law, ej - ei) + solve_mu(law, -ei - ej)) / (4 * step * step)
    return H


# ---------------------------------------------------------------------------
# spatial renewal tables, LLN/CLT and local-limit desk checks
# ---------------------------------------------------------------------------

def spatial_renewal_tables(law: EffectiveStepLaw, nmax: int) -> List[Dict[Site, float]]:
    """t_{x,n} for n = 0..nmax by spatial convolution of the step law."""
    d = law.dim
    t: List[Dict[Site, float]] = [{(0,) * d: 1.0}]
    f_by_n: Dict[int, Dict[Site, float]] = {}
    for (x, n), v in law.atoms.items():
        if n <= nmax:
            f_by_n.setdefault(n, {})[x] = v
    for n in range(1, nmax + 1):
        cur: Dict[Site, float] = {}
        for m in range(1, n + 1):
            for y, fv in f_by_n.get(m, {}).items():
                for z, tv in t[n - m].items():
                    x = tuple(a + b for a, b in zip(y, z))
                    cur[x] = cur.get(x, 0.0) + fv * tv
        t.append(cur)
    return t


def annealed_lln_clt_check(law: EffectiveStepLaw, n_grid, alpha_grid) -> dict:
    """LLN gap |mean extension - n v| and sup-alpha CLT gap per n.

    The CLT gap compares S_n(alpha)/t_n with exp(-alpha.Xi^{-1}alpha/2); its
    decrease along n_grid is the desk-scale image of the O(n^{-1/2}) factor.
    """
    v = law.speed()
    xi = law.clt_covariance()
    if np.linalg.eigvalsh(xi).min() <= 0:
        raise ValueError("CLT covariance is not positive definite")
    tables = spatial_renewal_tables(law, max(n_grid))
    report = {"v": v, "xi_inv": xi, "n": {}}
    for n in n_grid:
        tn = sum(tables[n].values())
        mean = np.zeros(law.dim)
        for x, w in tables[n].items():
            mean += np.array(x, dtype=float) * w
        mean /= tn
        lln_gap = float(np.linalg.norm(mean - n * v))
        sup_gap = 0.0
        for alpha in alpha_grid:
            al = np.atleast_1d(np.asarray(alpha, dtype=float))
            s = 0.0 + 0.0j
            for x, w in tables[n].items():
                s += w * np.exp(1j * float(al @ (np.array(x) - n * v)) / math.sqrt(n))
            gauss = math.exp(-0.5 * float(al @ xi @ al))
            sup_gap = max(sup_gap, abs(s / tn - gauss))
        report["n"][n] = {"lln_gap": lln_gap, "lln_gap_over_n": lln_gap / n,
                          "clt_sup_gap": sup_gap}
    gaps = [report["n"][n]["clt_sup_gap"] for n in n_grid]
    report["clt_gap_decreasing"] = all(b < a for a, b in zip(gaps, gaps[1:]))
    report["lln_constant"] = max(report["n"][n]["lln_gap"] for n in n_grid)
    return report


def legendre_rate(law: EffectiveStepLaw, u, zmax: float = 0.6,
                  grid: int = 41, refine: int = 3) -> float:
    """J(u) = sup_z [z.u - mu(z)] by nested grid search (deterministic)."""
    u = np.asarray(u, dtype=float)
    d = law.dim
    center = np.zeros(d)
    width = zmax
    best = -math.inf
    for _ in range(refine):
        axes = [np.linspace(c - width, c + width, grid) for c in center]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
        vals = np.array([float(p @ u) - solve_mu(law, p) for p in pts])
        k = int(np.argmax(vals))
        best = float(vals[k])
        center = pts[k]
        width /= grid / 4.0
    return best


def local_limit_check(law: EffectiveStepLaw, n: int, radius: int = 2) -> dict:
    """Flatness of the implied prefactor G(u) = P(X=un) n^{d/2} e^{n J(u)}.

    Computed on the confined-ensemble proxy t_{x,n}/t_n for u in a lattice
    window around the speed v.
    """
    tables = spatial_renewal_tables(law, n)
    tn = sum(tables[n].values())
    v = law.speed()
    center = tuple(int(round(c * n)) for c in v)
    d = law.dim
    out = {}
    import itertools
    for off in itertools.product(range(-radius, radius + 1), repeat=d):
        x = tuple(c + o for c, o in zip(center, off))
        w = tables[n].get(x, 0.0)
        if w <= 0.0:
            continue
        u = np.array(x, dtype=float) / n
        J = legendre_rate(law, u)
        out[x] = (w / tn) * n ** (d / 2.0) * math.exp(n * J)
    vals = np.array(list(out.values()))
    return {"G": out, "flatness": float(vals.max() / vals.min()),
            "G_at_v": out.get(center, None), "n": n}


# ---------------------------------------------------------------------------
# quenched tables per start point and the inversion round-trip
# ---------------------------------------------------------------------------

def quenched_confined_family(env: Environment, cone: ConeSpec, p: WeightParams,
                             nmax: int, starts=None) -> Dict[Site, TableDict]:
    """t^omega tables from every start (environment read at absolute sites)."""
    d = cone.dim
    origin = (0,) * d
    if starts is None:
        starts = [origin] + cone_sites(cone, nmax - 1)
    out = {}
    for s in starts:
        budget = nmax - _l1(s)
        if budget < 0:
            continue
        out[tuple(s)] = confined_dp_t(cone, p, budget, env=env, start=tuple(s))
    return out


def quenched_invert_f(t_family: Dict[Site, TableDict], start: Site,
                      nmax: int) -> TableDict:
    """f^omega at `start` by triangular inversion against the shifted t's.

    f^{(s)}_{x,k} = t^{(s)}_{x,k} - sum_{m<k} sum_y f^{(s)}_{y,m} t^{(s+y)}_{x-y,k-m}
    """
    t0 = t_family[start]
    f: TableDict = {}
    by_n: Dict[int, Dict[Site, float]] = {}
    for (x, n), v in t0.items():
        if n >= 1:
            by_n.setdefault(n, {})[x] = v
    f_by_n: Dict[int, Dict[Site, float]] = {}
    for n in range(1, nmax + 1):
        cur = dict(by_n.get(n, {}))
        for m in range(1, n):
            for y, fv in f_by_n.get(m, {}).items():
                shifted = t_family.get(tuple(a + b for a, b in zip(start, y)))
                if shifted is None:
                    raise KeyError(f"missing t-table at start {y} (from {start})")
                for (z, r), tv in shifted.items():
                    if r != n - m:
                        continue
                    x = tuple(a + b for a, b in zip(y, z))
                    cur[x] = cur.get(x, 0.0) - fv * tv
        f_by_n[n] = cur
    for n, dd in f_by_n.items():
        for x, v in dd.items():
            if v != 0.0:
                f[(x, n)] = v
    return f


def quenched_irreducible_inversion(env: Environment, cone: ConeSpec,
                                   p: WeightParams, nmax: int) -> dict:
    """Recover per-start quenched irreducible weights and re-verify the
    forward renewal identity t^w_{x,n} = sum t^w_{y,m} f^{(y)}_{x-y,n-m}."""
    d = cone.dim
    origin = (0,) * d
    t_fam = quenched_confined_family(env, cone, p, nmax)
    f_fam: Dict[Site, TableDict] = {}
    for s in t_fam:
        f_fam[s] = quenched_invert_f(t_fam, s, nmax - _l1(s))
    neg = 0.0
    for s, tbl in f_fam.items():
        for v in tbl.values():
            neg = min(neg, v)
    # forward identity: split at the LAST cone point instead of the first
    t0 = t_fam[origin]
    worst = 0.0
    for (z, n), tv in t0.items():
        if n < 1:
            continue
        acc = 0.0
        for (y, m), tval in t0.items():
            if m >= n:
                continue
            fy = f_fam.get(y)
            if fy is None:
                continue
            rest = fy.get((tuple(a - b for a, b in zip(z, y)), n - m))
            if rest is not None:
                acc += tval * rest
        acc += f_fam[origin].get((z, n), 0.0)
        scale = max(abs(tv), 1e-300)
        worst = max(worst, abs(acc - tv) / scale)
    return {"t_family": t_fam, "f_family": f_fam,
            "min_recovered_f": neg, "forward_identity_residual": worst,
            "negative_f_flag": neg < -1e-9}


# ---------------------------------------------------------------------------
# synthetic step-law fixtures (regression anchors independent of enumeration)
# ---------------------------------------------------------------------------

def degenerate_step_law() -> EffectiveStepLaw:
    """Single atom f_{(1,),1} = 1: t_n = 1 for all n, kappa = 1."""
    return EffectiveStepLaw({((1,), 1): 1.0}, 1)


def geometric_step_law(rho: float = 0.4, cutoff: int = 220) -> EffectiveStepLaw:
    """f_{(1,),m} = (1-rho) rho^{m-1}: kappa = 1/(1-rho), t_n = 1-rho exactly."""
    atoms = {((1,), m): (1 - rho) * rho ** (m - 1) for m in range(1, cutoff + 1)}
    return EffectiveStepLaw(atoms, 1)
