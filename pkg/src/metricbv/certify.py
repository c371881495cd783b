"""Constructive energy bounds for BV and Sobolev regularity of sampled maps.

The pipeline follows the covering argument: points are sorted into a
Lipschitz-controlled set A, a distortion-controlled set D and an
exceptional set N; A and D are filtered into nested levels A_j, D_j;
each level is covered by balls of radius 1/j with bounded overlap; the
balls give the densities

    g_j = 2j sum_k L_f(x_k, 1/j) 1_{2B_k}

whose energies are compared, link by link, with the chain of
inequalities that ends in the explicit constants C_1..C_4.  Everything
is collected into a Certificate that can re-evaluate its own arithmetic.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial import cKDTree

from ._kernels import TOL, inside, offsets
from .numbers import (RadiusSchedule, RadonWeight, diverging_rows, ball_sups, complement_infs,
                      evaluation_points, ratio_table)
from .space import ball_sums, boundary_distance, doubling_constant_estimate

THEOREMS = ("T4.1-BV", "T4.2-Sobolev-Lip", "T4.3-Sobolev-H", "T4.3-p=Q")
CHAIN_TOL = 1e-9


# ---------------------------------------------------------------- constants

def overlap_exponent(M):
    """Smallest integer k with 2^k >= 18 M (exact, no floating log)."""
    if not M >= 1:
        raise ValueError("M must be >= 1")
    k = 0
    while 2 ** k < 18 * M:
        k += 1
    return k


def C_M(C_d, M):
    return C_d ** overlap_exponent(M)


def C1(C_d, C_Omega, Q, M):
    k = overlap_exponent(M)
    return 2.0 ** (3 + Q + Q / (Q - 1)) * C_Omega ** 2 * C_d ** (Q + k)


def C2(C_d, p, M):
    k = overlap_exponent(M)
    return 4.0 * C_d ** (1 / p + (1 + 1 / p) * k)


def C3(C_d, C_Omega, p, Q, M):
    k = overlap_exponent(M)
    return 2.0 ** (p + Q * p / (Q - p)) * C_d ** (Q / p + (p + 1) * k) * C_Omega ** 2


def C4(C_d, C_Omega):
    return C_d ** 6 * C_Omega ** 2


def bv_energy_bound(int_h_kappa, kappa_total, nu_V, eps, M, Q, C_d, C_Omega):
    """C1 eps^(-1/(Q-1)) int h dkappa + C1 eps (kappa(Omega) + nu(V))."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if not Q > 1:
        raise ValueError("Q must exceed 1")
    c = C1(C_d, C_Omega, Q, M)
    return c * eps ** (-1.0 / (Q - 1)) * int_h_kappa + c * eps * (kappa_total + nu_V)


def sobolev_energy_bound_lip(ha_norm, p, M, C_d):
    """C2 ||h a||_p: the bound on the D^p norm itself."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return C2(C_d, p, M) * ha_norm


def lip_level_bound(int_hpap, int_ap, p, M, C_d, eps):
    """What one level of the proof yields at fixed eps:
    int g_j^p <= C2^p (int h^p a^p + (2 eps)^p int a^p)."""
    return C2(C_d, p, M) ** p * (int_hpap + (2 * eps) ** p * int_ap)


def sobolev_energy_bound_distortion(int_h_aq, nu_V, p, Q, M, C_d, C_Omega, int_aq=0.0, eps=0.0):
    """C3 nu(V) + C3 int a^q (h + 2 eps) with q = p(Q-1)/(Q-p).

    eps = 0 gives the stated bound; eps > 0 the one a single level proves.
    """
    if not 1 <= p < Q:
        raise ValueError("needs 1 <= p < Q; use the p = Q branch otherwise")
    c = C3(C_d, C_Omega, p, Q, M)
    return c * nu_V + c * (int_h_aq + 2 * eps * int_aq)


def pq_bound(nu_V, a_sup, Ha_sup, Q, C_d, C_Omega):
    return C4(C_d, C_Omega) * nu_V * a_sup ** (Q - 1) * Ha_sup ** Q


def epsilon_sweep(int_h_kappa, kappa_total, nu_V, M, Q, C_d, C_Omega, eps_values=(1.0, 0.1, 0.01)):
    """BV bound at several eps; the minimizer shows how much of the bound
    is carried by int h dkappa versus the eps-weighted total masses."""
    vals = [bv_energy_bound(int_h_kappa, kappa_total, nu_V, e, M, Q, C_d, C_Omega) for e in eps_values]
    i = int(np.argmin(vals))
    return {"eps": [float(e) for e in eps_values], "bound": vals, "best_eps": float(eps_values[i]),
            "best_bound": vals[i]}


# ---------------------------------------------------------------- target measure

def _unit_ball_volume(d):
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def target_ball_measure(mapping, centers, radii):
    """nu(B(c, r)) for image points c: Lebesgue measure of the target
    dimension unless the mapping carries a sampled target space."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(centers),))
    tgt = mapping.target
    if tgt is None:
        d = mapping.values.shape[1]
        return _unit_ball_volume(d) * radii ** d
    out = np.zeros(len(centers))
    for i, (c, r) in enumerate(zip(centers, radii)):
        if r <= 0:
            continue
        lst = np.asarray(tgt.tree.query_ball_point(c, r * (1 + 2 * TOL)), dtype=int)
        if len(lst):
            d = np.sqrt(((tgt.coords[lst] - c) ** 2).sum(axis=1))
            out[i] = tgt.weights[lst[inside(d, r, False)]].sum()
    return out


def _raster_union_2d(cx, cy, r, x0, y0, s, nx, ny):
    # row-interval rasterization: for every ball and every grid row it
    # crosses, add +1/-1 at the ends of the covered column range
    diff = np.zeros((ny, nx + 1), dtype=np.int32)
    for c_x, c_y, rad in zip(cx, cy, r):
        if rad <= 0:
            continue
        j0 = max(0, int(math.ceil((c_y - rad - y0) / s - 0.5)))
        j1 = min(ny - 1, int(math.floor((c_y + rad - y0) / s - 0.5)))
        if j1 < j0:
            continue
        rows = np.arange(j0, j1 + 1)
        yc = y0 + (rows + 0.5) * s
        half2 = rad * rad - (yc - c_y) ** 2
        ok = half2 > 0
        rows, half = rows[ok], np.sqrt(half2[ok])
        i0 = np.maximum(0, np.ceil((c_x - half - x0) / s - 0.5)).astype(int)
        i1 = np.minimum(nx - 1, np.floor((c_x + half - x0) / s - 0.5)).astype(int)
        good = i1 >= i0
        np.add.at(diff, (rows[good], i0[good]), 1)
        np.add.at(diff, (rows[good], i1[good] + 1), -1)
    return (np.cumsum(diff[:, :nx], axis=1) > 0).sum()


def image_volume(mapping, D_points, beta, grid_step=None, return_radii=False):
    """nu of the union of the balls B(f(y), l_f(y, beta)), y in D_points.

    With a sampled target the union is measured on its samples.  With the
    Lebesgue target it is rasterized on cells of side grid_step (default: an
    eighth of the smallest positive radius, capped at 4e7 cells), counting a
    cell when its midpoint lies in an open ball.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    D_points = np.asarray(D_points, dtype=int)
    if len(D_points) == 0:
        return (0.0, np.zeros(0)) if return_radii else 0.0
    l, _ = complement_infs(mapping, [beta], D_points)
    l = l[:, 0]
    if not np.isfinite(l).all():
        vol = math.inf
        return (vol, l) if return_radii else vol
    c = mapping.values[D_points]
    pos = l > 0
    if not pos.any():
        vol = 0.0
    elif mapping.target is not None:
        tgt = mapping.target
        hit = np.zeros(tgt.n, dtype=bool)
        for cc, r in zip(c[pos], l[pos]):
            lst = np.asarray(tgt.tree.query_ball_point(cc, r * (1 + 2 * TOL)), dtype=int)
            if len(lst):
                d = np.sqrt(((tgt.coords[lst] - cc) ** 2).sum(axis=1))
                hit[lst[inside(d, r, False)]] = True
        vol = float(tgt.weights[hit].sum())
    else:
        cp, lp = c[pos], l[pos]
        dY = cp.shape[1]
        lo = (cp - lp[:, None]).min(axis=0)
        hi = (cp + lp[:, None]).max(axis=0)
        s = grid_step if grid_step is not None else lp.min() / 8
        cells = np.prod(np.ceil((hi - lo) / s))
        if cells > 4e7:
            s *= (cells / 4e7) ** (1 / dY)
        n = np.maximum(1, np.ceil((hi - lo) / s).astype(int))
        if dY == 1:
            dif = np.zeros(n[0] + 1, dtype=np.int32)
            i0 = np.maximum(0, np.ceil((cp[:, 0] - lp - lo[0]) / s - 0.5)).astype(int)
            i1 = np.minimum(n[0] - 1, np.floor((cp[:, 0] + lp - lo[0]) / s - 0.5)).astype(int)
            g = i1 >= i0
            np.add.at(dif, i0[g], 1)
            np.add.at(dif, i1[g] + 1, -1)
            count = int((np.cumsum(dif[:-1]) > 0).sum())
        elif dY == 2:
            count = int(_raster_union_2d(cp[:, 0], cp[:, 1], lp, lo[0], lo[1], s, n[0], n[1]))
        else:
            axes = [lo[i] + (np.arange(n[i]) + 0.5) * s for i in range(dY)]
            mids = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dY)
            tree = cKDTree(cp)
            lists = tree.query_ball_point(mids, lp.max())
            count = 0
            for m, lst in zip(mids, lists):
                if lst:
                    lst = np.asarray(lst)
                    if (np.sqrt(((cp[lst] - m) ** 2).sum(axis=1)) < lp[lst]).any():
                        count += 1
        vol = float(count * s ** dY)
    return (vol, l) if return_radii else vol


# ---------------------------------------------------------------- partition

@dataclass
class Partition:
    A: np.ndarray
    D: np.ndarray
    N: np.ndarray
    U: np.ndarray             # boundary layer: not evaluated at the tail scales
    level_A: np.ndarray       # per point: smallest computed j with x in A_j, 0 if none
    level_D: np.ndarray
    levels: tuple
    lip: np.ndarray           # generalized Lipschitz proxy, nan where not computed
    H: np.ndarray             # generalized distortion proxy
    M: float
    Q: float | None
    eps: float
    mode: str

    def A_j(self, j):
        return np.flatnonzero((self.level_A > 0) & (self.level_A <= j))

    def D_j(self, j):
        return np.flatnonzero((self.level_D > 0) & (self.level_D <= j))

    def summary(self, space):
        w = space.weights
        out = {"mode": self.mode}
        for nm in ("A", "D", "N", "U"):
            s = getattr(self, nm)
            out[nm] = {"count": int(len(s)), "mu": float(w[s].sum())}
        out["levels"] = {str(j): {"A_j": int(len(self.A_j(j))), "D_j": int(len(self.D_j(j)))}
                         for j in self.levels}
        return out


def _ball_min(space, values, radius, idx):
    """min of values over the open ball around each point of idx."""
    values = np.asarray(values, dtype=float)
    if space.lattice is not None:
        lat = space.lattice
        offs, _ = offsets(lat["step"], radius, len(lat["shape"]), closed=False)
        m = int(np.abs(offs).max()) if len(offs) else 0
        fp = np.zeros((2 * m + 1,) * len(lat["shape"]), dtype=bool)
        fp[tuple((offs + m).T)] = True
        out = minimum_filter(values.reshape(lat["shape"]), footprint=fp, mode="constant", cval=np.inf)
        return out.ravel()[idx]
    own, mem, _ = space.flat_neighbors(idx, radius, closed=False)
    starts = np.searchsorted(own, np.arange(len(idx)))
    return np.minimum.reduceat(values[mem], starts)


def _levels_for_kind(mapping, kind, weight, M, Q, schedule, levels, pts, eps_sup, h, h_of_field,
                     eps_h, diverge_alpha, spread_min=1.5):
    """Proxy field, divergence flag and j-level on the points pts.

    The tail columns are computed first; the larger radii only for the
    points that survive as finite and non-diverging.
    """
    tail = schedule.tail
    q_tail = ratio_table(mapping, kind, tail, weight, M, Q, pts)
    val = q_tail.max(axis=1)
    diverging, _, _ = diverging_rows(q_tail, tail, val, diverge_alpha, spread_min)
    good = ~diverging
    jl = np.zeros(len(pts), dtype=int)
    sub = pts[good]
    if len(sub) == 0:
        return val, diverging, jl
    big = schedule.radii[: len(schedule.radii) - len(tail)]
    q_big = ratio_table(mapping, kind, big, weight, M, Q, sub) if len(big) else np.zeros((len(sub), 0))
    q_all = np.concatenate([q_big, q_tail[good]], axis=1)
    radii = np.concatenate([big, tail])
    bd = boundary_distance(mapping.domain)[sub]
    jl_sub = np.zeros(len(sub), dtype=int)
    v = val[good]
    for j in sorted(levels):
        cols = radii <= (1.0 / j) * (1 + 1e-12)
        sup = q_all[:, cols].max(axis=1)
        cond = (bd > (M + 1) / j * (1 + TOL)) & (sup <= v + eps_sup)
        if h is not None:
            hmin = _ball_min(mapping.domain, h, M / j, sub)
            cond &= h_of_field(v) <= hmin + eps_h
        jl_sub[(jl_sub == 0) & cond] = j
    jl[good] = jl_sub
    return val, diverging, jl


def classify_points(mapping, weight, M, Q, thresholds=(np.inf, np.inf), schedule=None, levels=None,
                    eps=1.0, h=None, mode="BV", p=1.0, diverge_alpha=0.5):
    """Sort the domain into A, D, N (and the unevaluated boundary layer U).

    mode "BV": A by the kappa-weighted Lipschitz number, D by the weighted
    distortion among the rest.  mode "Lip": A only.  mode "H": D only.
    `weight` is kappa for BV and the measure a dmu otherwise.  The j-level
    of a point is the smallest computed j with
        dist(x, boundary) > (M+1)/j,
        sup over schedule radii r <= 1/j of the ratio <= proxy(x) + eps_sup,
        and, when h is given, F(proxy(x)) <= h(z) + eps_h on B(x, M/j),
    where (eps_sup, eps_h, F) follow the chosen theorem.
    """
    if mode not in ("BV", "Lip", "H"):
        raise ValueError(f"unknown mode {mode}")
    if not M >= 1:
        raise ValueError("M must be >= 1")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if mode in ("BV", "H") and (Q is None or not Q > 1):
        raise ValueError("Q > 1 required")
    sp = mapping.domain
    if levels is None:
        levels = default_levels(sp, M)
    levels = tuple(sorted(int(j) for j in levels))
    if schedule is None:
        schedule = default_schedule(sp, levels)
    schedule.check(sp)
    missing = [j for j in levels if not np.isclose(schedule.radii, 1.0 / j, rtol=1e-12, atol=0).any()]
    if missing:
        raise ValueError(f"schedule lacks the radii 1/j for j in {missing}")
    if weight is None:
        weight = RadonWeight(sp)
    lip_cut, h_cut = thresholds
    if h is not None:
        h = np.broadcast_to(np.asarray(h, dtype=float), (sp.n,)).copy()
    ev = evaluation_points(sp, M, schedule.tail[0])
    n = sp.n
    lip = np.full(n, np.nan)
    H = np.full(n, np.nan)
    level_A = np.zeros(n, dtype=int)
    level_D = np.zeros(n, dtype=int)
    inA = np.zeros(n, dtype=bool)
    inD = np.zeros(n, dtype=bool)
    rest = ev
    if mode in ("BV", "Lip"):
        eps_a = eps ** (Q / (Q - 1)) if mode == "BV" else eps
        v, div, jl = _levels_for_kind(mapping, "Lip_generalized", weight, M, Q, schedule, levels, ev,
                                      eps_a, h, lambda x: x, eps_a, diverge_alpha)
        lip[ev] = v
        a_ok = ~div & (v <= lip_cut)
        inA[ev[a_ok]] = True
        level_A[ev[a_ok]] = jl[a_ok]
        rest = ev[~a_ok]
    if mode in ("BV", "H") and len(rest):
        if mode == "BV":
            s_exp, eps_h = Q / (Q - 1), eps ** (Q / (Q - 1))
        else:
            if not 1 <= p < Q:
                raise ValueError("distortion route needs 1 <= p < Q")
            s_exp, eps_h = Q * p / (Q - p), eps
        v, div, jl = _levels_for_kind(mapping, "H_generalized", weight, M, Q, schedule, levels, rest,
                                      eps, h, lambda x: x ** s_exp, eps_h, diverge_alpha)
        H[rest] = v
        d_ok = ~div & (v <= h_cut)
        inD[rest[d_ok]] = True
        level_D[rest[d_ok]] = jl[d_ok]
    evaluated = np.zeros(n, dtype=bool)
    evaluated[ev] = True
    N = np.flatnonzero(evaluated & ~inA & ~inD)
    U = np.flatnonzero(~evaluated)
    return Partition(np.flatnonzero(inA), np.flatnonzero(inD), N, U, level_A, level_D, levels,
                     lip, H, float(M), None if Q is None else float(Q), float(eps), mode)


def default_levels(space, M, count=3):
    """Levels j whose inner region Omega((M+1)/j) is nonempty and whose 1/j
    leaves room for a tail of radii above the trusted floor."""
    bd = boundary_distance(space)
    j_min = int(math.floor((M + 1) / (0.8 * bd.max()))) + 1
    j_max = int(math.floor(1.0 / (space.trusted_floor * 1.5 ** 3)))
    if j_max < j_min:
        raise ValueError("resolution too coarse for the requested M")
    js = np.unique(np.round(np.geomspace(j_min, j_max if j_max < 4 * j_min else 4 * j_min, count)).astype(int))
    return tuple(int(j) for j in js)


def default_schedule(space, levels):
    snap = space.lattice["step"] if space.lattice is not None else None
    return RadiusSchedule.for_levels(levels, space.trusted_floor, snap=snap)


# ---------------------------------------------------------------- covers

@dataclass
class CoverLevel:
    j: int
    centers: np.ndarray
    radius: float
    multiplicity: int         # max number of dilated balls (M+1)B at one sample point
    colors: int               # disjoint subfamilies found by greedy coloring
    C_M_target: float | None
    flagged: bool
    covered: bool

    def to_dict(self):
        return {"j": self.j, "centers": [int(c) for c in self.centers], "radius": self.radius,
                "multiplicity": self.multiplicity, "colors": self.colors,
                "C_M_target": self.C_M_target, "flagged": self.flagged, "covered": self.covered}


def build_cover(space, level_set, j, M, C_d=None):
    """Balls B(x_k, 1/j) over a greedy maximal family of centers whose
    1/(2j)-balls are pairwise disjoint, scanned in index order."""
    level_set = np.unique(np.asarray(level_set, dtype=int))
    r = 1.0 / j
    target = None if C_d is None else float(C_M(C_d, M))
    if len(level_set) == 0:
        return CoverLevel(int(j), np.zeros(0, dtype=int), r, 0, 0, target, False, True)
    bd = boundary_distance(space)[level_set]
    if (bd <= (M + 1) / j * (1 + TOL) * (1 - 1e-12)).any():
        raise ValueError(f"level set leaves the inner region Omega({(M + 1) / j:g})")
    pts = space.coords[level_set]
    tree = cKDTree(pts)
    blocked = np.zeros(len(level_set), dtype=bool)
    chosen = []
    for i in range(len(level_set)):
        if blocked[i]:
            continue
        chosen.append(i)
        lst = np.asarray(tree.query_ball_point(pts[i], r * (1 + 2 * TOL)), dtype=int)
        d = np.sqrt(((pts[lst] - pts[i]) ** 2).sum(axis=1))
        blocked[lst[inside(d, r, False)]] = True
    centers = level_set[np.array(chosen, dtype=int)]
    mark = np.zeros(space.n)
    mark[centers] = 1.0
    mult = int(round(ball_sums(space, mark, (M + 1) * r).max()))
    colors = _greedy_colors(space.coords[centers], 2 * (M + 1) * r)
    flagged = target is not None and colors > target
    return CoverLevel(int(j), centers, r, mult, colors, target, bool(flagged), bool(blocked.all()))


def _greedy_colors(pts, sep):
    """Color the balls so that same-colored centers are >= sep apart."""
    if len(pts) == 0:
        return 0
    pairs = cKDTree(pts).query_pairs(sep * (1 - TOL), output_type="ndarray")
    adj = [[] for _ in range(len(pts))]
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)
    col = np.full(len(pts), -1)
    for i in range(len(pts)):
        used = {col[k] for k in adj[i] if col[k] >= 0}
        c = 0
        while c in used:
            c += 1
        col[i] = c
    return int(col.max() + 1)


@dataclass
class CoverInventory:
    levels: dict              # j -> {"A": CoverLevel, "D": CoverLevel, "N": CoverLevel | None}
    M: float

    def to_dict(self):
        return {"M": self.M, "levels": {str(j): {k: (None if v is None else v.to_dict())
                                                  for k, v in parts.items()}
                                        for j, parts in self.levels.items()}}


def build_covers(partition, space, C_d=None, include_N=False):
    inv = {}
    M = partition.M
    bd = boundary_distance(space)
    for j in partition.levels:
        parts = {"A": build_cover(space, partition.A_j(j), j, M, C_d),
                 "D": build_cover(space, partition.D_j(j), j, M, C_d), "N": None}
        if include_N:
            Nj = partition.N[bd[partition.N] > (M + 1) / j * (1 + TOL)]
            parts["N"] = build_cover(space, Nj, j, M, C_d)
        inv[j] = parts
    return CoverInventory(inv, M)


# ---------------------------------------------------------------- gradients

@dataclass
class LevelGradient:
    j: int
    g: np.ndarray = field(repr=False)
    energy: float             # int g_j dmu
    energy_p: float           # int g_j^p dmu
    parts: dict               # part -> {"centers", "L", "l", "mu2B", "energy"}


@dataclass
class GradientSequence:
    levels: list
    p: float
    mode: str

    def energies(self):
        return {lv.j: lv.energy for lv in self.levels}

    def recompute_ok(self, space, rtol=1e-9):
        """int g_j dmu equals sum 2j L mu(2B) over the recorded balls."""
        for lv in self.levels:
            comp = sum(pt["energy"] for pt in lv.parts.values())
            if abs(comp - lv.energy) > rtol * max(abs(comp), abs(lv.energy), 1e-300):
                return False
        return True


def assemble_gradients(mapping, partition, covers, mode, p=1.0, include_N=False):
    """g_j = 2j sum L_{j,k} 1_{2B_{j,k}} over the cover balls of the level.

    mode "BV" uses both A and D balls, "Lip" the A balls, "H" the D balls;
    include_N adds balls centered in N (used when N is not certified null).
    """
    want = {"BV": ("A", "D"), "Lip": ("A",), "H": ("D",)}
    if mode not in want:
        raise ValueError(f"unknown mode {mode}")
    sp = mapping.domain
    w = sp.weights
    out = []
    for j in partition.levels:
        if j not in covers.levels:
            raise ValueError(f"missing cover level {j}")
        lv = covers.levels[j]
        names = list(want[mode]) + (["N"] if include_N else [])
        splat = np.zeros(sp.n)
        parts = {}
        for nm in names:
            cov = lv.get(nm)
            if cov is None:
                if nm == "N":
                    raise ValueError(f"missing N cover at level {j}")
                continue
            c = cov.centers
            if len(c) == 0:
                parts[nm] = {"centers": c, "L": np.zeros(0), "l": np.zeros(0),
                             "mu2B": np.zeros(0), "energy": 0.0}
                continue
            L = ball_sups(mapping, [1.0 / j], c)[:, 0]
            l = complement_infs(mapping, [1.0 / j], c)[0][:, 0] if nm == "D" else np.full(len(c), np.nan)
            mu2B = ball_sums(sp, w, 2.0 / j, c)
            np.add.at(splat, c, 2 * j * L)
            parts[nm] = {"centers": c, "L": L, "l": l, "mu2B": mu2B,
                         "energy": float((2 * j * L * mu2B).sum())}
        g = ball_sums(sp, splat, 2.0 / j) if splat.any() else np.zeros(sp.n)
        g = np.maximum(g, 0.0)
        out.append(LevelGradient(int(j), g, float((g * w).sum()), float((g ** p * w).sum()), parts))
    return GradientSequence(out, float(p), mode)


# ---------------------------------------------------------------- diagnostics

@dataclass
class ProbeReport:
    fractions: np.ndarray
    levels: list
    table: np.ndarray         # (levels, fractions): int over the top-delta mass of g_j
    worst: np.ndarray         # sup over levels
    growth: np.ndarray        # last level / first level, per delta
    non_decaying: bool


def concentrated_integral(g, weights, delta):
    """int over the top-valued points of g holding delta of the total mass."""
    order = np.argsort(-g, kind="stable")
    budget = delta * weights.sum()
    cw = np.cumsum(weights[order])
    k = int(np.searchsorted(cw, budget, side="left"))
    full = (g[order[:k]] * weights[order[:k]]).sum()
    if k < len(g):
        prev = cw[k - 1] if k > 0 else 0.0
        full += g[order[k]] * (budget - prev)
    return float(full)


def equi_integrability_probe(space, sequence, mass_fractions=(0.2, 0.1, 0.05, 0.02, 0.01), growth_flag=1.5):
    """Worst concentrated integrals per mass fraction.

    A bounded family of densities has concentrated integrals that shrink
    with delta uniformly in j.  Here the flag is raised when, at the
    smallest delta, the concentrated integral grows by growth_flag or more
    from the first to the last level.
    """
    if len(sequence.levels) < 3:
        raise ValueError("need at least three levels")
    fr = np.asarray(mass_fractions, dtype=float)
    tab = np.array([[concentrated_integral(lv.g, space.weights, d) for d in fr] for lv in sequence.levels])
    worst = tab.max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.where(tab[0] > 0, tab[-1] / tab[0], np.where(tab[-1] > 0, np.inf, 1.0))
    k = int(np.argmin(fr))
    return ProbeReport(fr, [lv.j for lv in sequence.levels], tab, worst, growth,
                       bool(growth[k] >= growth_flag))


@dataclass
class CurveReport:
    endpoint_distance: np.ndarray
    liminf_integral: np.ndarray
    margin: np.ndarray
    passed: np.ndarray
    meets_N: np.ndarray

    @property
    def pass_fraction(self):
        return float(self.passed.mean()) if len(self.passed) else 1.0

    @property
    def pass_fraction_avoiding_N(self):
        keep = ~self.meets_N
        return float(self.passed[keep].mean()) if keep.any() else 1.0

    def summary(self):
        return {"curves": int(len(self.passed)), "pass_fraction": self.pass_fraction,
                "avoiding_N": int((~self.meets_N).sum()),
                "pass_fraction_avoiding_N": self.pass_fraction_avoiding_N,
                "min_margin": float(self.margin.min()) if len(self.margin) else 0.0}


def curvewise_verification(mapping, sequence, family, N_points=None, tail=None, tol=1e-9):
    """Endpoint distance against the liminf (min over the last levels) of
    the curve integrals of g_j."""
    from .modulus import constraint_matrix
    sp = mapping.domain
    A = constraint_matrix(sp, family)
    lv = sequence.levels if tail is None else sequence.levels[-int(tail):]
    ints = np.stack([A @ x.g for x in lv], axis=1) if len(family) else np.zeros((0, 1))
    lim = ints.min(axis=1) if len(family) else np.zeros(0)
    v = mapping.values
    d = np.array([np.sqrt(((v[c.vertices[-1]] - v[c.vertices[0]]) ** 2).sum()) for c in family.curves])
    inN = np.zeros(sp.n, dtype=bool)
    if N_points is not None:
        inN[np.asarray(N_points, dtype=int)] = True
    meets = np.array([bool(inN[c.vertices].any()) for c in family.curves], dtype=bool)
    margin = lim - d
    return CurveReport(d, lim, margin, margin >= -tol * np.maximum(1.0, d), meets)


def null_set_content(space, N, p, R):
    """Codimension-p content upper bound of N at scale R from a greedy
    R-net (every point of N within R of a center)."""
    N = np.asarray(N, dtype=int)
    if len(N) == 0:
        return 0.0
    pts = space.coords[N]
    tree = cKDTree(pts)
    blocked = np.zeros(len(N), dtype=bool)
    centers = []
    for i in range(len(N)):
        if blocked[i]:
            continue
        centers.append(N[i])
        blocked[np.asarray(tree.query_ball_point(pts[i], R * (1 - 2 * TOL)), dtype=int)] = True
    centers = np.array(centers, dtype=int)
    return float(ball_sums(space, space.weights, R * (1 + 4 * TOL), centers, closed=True).sum() / R ** p)


# ---------------------------------------------------------------- pieces of the chains

def _chain(steps, tol=CHAIN_TOL):
    """List of (label, value); ok when each value is <= the next within tol."""
    vals = [v for _, v in steps]
    links = []
    for (la, a), (lb, b) in zip(steps[:-1], steps[1:]):
        ok = a <= b + tol * max(abs(a), abs(b), 1e-300)
        links.append(bool(ok))
    return {"steps": [[lab, float(v)] for lab, v in steps], "links": links, "ok": all(links)}


def _part_stats(sp, mapping, part, j, M, kappa_masses, F_kappa=None):
    """Ball quantities at the centers of one cover part."""
    c = part["centers"]
    r = 1.0 / j
    out = {"mu2B": part["mu2B"], "L": part["L"], "l": part["l"],
           "muMB": ball_sums(sp, sp.weights, M * r, c),
           "kMB": ball_sums(sp, kappa_masses, M * r, c)}
    if F_kappa is not None:
        out["FMB"] = {k: ball_sums(sp, v, M * r, c) for k, v in F_kappa.items()}
    return out


# ---------------------------------------------------------------- certificate

@dataclass
class Certificate:
    theorem_id: str
    inputs_digest: str
    parameters: dict
    constants: dict
    partition: dict
    covers: dict
    energy_table: list
    bound_components: dict
    bound: float
    bound_limit: float
    hypotheses: dict
    curve_check: dict | None
    verdict: str

    FIELDS = ("theorem_id", "inputs_digest", "parameters", "constants", "partition", "covers",
              "energy_table", "bound_components", "bound", "bound_limit", "hypotheses",
              "curve_check", "verdict")

    def to_dict(self):
        return {k: _plain(getattr(self, k)) for k in self.FIELDS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.FIELDS})

    def recompute_bound(self):
        return evaluate_bound(self.theorem_id, self.bound_components, self.parameters, self.constants)

    def verify(self):
        """The stored bounds equal their formulas evaluated on the stored components."""
        b, bl = self.recompute_bound()
        return b == self.bound and bl == self.bound_limit

    def summary_text(self):
        lines = [f"theorem   {self.theorem_id}", f"verdict   {self.verdict}",
                 f"bound     {self.bound:.6g}  (eps -> 0: {self.bound_limit:.6g})"]
        for row in self.energy_table:
            lines.append(f"  j={row['j']:<4d} energy {row['energy']:.6g}  chain {'ok' if row['chain_ok'] else 'BROKEN'}")
        for k, v in self.hypotheses.items():
            lines.append(f"  {k:<28s} {'ok' if v['ok'] else 'NOT MET'}  {v.get('detail', '')}")
        if self.curve_check:
            lines.append(f"  curves pass {self.curve_check['pass_fraction']:.3f}"
                         f" (avoiding N {self.curve_check['pass_fraction_avoiding_N']:.3f})")
        return "\n".join(lines)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def save_certificate(cert, path):
    with open(path, "w") as fh:
        fh.write(cert.to_json())
        fh.write("\n")


def load_certificate(path):
    with open(path) as fh:
        return Certificate.from_dict(json.load(fh))


def evaluate_bound(theorem_id, comp, params, consts):
    """(bound at the certificate's eps, bound in the eps -> 0 form)."""
    Cd, CO = consts["C_d"], consts["C_Omega"]
    M, Q, p, eps = params["M"], params["Q"], params["p"], params["eps"]
    if theorem_id == "T4.1-BV":
        b = bv_energy_bound(comp["int_h_dkappa"], comp["kappa_Omega"], comp["nu_V"], eps, M, Q, Cd, CO)
        return b, b
    if theorem_id == "T4.2-Sobolev-Lip":
        b = lip_level_bound(comp["int_hp_ap"], comp["int_ap"], p, M, Cd, eps)
        bl = sobolev_energy_bound_lip(comp["int_hp_ap"] ** (1 / p), p, M, Cd) ** p
        return b, bl
    if theorem_id == "T4.3-Sobolev-H":
        b = sobolev_energy_bound_distortion(comp["int_h_aq"], comp["nu_V"], p, Q, M, Cd, CO,
                                            comp["int_aq"], eps)
        bl = sobolev_energy_bound_distortion(comp["int_h_aq"], comp["nu_V"], p, Q, M, Cd, CO)
        return b, bl
    if theorem_id == "T4.3-p=Q":
        b = pq_bound(comp["nu_V"], comp["a_sup"], comp["Ha_sup"], Q, Cd, CO)
        return b, b
    raise ValueError(f"unknown theorem {theorem_id}")


def inputs_digest(mapping, arrays, params):
    hs = hashlib.sha256()
    sp = mapping.domain
    for arr in (sp.coords, sp.weights, mapping.values):
        hs.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    for name in sorted(arrays):
        a = arrays[name]
        if a is not None:
            hs.update(name.encode())
            hs.update(np.ascontiguousarray(a, dtype=float).tobytes())
    hs.update(json.dumps(_plain(params), sort_keys=True).encode())
    return hs.hexdigest()


def measured_doubling(space, radii):
    """Doubling estimate at the given radii over points whose doubled ball
    stays inside the sampled box."""
    bd = boundary_distance(space)
    best = 1.0
    for r in np.unique(radii):
        pts = np.flatnonzero(bd > 2 * r * (1 + TOL))
        if len(pts) == 0:
            continue
        best = max(best, doubling_constant_estimate(space, [r], pts).C_hat)
    return float(best)


def measured_C_Omega(space, Q, radii, image_pairs=()):
    """max of mu(B(x,r))/r^Q over inner points and r in radii, and of
    r^Q/nu(B(f(y), r)) over the supplied (nu, r) pairs."""
    bd = boundary_distance(space)
    best = 0.0
    for r in np.unique(radii):
        pts = np.flatnonzero(bd > r * (1 + TOL))
        if len(pts) == 0:
            continue
        best = max(best, float(ball_sums(space, space.weights, r, pts).max()) / r ** Q)
    for nu, r in image_pairs:
        nu = np.asarray(nu, dtype=float)
        r = np.asarray(r, dtype=float)
        ok = r > 0
        if ok.any():
            with np.errstate(divide="ignore"):
                best = max(best, float((r[ok] ** Q / nu[ok]).max()))
    return best


def certify(mapping, theorem, weight=None, a=None, h=None, M=1.0, Q=2.0, p=1.0, eps=1.0, beta=None,
            levels=None, schedule=None, C_d=None, C_Omega=None, family=None,
            thresholds=(np.inf, np.inf), null_tol=0.05, diverge_alpha=0.5):
    """Run one theorem's construction on a sampled mapping and certify it.

    weight: kappa for T4.1 (default mu).  a: the density for T4.2/T4.3
    (default 1).  h: dominating field (default: the constant sup of the
    relevant proxy, which always dominates).  C_d / C_Omega: measured at the
    certificate's own scales when not supplied.
    """
    if theorem not in THEOREMS:
        raise ValueError(f"unknown theorem {theorem}")
    sp = mapping.domain
    if not M >= 1:
        raise ValueError("M must be >= 1")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if not Q > 1:
        raise ValueError("Q must exceed 1")
    if theorem == "T4.3-p=Q":
        p = Q
    if not 1 <= p <= Q:
        raise ValueError("need 1 <= p <= Q")
    if theorem == "T4.1-BV":
        p = 1.0
    if theorem == "T4.3-Sobolev-H" and not p < Q:
        raise ValueError("p = Q goes to the T4.3-p=Q route")
    if levels is None:
        levels = default_levels(sp, M)
    levels = tuple(sorted(int(j) for j in levels))
    if beta is None:
        # smallest beta with every 1/j <= beta; it gives the smallest V
        beta = 1.0 / levels[0]
    if schedule is None:
        schedule = default_schedule(sp, levels)
    if a is not None:
        a = np.asarray(a, dtype=float)
        if (a < 0).any():
            raise ValueError("a must be nonnegative")
    a_arr = np.ones(sp.n) if a is None else a
    if theorem == "T4.1-BV":
        kappa = weight if weight is not None else RadonWeight(sp)
    else:
        kappa = RadonWeight(sp, density=a_arr)
        # every sampled ball of the smallest trusted radius needs a-mass
        if (ball_sums(sp, a_arr * sp.weights, sp.trusted_floor) <= 0).any():
            raise ValueError("a has a zero-mass ball")
    km = kappa.masses
    params = {"M": float(M), "Q": float(Q), "p": float(p), "eps": float(eps), "beta": float(beta),
              "levels": list(levels), "schedule": [float(r) for r in schedule.radii],
              "tail_length": int(schedule.tail_length), "null_tol": float(null_tol),
              "thresholds": [float(t) for t in thresholds]}
    digest = inputs_digest(mapping, {"kappa": km, "a": a, "h": h}, params)
    if theorem == "T4.3-p=Q":
        return _certify_pQ(mapping, a_arr, kappa, M, Q, eps, beta, levels, schedule, C_d, C_Omega,
                           params, digest, diverge_alpha)

    mode = {"T4.1-BV": "BV", "T4.2-Sobolev-Lip": "Lip", "T4.3-Sobolev-H": "H"}[theorem]
    part = classify_points(mapping, kappa, M, Q, thresholds, schedule, levels, eps, h, mode, p,
                           diverge_alpha)
    # h: supplied or the constant sup of the proxy combination it must dominate
    need = np.zeros(sp.n)
    if mode in ("BV", "Lip"):
        need[part.A] = part.lip[part.A]
    if len(part.D):
        s_exp = Q / (Q - 1) if mode == "BV" else Q * p / (Q - p)
        need[part.D] = part.H[part.D] ** s_exp
    if h is None:
        h_arr = np.full(sp.n, float(need.max()) if sp.n else 0.0)
        h_src = "constant sup of the proxy"
    else:
        h_arr = np.asarray(h, dtype=float) * np.ones(sp.n)
        h_src = "supplied"
        bad = np.flatnonzero(need > h_arr + 1e-9 * np.maximum(1.0, np.abs(need)))
        if len(bad):
            raise ValueError(f"h does not dominate the proxy at {len(bad)} points, e.g. {bad[:10].tolist()}")

    # N: certified null when its codimension-p content at the finest scale is small
    R = float(schedule.tail[-1])
    n_content = null_set_content(sp, part.N, p, R)
    n_ok = n_content <= null_tol
    include_N = not n_ok
    eps_l = eps ** (Q / (Q - 1))

    # measured constants at the scales the chains use
    radii_used = np.unique(np.concatenate([schedule.radii, [1.0 / j for j in levels]]))
    Cd = C_d if C_d is not None else measured_doubling(sp, radii_used)
    covers = build_covers(part, sp, Cd, include_N)
    seq = assemble_gradients(mapping, part, covers, mode, p, include_N)

    # centers' quantities, and the constants the chains need at them
    stats = {}
    img_pairs = []
    cd_centers = 1.0
    for lv in seq.levels:
        j = lv.j
        for nm, pt in lv.parts.items():
            if nm == "N" or len(pt["centers"]) == 0:
                continue
            st = _part_stats(sp, mapping, pt, j, M, km)
            stats[(j, nm)] = st
            cd_centers = max(cd_centers, float((st["mu2B"] / st["muMB"]).max()))
            if nm == "D":
                nuB = target_ball_measure(mapping, mapping.values[pt["centers"]], pt["l"])
                st["nuB"] = nuB
                img_pairs.append((nuB, pt["l"]))
    if C_d is None and cd_centers > Cd:
        Cd = cd_centers
        covers = build_covers(part, sp, Cd, include_N)
    CO = C_Omega if C_Omega is not None else measured_C_Omega(
        sp, Q, np.concatenate([radii_used, [M / j for j in levels]]), img_pairs)
    CMv = C_M(Cd, M)

    # nu(V) over D
    nu_V = 0.0
    if len(part.D):
        nu_V = image_volume(mapping, part.D, beta)

    hyp = {}
    hyp["h_dominates"] = {"ok": True, "detail": h_src}
    hyp["N_modulus_null"] = {"ok": bool(n_ok), "detail": f"codim-{p:g} content {n_content:.4g} at R={R:.4g}"
                             f" (tol {null_tol:g}); N has {len(part.N)} points"}
    flagged = [j for j, prt in covers.levels.items() for c in prt.values() if c is not None and c.flagged]
    hyp["overlap_within_C_M"] = {"ok": not flagged, "detail": f"C_M={CMv:.4g}; flagged levels {flagged}"}
    if theorem == "T4.1-BV":
        hyp["kappa_support"] = {"ok": bool((km > 0).all()), "detail": "every sample carries kappa mass"}
    if len(part.D):
        inj = mapping.injective or len(mapping.injectivity_violations()) == 0
        hyp["injective"] = {"ok": bool(inj), "detail": ""}
        small = all(1.0 / j <= beta for j in levels)
        hyp["levels_below_beta"] = {"ok": bool(small), "detail": f"beta={beta:g}"}
        hyp["nu_V_finite"] = {"ok": bool(np.isfinite(nu_V)), "detail": f"nu(V)={nu_V:.6g}"}

    w = sp.weights
    q = p * (Q - 1) / (Q - p) if p < Q else None
    if theorem == "T4.1-BV":
        comp = {"int_h_dkappa": float((h_arr * km).sum()), "kappa_Omega": float(km.sum()), "nu_V": float(nu_V)}
    elif theorem == "T4.2-Sobolev-Lip":
        comp = {"int_hp_ap": float((h_arr ** p * a_arr ** p * w).sum()), "int_ap": float((a_arr ** p * w).sum())}
    else:
        comp = {"int_h_aq": float((h_arr * a_arr ** q * w).sum()), "int_aq": float((a_arr ** q * w).sum()),
                "nu_V": float(nu_V)}
    consts = {"C_d": float(Cd), "C_Omega": float(CO), "k": overlap_exponent(M), "C_M": float(CMv),
              "C_d_source": "supplied" if C_d is not None else "measured",
              "C_Omega_source": "supplied" if C_Omega is not None else "measured"}
    consts["C_value"] = float({"T4.1-BV": lambda: C1(Cd, CO, Q, M),
                               "T4.2-Sobolev-Lip": lambda: C2(Cd, p, M),
                               "T4.3-Sobolev-H": lambda: C3(Cd, CO, p, Q, M)}[theorem]())
    bound, bound_limit = evaluate_bound(theorem, comp, params, consts)

    table = []
    for lv in seq.levels:
        row = {"j": lv.j, "energy": lv.energy, "energy_p": lv.energy_p,
               "part_energy": {k: v["energy"] for k, v in lv.parts.items()},
               "balls": {k: int(len(v["centers"])) for k, v in lv.parts.items()}}
        if theorem == "T4.1-BV":
            chains = _bv_chains(sp, mapping, lv, part, stats, km, h_arr, eps, eps_l, M, Q, Cd, CO, CMv,
                                nu_V, bound)
        elif theorem == "T4.2-Sobolev-Lip":
            chains = _lip_chain(sp, lv, part, stats, a_arr, h_arr, eps, M, p, Cd, CMv, bound)
        else:
            chains = _h_chain(sp, lv, part, stats, a_arr, h_arr, eps, M, p, Q, Cd, CO, CMv, nu_V, bound)
        row["chains"] = chains
        row["chain_ok"] = all(c["ok"] for c in chains.values())
        row["within_bound"] = bool((lv.energy if p == 1 else lv.energy_p) <= bound)
        table.append(row)

    curve = None
    if family is not None:
        curve = curvewise_verification(mapping, seq, family, part.N).summary()

    verdict = "PASS"
    if not all(v["ok"] for v in hyp.values()):
        verdict = "FAIL"
    if not all(r["chain_ok"] and r["within_bound"] for r in table):
        verdict = "FAIL"
    cover_sum = {str(j): {k: (None if c is None else {"balls": int(len(c.centers)), "multiplicity": c.multiplicity,
                                                       "colors": c.colors, "flagged": c.flagged})
                          for k, c in prt.items()} for j, prt in covers.levels.items()}
    cert = Certificate(theorem, digest, params, consts, part.summary(sp), cover_sum, table, comp,
                       float(bound), float(bound_limit), hyp, curve, verdict)
    cert._sequence = seq
    cert._partition = part
    return cert


def _bv_chains(sp, mapping, lv, part, stats, km, h, eps, eps_l, M, Q, Cd, CO, CMv, nu_V, bound):
    j = lv.j
    s = Q / (Q - 1)
    chains = {}
    A_total, D_total = 0.0, 0.0
    if ("A" in lv.parts) and len(lv.parts["A"]["centers"]):
        st = stats[(j, "A")]
        c = lv.parts["A"]["centers"]
        lipc = part.lip[c]
        FMB = ball_sums(sp, (h + 2 * eps_l) * km, M / j, c)
        a1 = 2 * j * (st["L"] * st["mu2B"]).sum()
        a2 = 2 * Cd * (st["kMB"] * (lipc + eps_l)).sum()
        a3 = 2 * Cd * FMB.sum()
        a4 = 2 * Cd * CMv * ((h + 2 * eps_l) * km).sum()
        chains["A"] = _chain([("2j sum L mu(2B)", a1), ("level condition, doubling", a2),
                              ("h condition", a3), ("bounded overlap", a4)])
        A_total = a4
    if ("D" in lv.parts) and len(lv.parts["D"]["centers"]):
        st = stats[(j, "D")]
        c = lv.parts["D"]["centers"]
        Hc = part.H[c]
        L, l, kMB, muMB, mu2B = st["L"], st["l"], st["kMB"], st["muMB"], st["mu2B"]
        b1 = 2 * j * (L * mu2B).sum()
        b2 = 2 * j * (l * mu2B * (kMB / muMB) ** ((Q - 1) / Q) * (Hc + eps)).sum()
        # the M factor: j^Q mu(B(y, M/j)) <= C_Omega M^Q
        y1 = 2 * Cd * M * CO ** (1 / Q) * l
        y2 = kMB ** ((Q - 1) / Q) * (Hc + eps)
        b3 = (y1 * y2).sum()
        young_ok = bool((y1 * y2 <= (eps * y1 ** Q + eps ** (-1 / (Q - 1)) * y2 ** s)
                         * (1 + CHAIN_TOL)).all())
        b4 = (2 * Cd * M) ** Q * CO * eps * (l ** Q).sum() + eps ** (-1 / (Q - 1)) * (kMB * (Hc + eps) ** s).sum()
        b5 = ((2 * Cd * M) ** Q * CO ** 2 * eps * st["nuB"].sum()
              + 2 ** s * eps ** (-1 / (Q - 1)) * ((Hc ** s + eps_l) * kMB).sum())
        FMB = ball_sums(sp, (h + 2 * eps_l) * km, M / j, c)
        b6 = ((2 * Cd * M) ** Q * CO ** 2 * eps * st["nuB"].sum()
              + 2 ** s * eps ** (-1 / (Q - 1)) * FMB.sum())
        b7 = ((2 * Cd * M) ** Q * CO ** 2 * CMv * eps * nu_V
              + CMv * 2 ** s * eps ** (-1 / (Q - 1)) * ((h + 2 * eps_l) * km).sum())
        chains["D"] = _chain([("2j sum L mu(2B)", b1), ("level condition", b2),
                              ("doubling, upper mass bound", b3), ("Young split", b4),
                              ("lower image mass bound", b5), ("h condition", b6),
                              ("bounded overlap, injectivity", b7)])
        chains["D"]["young_per_ball"] = young_ok
        chains["D"]["ok"] = chains["D"]["ok"] and young_ok
        D_total = b7
    theory = lv.parts.get("A", {"energy": 0.0})["energy"] + lv.parts.get("D", {"energy": 0.0})["energy"]
    chains["total"] = _chain([("theorem part of int g_j", theory), ("A + D chain ends", A_total + D_total),
                              ("bound", bound)])
    return chains


def _lip_chain(sp, lv, part, stats, a, h, eps, M, p, Cd, CMv, bound):
    j = lv.j
    chains = {}
    if "A" not in lv.parts or not len(lv.parts["A"]["centers"]):
        chains["A"] = _chain([("int g_j^p", lv.energy_p), ("bound", bound)])
        return chains
    st = stats[(j, "A")]
    c = lv.parts["A"]["centers"]
    w = sp.weights
    r = M / j
    muMB, mu2B = st["muMB"], st["mu2B"]
    avg_a = ball_sums(sp, a * w, r, c) / muMB
    avg_ha = ball_sums(sp, (h + 2 * eps) * a * w, r, c) / muMB
    int_hpap = ball_sums(sp, ((h + 2 * eps) * a) ** p * w, r, c)
    pre = 2 ** p * CMv ** p
    e1 = j ** p * (st["L"] ** p * mu2B).sum()
    e2 = (mu2B * avg_a ** p * (part.lip[c] + eps) ** p).sum()
    e3 = (mu2B * avg_ha ** p).sum()
    e4 = (mu2B * int_hpap / muMB).sum()
    e5 = Cd * int_hpap.sum()
    e6 = Cd * CMv * (((h + 2 * eps) * a) ** p * w).sum()
    energy = lv.energy_p if "N" not in lv.parts else float(
        (ball_sums(sp, _splat(sp, lv.parts["A"], j), 2.0 / j) ** p * w).sum())
    chains["A"] = _chain([("int g_j^p (A balls)", energy), ("overlap power", pre * e1),
                          ("level condition", pre * e2), ("h condition", pre * e3),
                          ("Hoelder", pre * e4), ("doubling", pre * e5), ("bounded overlap", pre * e6),
                          ("bound", bound)])
    return chains


def _h_chain(sp, lv, part, stats, a, h, eps, M, p, Q, Cd, CO, CMv, nu_V, bound):
    j = lv.j
    chains = {}
    if "D" not in lv.parts or not len(lv.parts["D"]["centers"]):
        chains["D"] = _chain([("int g_j^p", lv.energy_p), ("bound", bound)])
        return chains
    st = stats[(j, "D")]
    c = lv.parts["D"]["centers"]
    w = sp.weights
    r = M / j
    q = p * (Q - 1) / (Q - p)
    ps = Q * p / (Q - p)
    L, l, muMB, mu2B, Hc = st["L"], st["l"], st["muMB"], st["mu2B"], part.H[c]
    avg_a = ball_sums(sp, a * w, r, c) / muMB
    int_aq = ball_sums(sp, a ** q * w, r, c)
    avg_aq = int_aq / muMB
    int_aqh = ball_sums(sp, a ** q * (h + eps + eps ** ps) * w, r, c)
    pre = 2 ** p * CMv ** p
    k1 = Cd * M ** p * CO ** (p / Q)
    s1 = j ** p * (L ** p * mu2B).sum()
    s2 = j ** p * (l ** p * mu2B * avg_a ** (p * (Q - 1) / Q) * (Hc + eps) ** p).sum()
    s3 = j ** p * (l ** p * mu2B * avg_aq ** ((Q - p) / Q) * (Hc + eps) ** p).sum()
    y1 = k1 * l ** p
    y2 = int_aq ** ((Q - p) / Q) * (Hc + eps) ** p
    s4 = (y1 * y2).sum()
    young_ok = bool((y1 * y2 <= (y1 ** (Q / p) + y2 ** (Q / (Q - p))) * (1 + CHAIN_TOL)).all())
    s5 = k1 ** (Q / p) * (l ** Q).sum() + (int_aq * (Hc + eps) ** ps).sum()
    s6 = (k1 ** (Q / p) * CO * st["nuB"].sum() + 2 ** ps * (int_aq * (Hc ** ps + eps ** ps)).sum())
    s7 = (k1 ** (Q / p) * CO * st["nuB"].sum() + 2 ** ps * int_aqh.sum())
    s8 = (k1 ** (Q / p) * CO * CMv * nu_V + 2 ** ps * CMv * (a ** q * (h + 2 * eps) * w).sum())
    energy = lv.energy_p if "N" not in lv.parts else float(
        (ball_sums(sp, _splat(sp, lv.parts["D"], j), 2.0 / j) ** p * w).sum())
    chains["D"] = _chain([("int g_j^p (D balls)", energy), ("overlap power", pre * s1),
                          ("level condition", pre * s2), ("Jensen", pre * s3),
                          ("doubling, upper mass bound", pre * s4), ("Young split", pre * s5),
                          ("lower image mass bound", pre * s6), ("h condition", pre * s7),
                          ("bounded overlap, injectivity", pre * s8), ("bound", bound)])
    chains["D"]["young_per_ball"] = young_ok
    chains["D"]["ok"] = chains["D"]["ok"] and young_ok
    return chains


def _splat(sp, part, j):
    s = np.zeros(sp.n)
    np.add.at(s, part["centers"], 2 * j * part["L"])
    return s


# ---------------------------------------------------------------- p = Q branch

@dataclass
class PQReport:
    lip_energy: float
    bound: float
    nu_V: float
    a_sup: float
    H_sup: float
    Ha_sup: float
    comparison_ok: bool
    hj_integrals: dict
    fatou_min: float
    pointwise_ok: bool


def sobolev_bound_pQ(mapping, a, M, Q, nu_V, schedule, C_d, C_Omega, points=None):
    """lip_f in L^Q against C4 nu(V) ||a||^(Q-1) ||H^{a,M}||^Q.

    lip, H and H^{a,M} are evaluated on one common point set (M-inner
    points for the schedule tail).  The comparison ||H|| <= ||a||^((Q-1)/Q)
    ||H^{a,M}|| holds radius by radius, so it is checked on the sampled sups
    without slack.  h_j = nu(B(f(y), l_f(y, r))) / mu(B(y, r)) is integrated
    at every tail radius and the smallest integral is reported.
    """
    sp = mapping.domain
    a = np.asarray(a, dtype=float) * np.ones(sp.n)
    if not np.isfinite(a).all():
        raise ValueError("a is unbounded on the samples")
    tail = schedule.tail
    ev = evaluation_points(sp, M, tail[0]) if points is None else np.asarray(points, dtype=int)
    kappa = RadonWeight(sp, density=a)
    sub = None if len(ev) == sp.n else ev
    L = ball_sups(mapping, tail, sub)
    if sub is None:
        L = L[ev]
    l, _ = complement_infs(mapping, tail, ev)
    with np.errstate(divide="ignore", invalid="ignore"):
        Hr = np.where(l > 0, L / np.where(l > 0, l, 1.0), np.inf)
    mu = np.stack([ball_sums(sp, sp.weights, r, ev) for r in tail], axis=1)
    ka = np.stack([ball_sums(sp, kappa.masses, r * M, ev) for r in tail], axis=1)
    muM = np.stack([ball_sums(sp, sp.weights, r * M, ev) for r in tail], axis=1)
    Har = Hr * (muM / ka) ** ((Q - 1) / Q)
    H_sup = float(Hr.max(axis=1).max()) if len(ev) else 0.0
    Ha_sup = float(Har.max(axis=1).max()) if len(ev) else 0.0
    a_sup = float(a.max())
    comparison_ok = H_sup <= a_sup ** ((Q - 1) / Q) * Ha_sup
    lip = (L / tail[None, :]).min(axis=1)
    w = sp.weights[ev]
    lip_energy = float((lip ** Q * w).sum())
    hj = {}
    hvals = []
    for k, r in enumerate(tail):
        nu = target_ball_measure(mapping, mapping.values[ev], l[:, k])
        hv = nu / mu[:, k]
        hvals.append(hv)
        hj[float(r)] = float((hv * w).sum())
    fatou = min(hj.values()) if hj else 0.0
    # pointwise: lip^Q <= C_Omega^2 H^Q h_j at the radius where lip is attained
    kmin = np.argmin(L / tail[None, :], axis=1)
    hv_at = np.stack(hvals, axis=1)[np.arange(len(ev)), kmin]
    H_at = Hr[np.arange(len(ev)), kmin]
    pointwise_ok = bool((lip ** Q <= C_Omega ** 2 * H_at ** Q * hv_at * (1 + CHAIN_TOL)).all())
    bound = pq_bound(nu_V, a_sup, Ha_sup, Q, C_d, C_Omega)
    return PQReport(lip_energy, float(bound), float(nu_V), a_sup, H_sup, Ha_sup, bool(comparison_ok),
                    hj, float(fatou), pointwise_ok)


def _certify_pQ(mapping, a, kappa, M, Q, eps, beta, levels, schedule, C_d, C_Omega, params, digest,
                diverge_alpha):
    sp = mapping.domain
    part = classify_points(mapping, kappa, M, Q, (np.inf, np.inf), schedule, levels, eps, None, "H",
                           1.0, diverge_alpha)
    radii_used = np.unique(np.concatenate([schedule.radii, [1.0 / j for j in levels]]))
    Cd = C_d if C_d is not None else measured_doubling(sp, radii_used)
    ev = evaluation_points(sp, M, schedule.tail[0])
    D = part.D
    inj = mapping.injective or len(mapping.injectivity_violations()) == 0
    nu_V, lb = image_volume(mapping, D, beta, return_radii=True) if len(D) else (0.0, np.zeros(0))
    if C_Omega is None:
        l, _ = complement_infs(mapping, schedule.tail, ev)
        pairs = [(target_ball_measure(mapping, mapping.values[ev], l[:, k]), l[:, k])
                 for k in range(len(schedule.tail))]
        CO = measured_C_Omega(sp, Q, np.concatenate([radii_used, schedule.tail * M]), pairs)
    else:
        CO = C_Omega
    rep = sobolev_bound_pQ(mapping, a, M, Q, nu_V, schedule, Cd, CO, ev)
    comp = {"nu_V": float(nu_V), "a_sup": rep.a_sup, "Ha_sup": rep.Ha_sup}
    consts = {"C_d": float(Cd), "C_Omega": float(CO), "k": overlap_exponent(M), "C_M": float(C_M(Cd, M)),
              "C_d_source": "supplied" if C_d is not None else "measured",
              "C_Omega_source": "supplied" if C_Omega is not None else "measured",
              "C_value": float(C4(Cd, CO))}
    bound, bl = evaluate_bound("T4.3-p=Q", comp, params, consts)
    hyp = {"injective": {"ok": bool(inj), "detail": ""},
           "a_bounded": {"ok": bool(np.isfinite(rep.a_sup)), "detail": f"sup a = {rep.a_sup:.6g}"},
           "Ha_bounded": {"ok": bool(np.isfinite(rep.Ha_sup)), "detail": f"sup H^(a,M) = {rep.Ha_sup:.6g}"},
           "N_empty": {"ok": len(part.N) == 0, "detail": f"{len(part.N)} points"},
           "L_infinity_comparison": {"ok": rep.comparison_ok,
                                     "detail": f"{rep.H_sup:.6g} <= {rep.a_sup ** ((Q - 1) / Q) * rep.Ha_sup:.6g}"}}
    row = {"j": int(levels[-1]), "energy": rep.lip_energy, "energy_p": rep.lip_energy,
           "hj_integrals": rep.hj_integrals, "fatou_min": rep.fatou_min,
           "chains": {"lip": _chain([("int lip^Q", rep.lip_energy), ("bound", float(bound))])},
           "chain_ok": rep.pointwise_ok and rep.lip_energy <= bound,
           "within_bound": rep.lip_energy <= bound}
    row["chains"]["lip"]["pointwise_lip_vs_hj"] = rep.pointwise_ok
    verdict = "PASS" if all(v["ok"] for v in hyp.values()) and row["chain_ok"] else "FAIL"
    cert = Certificate("T4.3-p=Q", digest, params, consts, part.summary(sp), {}, [row], comp,
                       float(bound), float(bl), hyp, None, verdict)
    cert._report = rep
    cert._partition = part
    return cert
