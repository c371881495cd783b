"""Pointwise Lipschitz and distortion numbers of sampled mappings.

L_f(x, r) is a sup over the closed ball, l_f(x, r) an inf over the sampled
points at distance >= r.  The limsup/liminf in the asymptotic numbers are
replaced by the max/min over the smallest radii of a schedule.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import TOL, inside, lattice_ball_sup
from .space import MetricMeasureSpace, ball_measures, boundary_distance


class SampledMapping:
    """Values f(x) in a Euclidean target for every domain sample.

    `target` is an optional sampled space for Y, used for target volumes
    and the injectivity tolerance.  Distances in Y are Euclidean on
    `values`, so rescaling d_Y by c means multiplying the values by c.
    """

    def __init__(self, domain, values, target=None, injective=False):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if len(values) != domain.n:
            raise ValueError("need one value per domain point")
        if not np.isfinite(values).all():
            raise ValueError("values must be finite")
        self.domain = domain
        self.values = values
        self.target = target
        self.injective = bool(injective)
        if injective:
            clash = self.injectivity_violations()
            if len(clash):
                raise ValueError(f"{len(clash)} sample pairs map within the target tolerance")

    @cached_property
    def target_tree(self):
        return cKDTree(self.values)

    def injectivity_violations(self):
        # a KD-tree pair query is exact at any sample size
        res = self.target.resolution if self.target is not None else 1e-12
        return self.target_tree.query_pairs(res / 2, output_type="ndarray")

    def scaled(self, c):
        return SampledMapping(self.domain, self.values * c, self.target, False)


@dataclass
class RadiusSchedule:
    radii: np.ndarray
    tail_length: int = 3

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if len(r) < 2 or not (np.diff(r) < 0).all() or not (r > 0).all():
            raise ValueError("radii must be positive and strictly decreasing")
        if not 2 <= self.tail_length <= len(r):
            raise ValueError("need len(radii) >= tail_length >= 2")
        self.radii = r

    @property
    def tail(self):
        return self.radii[-self.tail_length:]

    def check(self, space):
        if self.radii[-1] < space.trusted_floor * (1 - TOL):
            raise ValueError(f"schedule goes below the trusted floor {space.trusted_floor:g}")
        return self

    @classmethod
    def geometric(cls, r_max, r_min, count, tail_length=3):
        return cls(np.geomspace(r_max, r_min, count), tail_length)

    @classmethod
    def for_levels(cls, levels, floor, tail_length=3, factor=1.5, snap=None):
        """Radii 1/j for every level plus a geometric tail down to `floor`.

        With `snap` (a lattice step) the tail radii are rounded to multiples
        of it, where lattice ball sups are exact for isometries.
        """
        rs = {1.0 / j for j in levels}
        r = min(rs) / factor
        tail = []
        while r >= floor * (1 - TOL):
            tail.append(r)
            r /= factor
        if len(tail) < tail_length:
            tail = list(np.geomspace(min(rs) / factor, floor, tail_length))
        if snap is not None:
            snapped = sorted({round(t / snap) * snap for t in tail}, reverse=True)
            snapped = [t for t in snapped if t >= floor * (1 - TOL) and t < min(rs) * (1 - 1e-12)]
            if len(snapped) >= tail_length:
                tail = snapped
        return cls(np.array(sorted(rs | set(tail), reverse=True)), tail_length)


class RadonWeight:
    """kappa = density * mu + point masses hosted at samples."""

    def __init__(self, space, density=None, singular=None):
        self.space = space
        self.density = None if density is None else np.asarray(density, dtype=float)
        if self.density is not None and (self.density < 0).any():
            raise ValueError("density must be nonnegative")
        if singular is not None:
            idx, mass = singular
            idx = np.asarray(idx, dtype=int)
            mass = np.broadcast_to(np.asarray(mass, dtype=float), idx.shape).copy()
            if (mass < 0).any():
                raise ValueError("masses must be nonnegative")
            singular = (idx, mass)
        self.singular = singular

    @cached_property
    def masses(self):
        w = self.space.weights.copy() if self.density is None else self.density * self.space.weights
        if self.singular is not None:
            np.add.at(w, self.singular[0], self.singular[1])
        return w

    @property
    def total(self):
        return float(self.masses.sum())

    def dominates_mu(self):
        return bool((self.masses >= self.space.weights * (1 - 1e-12)).all())


@dataclass
class PointwiseField:
    kind: str
    values: np.ndarray        # nan where not evaluated
    evaluated: np.ndarray     # indices
    spread: np.ndarray
    alpha: np.ndarray         # fitted growth exponent as r -> 0
    diverging: np.ndarray
    radii: np.ndarray
    table: np.ndarray = field(repr=False)

    def on(self, idx=None):
        return self.values[self.evaluated if idx is None else idx]

    def sup(self):
        v = self.values[self.evaluated]
        return float(v.max()) if len(v) else 0.0


def L_f(mapping, x, r):
    x = mapping.domain.index_of(x)
    return float(ball_sups(mapping, [r], [x])[0, 0])


def l_f(mapping, x, r):
    x = mapping.domain.index_of(x)
    v, empty = complement_infs(mapping, [r], [x])
    return float(v[0, 0])


def distortion_ratio(mapping, x, r):
    return float(_safe_ratio(np.array(L_f(mapping, x, r)), np.array(l_f(mapping, x, r))))


def _safe_ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)


def ball_sups(mapping, radii, idx=None):
    """L_f(x, r) for x in idx (default: all points), shape (len(idx), len(radii))."""
    sp = mapping.domain
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    use_lattice = sp.lattice is not None and (idx is None or len(idx) >= 0.2 * sp.n)
    if use_lattice:
        lat = sp.lattice
        out = lattice_ball_sup(mapping.values, lat["shape"], lat["step"], radii)
        return out if idx is None else out[np.asarray(idx, dtype=int)]
    idx = np.arange(sp.n) if idx is None else np.asarray(idx, dtype=int)
    out = np.zeros((len(idx), len(radii)))
    rmax = radii.max()
    per = _count_estimate(sp, rmax)
    chunk = max(1, int(3e6 // per))
    for s in range(0, len(idx), chunk):
        part = idx[s:s + chunk]
        own, mem, d = sp.flat_neighbors(part, rmax, closed=True)
        img = np.sqrt(((mapping.values[mem] - mapping.values[part[own]]) ** 2).sum(axis=1))
        # own is sorted and every point owns itself, so segments are nonempty
        starts = np.searchsorted(own, np.arange(len(part)))
        for k, r in enumerate(radii):
            v = np.where(inside(d, r, True), img, 0.0)
            out[s:s + len(part), k] = np.maximum.reduceat(v, starts)
    return out


def _count_estimate(space, r):
    if space.bounds is None:
        return space.n
    vol = np.prod(space.bounds[:, 1] - space.bounds[:, 0])
    return float(min(space.n, max(1.0, space.n * (2 * r) ** space.dim / vol)))


def complement_infs(mapping, radii, idx=None):
    """l_f(x, r) = min image distance over samples with d(y, x) >= r.

    Candidates are pulled from a KD-tree on the image in increasing image
    distance, so the first one far enough away in the domain is the exact
    minimizer.  Returns (values, empty) where empty flags points with no
    candidate at all (value +inf).
    """
    sp = mapping.domain
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    idx = np.arange(sp.n) if idx is None else np.asarray(idx, dtype=int)
    out = np.full((len(idx), len(radii)), np.inf)
    todo = np.arange(len(idx))
    # a near-isometric map needs about as many candidates as the domain ball holds
    k = int(min(sp.n, max(16, 1.3 * _count_estimate(sp, radii.max()))))
    tree = mapping.target_tree
    while len(todo):
        chunk = max(1, int(2e6 // k))
        pending = []
        for s in range(0, len(todo), chunk):
            pos = todo[s:s + chunk]
            pts = idx[pos]
            td, ti = tree.query(mapping.values[pts], k=k)
            td = td.reshape(len(pts), -1)
            ti = ti.reshape(len(pts), -1)
            if sp.metric is None:
                dd = np.sqrt(((sp.coords[ti] - sp.coords[pts][:, None, :]) ** 2).sum(axis=2))
            else:
                dd = np.stack([sp.distances_from(p, row) for p, row in zip(pts, ti)])
            done = np.ones(len(pts), dtype=bool)
            for c, r in enumerate(radii):
                ok = dd >= r * (1 - TOL)
                hit = ok.any(axis=1)
                first = np.argmax(ok, axis=1)
                rows = np.flatnonzero(hit)
                out[pos[rows], c] = td[rows, first[rows]]
                done &= hit
            pending.append(pos[~done])
        todo = np.concatenate(pending) if pending else np.array([], dtype=int)
        if k >= sp.n:
            break
        k = min(sp.n, 4 * k)
    empty = ~np.isfinite(out)
    return out, empty


KINDS = ("lip", "Lip", "h", "H", "Lip_generalized", "H_generalized")


def evaluation_points(space, M, r_max, idx=None):
    """Points whose M*r_max ball stays inside the sampled region."""
    if space.bounds is None:
        ev = np.arange(space.n)
    else:
        ev = np.flatnonzero(boundary_distance(space) > M * r_max * (1 + TOL))
    if idx is not None:
        ev = np.intersect1d(ev, np.asarray(idx, dtype=int))
    return ev


def ratio_table(mapping, kind, radii, weight=None, M=1.0, Q=None, idx=None):
    """The quantity under the limsup/liminf at each radius, shape (len(idx), len(radii))."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind}")
    generalized = kind.endswith("generalized")
    if generalized:
        if weight is None:
            raise ValueError("generalized kinds need a weight")
        if M < 1:
            raise ValueError("M must be >= 1")
    if kind == "H_generalized" and (Q is None or not Q > 1):
        raise ValueError("H_generalized needs Q > 1")
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    sp = mapping.domain
    full = idx is None
    L = ball_sups(mapping, radii, None if full else idx)
    if full:
        idx = np.arange(sp.n)
    if kind in ("lip", "Lip", "Lip_generalized"):
        q = L / radii[None, :]
    else:
        l, _ = complement_infs(mapping, radii, idx)
        q = _safe_ratio(L, l)
    if generalized:
        mu = ball_measures(sp, M * radii, idx)
        ka = ball_measures(sp, M * radii, idx, weights=weight.masses)
        w = _safe_ratio(mu, ka)
        if kind == "H_generalized":
            w = w ** ((Q - 1) / Q)
        with np.errstate(invalid="ignore"):
            q = np.where(np.isinf(w), np.inf, q * w)
    return q


def _growth(table, radii):
    """Least-squares exponent alpha in q ~ r^-alpha over the tail."""
    n = len(table)
    alpha = np.zeros(n)
    lr = np.log(radii)
    good = (table > 0).all(axis=1) & np.isfinite(table).all(axis=1)
    if good.any() and len(radii) > 1:
        lq = np.log(table[good])
        x = lr - lr.mean()
        alpha[good] = -(lq - lq.mean(axis=1, keepdims=True)) @ x / (x @ x)
    alpha[~np.isfinite(table).all(axis=1)] = np.inf
    return alpha


def diverging_rows(table, radii, value, alpha_cut=0.5, spread_min=1.5):
    """Rows whose ratio keeps growing as r -> 0.

    Needs a steep fitted exponent, a sizable max/min spread, growth on
    every step and a steep last step.  A ratio that jumps once and then
    levels off is a feature leaving the dilated ball, not a divergence.
    """
    alpha = _growth(table, radii)
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = np.where(table.min(axis=1) > 0, table.max(axis=1) / table.min(axis=1),
                          np.where(table.max(axis=1) > 0, np.inf, 1.0))
        if len(radii) > 1:
            last = np.log(table[:, -1] / table[:, -2]) / np.log(radii[-2] / radii[-1])
            last = np.where(np.isnan(last), 0.0, last)
        else:
            last = np.full(len(table), np.inf)
        # a divergence grows on every step; a single late jump is a feature
        # leaving the dilated ball
        mono = (table[:, 1:] > table[:, :-1]).all(axis=1)
    div = ~np.isfinite(value) | ((alpha > alpha_cut) & (spread >= spread_min) & (last > alpha_cut / 2) & mono)
    return div, alpha, spread


def asymptotic_field(mapping, kind, schedule, weight=None, M=1.0, Q=None, idx=None,
                     diverge_alpha=0.5, spread_min=1.5):
    """limsup (max over tail) or liminf (min over tail) proxy of the chosen number.

    Evaluation is restricted to points whose M*r ball stays inside the
    region for every schedule radius.  A point is reported diverging when
    its ratio grows at least like r^-diverge_alpha across the tail and its
    max/min over the tail is at least spread_min.
    """
    schedule.check(mapping.domain)
    Mx = M if kind.endswith("generalized") else 1.0
    if Mx < 1:
        raise ValueError("M must be >= 1")
    ev = evaluation_points(mapping.domain, Mx, schedule.radii[0], idx)
    tail = schedule.tail
    n = mapping.domain.n
    if len(ev) == 0:
        empty = np.full(n, np.nan)
        return PointwiseField(kind, empty, ev, np.array([]), np.array([]),
                              np.array([], dtype=bool), tail, np.zeros((0, len(tail))))
    sub = None if len(ev) == n else ev
    q = ratio_table(mapping, kind, tail, weight, Mx, Q, sub)
    if kind in ("lip", "h"):
        v = q.min(axis=1)
    else:
        v = q.max(axis=1)
    # growth has to be both steep and sizable; lattice rounding near the
    # floor moves ratios by up to ~25% without any trend
    diverging, alpha, spread = diverging_rows(q, tail, v, diverge_alpha, spread_min)
    if kind in ("lip", "h"):
        diverging &= ~np.isfinite(v) | (q.min(axis=1) > 1.0 / tail[0])
    values = np.full(n, np.nan)
    values[ev] = v
    return PointwiseField(kind, values, ev, spread, alpha, diverging, tail, q)


@dataclass
class DiscontinuityReport:
    points: np.ndarray
    decay: np.ndarray
    h_values: np.ndarray
    h_diverging: np.ndarray


def discontinuity_scan(mapping, schedule):
    """Flag points where L_f(x, r) does not shrink with r across the tail.

    For a map that is Lipschitz near x, L_f(x, r_min)/L_f(x, r_max) is about
    r_min/r_max; a jump keeps it near 1.  Points whose ratio exceeds the
    geometric mean sqrt(r_min/r_max) are flagged and annotated with H.
    """
    schedule.check(mapping.domain)
    tail = schedule.tail
    ev = evaluation_points(mapping.domain, 1.0, schedule.radii[0])
    L = ball_sups(mapping, [tail[0], tail[-1]], None if len(ev) == mapping.domain.n else ev)
    if len(ev) == mapping.domain.n:
        L = L[ev]
    with np.errstate(divide="ignore", invalid="ignore"):
        decay = np.where(L[:, 0] > 0, L[:, 1] / L[:, 0], 0.0)
    flag = decay >= np.sqrt(tail[-1] / tail[0])
    pts = ev[flag]
    if len(pts):
        H = asymptotic_field(mapping, "H", schedule, idx=pts)
        hv = H.values[pts]
        pos = np.searchsorted(H.evaluated, pts)
        hd = H.diverging[pos]
    else:
        hv = np.array([])
        hd = np.array([], dtype=bool)
    return DiscontinuityReport(pts, decay[flag], hv, hd)


def fields_to_csv(space, fields, path):
    """Write coordinates plus value/spread/alpha for each field; fixed column order."""
    names = list(fields)
    header = [f"x{i}" for i in range(space.dim)]
    for nm in names:
        header += [nm, f"{nm}_spread", f"{nm}_alpha"]
    cols = [space.coords[:, i] for i in range(space.dim)]
    for nm in names:
        f = fields[nm]
        sp = np.full(space.n, np.nan)
        al = np.full(space.n, np.nan)
        sp[f.evaluated] = f.spread
        al[f.evaluated] = f.alpha
        cols += [f.values, sp, al]
    data = np.stack(cols, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([format(v, ".17g") for v in row])


def mapping_to_dict(mapping):
    return {"values": mapping.values.tolist(), "injective": mapping.injective}


def load_mapping(path, domain, target=None):
    with open(path) as fh:
        d = json.load(fh)
    vals = d["values"]
    if isinstance(vals, dict):
        vals = [vals[str(i)] for i in range(domain.n)]
    return SampledMapping(domain, vals, target, d.get("injective", False))


def save_mapping(mapping, path):
    with open(path, "w") as fh:
        json.dump(mapping_to_dict(mapping), fh)


def weight_to_dict(weight):
    d = {}
    if weight.density is not None:
        d["density"] = weight.density.tolist()
    if weight.singular is not None:
        d["singular"] = {"idx": weight.singular[0].tolist(), "mass": weight.singular[1].tolist()}
    return d


def load_weight(path, space):
    """kappa file: {"density": [...], "singular": {"idx": [...], "mass": [...]}}, both optional."""
    with open(path) as fh:
        d = json.load(fh)
    dens = d.get("density")
    if dens is not None and len(dens) != space.n:
        raise ValueError(f"density has {len(dens)} entries for {space.n} points")
    sing = d.get("singular")
    if sing is not None:
        idx = np.asarray(sing["idx"], dtype=int)
        if len(idx) and (idx.min() < 0 or idx.max() >= space.n):
            raise ValueError("singular mass index out of range")
        sing = (idx, sing["mass"])
    return RadonWeight(space, dens, sing)


def save_weight(weight, path):
    with open(path, "w") as fh:
        json.dump(weight_to_dict(weight), fh)
