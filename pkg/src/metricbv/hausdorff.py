"""Upper bounds for Hausdorff contents of sampled sets via greedy ball covers.

The codimension-p content sums mu(B)/r^p over a cover, the s-dimensional
one sums (2r)^s.  Exact minimization is a set-cover problem, so every
estimate comes with the cover that witnesses it.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import TOL, inside
from .space import ball_sums


@dataclass
class CoverCandidate:
    centers: np.ndarray     # point indices
    radii: np.ndarray
    cost: float
    covered: bool
    form: str = "codim"     # or "dim"
    exponent: float = 1.0   # p for codim, s for dim

    def to_dict(self):
        return {"centers": [int(c) for c in self.centers], "radii": [float(r) for r in self.radii],
                "cost": float(self.cost), "covered": bool(self.covered),
                "form": self.form, "exponent": float(self.exponent)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centers"], dtype=int), np.asarray(d["radii"], dtype=float),
                   d["cost"], d["covered"], d.get("form", "codim"), d.get("exponent", 1.0))


@dataclass
class ContentResult:
    estimate: float
    cover: CoverCandidate
    lower_bound: float


def ball_costs(space, centers, radii, form, exponent):
    centers = np.asarray(centers, dtype=int)
    radii = np.asarray(radii, dtype=float)
    if form == "dim":
        return (2 * radii) ** exponent
    out = np.empty(len(centers))
    for r in np.unique(radii):
        sel = radii == r
        out[sel] = ball_sums(space, space.weights, r, centers[sel]) / r ** exponent
    return out


def cover_cost(space, cover):
    return float(ball_costs(space, cover.centers, cover.radii, cover.form, cover.exponent).sum())


def covers_points(space, cover, target):
    target = np.asarray(target, dtype=int)
    hit = np.zeros(len(target), dtype=bool)
    if len(cover.centers) == 0:
        return hit
    tree = cKDTree(space.coords[target])
    for c, r in zip(cover.centers, cover.radii):
        lst = np.asarray(tree.query_ball_point(space.coords[c], r * (1 + 2 * TOL)), dtype=int)
        if len(lst):
            d = space.distances_from(c, target[lst])
            hit[lst[inside(d, r, False)]] = True
    return hit


def restrict_cover(space, cover, target):
    """Same balls, re-flagged and re-costed for a different target set."""
    ok = bool(covers_points(space, cover, target).all())
    return CoverCandidate(cover.centers, cover.radii, cover_cost(space, cover), ok,
                          cover.form, cover.exponent)


def concat_covers(space, a, b):
    c = CoverCandidate(np.concatenate([a.centers, b.centers]), np.concatenate([a.radii, b.radii]),
                       0.0, a.covered and b.covered, a.form, a.exponent)
    c.cost = cover_cost(space, c)
    return c


def candidate_radii(space, R, effort, form):
    """Radius grid for the cover search.

    Codimension form: geometric grid from R down to the trusted floor 2h;
    below it mu(B) of a point-mass sample no longer tracks the volume of
    the ball.  Dimension form: radii (k + 1/2) h, whose diameters match
    the length of sample cells a ball covers along a line, plus R.
    """
    h = space.resolution
    count = 4 + 2 * int(effort)
    if form == "codim":
        lo = min(R, space.trusted_floor)
        return np.unique(np.geomspace(R, lo, count)) if R > lo else np.array([R])
    ks = np.arange(0, int(np.floor(R / h - 0.5)) + 1)
    rs = (ks + 0.5) * h
    if len(rs) > count:
        pick = np.unique(np.round(np.geomspace(1, len(rs), count)).astype(int) - 1)
        rs = rs[pick]
    return np.unique(np.append(rs[rs <= R], R))


def _search(space, target, exponent, R, effort, form, witnesses):
    target = np.asarray(np.unique(target), dtype=int)
    if len(target) == 0:
        return ContentResult(0.0, CoverCandidate(np.array([], dtype=int), np.array([]), 0.0, True,
                                                 form, exponent), 0.0)
    if R < space.resolution * (1 - TOL):
        raise ValueError("R below the space resolution")
    cand_r = candidate_radii(space, R, effort, form)

    tree = cKDTree(space.coords[target])
    # canonical center order: lexicographic coordinates
    order = np.lexsort(space.coords[target].T[::-1])
    cset = []       # (center index into target, radius)
    members = []
    for ci in order:
        c = target[ci]
        for r in cand_r:
            lst = np.asarray(tree.query_ball_point(space.coords[c], r * (1 + 2 * TOL)), dtype=int)
            d = space.distances_from(c, target[lst])
            members.append(lst[inside(d, r, False)])
            cset.append((c, r))
    centers = np.array([c for c, _ in cset], dtype=int)
    radii = np.array([r for _, r in cset])
    costs = ball_costs(space, centers, radii, form, exponent)
    sizes = np.array([len(m) for m in members])

    # dual fitting: y_t = min over candidate balls containing t of cost/|B cap T|
    # is feasible for the LP dual, so sum y_t bounds every candidate cover
    y = np.full(len(target), np.inf)
    for m, cst, sz in zip(members, costs, sizes):
        if sz:
            np.minimum.at(y, m, cst / sz)
    lower = float(y[np.isfinite(y)].sum())

    # lazy greedy on newly covered points per unit cost
    covered = np.zeros(len(target), dtype=bool)
    heap = [(-(sizes[k] / costs[k]) if costs[k] > 0 else -np.inf, k) for k in range(len(cset))]
    heapq.heapify(heap)
    chosen = []
    while not covered.all() and heap:
        neg, k = heapq.heappop(heap)
        gain = int((~covered[members[k]]).sum())
        if gain == 0:
            continue
        score = -(gain / costs[k]) if costs[k] > 0 else -np.inf
        if heap and score > heap[0][0] + 1e-15 * abs(heap[0][0]):
            heapq.heappush(heap, (score, k))
            continue
        chosen.append(k)
        covered[members[k]] = True

    chosen = _improve(chosen, members, costs, centers, radii, len(target), effort)
    cov = CoverCandidate(centers[chosen], radii[chosen], float(costs[chosen].sum()),
                         bool(covered.all()), form, exponent)
    best = cov
    for w in witnesses:
        w = restrict_cover(space, w, target)
        if w.covered and (w.radii <= R * (1 + TOL)).all() and w.cost < best.cost:
            best = w
    return ContentResult(best.cost, best, min(lower, best.cost))


def _improve(chosen, members, costs, centers, radii, n, effort):
    """Drop redundant balls, then shrink balls to cheaper same-center radii."""
    chosen = list(chosen)
    for _ in range(max(1, int(effort))):
        changed = False
        mult = np.zeros(n, dtype=int)
        for k in chosen:
            mult[members[k]] += 1
        for k in sorted(chosen, key=lambda k: -costs[k]):
            if (mult[members[k]] >= 2).all():
                chosen.remove(k)
                mult[members[k]] -= 1
                changed = True
        # candidates at a fixed center are stored consecutively, ascending radius
        for pos, k in enumerate(list(chosen)):
            exclusive = members[k][mult[members[k]] == 1]
            best = k
            for q in range(k - _center_run(centers, k), k):
                if costs[q] < costs[best] and np.isin(exclusive, members[q]).all():
                    best = q
            if best != k:
                mult[members[k]] -= 1
                mult[members[best]] += 1
                chosen[pos] = best
                changed = True
        if not changed:
            break
    return chosen


def _center_run(centers, k):
    """How many candidates before k share its center."""
    i = k
    while i > 0 and centers[i - 1] == centers[k]:
        i -= 1
    return k - i


def codim_content(space, target, p, R, effort=2, witnesses=()):
    """Upper bound for the codimension-p content at scale R, with witness cover."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return _search(space, target, float(p), float(R), effort, "codim", witnesses)


def dim_content(space, target, s, R, effort=2, witnesses=()):
    """Upper bound for the s-dimensional content at scale R, with witness cover."""
    if s < 0:
        raise ValueError("s must be >= 0")
    return _search(space, target, float(s), float(R), effort, "dim", witnesses)


def admissible_density_from_cover(space, levels, eps=None):
    """rho = sup over levels j and balls of 1_{2B}/r.

    `levels` is a list of (j, cover) with increasing j.  Radii must be below
    1/j, and when eps is given each level's cost must be below 2^-j * eps.
    """
    rho = np.zeros(space.n)
    last = 0
    for j, cov in levels:
        if j <= last:
            raise ValueError("levels must be strictly increasing")
        last = j
        if len(cov.radii) and (cov.radii >= 1.0 / j).any():
            raise ValueError(f"level {j}: radii must be < 1/{j}")
        if eps is not None and cov.cost >= 2.0 ** (-j) * eps:
            raise ValueError(f"level {j}: cost {cov.cost:.4g} exceeds budget {2.0 ** (-j) * eps:.4g}")
        for c, r in zip(cov.centers, cov.radii):
            m, _ = space.neighbors([c], 2 * r, closed=False)[0]
            np.maximum.at(rho, m, 1.0 / r)
    return rho


@dataclass
class NullSetDensity:
    rho: np.ndarray
    levels: list
    energy: float
    floor: float     # curves at least this long are guaranteed to pick up 1


def lemma37_pipeline(space, target, p, eps, levels=(1, 2, 3), effort=2):
    """Covers of decreasing scale with costs under 2^-j eps, and their density.

    At each level the scale R is halved from just below 1/j until the cover
    cost meets the budget.
    """
    out = []
    for j in levels:
        R = (1.0 / j) * (1 - 1e-6)
        budget = 2.0 ** (-j) * eps
        found = None
        while R >= space.resolution * (1 - TOL):
            res = codim_content(space, target, p, R, effort)
            if res.cover.covered and res.estimate < budget:
                found = res.cover
                break
            R /= 2
        if found is None:
            raise ValueError(f"level {j}: no cover under budget {budget:.4g}")
        out.append((j, found))
    rho = admissible_density_from_cover(space, out, eps)
    energy = float((rho ** p * space.weights).sum())
    floor = float(max(out[-1][1].radii.max(), 0.0))
    return NullSetDensity(rho, out, energy, floor)


def save_cover(cover, path):
    with open(path, "w") as fh:
        json.dump(cover.to_dict(), fh)


def load_cover(path):
    with open(path) as fh:
        return CoverCandidate.from_dict(json.load(fh))
