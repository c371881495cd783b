"""Sampled metric measure spaces: points, weights, balls and regularity checks."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._kernels import TOL, inside, lattice_ball_sum


class MetricMeasureSpace:
    """Finite weighted point set standing in for (X, d, mu).

    Points are identified by their integer index.  The metric is Euclidean
    on `coords` unless `metric(A, b)` is given, which must return the
    distances from every row of A to the point b.  `lattice` marks a full
    rectangular grid (origin, shape, step) laid out in C order, which lets
    ball queries run as shifted-array kernels.
    """

    def __init__(self, coords, weights, resolution=None, bounds=None,
                 lattice=None, metric=None):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        weights = np.asarray(weights, dtype=float)
        if len(weights) != len(coords):
            raise ValueError("one weight per point required")
        if (weights < 0).any() or not weights.sum() > 0:
            raise ValueError("weights must be nonnegative with positive total")
        self.coords = coords
        self.weights = weights
        self.metric = metric
        self.bounds = None if bounds is None else np.asarray(bounds, dtype=float).reshape(-1, 2)
        self.lattice = lattice
        if lattice is not None and metric is not None:
            self.lattice = None
        if resolution is None:
            resolution = self._min_spacing()
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)

    @property
    def n(self):
        return len(self.coords)

    @property
    def dim(self):
        return self.coords.shape[1]

    @property
    def total_mass(self):
        return float(self.weights.sum())

    @property
    def trusted_floor(self):
        """Smallest radius at which ball ratios are more than grid noise."""
        return 2.0 * self.resolution

    @cached_property
    def tree(self):
        return cKDTree(self.coords)

    def _min_spacing(self):
        if self.n < 2:
            return 1.0
        if self.metric is None:
            d, _ = self.tree.query(self.coords, k=2)
            d = d[:, 1]
        else:
            d = np.array([np.min(np.delete(self.distances_from(i), i)) for i in range(self.n)])
        d = d[d > 0]
        return float(d.min()) if len(d) else 1.0

    def distances_from(self, i, idx=None):
        pts = self.coords if idx is None else self.coords[idx]
        if self.metric is None:
            return np.sqrt(((pts - self.coords[i]) ** 2).sum(axis=1))
        return np.asarray(self.metric(pts, self.coords[i]), dtype=float)

    def index_of(self, point):
        """Resolve an identifier (int index or coordinate tuple) to an index."""
        if isinstance(point, (int, np.integer)):
            if not 0 <= point < self.n:
                raise KeyError(f"unknown point {point}")
            return int(point)
        p = np.asarray(point, dtype=float).reshape(-1)
        if self.metric is None:
            d, i = self.tree.query(p)
        else:
            dd = np.asarray(self.metric(self.coords, p))
            i = int(np.argmin(dd))
            d = dd[i]
        if d > 1e-9 * max(1.0, self.resolution):
            raise KeyError(f"unknown point {tuple(p)}")
        return int(i)

    def neighbors(self, idx, radius, closed=False):
        """For each index in idx, the (members, distances) of its ball."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        out = []
        if self.metric is None:
            lists = self.tree.query_ball_point(self.coords[idx], radius * (1 + 2 * TOL))
            for i, lst in zip(idx, lists):
                lst = np.asarray(lst, dtype=int)
                d = self.distances_from(i, lst)
                keep = inside(d, radius, closed)
                out.append((lst[keep], d[keep]))
        else:
            for i in idx:
                d = self.distances_from(i)
                keep = np.flatnonzero(inside(d, radius, closed))
                out.append((keep, d[keep]))
        return out

    def flat_neighbors(self, idx, radius, closed=False):
        """Neighbor lists flattened: (owner position, member, distance)."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        if self.metric is None:
            lists = self.tree.query_ball_point(self.coords[idx], radius * (1 + 2 * TOL))
            lens = np.fromiter((len(x) for x in lists), dtype=int, count=len(lists))
            mem = np.fromiter((j for x in lists for j in x), dtype=int, count=int(lens.sum()))
            own = np.repeat(np.arange(len(idx)), lens)
            d = np.sqrt(((self.coords[mem] - self.coords[idx[own]]) ** 2).sum(axis=1))
        else:
            parts = self.neighbors(idx, radius, closed=True)
            own = np.concatenate([np.full(len(m), k) for k, (m, _) in enumerate(parts)])
            mem = np.concatenate([m for m, _ in parts])
            d = np.concatenate([d for _, d in parts])
        keep = inside(d, radius, closed)
        return own[keep], mem[keep], d[keep]

    def diameter(self):
        if self.bounds is not None:
            return float(np.sqrt(((self.bounds[:, 1] - self.bounds[:, 0]) ** 2).sum()))
        lo, hi = self.coords.min(axis=0), self.coords.max(axis=0)
        return float(np.sqrt(((hi - lo) ** 2).sum()))


@dataclass
class Ball:
    center: int
    radius: float
    closed: bool
    members: np.ndarray


@dataclass
class InnerRegion:
    delta: float
    members: np.ndarray


def uniform_grid(bounds, h, include_boundary=False, density=None):
    """Node lattice with spacing h over an axis-aligned box, weights h^d.

    By default only nodes strictly inside the box are kept, so the sample
    represents the open set.  `density(coords)` multiplies the weights.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    axes = []
    for lo, hi in bounds:
        n = int(round((hi - lo) / h))
        if abs(n * h - (hi - lo)) > 1e-9 * max(1.0, hi - lo):
            raise ValueError("box sides must be multiples of h")
        ks = np.arange(0, n + 1) if include_boundary else np.arange(1, n)
        axes.append(lo + ks * h)
    shape = tuple(len(a) for a in axes)
    if min(shape) == 0:
        raise ValueError("grid has no points")
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    w = np.full(len(coords), h ** len(shape))
    if density is not None:
        w = w * np.asarray(density(coords), dtype=float)
    lattice = {"origin": [a[0] for a in axes], "shape": list(shape), "step": float(h)}
    return MetricMeasureSpace(coords, w, resolution=h, bounds=bounds, lattice=lattice)


def ball(space, center, radius, closed=False):
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = space.index_of(center)
    members, _ = space.neighbors([c], radius, closed)[0]
    return Ball(c, float(radius), bool(closed), np.sort(members))


def measure_of_ball(space, b, weights=None):
    w = space.weights if weights is None else weights
    return float(w[b.members].sum())


def _uses_lattice(space, idx):
    return space.lattice is not None and (idx is None or len(idx) >= 0.2 * space.n)


def ball_sums(space, field, radius, idx=None, closed=False):
    """sum of a per-point field over B(x, radius) for x in idx (default all)."""
    field = np.asarray(field, dtype=float)
    if _uses_lattice(space, idx):
        lat = space.lattice
        out = lattice_ball_sum(field, lat["shape"], lat["step"], radius, closed)
        return out if idx is None else out[idx]
    idx = np.arange(space.n) if idx is None else np.asarray(idx, dtype=int)
    res = np.zeros(len(idx))
    chunk = max(1, int(2e6 // max(1, _expected_count(space, radius))))
    for s in range(0, len(idx), chunk):
        part = idx[s:s + chunk]
        own, mem, _ = space.flat_neighbors(part, radius, closed)
        res[s:s + len(part)] = np.bincount(own, weights=field[mem], minlength=len(part))
    return res


def _expected_count(space, radius):
    if space.bounds is None:
        return space.n
    vol = np.prod(space.bounds[:, 1] - space.bounds[:, 0])
    d = space.dim
    ball_vol = (2 * radius) ** d
    return min(space.n, max(1.0, space.n * ball_vol / max(vol, 1e-300)))


def ball_measures(space, radii, idx=None, weights=None, closed=False):
    """mu(B(x, r)) for x in idx and every r in radii; shape (len(idx), len(radii))."""
    w = space.weights if weights is None else np.asarray(weights, dtype=float)
    cols = [ball_sums(space, w, r, idx, closed) for r in np.atleast_1d(radii)]
    return np.stack(cols, axis=1)


@dataclass
class DoublingReport:
    C_hat: float
    per_radius: dict
    floor: float


def doubling_constant_estimate(space, radii, points=None):
    """Empirical sup of mu(B(x,2r)) / mu(B(x,r)) over points and radii."""
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    if len(radii) == 0:
        raise ValueError("empty radius schedule")
    if (radii < space.trusted_floor * (1 - TOL)).any() and space.n > 1:
        raise ValueError(f"radii below trusted floor {space.trusted_floor}")
    small = ball_measures(space, radii, points)
    big = ball_measures(space, 2 * radii, points)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(small > 0, big / small, np.inf)
    per = {float(r): float(ratio[:, k].max()) for k, r in enumerate(radii)}
    return DoublingReport(float(ratio.max()), per, space.trusted_floor)


@dataclass
class AhlforsReport:
    C_hat: float
    passed: bool
    per_radius: dict
    slope: float


def ahlfors_check(space, Q, radii, points=None, spread_limit=1.5):
    """max over points and radii of max(mu(B)/r^Q, r^Q/mu(B)).

    Passes when that number is finite and the per-radius maxima do not drift
    with r: their spread stays under `spread_limit`.
    """
    if not Q > 1:
        raise ValueError("Q must exceed 1")
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    m = ball_measures(space, radii, points)
    if (m <= 0).any():
        raise ValueError("zero-mass ball: sample is under-resolved")
    rq = radii[None, :] ** Q
    c = np.maximum(m / rq, rq / m)
    per_r = c.max(axis=0)
    if len(radii) > 1:
        slope = float(np.polyfit(np.log(radii), np.log(per_r), 1)[0])
    else:
        slope = 0.0
    passed = bool(np.isfinite(per_r).all() and per_r.max() / per_r.min() <= spread_limit)
    return AhlforsReport(float(c.max()), passed,
                         {float(r): float(v) for r, v in zip(radii, per_r)}, slope)


def boundary_distance(space):
    if space.bounds is None:
        raise ValueError("space has no region descriptor")
    lo = space.coords - space.bounds[:, 0]
    hi = space.bounds[:, 1] - space.coords
    return np.minimum(lo, hi).min(axis=1)


def inner_region(space, delta):
    """Points with dist(x, complement of the box) > delta."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    d = boundary_distance(space)
    return InnerRegion(float(delta), np.flatnonzero(d > delta * (1 + TOL) if delta > 0 else d > 0))


def connectivity_diagnostic(space):
    """Number of connected components of the graph joining points within 2h."""
    if space.n == 1:
        return 1
    pairs = space.tree.query_pairs(2 * space.resolution * (1 + TOL), output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(space.n, space.n))
    ncomp, _ = connected_components(g, directed=False)
    return int(ncomp)


def space_to_dict(space):
    d = {"coords": space.coords.tolist(), "weights": space.weights.tolist(),
         "resolution": space.resolution}
    if space.bounds is not None:
        d["bounds"] = space.bounds.tolist()
    if space.lattice is not None:
        d["lattice"] = space.lattice
    return d


def space_from_dict(d):
    return MetricMeasureSpace(d["coords"], d["weights"], d.get("resolution"),
                              d.get("bounds"), d.get("lattice"))


def save_space(space, path):
    with open(path, "w") as fh:
        json.dump(space_to_dict(space), fh)


def load_space(path):
    with open(path) as fh:
        d = json.load(fh)
    if "grid" in d:
        g = d["grid"]
        return uniform_grid(g["bounds"], g["h"], g.get("include_boundary", False))
    return space_from_dict(d)
