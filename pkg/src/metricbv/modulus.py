"""Polyline curves, curve integrals, upper-gradient checks and discrete p-modulus."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.sparse import csr_matrix

from ._kernels import TOL


class Curve:
    """Polyline through sample points, parametrized by arc length."""

    def __init__(self, space, vertices):
        v = np.asarray(vertices, dtype=int)
        if len(v) < 2:
            raise ValueError("a curve needs at least two vertices")
        seg = np.sqrt(((space.coords[v[1:]] - space.coords[v[:-1]]) ** 2).sum(axis=1)) \
            if space.metric is None else np.array([space.distances_from(a, [b])[0] for a, b in zip(v[:-1], v[1:])])
        if (seg <= 0).any():
            raise ValueError("repeated consecutive vertex")
        if (seg > 2 * space.resolution * (1 + TOL)).any():
            raise ValueError("consecutive vertices farther apart than 2*resolution")
        self.space = space
        self.vertices = v
        self.segments = seg
        self.cumulative_length = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self):
        return float(self.cumulative_length[-1])

    def __len__(self):
        return len(self.vertices)


@dataclass
class CurveFamily:
    curves: list
    tag: str = "explicit"
    seed: int | None = None

    def __len__(self):
        return len(self.curves)

    def __add__(self, other):
        return CurveFamily(self.curves + other.curves, f"{self.tag}+{other.tag}")

    def subset(self, idx):
        return CurveFamily([self.curves[i] for i in idx], self.tag, self.seed)


def curve_integral(density, curve):
    rho = np.asarray(density, dtype=float)[curve.vertices]
    return float(((rho[1:] + rho[:-1]) * 0.5 * curve.segments).sum())


def constraint_matrix(space, family):
    """Row i holds the trapezoid weights of curve i, so A @ rho = curve integrals."""
    rows, cols, vals = [], [], []
    for i, c in enumerate(family.curves):
        half = 0.5 * c.segments
        w = np.zeros(len(c.vertices))
        w[:-1] += half
        w[1:] += half
        rows.append(np.full(len(w), i))
        cols.append(c.vertices)
        vals.append(w)
    if not rows:
        return csr_matrix((0, space.n))
    return csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(family), space.n))


@dataclass
class ModulusResult:
    value: float                  # objective of the exactly feasible density
    density: np.ndarray           # solver output before rescaling
    residual: float               # worst relative constraint shortfall of `density`
    feasible_density: np.ndarray
    lower_bound: float            # dual value (p > 1) or LP optimum (p = 1)
    converged: bool
    iterations: int = 0


def p_modulus(space, family, p, tol=1e-7, max_iter=20000, thresholds=None):
    """min sum rho^p mu subject to every curve integral >= threshold (default 1).

    p = 1 goes to the HiGHS LP solver.  For p > 1 the concave dual in the
    curve multipliers lambda >= 0,
        g(lam) = lam.t - (p-1)/p * sum_x c_x^q (p w_x)^(-1/(p-1)),  c = A^T lam,
    is maximized with L-BFGS-B; rho(lam) = (c / (p w))^(1/(p-1)) is then
    rescaled to be exactly feasible, and the duality gap decides convergence.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    n = space.n
    if len(family) == 0:
        z = np.zeros(n)
        return ModulusResult(0.0, z, 0.0, z, 0.0, True)
    A = constraint_matrix(space, family)
    t = np.ones(len(family)) if thresholds is None else np.asarray(thresholds, dtype=float)
    touched = np.flatnonzero(np.asarray(A.getnnz(axis=0)).ravel())
    w = space.weights[touched]
    As = A[:, touched]
    if p == 1:
        res = linprog(w, A_ub=-As, b_ub=-t, bounds=(0, None), method="highs",
                      options={"maxiter": max_iter})
        rho_s = np.zeros(len(touched)) if res.x is None else np.maximum(res.x, 0.0)
        ok = res.status == 0
        rho = np.zeros(n)
        rho[touched] = rho_s
        return _finish(space, A, t, rho, p, float(res.fun) if ok else 0.0, ok,
                       int(getattr(res, "nit", 0)))
    if (w <= 0).any():
        raise ValueError("curves pass through zero-weight points")
    q = p / (p - 1)
    scale = (p * w) ** (-1.0 / (p - 1))
    AT = As.T.tocsr()

    def negdual(lam):
        c = AT @ lam
        cp = np.maximum(c, 0.0)
        r = cp ** (1.0 / (p - 1)) * scale
        g = lam @ t - (p - 1) / p * (cp ** q * scale).sum()
        grad = t - As @ r
        return -g, -grad

    lam0 = np.full(len(t), 1.0 / max(1.0, np.sqrt(len(t))))
    res = minimize(negdual, lam0, jac=True, method="L-BFGS-B", bounds=[(0, None)] * len(t),
                   options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12, "maxcor": 30})
    lam = res.x
    c = np.maximum(AT @ lam, 0.0)
    rho = np.zeros(n)
    rho[touched] = c ** (1.0 / (p - 1)) * scale
    dual = -float(res.fun)
    out = _finish(space, A, t, rho, p, dual, True, int(res.nit))
    out.converged = bool(out.converged and out.value - dual <= tol * max(out.value, 1e-300))
    return out


def _finish(space, A, t, rho, p, lower, ok, nit):
    got = A @ rho
    ratio = got / t
    resid = float(max(0.0, 1.0 - ratio.min()))
    s = ratio.min()
    if s > 0:
        feas = rho / s
    else:
        # nothing usable from the solver: a constant density on the curves
        ones = (np.asarray(A.getnnz(axis=0)).ravel() > 0).astype(float)
        feas = ones / ((A @ ones) / t).min()
    value = float((feas ** p * space.weights).sum())
    return ModulusResult(value, rho, resid, feas, lower, bool(ok and s > 0), nit)


def horizontal_family(space, rows=None):
    """Grid rows of a 2-D lattice space as left-to-right curves."""
    lat = space.lattice
    if lat is None or len(lat["shape"]) != 2:
        raise ValueError("needs a 2-D lattice space")
    nx, ny = lat["shape"]
    idx = np.arange(space.n).reshape(nx, ny)
    rows = range(ny) if rows is None else rows
    return CurveFamily([Curve(space, idx[:, j]) for j in rows], "grid-paths")


def _line_through(space, a, u, back, fwd):
    """Lattice points nearest to the segment a + t u, t in [-back, fwd]."""
    h = space.resolution
    ts = np.arange(-back, fwd + h / 4, h / 2)
    pts = space.coords[a] + ts[:, None] * u[None, :]
    d, ids = space.tree.query(pts)
    inside_dom = d <= h * np.sqrt(space.dim) / 2 * (1 + 1e-6)
    # keep the contiguous run containing t = 0
    zero = int(np.argmin(np.abs(ts)))
    lo = zero
    while lo > 0 and inside_dom[lo - 1]:
        lo -= 1
    hi = zero
    while hi < len(ts) - 1 and inside_dom[hi + 1]:
        hi += 1
    ids = ids[lo:hi + 1]
    keep = np.concatenate([[True], ids[1:] != ids[:-1]])
    return ids[keep]


def gamma_A_family(space, A, n_curves, min_length, seed=0, axis_fraction=0.5, tries=50):
    """Sampled curves through points of A, each at least min_length long.

    A share of the curves are coordinate-axis grid paths, the rest straight
    lines in random directions snapped to the lattice.  The A-point sits at
    a random position along the curve.
    """
    A = np.asarray(A, dtype=int)
    if len(A) == 0:
        raise ValueError("A is empty")
    rng = np.random.default_rng(seed)
    curves = []
    d = space.dim
    while len(curves) < n_curves:
        for _ in range(tries):
            a = int(A[rng.integers(len(A))])
            if rng.random() < axis_fraction:
                u = np.zeros(d)
                u[rng.integers(d)] = 1.0
            else:
                u = rng.normal(size=d)
                u /= np.linalg.norm(u)
            total = min_length * (1.0 + 0.5 * rng.random()) + 2 * space.resolution
            back = total * rng.random()
            ids = _line_through(space, a, u, back, total - back)
            if len(ids) < 2:
                continue
            try:
                c = Curve(space, ids)
            except ValueError:
                continue
            if c.length >= min_length:
                curves.append(c)
                break
        else:
            raise ValueError("could not place a curve of the requested length")
    return CurveFamily(curves, "gamma_A", seed)


@dataclass
class UpperGradientReport:
    endpoint_distance: np.ndarray
    integral: np.ndarray
    margin: np.ndarray
    passed: np.ndarray

    @property
    def pass_fraction(self):
        return float(self.passed.mean()) if len(self.passed) else 1.0


def upper_gradient_check(mapping, density, family, tol=1e-9):
    v = mapping.values
    d = np.array([np.sqrt(((v[c.vertices[-1]] - v[c.vertices[0]]) ** 2).sum()) for c in family.curves])
    I = np.array([curve_integral(density, c) for c in family.curves])
    margin = I - d
    return UpperGradientReport(d, I, margin, margin >= -tol * np.maximum(1.0, d))


@dataclass
class AMResult:
    value: float
    liminf_integrals: np.ndarray
    admissible: np.ndarray

    @property
    def all_admissible(self):
        return bool(self.admissible.all())


def am_upper_bound(space, family, densities, tail=None, tol=1e-6):
    """AM-admissibility of a finite density sequence and its liminf mass.

    liminf is proxied by the min over the last `tail` members (default: the
    second half of the sequence).
    """
    if len(densities) == 0:
        raise ValueError("empty density sequence")
    k = len(densities)
    tail = max(1, k - k // 2) if tail is None else int(tail)
    seq = [np.asarray(r, dtype=float) for r in densities[-tail:]]
    A = constraint_matrix(space, family)
    ints = np.stack([A @ r for r in seq], axis=1) if len(family) else np.zeros((0, tail))
    lim = ints.min(axis=1) if len(family) else np.zeros(0)
    masses = [float((r * space.weights).sum()) for r in seq]
    return AMResult(min(masses), lim, lim >= 1 - tol)


def family_to_dict(family):
    return {"tag": family.tag, "seed": family.seed,
            "curves": [[int(i) for i in c.vertices] for c in family.curves]}


def family_from_dict(space, d):
    return CurveFamily([Curve(space, v) for v in d["curves"]], d.get("tag", "explicit"), d.get("seed"))


def save_family(family, path):
    with open(path, "w") as fh:
        json.dump(family_to_dict(family), fh)


def load_family(space, path):
    with open(path) as fh:
        return family_from_dict(space, json.load(fh))


def modulus_report_csv(result, p, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "value", "lower_bound", "residual", "converged", "iterations"])
        w.writerow([format(p, ".17g"), format(result.value, ".17g"), format(result.lower_bound, ".17g"),
                    format(result.residual, ".17g"), int(result.converged), result.iterations])
