"""Array kernels for ball queries on full rectangular lattices.

Every point of a lattice space sits at origin + step * index, so the ball of
radius r around any point is the same set of integer offsets.  Sups and sums
over balls then become loops over offsets with shifted array slices.
"""
import numpy as np
from numba import njit
from scipy.signal import fftconvolve

# relative slack for ball membership; grid distances like 0.1 are not exact
TOL = 1e-9


def inside(d, r, closed):
    if closed:
        return d <= r * (1 + TOL)
    return d < r * (1 - TOL)


def offsets(step, radius, dim, closed=False):
    """Integer offsets k with |k|*step inside the ball, sorted by length."""
    m = int(np.floor(radius / step)) + 1
    axes = [np.arange(-m, m + 1)] * dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    d = np.sqrt((grid.astype(float) ** 2).sum(axis=1)) * step
    keep = inside(d, radius, closed)
    grid, d = grid[keep], d[keep]
    order = np.lexsort((*grid.T[::-1], d))
    return grid[order], d[order]


def _slices(k, shape):
    src, dst = [], []
    for ki, n in zip(k, shape):
        ki = int(ki)
        if ki >= 0:
            src.append(slice(0, n - ki))
            dst.append(slice(ki, n))
        else:
            src.append(slice(-ki, n))
            dst.append(slice(0, n + ki))
    return tuple(src), tuple(dst)


def lattice_ball_sup(values, shape, step, radii):
    """sup_{|y-x| <= r} |v(y) - v(x)| for every lattice point and each radius.

    values: (n, m) array in C order of `shape`.  Returns (n, len(radii)).
    Offsets are visited once per unordered pair, updating both ends.
    """
    radii = np.asarray(radii, dtype=float)
    dim = len(shape)
    V = values.reshape(tuple(shape) + (values.shape[1],))
    order = np.argsort(radii)
    rmax = radii[order[-1]]
    offs, dist = offsets(step, rmax, dim, closed=True)
    if dim == 2:
        V2 = np.ascontiguousarray(np.moveaxis(V, -1, 0))
        bounds = np.array([np.searchsorted(dist, radii[ri] * (1 + TOL), side="right")
                           for ri in order], dtype=np.int64)
        res = _sup2d(V2, offs.astype(np.int64), bounds)
        out = np.empty((int(np.prod(shape)), len(radii)))
        for c, ri in enumerate(order):
            out[:, ri] = np.sqrt(res[c].ravel())
        return out
    # half space (first nonzero coordinate positive), both ends updated
    half = np.zeros(len(offs), dtype=bool)
    for i, k in enumerate(offs):
        nz = np.flatnonzero(k)
        half[i] = len(nz) > 0 and k[nz[0]] > 0
    offs, dist = offs[half], dist[half]
    cur = np.zeros(tuple(shape))
    out = np.empty((int(np.prod(shape)), len(radii)))
    pos = 0
    for ri in order:
        r = radii[ri]
        while pos < len(offs) and inside(dist[pos], r, True):
            k = offs[pos]
            src, dst = _slices(k, shape)
            diff = V[dst] - V[src]
            sq = np.einsum("...i,...i->...", diff, diff)
            np.maximum(cur[src], sq, out=cur[src])
            np.maximum(cur[dst], sq, out=cur[dst])
            pos += 1
        out[:, ri] = np.sqrt(cur.ravel())
    return out


def lattice_ball_sum(field, shape, step, radius, closed=False, direct_limit=2500):
    """sum of `field` over the ball around every lattice point.

    Small balls are summed directly (exact, fixed order); large balls go
    through an FFT convolution with the indicator kernel.
    """
    dim = len(shape)
    F = field.reshape(shape)
    offs, _ = offsets(step, radius, dim, closed=closed)
    if len(offs) <= direct_limit:
        out = np.zeros(tuple(shape))
        for k in offs:
            src, dst = _slices(k, shape)
            out[src] += F[dst]
        return out.ravel()
    m = np.abs(offs).max()
    kern = np.zeros((2 * m + 1,) * dim)
    kern[tuple((offs + m).T)] = 1.0
    out = fftconvolve(F, kern, mode="same")
    # the convolution runs in floating point; values that must be zero come
    # back as +-1e-17 noise
    out[np.abs(out) < 1e-13 * max(np.abs(F).sum(), 1e-300)] = 0.0
    return np.maximum(out, 0.0).ravel() if (F >= 0).all() else out.ravel()


@njit(cache=True, fastmath=True)
def _sup2d(V, offs, bounds):
    # V is (m, nx, ny); squared sup over offs[:bounds[c]] for each c.
    # Full (not half) offset set so the inner loop has no aliasing and
    # vectorizes.
    m, nx, ny = V.shape
    res = np.zeros((len(bounds), nx, ny))
    cur = np.zeros((nx, ny))
    tmp = np.zeros(ny)
    pos = 0
    for c in range(len(bounds)):
        while pos < bounds[c]:
            a = offs[pos, 0]
            b = offs[pos, 1]
            j0 = max(0, -b)
            j1 = min(ny, ny - b)
            w = j1 - j0
            for i in range(max(0, -a), min(nx, nx - a)):
                t = tmp[:w]
                t[:] = 0.0
                for k in range(m):
                    u = V[k, i, j0:j1]
                    v = V[k, i + a, j0 + b:j1 + b]
                    for j in range(w):
                        d = v[j] - u[j]
                        t[j] += d * d
                row = cur[i, j0:j1]
                for j in range(w):
                    row[j] = max(row[j], t[j])
            pos += 1
        res[c] = cur
    return res
