"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module mirrors every
signature and must agree with them to rounding.
"""

import numpy as np

__all__ = [
    "cell_density",
    "raster_coverage",
    "bilinear_weights",
    "invert_bilinear",
]


def cell_density(F, G, lam, mu, a, q, w_svk, w_bar, w_reg):
    """Stored-energy density and its partial derivatives per cell.

    e = w_svk*(lam*tr(A)**2 + 2*mu*|A|**2) + w_bar*det(F)**(-a)
        + w_reg*|G|**q,   with A = F^T F - I.

    Parameters
    ----------
    F : ndarray, shape (N, 2, 2)
        Deformation gradients, ``F[k, c, al] = d eta_c / d x_al``.
    G : ndarray, shape (N, 2, 2, 2)
        Second gradients, ``G[k, c, al, be]``.

    Returns
    -------
    e : ndarray, shape (N,)
        Density, ``inf`` where ``det F <= 0``.
    dF, dG : ndarray
        Partial derivatives; zero on infeasible cells.
    """
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    ok = det > 0.0
    A = np.einsum("kca,kcb->kab", F, F)
    A[:, 0, 0] -= 1.0
    A[:, 1, 1] -= 1.0
    trA = A[:, 0, 0] + A[:, 1, 1]
    normA2 = np.einsum("kab,kab->k", A, A)
    g2 = np.einsum("kcab,kcab->k", G, G)

    safe_det = np.where(ok, det, 1.0)
    bar = safe_det ** (-a)
    e = w_svk * (lam * trA * trA + 2.0 * mu * normA2) + w_bar * bar
    e = e + w_reg * g2 ** (0.5 * q)
    e = np.where(ok, e, np.inf)

    # d/dF of the SVK part is 2 F S with S = 2 lam tr(A) I + 4 mu A
    S = 4.0 * mu * A
    S[:, 0, 0] += 2.0 * lam * trA
    S[:, 1, 1] += 2.0 * lam * trA
    dF = 2.0 * w_svk * np.einsum("kca,kab->kcb", F, S)
    cof = np.empty_like(F)
    cof[:, 0, 0] = F[:, 1, 1]
    cof[:, 0, 1] = -F[:, 1, 0]
    cof[:, 1, 0] = -F[:, 0, 1]
    cof[:, 1, 1] = F[:, 0, 0]
    dF -= (w_bar * a * bar / safe_det)[:, None, None] * cof
    dG = (w_reg * q * g2 ** (0.5 * q - 1.0))[:, None, None, None] * G
    dF[~ok] = 0.0
    dG[~ok] = 0.0
    return e, dF, dG


def _inside(px, py, quad):
    """Crossing-number point-in-polygon test, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = quad.shape[0]
    for k in range(n):
        xi, yi = quad[k]
        xj, yj = quad[(k + 1) % n]
        crosses = (yi > py) != (yj > py)
        if not np.any(crosses):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < xc)
    return inside


def raster_coverage(quads, x0, y0, ds, nx, ny):
    """Count how many quads cover each sample center.

    Samples sit at ``(x0 + (i + 1/2) ds, y0 + (j + 1/2) ds)`` for
    ``0 <= i < nx``, ``0 <= j < ny``.

    Returns
    -------
    count : ndarray of int32, shape (nx, ny)
    """
    quads = np.asarray(quads, dtype=float)
    count = np.zeros((nx, ny), dtype=np.int32)
    for quad in quads:
        lo = quad.min(axis=0)
        hi = quad.max(axis=0)
        i0 = max(int(np.floor((lo[0] - x0) / ds - 0.5)), 0)
        i1 = min(int(np.ceil((hi[0] - x0) / ds - 0.5)), nx - 1)
        j0 = max(int(np.floor((lo[1] - y0) / ds - 0.5)), 0)
        j1 = min(int(np.ceil((hi[1] - y0) / ds - 0.5)), ny - 1)
        if i1 < i0 or j1 < j0:
            continue
        xs = x0 + (np.arange(i0, i1 + 1) + 0.5) * ds
        ys = y0 + (np.arange(j0, j1 + 1) + 0.5) * ds
        px, py = np.meshgrid(xs, ys, indexing="ij")
        count[i0:i1 + 1, j0:j1 + 1] += _inside(px, py, quad)
    return count


def bilinear_weights(px, py, x0, y0, dx, dy, nx, ny):
    """Bilinear interpolation stencils on a regular node lattice.

    Nodes sit at ``(x0 + i dx, y0 + j dy)`` with flat index ``i*ny + j``.
    Points outside the lattice are clamped onto it.

    Returns
    -------
    idx : ndarray of int64, shape (P, 4)
    w : ndarray, shape (P, 4)
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    sx = np.clip((px - x0) / dx, 0.0, nx - 1.0)
    sy = np.clip((py - y0) / dy, 0.0, ny - 1.0)
    i = np.minimum(np.floor(sx).astype(np.int64), max(nx - 2, 0))
    j = np.minimum(np.floor(sy).astype(np.int64), max(ny - 2, 0))
    fx = sx - i
    fy = sy - j
    idx = np.stack(
        [i * ny + j, (i + 1) * ny + j, i * ny + j + 1, (i + 1) * ny + j + 1],
        axis=1,
    )
    w = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    return idx, w


def _newton_local(quad, px, py, iters=30):
    """Invert the bilinear map of one quad for many points."""
    p0, p1, p2, p3 = quad
    s = np.full(px.shape, 0.5)
    t = np.full(px.shape, 0.5)
    for _ in range(iters):
        x = (p0[0] * (1 - s) * (1 - t) + p1[0] * s * (1 - t)
             + p2[0] * s * t + p3[0] * (1 - s) * t)
        y = (p0[1] * (1 - s) * (1 - t) + p1[1] * s * (1 - t)
             + p2[1] * s * t + p3[1] * (1 - s) * t)
        xs = (p1[0] - p0[0]) * (1 - t) + (p2[0] - p3[0]) * t
        ys = (p1[1] - p0[1]) * (1 - t) + (p2[1] - p3[1]) * t
        xt = (p3[0] - p0[0]) * (1 - s) + (p2[0] - p1[0]) * s
        yt = (p3[1] - p0[1]) * (1 - s) + (p2[1] - p1[1]) * s
        det = xs * yt - xt * ys
        rx = px - x
        ry = py - y
        ds = (yt * rx - xt * ry) / det
        dt = (-ys * rx + xs * ry) / det
        s = s + ds
        t = t + dt
        if np.all(np.abs(ds) + np.abs(dt) < 1e-15):
            break
    return s, t


def _segment_project(ax, ay, bx, by, px, py):
    ex = bx - ax
    ey = by - ay
    L2 = ex * ex + ey * ey
    u = np.clip(((px - ax) * ex + (py - ay) * ey) / L2, 0.0, 1.0)
    dx = ax + u * ex - px
    dy = ay + u * ey - py
    return u, dx * dx + dy * dy


def invert_bilinear(quads, points):
    """Locate points in a mesh of bilinear quads.

    Quads are given counter-clockwise as ``(p00, p10, p11, p01)`` so the
    local map is ``p00 (1-s)(1-t) + p10 s(1-t) + p11 s t + p01 (1-s) t``.
    Points inside some quad get that quad's exact local coordinates; the
    remaining ones are projected onto the nearest quad edge.

    Returns
    -------
    elem : ndarray of int64, shape (P,)
    s, t : ndarray, shape (P,)
        Local coordinates in ``[0, 1]``.
    dist : ndarray, shape (P,)
        Distance to the located point; zero for interior hits.
    """
    quads = np.asarray(quads, dtype=float)
    points = np.asarray(points, dtype=float)
    P = points.shape[0]
    elem = np.full(P, -1, dtype=np.int64)
    s_out = np.zeros(P)
    t_out = np.zeros(P)
    dist = np.full(P, np.inf)
    px = points[:, 0]
    py = points[:, 1]
    for e, quad in enumerate(quads):
        lo = quad.min(axis=0)
        hi = quad.max(axis=0)
        sel = np.nonzero((elem < 0) & (px >= lo[0]) & (px <= hi[0])
                         & (py >= lo[1]) & (py <= hi[1]))[0]
        if sel.size == 0:
            continue
        ins = sel[_inside(px[sel], py[sel], quad)]
        if ins.size == 0:
            continue
        s, t = _newton_local(quad, px[ins], py[ins])
        elem[ins] = e
        s_out[ins] = np.clip(s, 0.0, 1.0)
        t_out[ins] = np.clip(t, 0.0, 1.0)
        dist[ins] = 0.0
    rest = np.nonzero(elem < 0)[0]
    if rest.size:
        rx = px[rest]
        ry = py[rest]
        best = np.full(rest.size, np.inf)
        # local coordinates of the four edges p00-p10, p10-p11, p11-p01, p01-p00
        for e, quad in enumerate(quads):
            for k in range(4):
                a_ = quad[k]
                b_ = quad[(k + 1) % 4]
                u, d2 = _segment_project(a_[0], a_[1], b_[0], b_[1], rx, ry)
                better = d2 < best
                if not np.any(better):
                    continue
                best[better] = d2[better]
                sel = rest[better]
                ub = u[better]
                elem[sel] = e
                if k == 0:
                    s_out[sel], t_out[sel] = ub, 0.0
                elif k == 1:
                    s_out[sel], t_out[sel] = 1.0, ub
                elif k == 2:
                    s_out[sel], t_out[sel] = 1.0 - ub, 1.0
                else:
                    s_out[sel], t_out[sel] = 0.0, 1.0 - ub
        dist[rest] = np.sqrt(best)
    return elem, s_out, t_out, dist
