# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see ``_pykernels`` for contracts)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow, floor, ceil, sqrt, fabs, INFINITY

cnp.import_array()


def cell_density(double[:, :, ::1] F, double[:, :, :, ::1] G,
                 double lam, double mu, double a, double q,
                 double w_svk, double w_bar, double w_reg):
    cdef Py_ssize_t N = F.shape[0]
    e_arr = np.empty(N)
    dF_arr = np.zeros((N, 2, 2))
    dG_arr = np.zeros((N, 2, 2, 2))
    cdef double[::1] e = e_arr
    cdef double[:, :, ::1] dF = dF_arr
    cdef double[:, :, :, ::1] dG = dG_arr
    cdef Py_ssize_t k, c, i, j
    cdef double f00, f01, f10, f11, det, a00, a01, a11, trA, nA2, g2
    cdef double bar, s00, s01, s11, coef, gq
    for k in range(N):
        f00 = F[k, 0, 0]
        f01 = F[k, 0, 1]
        f10 = F[k, 1, 0]
        f11 = F[k, 1, 1]
        det = f00 * f11 - f01 * f10
        if det <= 0.0:
            e[k] = INFINITY
            continue
        a00 = f00 * f00 + f10 * f10 - 1.0
        a01 = f00 * f01 + f10 * f11
        a11 = f01 * f01 + f11 * f11 - 1.0
        trA = a00 + a11
        nA2 = a00 * a00 + 2.0 * a01 * a01 + a11 * a11
        g2 = 0.0
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    g2 += G[k, c, i, j] * G[k, c, i, j]
        bar = pow(det, -a)
        e[k] = (w_svk * (lam * trA * trA + 2.0 * mu * nA2) + w_bar * bar
                + w_reg * pow(g2, 0.5 * q))
        s00 = 4.0 * mu * a00 + 2.0 * lam * trA
        s01 = 4.0 * mu * a01
        s11 = 4.0 * mu * a11 + 2.0 * lam * trA
        coef = w_bar * a * bar / det
        dF[k, 0, 0] = 2.0 * w_svk * (f00 * s00 + f01 * s01) - coef * f11
        dF[k, 0, 1] = 2.0 * w_svk * (f00 * s01 + f01 * s11) + coef * f10
        dF[k, 1, 0] = 2.0 * w_svk * (f10 * s00 + f11 * s01) + coef * f01
        dF[k, 1, 1] = 2.0 * w_svk * (f10 * s01 + f11 * s11) - coef * f00
        gq = w_reg * q * pow(g2, 0.5 * q - 1.0)
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    dG[k, c, i, j] = gq * G[k, c, i, j]
    return e_arr, dF_arr, dG_arr


cdef inline bint _inside(double px, double py, double[:, ::1] quad) nogil:
    cdef bint inside = False
    cdef Py_ssize_t k, n = quad.shape[0]
    cdef double xi, yi, xj, yj
    for k in range(n):
        xi = quad[k, 0]
        yi = quad[k, 1]
        xj = quad[(k + 1) % n, 0]
        yj = quad[(k + 1) % n, 1]
        if (yi > py) != (yj > py):
            if px < (xj - xi) * (py - yi) / (yj - yi) + xi:
                inside = not inside
    return inside


def raster_coverage(double[:, :, ::1] quads, double x0, double y0,
                    double ds, Py_ssize_t nx, Py_ssize_t ny):
    count_arr = np.zeros((nx, ny), dtype=np.int32)
    cdef int[:, ::1] count = count_arr
    cdef Py_ssize_t m, k, i, j, i0, i1, j0, j1
    cdef double lox, loy, hix, hiy, px, py
    for m in range(quads.shape[0]):
        lox = quads[m, 0, 0]
        hix = lox
        loy = quads[m, 0, 1]
        hiy = loy
        for k in range(1, 4):
            lox = min(lox, quads[m, k, 0])
            hix = max(hix, quads[m, k, 0])
            loy = min(loy, quads[m, k, 1])
            hiy = max(hiy, quads[m, k, 1])
        i0 = max(<Py_ssize_t>floor((lox - x0) / ds - 0.5), 0)
        i1 = min(<Py_ssize_t>ceil((hix - x0) / ds - 0.5), nx - 1)
        j0 = max(<Py_ssize_t>floor((loy - y0) / ds - 0.5), 0)
        j1 = min(<Py_ssize_t>ceil((hiy - y0) / ds - 0.5), ny - 1)
        for i in range(i0, i1 + 1):
            px = x0 + (i + 0.5) * ds
            for j in range(j0, j1 + 1):
                py = y0 + (j + 0.5) * ds
                if _inside(px, py, quads[m]):
                    count[i, j] += 1
    return count_arr


def bilinear_weights(double[::1] px, double[::1] py, double x0, double y0,
                     double dx, double dy, Py_ssize_t nx, Py_ssize_t ny):
    cdef Py_ssize_t P = px.shape[0]
    idx_arr = np.empty((P, 4), dtype=np.int64)
    w_arr = np.empty((P, 4))
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] w = w_arr
    cdef Py_ssize_t p, i, j
    cdef Py_ssize_t imax = max(nx - 2, 0)
    cdef Py_ssize_t jmax = max(ny - 2, 0)
    cdef double sx, sy, fx, fy
    for p in range(P):
        sx = min(max((px[p] - x0) / dx, 0.0), nx - 1.0)
        sy = min(max((py[p] - y0) / dy, 0.0), ny - 1.0)
        i = min(<Py_ssize_t>floor(sx), imax)
        j = min(<Py_ssize_t>floor(sy), jmax)
        fx = sx - i
        fy = sy - j
        idx[p, 0] = i * ny + j
        idx[p, 1] = (i + 1) * ny + j
        idx[p, 2] = i * ny + j + 1
        idx[p, 3] = (i + 1) * ny + j + 1
        w[p, 0] = (1 - fx) * (1 - fy)
        w[p, 1] = fx * (1 - fy)
        w[p, 2] = (1 - fx) * fy
        w[p, 3] = fx * fy
    return idx_arr, w_arr


cdef void _newton(double[:, ::1] q, double px, double py,
                  double* s_out, double* t_out) nogil:
    cdef double s = 0.5, t = 0.5, x, y, xs, ys, xt, yt, det, rx, ry, ds, dt
    cdef int it
    for it in range(30):
        x = (q[0, 0] * (1 - s) * (1 - t) + q[1, 0] * s * (1 - t)
             + q[2, 0] * s * t + q[3, 0] * (1 - s) * t)
        y = (q[0, 1] * (1 - s) * (1 - t) + q[1, 1] * s * (1 - t)
             + q[2, 1] * s * t + q[3, 1] * (1 - s) * t)
        xs = (q[1, 0] - q[0, 0]) * (1 - t) + (q[2, 0] - q[3, 0]) * t
        ys = (q[1, 1] - q[0, 1]) * (1 - t) + (q[2, 1] - q[3, 1]) * t
        xt = (q[3, 0] - q[0, 0]) * (1 - s) + (q[2, 0] - q[1, 0]) * s
        yt = (q[3, 1] - q[0, 1]) * (1 - s) + (q[2, 1] - q[1, 1]) * s
        det = xs * yt - xt * ys
        rx = px - x
        ry = py - y
        ds = (yt * rx - xt * ry) / det
        dt = (-ys * rx + xs * ry) / det
        s = s + ds
        t = t + dt
        if fabs(ds) + fabs(dt) < 1e-15:
            break
    s_out[0] = s
    t_out[0] = t


def invert_bilinear(double[:, :, ::1] quads, double[:, ::1] points):
    cdef Py_ssize_t P = points.shape[0], E = quads.shape[0]
    elem_arr = np.full(P, -1, dtype=np.int64)
    s_arr = np.zeros(P)
    t_arr = np.zeros(P)
    dist_arr = np.full(P, np.inf)
    cdef long long[::1] elem = elem_arr
    cdef double[::1] so = s_arr
    cdef double[::1] to = t_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t p, e, k
    cdef double px, py, lox, loy, hix, hiy, s, t, best, ax, ay, bx, by
    cdef double ex, ey, L2, u, ddx, ddy, d2
    for p in range(P):
        px = points[p, 0]
        py = points[p, 1]
        for e in range(E):
            lox = quads[e, 0, 0]
            hix = lox
            loy = quads[e, 0, 1]
            hiy = loy
            for k in range(1, 4):
                lox = min(lox, quads[e, k, 0])
                hix = max(hix, quads[e, k, 0])
                loy = min(loy, quads[e, k, 1])
                hiy = max(hiy, quads[e, k, 1])
            if px < lox or px > hix or py < loy or py > hiy:
                continue
            if _inside(px, py, quads[e]):
                _newton(quads[e], px, py, &s, &t)
                elem[p] = e
                so[p] = min(max(s, 0.0), 1.0)
                to[p] = min(max(t, 0.0), 1.0)
                dist[p] = 0.0
                break
        if elem[p] >= 0:
            continue
        best = INFINITY
        for e in range(E):
            for k in range(4):
                ax = quads[e, k, 0]
                ay = quads[e, k, 1]
                bx = quads[e, (k + 1) % 4, 0]
                by = quads[e, (k + 1) % 4, 1]
                ex = bx - ax
                ey = by - ay
                L2 = ex * ex + ey * ey
                u = ((px - ax) * ex + (py - ay) * ey) / L2
                u = min(max(u, 0.0), 1.0)
                ddx = ax + u * ex - px
                ddy = ay + u * ey - py
                d2 = ddx * ddx + ddy * ddy
                if d2 < best:
                    best = d2
                    elem[p] = e
                    if k == 0:
                        so[p] = u
                        to[p] = 0.0
                    elif k == 1:
                        so[p] = 1.0
                        to[p] = u
                    elif k == 2:
                        so[p] = 1.0 - u
                        to[p] = 1.0
                    else:
                        so[p] = 0.0
                        to[p] = 1.0 - u
        dist[p] = sqrt(best)
    return elem_arr, s_arr, t_arr, dist_arr
