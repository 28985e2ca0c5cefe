"""Global velocity on the container's MAC grid and the masked Stokes block.

The fluid part of every incremental problem is a quadratic in the face
velocities ``U``,

    J(U) = 1/2 U^T A U - r^T U,

minimized over discretely divergence-free fields whose values on faces
touching the solid are prescribed (``U_C = c``).  For a given ``c`` the
minimizer and the multiplier (pressure) come from one sparse KKT solve;
the KKT matrix is factorized once per step, so the solid minimizer can
treat ``V(c) = min J`` as an ordinary smooth function with gradient
``dV/dc`` from the envelope theorem.

Face layout
-----------
``u`` faces ``(i, j)``, ``0 <= i <= nx`` (``< nx`` if periodic in x),
``0 <= j < ny`` come first with flat index ``i*ny + j``; ``v`` faces
``(i, j)``, ``0 <= i < nx``, ``0 <= j <= ny`` follow with offset ``n_u``
and flat index ``i*(ny+1) + j``.
"""

from dataclasses import dataclass
from functools import cached_property
from math import comb

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from . import kernels
from .errors import SingularSystem, ValidationError
from .geometry import ContainerBox, _raster, element_quads

__all__ = [
    "FluidGrid",
    "SolidMask",
    "GlobalVelocityField",
    "FluidSystem",
    "build_mask",
    "trace_matrix",
    "stokes_solve",
    "poiseuille_profile",
    "face_values",
    "global_korn_report",
    "FLUID",
    "SOLID",
    "WALL",
]

FLUID, SOLID, WALL = 0, 1, 2


class FluidGrid:
    """MAC grid on the container with square cells.

    Parameters
    ----------
    container : ContainerBox
    periodic_x : bool
        Periodic in x (no side walls); used for channel-flow checks.
    """

    def __init__(self, container=None, periodic_x=False):
        self.container = container or ContainerBox()
        c = self.container
        if not np.isclose(c.hx, c.hy, rtol=1e-12):
            raise ValidationError(["fluid cells must be square"])
        self.nx, self.ny = c.nx, c.ny
        self.h = c.hx
        self.lo = np.array(c.lo, dtype=float)
        self.periodic_x = bool(periodic_x)
        self.nux = self.nx if periodic_x else self.nx + 1
        self.n_u = self.nux * self.ny
        self.n_v = self.nx * (self.ny + 1)
        self.n_faces = self.n_u + self.n_v
        self.n_cells = self.nx * self.ny

    # -- indexing -------------------------------------------------------------
    def iu(self, i, j):
        i = np.asarray(i)
        if self.periodic_x:
            i = np.mod(i, self.nx)
        return i * self.ny + np.asarray(j)

    def iv(self, i, j):
        return self.n_u + np.asarray(i) * (self.ny + 1) + np.asarray(j)

    @cached_property
    def face_ij(self):
        """Per face: (component, i, j)."""
        iu, ju = np.divmod(np.arange(self.n_u), self.ny)
        iv, jv = np.divmod(np.arange(self.n_v), self.ny + 1)
        comp = np.concatenate([np.zeros(self.n_u, int), np.ones(self.n_v, int)])
        return comp, np.concatenate([iu, iv]), np.concatenate([ju, jv])

    @cached_property
    def face_midpoints(self):
        comp, i, j = self.face_ij
        h = self.h
        x = np.where(comp == 0, i * h, (i + 0.5) * h) + self.lo[0]
        y = np.where(comp == 0, (j + 0.5) * h, j * h) + self.lo[1]
        return np.stack([x, y], axis=1)

    @cached_property
    def wall_faces(self):
        comp, i, j = self.face_ij
        wall = np.zeros(self.n_faces, dtype=bool)
        if not self.periodic_x:
            wall |= (comp == 0) & ((i == 0) | (i == self.nx))
        wall |= (comp == 1) & ((j == 0) | (j == self.ny))
        return wall

    @cached_property
    def face_cells(self):
        """Flat indices of the two cells adjacent to each face (-1 = none)."""
        comp, i, j = self.face_ij
        nx, ny = self.nx, self.ny
        left = np.where(comp == 0, i - 1, i)
        right = i.copy()
        lo_j = np.where(comp == 0, j, j - 1)
        hi_j = j.copy()
        if self.periodic_x:
            left = np.where(comp == 0, np.mod(left, nx), left)
        a = np.where(comp == 0, left * ny + j, i * ny + lo_j)
        b = np.where(comp == 0, right * ny + j, i * ny + hi_j)
        a_ok = np.where(comp == 0, (left >= 0) & (left < nx), lo_j >= 0)
        b_ok = np.where(comp == 0, right < nx, hi_j < ny)
        return np.where(a_ok, a, -1), np.where(b_ok, b, -1)

    # -- operators ------------------------------------------------------------
    def _coo(self, rows, cols, vals, shape):
        return sp.csr_matrix((np.asarray(vals, float),
                              (np.asarray(rows), np.asarray(cols))), shape=shape)

    @cached_property
    def div(self):
        """Cell divergence, shape (n_cells, n_faces)."""
        I, J = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        I, J = I.ravel(), J.ravel()
        cell = I * self.ny + J
        rows = np.concatenate([cell] * 4)
        cols = np.concatenate([self.iu(I + 1, J), self.iu(I, J),
                               self.iv(I, J + 1), self.iv(I, J)])
        vals = np.concatenate([np.ones_like(I), -np.ones_like(I),
                               np.ones_like(I), -np.ones_like(I)]) / self.h
        return self._coo(rows, cols, vals, (self.n_cells, self.n_faces))

    @cached_property
    def cell_grads(self):
        """Cell-centred ``du/dx`` and ``dv/dy``."""
        I, J = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        I, J = I.ravel(), J.ravel()
        cell = I * self.ny + J
        one = np.ones_like(I) / self.h
        Dux = self._coo(np.concatenate([cell, cell]),
                        np.concatenate([self.iu(I + 1, J), self.iu(I, J)]),
                        np.concatenate([one, -one]), (self.n_cells, self.n_faces))
        Dvy = self._coo(np.concatenate([cell, cell]),
                        np.concatenate([self.iv(I, J + 1), self.iv(I, J)]),
                        np.concatenate([one, -one]), (self.n_cells, self.n_faces))
        return Dux, Dvy

    @cached_property
    def vertex_shape(self):
        return (self.nx if self.periodic_x else self.nx + 1, self.ny + 1)

    @cached_property
    def vertex_grads(self):
        """Vertex ``du/dy`` and ``dv/dx`` with no-slip ghost reflection."""
        nvx, nvy = self.vertex_shape
        h = self.h
        I, J = np.meshgrid(np.arange(nvx), np.arange(nvy), indexing="ij")
        I, J = I.ravel(), J.ravel()
        r = I * nvy + J
        shape = (nvx * nvy, self.n_faces)
        # du/dy from u(i, j) - u(i, j-1); odd ghosts at the horizontal walls
        up = J < self.ny
        dn = J > 0
        rows = np.concatenate([r[up], r[dn]])
        cols = np.concatenate([self.iu(I[up], J[up]), self.iu(I[dn], J[dn] - 1)])
        vals = np.concatenate([np.where(J[up] == 0, 2.0, 1.0),
                               np.where(J[dn] == self.ny, -2.0, -1.0)]) / h
        Duy = self._coo(rows, cols, vals, shape)
        # dv/dx from v(i, j) - v(i-1, j)
        if self.periodic_x:
            rows = np.concatenate([r, r])
            cols = np.concatenate([self.iv(I % self.nx, J),
                                   self.iv((I - 1) % self.nx, J)])
            vals = np.concatenate([np.ones(len(r)), -np.ones(len(r))]) / h
        else:
            rt = I < self.nx
            lf = I > 0
            rows = np.concatenate([r[rt], r[lf]])
            cols = np.concatenate([self.iv(I[rt], J[rt]), self.iv(I[lf] - 1, J[lf])])
            vals = np.concatenate([np.where(I[rt] == 0, 2.0, 1.0),
                                   np.where(I[lf] == self.nx, -2.0, -1.0)]) / h
        Dvx = self._coo(rows, cols, vals, shape)
        return Duy, Dvx

    def vertex_fluid_fraction(self, fluid_cells):
        """Fraction (in quarters of h^2) of fluid cells around each vertex."""
        nvx, nvy = self.vertex_shape
        f = np.asarray(fluid_cells, dtype=float).reshape(self.nx, self.ny)
        out = np.zeros((nvx, nvy))
        for di in (0, 1):
            for dj in (0, 1):
                ci = np.arange(nvx) - di
                cj = np.arange(nvy) - dj
                if self.periodic_x:
                    ci = np.mod(ci, self.nx)
                okx = (ci >= 0) & (ci < self.nx)
                oky = (cj >= 0) & (cj < self.ny)
                sub = np.zeros((nvx, nvy))
                sub[np.ix_(okx, oky)] = f[np.ix_(ci[okx], cj[oky])]
                out += sub
        return out.ravel() / 4.0

    def strain_matrix(self, fluid_cells):
        """Matrix ``K`` with ``||eps U||^2_{fluid} = U^T K U``.

        ``eps U = grad U + grad U^T``; diagonal entries live at cell
        centres and the off-diagonal one at vertices.
        """
        h2 = self.h ** 2
        wc = h2 * np.asarray(fluid_cells, dtype=float).ravel()
        Dux, Dvy = self.cell_grads
        Duy, Dvx = self.vertex_grads
        wv = h2 * self.vertex_fluid_fraction(fluid_cells)
        S = Duy + Dvx
        K = 4.0 * (Dux.T @ sp.diags(wc) @ Dux + Dvy.T @ sp.diags(wc) @ Dvy)
        K = K + 2.0 * (S.T @ sp.diags(wv) @ S)
        return K.tocsr()

    def w12_matrix(self):
        """Gram matrix of a discrete W^{1,2} norm of the face field on Omega."""
        h2 = self.h ** 2
        Dux, Dvy = self.cell_grads
        Duy, Dvx = self.vertex_grads
        wv = h2 * self.vertex_fluid_fraction(np.ones(self.n_cells))
        M = sp.diags(np.where(self.wall_faces, 0.0, h2))
        K = M + h2 * (Dux.T @ Dux + Dvy.T @ Dvy)
        K = K + Duy.T @ sp.diags(wv) @ Duy + Dvx.T @ sp.diags(wv) @ Dvx
        return K.tocsr()

    def kth_stencils(self, k=3):
        """k-th difference stencils on the u and v lattices.

        Returns ``(M, mult)`` pairs with ``M`` mapping the face vector to
        stencil values; stencils never wrap around walls.
        """
        cache = self.__dict__.setdefault("_kth_cache", {})
        if k in cache:
            return cache[k]
        out = []
        for comp in (0, 1):
            if comp == 0:
                nlx, nly, index, wrap = self.nux, self.ny, self.iu, self.periodic_x
            else:
                nlx, nly, index, wrap = self.nx, self.ny + 1, self.iv, False
            for kx in range(k, -1, -1):
                ky = k - kx
                ix_max = nlx if wrap else nlx - kx
                iy_max = nly - ky
                if ix_max <= 0 or iy_max <= 0:
                    continue
                I, J = np.meshgrid(np.arange(ix_max), np.arange(iy_max),
                                   indexing="ij")
                I, J = I.ravel(), J.ravel()
                r = np.arange(len(I))
                rows, cols, vals = [], [], []
                for a_ in range(kx + 1):
                    ca = (-1) ** (kx - a_) * comb(kx, a_)
                    for b_ in range(ky + 1):
                        cb = (-1) ** (ky - b_) * comb(ky, b_)
                        rows.append(r)
                        cols.append(index(I + a_, J + b_))
                        vals.append(np.full(len(r), ca * cb / self.h ** k))
                M = self._coo(np.concatenate(rows), np.concatenate(cols),
                              np.concatenate(vals), (len(r), self.n_faces))
                out.append((M, comb(k, kx)))
        cache[k] = out
        return out

    # -- interpolation ----------------------------------------------------------
    def interp_matrix(self, points):
        """Bilinear interpolation of both components at points.

        Returns a sparse matrix of shape ``(2P, n_faces)``; rows ``0..P-1``
        give the x-component and ``P..2P-1`` the y-component.  No-slip walls
        are handled by odd ghost reflection.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        P = len(pts)
        h = self.h
        nx, ny = self.nx, self.ny
        # u lattice padded with ghost rows j = -1 and j = ny
        nlx = nx + 1
        nly = ny + 2
        idx, w = kernels.bilinear_weights(pts[:, 0], pts[:, 1], self.lo[0],
                                          self.lo[1] - 0.5 * h, h, h, nlx, nly)
        li, lj = np.divmod(idx, nly)
        jj = lj - 1
        sign = np.where((jj < 0) | (jj >= ny), -1.0, 1.0)
        jj = np.clip(jj, 0, ny - 1)
        cols_u = self.iu(li, jj)
        # v lattice padded with ghost columns i = -1 and i = nx
        nlx = nx + 2
        nly = ny + 1
        idx, wv = kernels.bilinear_weights(pts[:, 0], pts[:, 1],
                                           self.lo[0] - 0.5 * h, self.lo[1],
                                           h, h, nlx, nly)
        li, lj = np.divmod(idx, nly)
        ii = li - 1
        if self.periodic_x:
            sign_v = np.ones_like(w)
            ii = np.mod(ii, nx)
        else:
            sign_v = np.where((ii < 0) | (ii >= nx), -1.0, 1.0)
            ii = np.clip(ii, 0, nx - 1)
        cols_v = self.iv(ii, lj)
        rows = np.concatenate([np.repeat(np.arange(P), 4),
                               np.repeat(np.arange(P, 2 * P), 4)])
        cols = np.concatenate([cols_u.ravel(), cols_v.ravel()])
        vals = np.concatenate([(w * sign).ravel(), (wv * sign_v).ravel()])
        M = sp.csr_matrix((vals, (rows, cols)), shape=(2 * P, self.n_faces))
        M.sum_duplicates()
        return M

    def cell_of(self, points):
        """Flat index of the cell containing each point (clamped)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        i = np.clip(np.floor((pts[:, 0] - self.lo[0]) / self.h).astype(int),
                    0, self.nx - 1)
        j = np.clip(np.floor((pts[:, 1] - self.lo[1]) / self.h).astype(int),
                    0, self.ny - 1)
        return i * self.ny + j

    def cell_velocity_gradients(self, U, fluid_cells=None):
        """Cell-constant velocity gradient ``A[k] = grad v`` per cell.

        Diagonal entries are the cell differences; off-diagonal entries
        average the four vertex values.  Where ``fluid_cells`` is false the
        trace-free part is returned, so that every generator is
        trace-free wherever the discrete divergence is not enforced.
        """
        U = np.asarray(U, dtype=float)
        Dux, Dvy = self.cell_grads
        Duy, Dvx = self.vertex_grads
        nvx, nvy = self.vertex_shape
        uy = (Duy @ U).reshape(nvx, nvy)
        vx = (Dvx @ U).reshape(nvx, nvy)

        def to_cells(a):
            if self.periodic_x:
                a = np.concatenate([a, a[:1]], axis=0)
            return 0.25 * (a[:-1, :-1] + a[1:, :-1] + a[:-1, 1:] + a[1:, 1:])

        A = np.empty((self.n_cells, 2, 2))
        A[:, 0, 0] = Dux @ U
        A[:, 1, 1] = Dvy @ U
        A[:, 0, 1] = to_cells(uy).ravel()
        A[:, 1, 0] = to_cells(vx).ravel()
        if fluid_cells is not None:
            nf = ~np.asarray(fluid_cells, dtype=bool).ravel()
            tr = 0.5 * (A[nf, 0, 0] + A[nf, 1, 1])
            A[nf, 0, 0] -= tr
            A[nf, 1, 1] -= tr
        return A

    def lipschitz(self, U):
        """Max over cells of the face-difference gradient magnitude."""
        A = self.cell_velocity_gradients(U)
        return float(np.max(np.linalg.norm(A, ord=2, axis=(1, 2)))) if len(A) else 0.0


@dataclass
class SolidMask:
    """Cell occupancy of the deformed solid on the fluid grid."""

    occupancy: np.ndarray
    kind: np.ndarray

    @property
    def solid(self):
        return self.kind == SOLID

    @property
    def fluid(self):
        return self.kind == FLUID

    def area(self, cell_area):
        return float(np.count_nonzero(self.solid) * cell_area)


@dataclass
class GlobalVelocityField:
    """Face velocities, cell pressures and the mask they were built on."""

    U: np.ndarray
    pressure: np.ndarray
    mask: SolidMask
    grid: FluidGrid

    def divergence(self):
        return self.grid.div @ self.U


def build_mask(eta, container=None, subsamples=4):
    """Occupancy mask of ``eta(Q)``; cells with occupancy >= 1/2 are solid."""
    from .geometry import _positions
    grid, X = _positions(eta)
    container = container or ContainerBox()
    count, _ = _raster(grid, X, container, subsamples)
    covered = (count > 0).reshape(container.nx, subsamples, container.ny,
                                  subsamples)
    occ = covered.mean(axis=(1, 3))
    kind = np.where(occ >= 0.5, SOLID, FLUID).astype(np.int8)
    return SolidMask(occupancy=occ, kind=kind)


def trace_matrix(grid, X, fgrid, faces):
    """Solid velocity transfer ``c = T b`` onto the given faces.

    Each face midpoint is located in the deformed solid mesh ``X`` (or
    projected onto its boundary); the face's normal velocity component is
    the bilinear interpolant of the nodal ``b`` there.

    Returns
    -------
    T : sparse matrix, shape (len(faces), 2*n_nodes)
    dist : ndarray
        Distance from each face midpoint to the solid (0 inside).
    """
    faces = np.asarray(faces, dtype=np.int64)
    pts = fgrid.face_midpoints[faces]
    comp = fgrid.face_ij[0][faces]
    if len(faces) == 0:
        return sp.csr_matrix((0, 2 * grid.n_nodes)), np.zeros(0)
    elem, s, t, dist = kernels.invert_bilinear(element_quads(grid, X), pts)
    ie, je = np.divmod(elem, grid.ny - 1)
    nodes = np.stack([ie * grid.ny + je, (ie + 1) * grid.ny + je,
                      (ie + 1) * grid.ny + je + 1, ie * grid.ny + je + 1], axis=1)
    w = np.stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=1)
    rows = np.repeat(np.arange(len(faces)), 4)
    cols = (nodes * 2 + comp[:, None]).ravel()
    T = sp.csr_matrix((w.ravel(), (rows, cols)),
                      shape=(len(faces), 2 * grid.n_nodes))
    return T, dist


class FluidSystem:
    """Masked Stokes-type quadratic with prescribed values near the solid.

    Parameters
    ----------
    fgrid : FluidGrid
    fluid_cells : ndarray of bool, shape (nx, ny)
    nu : float
        Viscosity; the form is ``nu/2 ||eps U||^2``.
    face_force : ndarray, optional
        Per-face force component (already multiplied by ``rho_f``), paired
        with ``U`` on free faces with weight ``h^2``.
    h_reg : float
        Weight of ``h_reg/2 ||grad^k0 U||^2`` (0 to disable).
    markers : dict, optional
        Inertial marker data with keys ``points`` (P, 2), ``weights`` (P,),
        ``w`` (P, 2), ``coef`` (``rho_f / h``) and optionally ``force``
        (P, 2) (already multiplied by ``rho_f``).
    extra_active : ndarray of int, optional
        Additional faces whose values must be available.
    """

    def __init__(self, fgrid, fluid_cells, nu, face_force=None, h_reg=0.0,
                 k0=3, markers=None, extra_active=None):
        self.fgrid = fgrid
        fl = np.asarray(fluid_cells, dtype=bool).reshape(fgrid.nx, fgrid.ny)
        self.fluid_cells = fl
        flat = fl.ravel()
        if not flat.any():
            raise SingularSystem("fluid region is empty")
        a, b = fgrid.face_cells
        wall = fgrid.wall_faces
        fa = np.where(a >= 0, flat[np.maximum(a, 0)], False)
        fb = np.where(b >= 0, flat[np.maximum(b, 0)], False)
        free = ~wall & fa & fb
        self.free = np.nonzero(free)[0]
        nF = len(self.free)

        # quadratic pieces on the full face vector
        self.K_eps = nu * fgrid.strain_matrix(flat)
        A = self.K_eps
        self.K_reg = None
        if h_reg > 0:
            Kr = sp.csr_matrix((fgrid.n_faces, fgrid.n_faces))
            for M, mult in fgrid.kth_stencils(k0):
                keep = np.asarray((abs(M[:, self.free]).sum(axis=1) > 0)).ravel()
                Mk = M[keep]
                Kr = Kr + mult * fgrid.h ** 2 * (Mk.T @ Mk)
            self.K_reg = h_reg * Kr.tocsr()
            A = A + self.K_reg
        r = np.zeros(fgrid.n_faces)
        if face_force is not None:
            ff = np.zeros(fgrid.n_faces)
            ff[self.free] = np.asarray(face_force, dtype=float)[self.free]
            self.force_vec = fgrid.h ** 2 * ff
            r = r + self.force_vec
        else:
            self.force_vec = np.zeros(fgrid.n_faces)
        self.markers = markers
        self.K_in = None
        self.in_const = 0.0
        if markers is not None:
            Im = fgrid.interp_matrix(markers["points"])
            P = len(markers["weights"])
            Wt = np.concatenate([markers["weights"], markers["weights"]])
            coef = markers["coef"]
            wv = np.concatenate([markers["w"][:, 0], markers["w"][:, 1]])
            self.Im, self.Wt = Im, Wt
            self.K_in = coef * (Im.T @ sp.diags(Wt) @ Im)
            A = A + self.K_in
            r = r + coef * (Im.T @ (Wt * wv))
            self.in_const = 0.5 * coef * float(np.sum(Wt * wv * wv))
            self.marker_force = np.zeros(2 * P)
            if markers.get("force") is not None:
                fm = np.concatenate([markers["force"][:, 0], markers["force"][:, 1]])
                self.marker_force = Wt * fm
                r = r + Im.T @ self.marker_force
        self.A = A.tocsr()
        self.r = r

        # faces that influence the functional
        touched = np.asarray(abs(self.A).sum(axis=0)).ravel() > 0
        touched |= np.asarray(abs(fgrid.div[flat]).sum(axis=0)).ravel() > 0
        touched |= self.r != 0
        if extra_active is not None:
            touched[np.asarray(extra_active, dtype=np.int64)] = True
        cons = touched & ~free & ~wall
        self.constrained = np.nonzero(cons)[0]

        # divergence rows on fluid cells, one pinned per component
        D = fgrid.div[np.nonzero(flat)[0]]
        D_F = D[:, self.free]
        D_C = D[:, self.constrained]
        adj = (abs(D_F) @ abs(D_F).T).tocsr()
        ncomp, labels = connected_components(adj, directed=False)
        keep = np.ones(D.shape[0], dtype=bool)
        G = np.zeros((ncomp, len(self.constrained)))
        Dc_dense = D_C.toarray() if D_C.shape[1] else np.zeros((D.shape[0], 0))
        for k in range(ncomp):
            rows = np.nonzero(labels == k)[0]
            keep[rows[0]] = False
            G[k] = Dc_dense[rows].sum(axis=0)
        self.n_components = ncomp
        self.compatibility = G
        self.fluid_cell_index = np.nonzero(flat)[0]
        self.kept_rows = np.nonzero(keep)[0]
        self.D_F = D_F[keep]
        self.D_C = D_C[keep]

        A_FF = self.A[self.free][:, self.free]
        self.A_FC = self.A[self.free][:, self.constrained]
        self.A_CC = self.A[self.constrained][:, self.constrained]
        self.r_F = self.r[self.free]
        self.r_C = self.r[self.constrained]
        nP = self.D_F.shape[0]
        K = sp.bmat([[A_FF, self.D_F.T], [self.D_F, None]], format="csc")
        self.n_F, self.n_P = nF, nP
        self._K = K
        try:
            self._lu = spla.splu(K)
        except RuntimeError as exc:
            raise SingularSystem(f"KKT factorization failed: {exc}") from exc

    # ------------------------------------------------------------------------
    def solve(self, c):
        """Minimize over free faces for prescribed constrained values.

        Returns
        -------
        V : float
            Minimum of ``J`` (without the constant inertial term).
        dV : ndarray
            Gradient of ``V`` with respect to ``c``.
        U : ndarray
            Full face vector of the minimizer.
        p : ndarray
            Pressure per cell (zero on non-fluid and pinned cells).
        """
        c = np.asarray(c, dtype=float)
        rhs = np.concatenate([self.r_F - self.A_FC @ c, -(self.D_C @ c)])
        sol = self._lu.solve(rhs)
        # one step of iterative refinement; the regularized block is stiff
        sol += self._lu.solve(rhs - self._K @ sol)
        uF = sol[:self.n_F]
        lam = sol[self.n_F:]
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("non-finite KKT solution")
        U = np.zeros(self.fgrid.n_faces)
        U[self.free] = uF
        U[self.constrained] = c
        V = 0.5 * float(U @ (self.A @ U)) - float(self.r @ U)
        dV = self.A_FC.T @ uF + self.A_CC @ c - self.r_C + self.D_C.T @ lam
        p = np.zeros(self.fgrid.n_cells)
        p[self.fluid_cell_index[self.kept_rows]] = lam
        return V, dV, U, p

    def schur(self):
        """Exact quadratic model ``V(c) = V0 + g0.c + 1/2 c^T S c``.

        Computed once with a multi-right-hand-side solve; ``S`` is the
        Schur complement of the KKT system on the constrained faces.
        """
        if "_schur" not in self.__dict__:
            nC = len(self.constrained)
            V0, g0, _, _ = self.solve(np.zeros(nC))
            if nC:
                B = sp.vstack([self.A_FC, self.D_C]).toarray()
                X = self._lu.solve(np.asfortranarray(B))
                res = B - self._K @ X
                if np.linalg.norm(res) > 1e-13 * np.linalg.norm(B):
                    X += self._lu.solve(np.asfortranarray(res))
                S = self.A_CC.toarray() - B.T @ X
                S = 0.5 * (S + S.T)
            else:
                S = np.zeros((0, 0))
            self._schur = (V0, g0, S)
        return self._schur

    def residual(self, U, p):
        """KKT residual norm of a solution returned by :meth:`solve`."""
        uF = U[self.free]
        c = U[self.constrained]
        lam = p[self.fluid_cell_index[self.kept_rows]]
        r1 = self.A[self.free] @ U - self.r_F + self.D_F.T @ lam
        r2 = self.D_F @ uF + self.D_C @ c
        return float(np.sqrt(np.sum(r1 ** 2) + np.sum(r2 ** 2)))

    def parts(self, U):
        """Split the functional at ``U`` into its physical pieces."""
        out = {
            "eps": 0.5 * float(U @ (self.K_eps @ U)),
            "reg": 0.5 * float(U @ (self.K_reg @ U)) if self.K_reg is not None else 0.0,
            "work_grid": float(self.force_vec @ U),
            "work_markers": 0.0,
            "inertia": 0.0,
            "marker_kinetic": 0.0,
        }
        if self.markers is not None:
            vm = self.Im @ U
            out["work_markers"] = float(self.marker_force @ vm)
            wv = np.concatenate([self.markers["w"][:, 0], self.markers["w"][:, 1]])
            out["inertia"] = 0.5 * self.markers["coef"] * float(
                np.sum(self.Wt * (vm - wv) ** 2))
            out["marker_kinetic"] = float(np.sum(self.Wt * vm * vm))
        return out


def stokes_solve(mask, boundary_data=None, force=None, nu=1.0, h_reg=0.0,
                 fgrid=None, rho_f=1.0, k0=3):
    """Stokes minimizer on the fluid part of ``mask``.

    Parameters
    ----------
    mask : SolidMask or ndarray of bool
        Solid mask, or a boolean array of fluid cells.
    boundary_data : callable or ndarray, optional
        Values on constrained faces: a callable ``(points, comp) -> values``
        or a full face vector.  Defaults to zero.
    force : callable or tuple, optional
        Body force ``f(points) -> (P, 2)`` or a constant vector.
    fgrid : FluidGrid, optional

    Returns
    -------
    GlobalVelocityField

    Raises
    ------
    SingularSystem
        Empty fluid region or boundary data with net flux into a closed
        fluid component.
    """
    fgrid = fgrid or FluidGrid()
    if isinstance(mask, SolidMask):
        fluid = mask.fluid
        smask = mask
    else:
        fluid = np.asarray(mask, dtype=bool)
        kind = np.where(fluid, FLUID, SOLID).astype(np.int8)
        smask = SolidMask(occupancy=(~fluid).astype(float), kind=kind)
    face_force = None
    if force is not None:
        face_force = rho_f * face_values(fgrid, force)
    sys_ = FluidSystem(fgrid, fluid, nu, face_force=face_force, h_reg=h_reg, k0=k0)
    comp = fgrid.face_ij[0][sys_.constrained]
    pts = fgrid.face_midpoints[sys_.constrained]
    if boundary_data is None:
        c = np.zeros(len(sys_.constrained))
    elif callable(boundary_data):
        c = np.asarray(boundary_data(pts, comp), dtype=float)
    else:
        c = np.asarray(boundary_data, dtype=float)[sys_.constrained]
    flux = sys_.compatibility @ c
    if np.any(np.abs(flux) > 1e-10 * (1.0 + np.abs(c).sum() / fgrid.h)):
        raise SingularSystem("boundary data has net flux into a closed fluid "
                             "component")
    _, _, U, p = sys_.solve(c)
    return GlobalVelocityField(U=U, pressure=p, mask=smask, grid=fgrid)


def face_values(fgrid, field):
    """Normal component of a vector field at every face midpoint."""
    pts = fgrid.face_midpoints
    comp = fgrid.face_ij[0]
    if callable(field):
        vals = np.asarray(field(pts), dtype=float).reshape(-1, 2)
    else:
        vals = np.broadcast_to(np.asarray(field, dtype=float), (len(pts), 2))
    return np.where(comp == 0, vals[:, 0], vals[:, 1])


def poiseuille_profile(y, height, force, nu, rho_f=1.0):
    """Continuum channel profile for ``nu/2 ||eps v||^2 - rho f v``.

    The Euler-Lagrange equation is ``-2 nu u'' = rho f``, hence
    ``u = rho f y (H - y) / (4 nu)``.
    """
    y = np.asarray(y, dtype=float)
    return rho_f * force * y * (height - y) / (4.0 * nu)


def global_korn_report(fgrid, U, eta, b, nu=1.0, fluid_cells=None):
    """Both sides of the global Korn inequality for a global field.

    ``korn_lhs`` is the squared discrete W^{1,2} norm of ``U`` on Omega and
    ``korn_rhs = nu/2 ||eps U||^2_fluid + R(eta, b)``; ``constant`` is their
    ratio (the empirical Korn constant).
    """
    from .energetics import dissipation
    U = np.asarray(U, dtype=float)
    if fluid_cells is None:
        fluid_cells = np.ones(fgrid.n_cells, dtype=bool)
    lhs = float(U @ (fgrid.w12_matrix() @ U))
    rhs = 0.5 * nu * float(U @ (fgrid.strain_matrix(np.ravel(fluid_cells)) @ U))
    rhs += dissipation(eta, b)
    const = rhs / lhs if lhs > 0 else float("nan")
    return {"korn_lhs": lhs, "korn_rhs": rhs, "constant": const}
