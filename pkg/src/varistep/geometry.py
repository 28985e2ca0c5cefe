"""Reference grid of the solid, container box, jet stencils and the
injectivity checks (rasterized image volume, Ciarlet-Necas defect and
boundary self-distance).

Layout conventions
------------------
Nodes of the solid grid are indexed ``(i, j)`` with ``i`` along x; a
deformation is an array of shape ``(nx, ny, 2)``.  Flattened scalar nodal
fields use index ``i*ny + j``.  Quadrature points are cell centres, cell
``(i, j)`` having flat index ``i*(ny-1) + j``.
"""

from dataclasses import dataclass
from functools import cached_property
from math import comb

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import DegenerateElement, ValidationError

__all__ = [
    "ReferenceGrid",
    "DeformationField",
    "ContainerBox",
    "JetSample",
    "Jets",
    "jet_arrays",
    "evaluate_jets",
    "element_quads",
    "element_areas",
    "quadrature_volume",
    "image_volume",
    "ciarlet_necas_defect",
    "cn_tolerance",
    "boundary_length",
    "boundary_distances",
    "min_boundary_self_distance",
    "write_field",
    "read_field",
    "write_mask",
]


def _diff1(n, h):
    """Forward difference from nodes to the n-1 cell midpoints."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1],
                    shape=(n - 1, n)) / h


def _avg1(n):
    return sp.diags([np.full(n - 1, 0.5), np.full(n - 1, 0.5)], [0, 1],
                    shape=(n - 1, n))


def _second1(n, h):
    """Nodal second difference, one-sided at the ends.

    Interior rows use (1, -2, 1).  End rows use the 4-point formula
    (2, -5, 4, -1), which is exact for cubics, or the 3-point one when
    only three nodes exist.  With two nodes there is no information and
    the operator is zero.
    """
    M = sp.lil_matrix((n, n))
    if n < 3:
        return M.tocsr()
    for m in range(1, n - 1):
        M[m, m - 1:m + 2] = [1.0, -2.0, 1.0]
    if n >= 4:
        M[0, 0:4] = [2.0, -5.0, 4.0, -1.0]
        M[n - 1, n - 4:n] = [-1.0, 4.0, -5.0, 2.0]
    else:
        M[0, 0:3] = [1.0, -2.0, 1.0]
        M[n - 1, n - 3:n] = [1.0, -2.0, 1.0]
    return M.tocsr() / h**2


def _forward_k(n, k, h):
    """k-fold forward difference on n nodes, shape (n-k, n)."""
    D = sp.identity(n, format="csr")
    for m in range(k):
        D = _diff1(n - m, h) @ D
    return D.tocsr()


class ReferenceGrid:
    """Structured node grid on the reference rectangle Q.

    Parameters
    ----------
    nx, ny : int
        Node counts per axis (each >= 2).
    lengths : tuple of float
        Side lengths of Q.
    origin : tuple of float
        Lower-left corner of Q in the container frame.
    dirichlet : ndarray of bool, shape (nx, ny), optional
        Clamped node set P.  Defaults to the bottom edge.
    gamma : ndarray, shape (nP, 2), optional
        Positions prescribed on P (in ``np.nonzero(dirichlet)`` order).
        Defaults to the reference positions.
    """

    def __init__(self, nx=17, ny=17, lengths=(1.0, 1.0), origin=(1.0, 0.5),
                 dirichlet=None, gamma=None):
        problems = []
        if nx < 2 or ny < 2:
            problems.append("node_count must be >= 2 per axis")
        if lengths[0] <= 0 or lengths[1] <= 0:
            problems.append("spacing must be > 0")
        if problems:
            raise ValidationError(problems)
        self.nx = int(nx)
        self.ny = int(ny)
        self.lengths = (float(lengths[0]), float(lengths[1]))
        self.origin = (float(origin[0]), float(origin[1]))
        self.dx = self.lengths[0] / (self.nx - 1)
        self.dy = self.lengths[1] / (self.ny - 1)
        boundary = np.zeros((self.nx, self.ny), dtype=bool)
        boundary[0, :] = boundary[-1, :] = True
        boundary[:, 0] = boundary[:, -1] = True
        if dirichlet is None:
            dirichlet = np.zeros_like(boundary)
            dirichlet[:, 0] = True
        dirichlet = np.asarray(dirichlet, dtype=bool)
        if dirichlet.shape != boundary.shape:
            raise ValidationError(["dirichlet mask has wrong shape"])
        if np.any(dirichlet & ~boundary):
            raise ValidationError(["dirichlet_part must lie on the boundary"])
        self.boundary = boundary
        self.dirichlet = dirichlet
        self.traced = boundary & ~dirichlet
        ref = self.reference_nodes()
        if gamma is None:
            gamma = ref[dirichlet]
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != (int(dirichlet.sum()), 2):
            raise ValidationError(["gamma must be defined exactly on P"])
        self.gamma = gamma
        for arr in (self.boundary, self.dirichlet, self.traced, self.gamma):
            arr.setflags(write=False)

    # -- basic layout -----------------------------------------------------
    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def n_cells(self):
        return (self.nx - 1) * (self.ny - 1)

    @property
    def cell_area(self):
        return self.dx * self.dy

    def reference_nodes(self):
        """Reference node positions, shape (nx, ny, 2)."""
        x = self.origin[0] + self.dx * np.arange(self.nx)
        y = self.origin[1] + self.dy * np.arange(self.ny)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def identity(self):
        """The identity deformation as a node array."""
        return self.reference_nodes()

    @cached_property
    def free_dofs(self):
        """Flat indices (into the raveled (nx, ny, 2) array) of free dofs."""
        free = np.repeat(~self.dirichlet.ravel(), 2)
        return np.nonzero(free)[0]

    def apply_gamma(self, X):
        """Return a copy of ``X`` with P-nodes set to gamma."""
        X = np.array(X, dtype=float)
        X[self.dirichlet] = self.gamma
        return X

    # -- stencils -----------------------------------------------------------
    @cached_property
    def operators(self):
        """Sparse cell-centre stencils ``Dx, Dy, Dxx, Dxy, Dyy``.

        First derivatives average the two edge differences of a cell, the
        mixed derivative is the cell cross difference, and pure second
        derivatives average nodal second differences over the four cell
        corners.  All are exact on quadratic fields.
        """
        nx, ny = self.nx, self.ny
        Dx1, Dy1 = _diff1(nx, self.dx), _diff1(ny, self.dy)
        Ax, Ay = _avg1(nx), _avg1(ny)
        D2x = Ax @ _second1(nx, self.dx)
        D2y = Ay @ _second1(ny, self.dy)
        ops = {
            "Dx": sp.kron(Dx1, Ay),
            "Dy": sp.kron(Ax, Dy1),
            "Dxx": sp.kron(D2x, Ay),
            "Dxy": sp.kron(Dx1, Dy1),
            "Dyy": sp.kron(Ax, D2y),
        }
        return {k: v.tocsr() for k, v in ops.items()}

    def kth_operators(self, k=3):
        """k-th difference stencils with multiplicities of ordered tuples.

        Returns a list of ``(matrix, multiplicity)``, one entry per mixed
        type ``x^kx y^(k-kx)``; each matrix applies the pure forward
        differences and has one row per stencil position.  Types without
        enough nodes are skipped.
        """
        cache = self.__dict__.setdefault("_kth_cache", {})
        if k not in cache:
            out = []
            for kx in range(k, -1, -1):
                ky = k - kx
                if kx >= self.nx or ky >= self.ny:
                    continue
                M = sp.kron(_forward_k(self.nx, kx, self.dx),
                            _forward_k(self.ny, ky, self.dy)).tocsr()
                out.append((M, comb(k, kx)))
            cache[k] = out
        return cache[k]

    def kth_gram(self, k=3):
        """Scalar nodal matrix K with ``||grad^k u||^2 = sum_c u_c^T K u_c``.

        Each stencil value is weighted by the cell area (midpoint-type
        quadrature of the k-fold differences).
        """
        cache = self.__dict__.setdefault("_kth_gram_cache", {})
        if k not in cache:
            K = sp.csr_matrix((self.n_nodes, self.n_nodes))
            for M, mult in self.kth_operators(k):
                K = K + mult * self.cell_area * (M.T @ M)
            cache[k] = K.tocsr()
        return cache[k]

    @cached_property
    def lumped_mass(self):
        """Nodal lumped mass weights (sum equals |Q|)."""
        wx = np.full(self.nx, self.dx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.dy)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy).ravel()

    @cached_property
    def w12_gram(self):
        """Scalar nodal Gram matrix of the discrete W^{1,2} norm."""
        ops = self.operators
        a = self.cell_area
        K = sp.diags(self.lumped_mass) + a * (ops["Dx"].T @ ops["Dx"]
                                              + ops["Dy"].T @ ops["Dy"])
        return K.tocsr()

    def w12_norm(self, U):
        """Discrete W^{1,2} norm of a nodal vector field (nx, ny, 2)."""
        U = np.asarray(U, dtype=float).reshape(self.n_nodes, 2)
        K = self.w12_gram
        return float(np.sqrt(sum(U[:, c] @ (K @ U[:, c]) for c in range(2))))

    @cached_property
    def boundary_loop(self):
        """Boundary node indices in counter-clockwise order."""
        nx, ny = self.nx, self.ny
        loop = [(i, 0) for i in range(nx)]
        loop += [(nx - 1, j) for j in range(1, ny)]
        loop += [(i, ny - 1) for i in range(nx - 2, -1, -1)]
        loop += [(0, j) for j in range(ny - 2, 0, -1)]
        return np.array(loop, dtype=np.int64)


@dataclass(frozen=True)
class ContainerBox:
    """The container Omega and its fluid grid resolution."""

    lo: tuple = (0.0, 0.0)
    hi: tuple = (3.0, 2.0)
    nx: int = 96
    ny: int = 64

    def __post_init__(self):
        problems = []
        if self.hi[0] <= self.lo[0] or self.hi[1] <= self.lo[1]:
            problems.append("container extents must be increasing")
        if self.nx < 8 or self.ny < 8:
            problems.append("fluid resolution must be >= 8 per axis")
        if problems:
            raise ValidationError(problems)

    @property
    def hx(self):
        return (self.hi[0] - self.lo[0]) / self.nx

    @property
    def hy(self):
        return (self.hi[1] - self.lo[1]) / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    def contains(self, pts, strict=False):
        pts = np.asarray(pts, dtype=float)
        if strict:
            return np.all((pts > self.lo) & (pts < self.hi), axis=-1)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def wall_distance(self, pts):
        """Signed distance to the container walls (negative outside)."""
        pts = np.asarray(pts, dtype=float)
        d = np.minimum(pts - np.asarray(self.lo), np.asarray(self.hi) - pts)
        return d.min(axis=-1)


class DeformationField:
    """Nodal deformation on a reference grid.

    Parameters
    ----------
    grid : ReferenceGrid
    positions : array_like, shape (nx, ny, 2)
    container : ContainerBox, optional
        If given, positions must lie in the closed container.
    """

    def __init__(self, grid, positions, container=None):
        X = np.array(positions, dtype=float)
        if X.shape != (grid.nx, grid.ny, 2):
            raise ValidationError([f"positions must have shape "
                                   f"{(grid.nx, grid.ny, 2)}"])
        if not np.array_equal(X[grid.dirichlet], grid.gamma):
            raise ValidationError(["positions on P must equal gamma"])
        if container is not None and not np.all(container.contains(X)):
            raise ValidationError(["positions must lie inside the container"])
        X.setflags(write=False)
        self.grid = grid
        self.positions = X

    @classmethod
    def identity(cls, grid, container=None):
        return cls(grid, grid.identity(), container)


@dataclass(frozen=True)
class JetSample:
    """Jets of a deformation at one quadrature point."""

    F: np.ndarray
    G: np.ndarray
    detF: float
    cofF: np.ndarray


@dataclass(frozen=True)
class Jets:
    """Vectorized jets at all cell centres.

    ``F[..., k, c, al]`` and ``G[..., k, c, al, be]`` with ``k`` the cell.
    """

    F: np.ndarray
    G: np.ndarray

    @property
    def det(self):
        F = self.F
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]

    @property
    def cof(self):
        F = self.F
        C = np.empty_like(F)
        C[..., 0, 0] = F[..., 1, 1]
        C[..., 0, 1] = -F[..., 1, 0]
        C[..., 1, 0] = -F[..., 0, 1]
        C[..., 1, 1] = F[..., 0, 0]
        return C


def _as_columns(grid, X):
    """Reshape (..., nx, ny, 2) into (n_nodes, B*2) plus the batch shape."""
    X = np.asarray(X, dtype=float)
    batch = X.shape[:-3]
    B = int(np.prod(batch)) if batch else 1
    cols = X.reshape(B, grid.n_nodes, 2).transpose(1, 0, 2).reshape(
        grid.n_nodes, 2 * B)
    return cols, batch, B


def _from_cells(grid, vals, batch, B):
    """Inverse of ``_as_columns`` for cell values: (ncell, B*2) -> (..., ncell, 2)."""
    return vals.reshape(grid.n_cells, B, 2).transpose(1, 0, 2).reshape(
        batch + (grid.n_cells, 2))


def jet_arrays(grid, X):
    """Vectorized jets of a node array, batched over leading axes.

    Parameters
    ----------
    grid : ReferenceGrid
    X : ndarray, shape (..., nx, ny, 2)

    Returns
    -------
    Jets
    """
    cols, batch, B = _as_columns(grid, X)
    ops = grid.operators

    def apply(name):
        return _from_cells(grid, ops[name] @ cols, batch, B)

    gx, gy = apply("Dx"), apply("Dy")
    F = np.stack([gx, gy], axis=-1)
    gxx, gxy, gyy = apply("Dxx"), apply("Dxy"), apply("Dyy")
    G = np.stack([np.stack([gxx, gxy], axis=-1),
                  np.stack([gxy, gyy], axis=-1)], axis=-2)
    return Jets(F=F, G=G)


def evaluate_jets(eta):
    """One JetSample per cell centre of a DeformationField."""
    J = jet_arrays(eta.grid, eta.positions)
    det, cof = J.det, J.cof
    return [JetSample(F=J.F[k], G=J.G[k], detF=float(det[k]), cofF=cof[k])
            for k in range(eta.grid.n_cells)]


def _positions(eta):
    """Accept a DeformationField or a ``(grid, X)`` pair."""
    if isinstance(eta, DeformationField):
        return eta.grid, eta.positions
    grid, X = eta
    return grid, np.asarray(X, dtype=float)


def element_quads(grid, X):
    """Deformed element quads, counter-clockwise, shape (n_cells, 4, 2)."""
    X = np.asarray(X, dtype=float)
    q = np.stack([X[:-1, :-1], X[1:, :-1], X[1:, 1:], X[:-1, 1:]], axis=2)
    return q.reshape(grid.n_cells, 4, 2)


def element_areas(grid, X):
    """Signed shoelace areas of the deformed element quads."""
    q = element_quads(grid, X)
    x, y = q[..., 0], q[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y,
                        axis=1)


def quadrature_volume(grid, X):
    """Midpoint-rule value of the integral of det grad eta over Q.

    For bilinear elements this equals the sum of signed quad areas.
    """
    return float(np.sum(jet_arrays(grid, X).det) * grid.cell_area)


def _raster(grid, X, container, subsamples):
    areas = element_areas(grid, X)
    if np.any(areas <= 0.0):
        bad = int(np.argmin(areas))
        raise DegenerateElement(f"element {bad} has signed area {areas[bad]:.3e}")
    ds = container.hx / subsamples
    if not np.isclose(container.hx, container.hy, rtol=1e-12):
        raise ValidationError(["rasterization requires square fluid cells"])
    count = kernels.raster_coverage(element_quads(grid, X), container.lo[0],
                                    container.lo[1], ds,
                                    container.nx * subsamples,
                                    container.ny * subsamples)
    return count, ds


def image_volume(eta, container=None, subsamples=4):
    """Area of the union of deformed elements by supersampled rasterization.

    Raises
    ------
    DegenerateElement
        If an element quad has non-positive signed area.
    """
    grid, X = _positions(eta)
    container = container or ContainerBox()
    count, ds = _raster(grid, X, container, subsamples)
    return float(np.count_nonzero(count) * ds * ds)


def ciarlet_necas_defect(eta, container=None, subsamples=4):
    """Signed defect ``int det grad eta - |eta(Q)|``.

    Zero up to raster error for injective deformations, and equal to the
    overlapped area (counted with multiplicity) otherwise.
    """
    grid, X = _positions(eta)
    container = container or ContainerBox()
    count, ds = _raster(grid, X, container, subsamples)
    return quadrature_volume(grid, X) - float(np.count_nonzero(count) * ds * ds)


def boundary_length(grid, X):
    """Length of the deformed boundary polygon."""
    X = np.asarray(X, dtype=float)
    loop = grid.boundary_loop
    P = X[loop[:, 0], loop[:, 1]]
    return float(np.sum(np.linalg.norm(np.roll(P, -1, axis=0) - P, axis=1)))


def cn_tolerance(grid, X, container=None, factor=2.0):
    """Default tolerance ``factor * (fluid cell area) * (boundary length)``."""
    container = container or ContainerBox()
    return factor * container.cell_area * boundary_length(grid, X)


def _boundary_samples(grid, X, per_edge):
    X = np.asarray(X, dtype=float)
    loop = grid.boundary_loop
    P = X[loop[:, 0], loop[:, 1]]
    R = grid.reference_nodes()[loop[:, 0], loop[:, 1]]
    on_p = grid.dirichlet[loop[:, 0], loop[:, 1]]
    frac = np.arange(per_edge) / per_edge
    P1 = np.roll(P, -1, axis=0)
    R1 = np.roll(R, -1, axis=0)
    pts = (P[:, None, :] * (1 - frac)[None, :, None]
           + P1[:, None, :] * frac[None, :, None]).reshape(-1, 2)
    seg = np.linalg.norm(R1 - R, axis=1)
    arc0 = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    arc = (arc0[:, None] + seg[:, None] * frac[None, :]).ravel()
    on_p1 = np.roll(on_p, -1)
    sample_p = np.empty((len(loop), per_edge), dtype=bool)
    sample_p[:, 0] = on_p
    sample_p[:, 1:] = (on_p & on_p1)[:, None]
    return pts, arc, float(np.sum(seg)), sample_p.ravel()


def boundary_distances(eta, container=None, per_edge=4, min_arc=None):
    """Self-distance and wall distance of the deformed boundary.

    Parameters
    ----------
    per_edge : int
        Samples per boundary grid edge.
    min_arc : float, optional
        Pairs closer than this along the reference boundary are treated as
        adjacent and skipped.  Defaults to the shorter side of Q.

    Returns
    -------
    self_dist, wall_dist : float
    """
    grid, X = _positions(eta)
    container = container or ContainerBox()
    pts, arc, perim, on_p = _boundary_samples(grid, X, per_edge)
    if min_arc is None:
        min_arc = min(grid.lengths)
    da = np.abs(arc[:, None] - arc[None, :])
    da = np.minimum(da, perim - da)
    far = da >= min_arc - 1e-12
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    self_dist = float(d[far].min()) if np.any(far) else np.inf
    m_pts = pts[~on_p]
    wall = float(container.wall_distance(m_pts).min()) if len(m_pts) else np.inf
    return self_dist, wall


def min_boundary_self_distance(eta, container=None, per_edge=4, min_arc=None):
    """Minimum of boundary self-distance and traced-boundary wall distance."""
    s, w = boundary_distances(eta, container, per_edge, min_arc)
    return min(s, w)


def write_field(path, grid, X):
    """Write a node array in the plain-text field format.

    Header lines ``nx ny`` and ``dx dy``, then one ``x y`` pair per node,
    rows of constant ``j`` in order, ``i`` fastest.
    """
    X = np.asarray(X, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"{grid.nx} {grid.ny}\n{float(grid.dx)!r} {float(grid.dy)!r}\n")
        for j in range(grid.ny):
            for i in range(grid.nx):
                fh.write(f"{float(X[i, j, 0])!r} {float(X[i, j, 1])!r}\n")


def read_field(path):
    """Read a field dump; returns ``(X, (dx, dy))``."""
    with open(path) as fh:
        nx, ny = (int(v) for v in fh.readline().split())
        dx, dy = (float(v) for v in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    X = data.reshape(ny, nx, 2).transpose(1, 0, 2)
    return X, (dx, dy)


def write_mask(path, mask):
    """Write a boolean cell mask as rows of 0/1, ``j`` rows from the bottom."""
    mask = np.asarray(mask, dtype=bool)
    with open(path, "w") as fh:
        fh.write(f"{mask.shape[0]} {mask.shape[1]}\n")
        for j in range(mask.shape[1]):
            fh.write(" ".join("1" if v else "0" for v in mask[:, j]) + "\n")
