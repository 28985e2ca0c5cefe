"""Stored energy, Kelvin-Voigt dissipation and their regularized forms.

The energy density is

    w_svk |F^T F - I|_C + w_bar det(F)^(-a) + w_reg |G|^q,

with ``|A|_C = lam tr(A)^2 + 2 mu |A|^2``, and the dissipation density is
``|B^T F + F^T B|^2`` for the rate gradient ``B``.  Both are integrated by
the midpoint rule on the solid cells.  Gradients are assembled with the
transposed jet stencils, so they are exact derivatives of the discrete
functionals.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import Infeasible, ValidationError
from .geometry import DeformationField, jet_arrays

__all__ = [
    "MaterialParams",
    "RegularizationParams",
    "energy",
    "energy_gradient",
    "energy_and_gradient",
    "dissipation",
    "dissipation_gradient",
    "dissipation_matrix",
    "regularizer",
    "regularized_energy",
    "regularized_energy_gradient",
    "regularized_dissipation",
    "regularized_dissipation_gradient",
    "korn_constant",
    "jet_operator",
    "energy_hessian",
]


@dataclass(frozen=True)
class MaterialParams:
    """Material constants and term weights.

    ``w_reg`` defaults to ``1/q``.
    """

    lam: float = 1.0
    mu: float = 1.0
    a: float = 5.0
    q: float = 4.0
    w_svk: float = 0.125
    w_bar: float = 1.0
    w_reg: float = field(default=None)
    rho_s: float = 1.0
    rho_f: float = 1.0
    nu: float = 1.0
    n: int = 2

    def __post_init__(self):
        if self.w_reg is None:
            object.__setattr__(self, "w_reg", 1.0 / self.q)
        problems = self.violations()
        if problems:
            raise ValidationError(problems)

    def violations(self):
        out = []
        n, q, a = self.n, self.q, self.a
        if not q > n:
            out.append(f"material.q: q > n required (q={q}, n={n})")
        elif not a > q * n / (q - n):
            out.append(f"material.a: a > qn/(q-n) required "
                       f"(a={a}, qn/(q-n)={q * n / (q - n):g})")
        for name in ("w_svk", "w_bar", "w_reg", "mu", "rho_s", "rho_f", "nu"):
            if not getattr(self, name) > 0:
                out.append(f"material.{name}: must be > 0")
        if not self.lam >= 0:
            out.append("material.lam: must be >= 0")
        return out


@dataclass(frozen=True)
class RegularizationParams:
    """Regularization order ``k0``, exponent ``a0`` and scale ``h``."""

    k0: int = 3
    a0: float = 0.5
    h: float = 0.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValidationError(problems)

    def violations(self):
        out = []
        if not 0 < self.a0 < 1:
            out.append(f"regularization.a0: 0 < a0 < 1 required (a0={self.a0})")
        if self.k0 < 3:
            out.append(f"regularization.k0: k0 >= 3 required (k0={self.k0})")
        if self.h < 0:
            out.append("regularization.h: must be >= 0")
        return out


def _split(eta):
    if isinstance(eta, DeformationField):
        return eta.grid, eta.positions
    grid, X = eta
    return grid, np.asarray(X, dtype=float)


def _density(J, params):
    F = J.F.reshape(-1, 2, 2)
    G = J.G.reshape(-1, 2, 2, 2)
    p = params
    e, dF, dG = kernels.cell_density(F, G, p.lam, p.mu, p.a, p.q, p.w_svk,
                                     p.w_bar, p.w_reg)
    return (e.reshape(J.F.shape[:-2]), dF.reshape(J.F.shape),
            dG.reshape(J.G.shape))


def _assemble(grid, dF, dG=None):
    """Apply the transposed jet stencils to cell co-vectors (single field)."""
    ops = grid.operators
    out = np.empty((grid.n_nodes, 2))
    for c in range(2):
        v = ops["Dx"].T @ dF[:, c, 0] + ops["Dy"].T @ dF[:, c, 1]
        if dG is not None:
            v = v + ops["Dxx"].T @ dG[:, c, 0, 0]
            v = v + ops["Dxy"].T @ (dG[:, c, 0, 1] + dG[:, c, 1, 0])
            v = v + ops["Dyy"].T @ dG[:, c, 1, 1]
        out[:, c] = v
    out *= grid.cell_area
    out = out.reshape(grid.nx, grid.ny, 2)
    out[grid.dirichlet] = 0.0
    return out


def energy(eta, params=None):
    """Discrete stored energy; ``inf`` if some cell has ``det F <= 0``.

    ``eta`` may be a DeformationField or a ``(grid, X)`` pair; ``X`` may
    carry leading batch axes, in which case an array is returned.
    """
    params = params or MaterialParams()
    grid, X = _split(eta)
    e, _, _ = _density(jet_arrays(grid, X), params)
    val = np.sum(e, axis=-1) * grid.cell_area
    return float(val) if np.ndim(val) == 0 else val


def energy_and_gradient(eta, params=None):
    """Energy and its nodal gradient (zero on P) for a single field.

    Raises
    ------
    Infeasible
        If the energy is infinite.
    """
    params = params or MaterialParams()
    grid, X = _split(eta)
    e, dF, dG = _density(jet_arrays(grid, X), params)
    if not np.all(np.isfinite(e)):
        raise Infeasible("energy is infinite (det F <= 0 in some cell)")
    return float(np.sum(e) * grid.cell_area), _assemble(grid, dF, dG)


def energy_gradient(eta, params=None):
    """Nodal co-vector DE, reported on free nodes (zero on P)."""
    return energy_and_gradient(eta, params)[1]


def _rate_jets(grid, B_nodes):
    cols_F = jet_arrays(grid, B_nodes).F
    return cols_F


def dissipation(eta, b, params=None):
    """Kelvin-Voigt dissipation ``sum_cells |B^T F + F^T B|^2 |cell|``.

    ``b`` may carry leading batch axes.
    """
    grid, X = _split(eta)
    F = jet_arrays(grid, X).F
    B = _rate_jets(grid, b)
    S = np.einsum("...kca,...kcb->...kab", B, F)
    S = S + np.swapaxes(S, -1, -2)
    val = np.sum(S * S, axis=(-3, -2, -1)) * grid.cell_area
    return float(val) if np.ndim(val) == 0 else val


def dissipation_gradient(eta, b, params=None):
    """Nodal co-vector D_2 R(eta, b), zero on P.

    ``<D_2 R, phi> = int 2 (B^T F + F^T B) : (grad phi^T F + F^T grad phi)``.
    """
    grid, X = _split(eta)
    F = jet_arrays(grid, X).F
    B = _rate_jets(grid, b)
    S = np.einsum("kca,kcb->kab", B, F)
    S = S + np.swapaxes(S, -1, -2)
    dB = 4.0 * np.einsum("kca,kab->kcb", F, S)
    return _assemble(grid, dB)


def dissipation_matrix(eta):
    """Sparse matrix K with ``R(eta, b) = b^T K b`` for flat ``b``.

    The flat layout is that of ``b.reshape(-1)`` for ``b`` of shape
    ``(nx, ny, 2)``.  Rows and columns of P-dofs are kept.
    """
    grid, X = _split(eta)
    F = jet_arrays(grid, X).F
    ops = grid.operators
    e0 = sp.csr_matrix(np.array([[1.0, 0.0]]))
    e1 = sp.csr_matrix(np.array([[0.0, 1.0]]))
    D = {(c, al): sp.kron(ops["Dx" if al == 0 else "Dy"], e0 if c == 0 else e1)
         for c in range(2) for al in range(2)}

    def comb(terms):
        return sum(sp.diags(coef) @ D[key] for coef, key in terms)

    # S00 = 2 F_c0 B_c0, S11 = 2 F_c1 B_c1, S01 = F_c1 B_c0 + F_c0 B_c1
    L00 = comb([(2 * F[:, c, 0], (c, 0)) for c in range(2)])
    L11 = comb([(2 * F[:, c, 1], (c, 1)) for c in range(2)])
    L01 = comb([(F[:, c, 1], (c, 0)) for c in range(2)]
               + [(F[:, c, 0], (c, 1)) for c in range(2)])
    K = grid.cell_area * (L00.T @ L00 + 2.0 * (L01.T @ L01) + L11.T @ L11)
    return K.tocsr()


def regularizer(grid, U, k0=3):
    """Discrete ``||grad^k0 U||^2`` of a nodal vector field (batchable).

    Summed from the squared stencil values rather than a Gram matrix,
    which would lose accuracy to cancellation on fine grids.
    """
    U = np.asarray(U, dtype=float)
    cols, batch, B = _columns(grid, U)
    total = np.zeros(2 * B)
    for M, mult in grid.kth_operators(k0):
        D = M @ cols
        total += mult * np.einsum("ij,ij->j", D, D)
    vals = grid.cell_area * total.reshape(B, 2).sum(axis=1)
    return float(vals[0]) if not batch else vals.reshape(batch)


def _columns(grid, U):
    batch = U.shape[:-3]
    B = int(np.prod(batch)) if batch else 1
    cols = U.reshape(B, grid.n_nodes, 2).transpose(1, 0, 2).reshape(
        grid.n_nodes, 2 * B)
    return cols, batch, B


def _reg_gradient(grid, U, k0):
    U = np.asarray(U, dtype=float).reshape(grid.n_nodes, 2)
    g = np.zeros((grid.n_nodes, 2))
    for M, mult in grid.kth_operators(k0):
        g += (2.0 * mult * grid.cell_area) * (M.T @ (M @ U))
    g = g.reshape(grid.nx, grid.ny, 2)
    g[grid.dirichlet] = 0.0
    return g


def regularized_energy(eta, params=None, reg=None):
    """``E_h = E + h^a0 ||grad^k0 eta||^2``."""
    reg = reg or RegularizationParams()
    grid, X = _split(eta)
    E = energy((grid, X), params)
    if reg.h == 0.0:
        return E
    return E + reg.h ** reg.a0 * regularizer(grid, X, reg.k0)


def regularized_energy_gradient(eta, params=None, reg=None):
    reg = reg or RegularizationParams()
    grid, X = _split(eta)
    g = energy_gradient((grid, X), params)
    if reg.h == 0.0:
        return g
    return g + reg.h ** reg.a0 * _reg_gradient(grid, X, reg.k0)


def regularized_dissipation(eta, b, params=None, reg=None):
    """``R_h = R + h ||grad^k0 b||^2``."""
    reg = reg or RegularizationParams()
    grid, X = _split(eta)
    R = dissipation((grid, X), b, params)
    if reg.h == 0.0:
        return R
    return R + reg.h * regularizer(grid, b, reg.k0)


def regularized_dissipation_gradient(eta, b, params=None, reg=None):
    reg = reg or RegularizationParams()
    grid, X = _split(eta)
    g = dissipation_gradient((grid, X), b, params)
    if reg.h == 0.0:
        return g
    return g + reg.h * _reg_gradient(grid, b, reg.k0)


def korn_constant(eta, b, params=None):
    """Empirical ratio ``R(eta, b) / ||b||^2_{W^{1,2}}`` (``nan`` if b = 0)."""
    grid, X = _split(eta)
    nb = grid.w12_norm(b) ** 2
    if nb == 0.0:
        return float("nan")
    return dissipation((grid, X), b, params) / nb


def jet_operator(grid):
    """Sparse map from flat nodal dofs to the 12 jet entries of every cell.

    Row ``12*k + m`` holds entry ``m`` of cell ``k``; entries 0-3 are
    ``F[c, al]`` (``m = 2c + al``) and 4-11 are ``G[c, al, be]``
    (``m = 4 + 4c + 2al + be``).
    """
    cache = grid.__dict__.setdefault("_jet_operator", None)
    if cache is not None:
        return cache
    ops = grid.operators
    e = [sp.csr_matrix(np.array([[1.0, 0.0]])), sp.csr_matrix(np.array([[0.0, 1.0]]))]
    names = {0: "Dx", 1: "Dy"}
    gnames = {(0, 0): "Dxx", (0, 1): "Dxy", (1, 0): "Dxy", (1, 1): "Dyy"}
    blocks = [None] * 12
    for c in range(2):
        for al in range(2):
            blocks[2 * c + al] = sp.kron(ops[names[al]], e[c])
            for be in range(2):
                blocks[4 + 4 * c + 2 * al + be] = sp.kron(ops[gnames[al, be]], e[c])
    # interleave so that the 12 entries of a cell are contiguous
    stacked = sp.vstack(blocks).tocsr()
    nc = grid.n_cells
    perm = (np.arange(12)[None, :] * nc + np.arange(nc)[:, None]).ravel()
    J = stacked[perm]
    grid.__dict__["_jet_operator"] = J
    return J


def _cell_hessians(F, G, p):
    """Analytic 12x12 Hessians of the density per cell."""
    nc = F.shape[0]
    H = np.zeros((nc, 12, 12))
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    A = np.einsum("kca,kcb->kab", F, F) - np.eye(2)
    trA = np.trace(A, axis1=1, axis2=2)
    S = 4.0 * p.mu * A + 2.0 * p.lam * trA[:, None, None] * np.eye(2)
    basis = np.zeros((4, 2, 2))
    for m in range(4):
        basis[m].flat[m] = 1.0
    dA = np.einsum("mca,kcb->kmab", basis, F)
    dA = dA + np.swapaxes(dA, -1, -2)
    dS = 4.0 * p.mu * dA + 2.0 * p.lam * np.trace(dA, axis1=2, axis2=3)[:, :, None, None] * np.eye(2)
    # <dF_m, H dF_n> = 2w [ (E_m^T E_n) : S + 1/2 dS_n : dA_m ]
    EtE = np.einsum("mca,ncb->mnab", basis, basis)
    H[:, :4, :4] = 2.0 * p.w_svk * (np.einsum("mnab,kab->kmn", EtE, S)
                                    + 0.5 * np.einsum("knab,kmab->kmn", dS, dA))
    cof = np.stack([F[:, 1, 1], -F[:, 1, 0], -F[:, 0, 1], F[:, 0, 0]], axis=1)
    dcof = np.array([[0, 0, 0, 1], [0, 0, -1, 0], [0, -1, 0, 0], [1, 0, 0, 0]], float)
    with np.errstate(divide="ignore", invalid="ignore"):
        c1 = p.w_bar * p.a * (p.a + 1) * det ** (-p.a - 2)
        c2 = p.w_bar * p.a * det ** (-p.a - 1)
    H[:, :4, :4] += c1[:, None, None] * np.einsum("km,kn->kmn", cof, cof)
    H[:, :4, :4] -= c2[:, None, None] * dcof[None]
    g = G.reshape(nc, 8)
    g2 = np.einsum("km,km->k", g, g)
    q = p.q
    with np.errstate(divide="ignore", invalid="ignore"):
        ga = np.where(g2 > 0, g2 ** (0.5 * q - 1.0), 0.0 if q > 2 else 1.0)
        gb = np.where(g2 > 0, g2 ** (0.5 * q - 2.0), 0.0) if q != 2 else np.zeros(nc)
    H[:, 4:, 4:] = p.w_reg * q * (ga[:, None, None] * np.eye(8)
                                  + (q - 2.0) * gb[:, None, None] * np.einsum("km,kn->kmn", g, g))
    return H


def energy_hessian(eta, params=None, psd=True):
    """Sparse Hessian of the discrete energy on all flat dofs.

    With ``psd=True`` every cell Hessian is projected onto the positive
    semidefinite cone before assembly, which gives a convex model that
    is used as a preconditioner and for projected Newton relaxation.
    """
    params = params or MaterialParams()
    grid, X = _split(eta)
    J = jet_arrays(grid, X)
    H = _cell_hessians(J.F, J.G, params)
    if psd:
        w, V = np.linalg.eigh(H)
        H = np.einsum("kmi,ki,kni->kmn", V, np.maximum(w, 0.0), V)
    Jop = jet_operator(grid)
    B = sp.block_diag(list(H), format="csr")
    return (grid.cell_area * (Jop.T @ B @ Jop)).tocsr()
