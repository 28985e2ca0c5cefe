"""Time-stepping drivers: parabolic and two-time-scale, solid and FSI.

Every step minimizes an incremental functional of the form

    E_h(eta) + 1/2 D^T H D - l^T D + const,      D = eta - eta_k,

where the quadratic part collects dissipation, inertia, force work and
(for FSI) the exactly eliminated fluid block.  The minimizer starts from
``eta_k``, so the accepted value never exceeds the value at the null
increment; that comparison is the single-step energy inequality.

Ledger quantities per step (all already multiplied by ``tau``):

* ``R_step``      ``tau R_h(eta_k, b)`` with ``b = D / tau``;
* ``fluid_diss``  ``tau (nu/2 ||eps v||^2 + h_f/2 ||grad^k0 v||^2)``;
* ``work_f``      ``tau rho_s <f, b> + tau rho_f <f, v>``;
* ``kin_avg_*``   moving averages over the last ``h`` of ``rho |.|^2 / 2``
  (hyperbolic modes only).
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import flowmap as fm
from .energetics import (MaterialParams, RegularizationParams,
                         dissipation_matrix, energy_and_gradient, energy_hessian,
                         _reg_gradient, regularizer)
from .errors import (CollisionStop, DetDriftStop, InequalityViolation,
                     SchemeStop, ValidationError)
from .fluid import FluidGrid, FluidSystem, build_mask, trace_matrix
from .geometry import (ContainerBox, ReferenceGrid, boundary_distances,
                       ciarlet_necas_defect, cn_tolerance, jet_arrays)
from .ledger import LedgerRow
from .minimize import MinimizeProblem, acceptance_reason, solve

__all__ = [
    "MODES",
    "GridSpec",
    "ForceSpec",
    "InitialSpec",
    "Tolerances",
    "SchemeConfig",
    "SchemeState",
    "TrajectoryRecord",
    "relax",
    "initial_state",
    "step_parabolic_solid",
    "step_parabolic_fsi",
    "run_time_delayed_epoch",
    "run_parabolic",
    "run_hyperbolic",
    "run",
]

MODES = ("parabolic_solid", "parabolic_fsi", "hyperbolic_solid", "hyperbolic_fsi")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GridSpec:
    """Reference grid of Q (bottom edge clamped)."""

    nx: int = 17
    ny: int = 17
    lengths: tuple = (1.0, 1.0)
    origin: tuple = (1.0, 0.5)

    def build(self):
        return ReferenceGrid(self.nx, self.ny, tuple(self.lengths), tuple(self.origin))


@dataclass(frozen=True)
class ForceSpec:
    """Body force ``f(t, x)`` per unit mass.

    ``kind`` is ``none``, ``constant`` or ``gaussian``; the gaussian bump is
    ``vector * exp(-|x - center|^2 / radius^2)``.  The force acts on the
    solid (times ``rho_s``) and on the fluid (times ``rho_f``) while
    ``t_on <= t < t_off``.
    """

    kind: str = "none"
    vector: tuple = (0.0, 0.0)
    center: tuple = (1.5, 1.0)
    radius: float = 0.25
    t_on: float = 0.0
    t_off: float = math.inf

    def __call__(self, t, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = np.zeros_like(pts)
        if self.kind == "none" or not (self.t_on <= t < self.t_off):
            return out
        vec = np.asarray(self.vector, dtype=float)
        if self.kind == "constant":
            return out + vec
        r2 = np.sum((pts - np.asarray(self.center)) ** 2, axis=1)
        return np.exp(-r2 / self.radius ** 2)[:, None] * vec

    def averaged(self, t0, t1, pts):
        """Time average over ``[t0, t1]`` by the midpoint rule.

        Exact for forces that are constant on the interval; intervals
        straddling a switching time are averaged by the active fraction.
        """
        lo, hi = max(t0, self.t_on), min(t1, self.t_off)
        if hi <= lo or self.kind == "none":
            return np.zeros_like(np.asarray(pts, dtype=float).reshape(-1, 2))
        frac = (hi - lo) / (t1 - t0)
        return frac * self(0.5 * (lo + hi), pts)


@dataclass(frozen=True)
class InitialSpec:
    """Initial data.

    ``eta`` is ``identity`` or ``relaxed`` (energy-critical state reached
    from the identity); ``affine`` optionally applies ``x -> A (x - c) + c``
    about the centre of Q first.  ``velocity`` is a uniform solid velocity
    on the free nodes and ``spin`` adds a rigid rotation rate about the
    centre of Q; the fluid starts at rest.
    """

    eta: str = "relaxed"
    affine: Optional[tuple] = None
    velocity: tuple = (0.0, 0.0)
    spin: float = 0.0


@dataclass(frozen=True)
class Tolerances:
    grad_tol: float = 1e-8
    max_iters: int = 500
    ineq_factor: float = 1e-8
    cn_factor: float = 2.0
    subsamples: int = 4
    det_floor: float = 0.0
    contact_tol: float = 0.01
    sweep_tol: float = 1e-10
    det_bounds: tuple = (0.5, 2.0)


@dataclass(frozen=True)
class SchemeConfig:
    """All parameters of a run.

    ``h`` is the acceleration scale of the hyperbolic modes and must be an
    integer multiple of ``tau`` with ``tau <= h/4``.  ``fluid_reg`` scales
    the fluid ``||grad^k0 v||^2`` term of the hyperbolic FSI mode; ``None``
    uses ``h``.
    """

    mode: str = "parabolic_solid"
    material: MaterialParams = field(default_factory=MaterialParams)
    reg: RegularizationParams = field(default_factory=RegularizationParams)
    tau: float = 0.01
    h: float = 0.16
    T_end: float = 1.0
    grid: GridSpec = field(default_factory=GridSpec)
    container: ContainerBox = field(default_factory=ContainerBox)
    force: ForceSpec = field(default_factory=ForceSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    tol: Tolerances = field(default_factory=Tolerances)
    fluid_reg: Optional[float] = None
    stride: int = 0

    def violations(self):
        out = []
        if self.mode not in MODES:
            out.append(f"mode: must be one of {', '.join(MODES)}")
        if not self.tau > 0:
            out.append("tau: must be > 0")
        if not self.T_end > 0:
            out.append("T_end: must be > 0")
        if self.mode.startswith("hyperbolic"):
            if not self.h > 0:
                out.append("h: must be > 0")
            elif self.tau > 0:
                ratio = self.h / self.tau
                if abs(ratio - round(ratio)) > 1e-9 * ratio:
                    out.append(f"h: h/tau must be an integer (h/tau={ratio:g})")
                if self.tau > self.h / 4 * (1 + 1e-12):
                    out.append("tau: tau <= h/4 required")
        if self.force.kind not in ("none", "constant", "gaussian"):
            out.append("force.kind: must be none, constant or gaussian")
        if self.initial.eta not in ("identity", "relaxed"):
            out.append("initial.eta: must be identity or relaxed")
        return out

    @property
    def steps_per_epoch(self):
        return int(round(self.h / self.tau))

    @property
    def n_steps(self):
        return int(round(self.T_end / self.tau))

    @property
    def reg_h(self):
        """Regularization scale actually used (zero in parabolic modes)."""
        return self.h if self.mode.startswith("hyperbolic") else 0.0

    def to_dict(self):
        d = asdict(self)
        d["force"]["t_off"] = None if math.isinf(self.force.t_off) else self.force.t_off
        return d


# ---------------------------------------------------------------------------
# state and records
# ---------------------------------------------------------------------------
@dataclass
class SchemeState:
    """State after an accepted step."""

    X: np.ndarray
    t: float = 0.0
    step: int = 0
    U: Optional[np.ndarray] = None
    flow: Optional[fm.FlowMapState] = None


@dataclass
class TrajectoryRecord:
    """Ledger rows, snapshots and stop information of a run."""

    config: SchemeConfig
    rows: list = field(default_factory=list)
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    stop_reason: Optional[str] = None
    stop_time: Optional[float] = None
    comparison_slacks: list = field(default_factory=list)
    korn: list = field(default_factory=list)
    interface_mismatch: list = field(default_factory=list)
    momentum_gap: list = field(default_factory=list)
    final_state: Optional[SchemeState] = None
    marker_states: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _flat_mass(grid):
    return np.repeat(grid.lumped_mass, 2)


def _reg_matrix(grid, k0):
    return sp.kron(grid.kth_gram(k0), sp.identity(2), format="csr")


def _energy_h(grid, X, params, reg_scale, k0):
    """``E_h`` value and gradient (``inf``, ``None`` if infeasible)."""
    try:
        E, g = energy_and_gradient((grid, X), params)
    except Exception:
        return math.inf, None
    if reg_scale > 0:
        E += reg_scale * regularizer(grid, X, k0)
        g = g + reg_scale * _reg_gradient(grid, X, k0)
    return E, g


def _energy_h_value(grid, X, params, reg_scale, k0):
    from .energetics import energy
    E = energy((grid, X), params)
    if reg_scale > 0 and math.isfinite(E):
        E += reg_scale * regularizer(grid, X, k0)
    return E


def _inside(container, X):
    pts = np.asarray(X).reshape(-1, 2)
    return bool(np.all(pts >= np.asarray(container.lo))
                and np.all(pts <= np.asarray(container.hi)))


@dataclass
class _Quadratic:
    """``1/2 D^T H D - l^T D + const`` with an optional dense part."""

    H: sp.csr_matrix
    ell: np.ndarray
    const: float = 0.0
    dense: Optional[np.ndarray] = None

    def value_grad(self, D):
        HD = self.H @ D
        if self.dense is not None:
            HD = HD + self.dense @ D
        return 0.5 * float(D @ HD) - float(self.ell @ D) + self.const, HD - self.ell

    def hessian(self):
        H = self.H
        if self.dense is not None:
            H = H + sp.csr_matrix(self.dense)
        return H


def _minimize_step(grid, Xk, quad, params, reg_scale, k0, container, tol,
                   constraints=None):
    """Minimize ``E_h(X) + quad(X - Xk)`` over the free dofs from ``Xk``."""
    xk = Xk.ravel().copy()
    free = grid.free_dofs

    def vg(x):
        X = x.reshape(Xk.shape)
        if not _inside(container, X):
            return math.inf, None
        E, g = _energy_h(grid, X, params, reg_scale, k0)
        if not math.isfinite(E):
            return math.inf, None
        q, gq = quad.value_grad(x - xk)
        return E + q, g.ravel() + gq

    f0, _ = vg(xk)
    x = xk
    report = None
    Hq = quad.hessian()
    C = None
    if constraints is not None and constraints.shape[0]:
        C = constraints[:, free]
    mass = sp.diags(_flat_mass(grid))
    for _ in range(4):
        X = x.reshape(Xk.shape)
        Hs = energy_hessian((grid, X), params)
        if reg_scale > 0:
            Hs = Hs + 2.0 * reg_scale * _reg_matrix(grid, k0)
        Hs = Hs + Hq + 1e-8 * mass
        M = Hs.tocsr()[free][:, free]
        pb = MinimizeProblem(objective=None, gradient=None, free_dofs=free,
                             initial_point=x, grad_tol=tol.grad_tol,
                             max_iters=tol.max_iters, value_and_gradient=vg,
                             preconditioner=M, constraints=C)
        r = solve(pb)
        iters = r.iters + (report.iters if report else 0)
        evals = r.n_evals + (report.n_evals if report else 0)
        report = replace(r, iters=iters, n_evals=evals, initial_value=f0,
                         decrease=f0 - r.value)
        x = r.argmin
        if r.status in ("converged", "line_search_exhausted"):
            break
    return report


def _check_state(grid, X, cfg, t):
    """Feasibility diagnostics; raises a stop if the state is unacceptable."""
    cont = cfg.container
    cn = ciarlet_necas_defect((grid, X), cont, cfg.tol.subsamples)
    tol_cn = cn_tolerance(grid, X, cont, cfg.tol.cn_factor)
    min_det = float(np.min(jet_arrays(grid, X).det))
    self_d, wall_d = boundary_distances((grid, X), cont)
    dist = min(self_d, wall_d)

    class _R:
        feasibility_flags = {"cn_defect": cn, "min_det": min_det,
                             "self_distance": dist - cfg.tol.contact_tol}
    reason = acceptance_reason(_R, tol_cn, cfg.tol.det_floor)
    diag = {"cn_defect": cn, "min_det": min_det, "self_distance": dist,
            "tol_cn": tol_cn}
    if reason is not None:
        if reason == "det_floor":
            raise SchemeStop("det_floor", t, f"det floor violated at t={t:.6g}")
        raise CollisionStop(t, f"{reason} at t={t:.6g} (cn_defect={cn:.3e}, "
                               f"tol={tol_cn:.3e}, distance={dist:.3e})")
    return diag


def relax(grid, X0, params=None, reg_scale=0.0, k0=3, container=None,
          grad_tol=1e-8, max_iters=500):
    """Descend ``E_h`` from ``X0`` to a (numerically) critical state."""
    params = params or MaterialParams()
    container = container or ContainerBox()
    n = X0.size
    quad = _Quadratic(H=sp.csr_matrix((n, n)), ell=np.zeros(n))
    tol = Tolerances(grad_tol=grad_tol, max_iters=max_iters)
    rep = _minimize_step(grid, np.asarray(X0, float), quad, params, reg_scale,
                         k0, container, tol)
    return rep.argmin.reshape(X0.shape), rep


def initial_state(cfg):
    """Initial deformation and solid velocity ``(grid, X0, V0)``."""
    grid = cfg.grid.build()
    X = grid.identity()
    ref = grid.reference_nodes()
    centre = ref.reshape(-1, 2).mean(axis=0)
    if cfg.initial.affine is not None:
        A = np.asarray(cfg.initial.affine, dtype=float).reshape(2, 2)
        X = (ref - centre) @ A.T + centre
        X = grid.apply_gamma(X)
    if cfg.initial.eta == "relaxed":
        reg_scale = cfg.reg_h ** cfg.reg.a0 if cfg.reg_h > 0 else 0.0
        X, _ = relax(grid, X, cfg.material, reg_scale, cfg.reg.k0, cfg.container)
    V = np.zeros_like(X)
    V[...] = np.asarray(cfg.initial.velocity, dtype=float)
    if cfg.initial.spin:
        r = X - centre
        V += cfg.initial.spin * np.stack([-r[..., 1], r[..., 0]], axis=-1)
    V[grid.dirichlet] = 0.0
    return grid, X, V


class _FluidCoupling:
    """Fluid block of one step, eliminated exactly as a quadratic in D."""

    def __init__(self, cfg, fgrid, grid, Xk, t0, t1, flow=None, w_markers=None,
                 h_reg=0.0, cache=None):
        mat = cfg.material
        mask = build_mask((grid, Xk), cfg.container, cfg.tol.subsamples)
        self.mask = mask
        fluid = mask.fluid
        ff = None
        if cfg.force.kind != "none":
            vals = np.zeros((fgrid.n_faces, 2))
            vals[:] = cfg.force.averaged(t0, t1, fgrid.face_midpoints)
            comp = fgrid.face_ij[0]
            ff = mat.rho_f * np.where(comp == 0, vals[:, 0], vals[:, 1])
        markers = None
        extra = None
        if flow is not None and flow.n_markers:
            markers = {"points": flow.positions, "weights": flow.weights,
                       "w": w_markers, "coef": mat.rho_f / cfg.h}
            Im = fgrid.interp_matrix(flow.positions)
            extra = np.unique(Im.indices)
        key = (fluid.tobytes(), None if ff is None else ff.tobytes(), h_reg)
        if cache is not None and markers is None and cache.get("key") == key:
            self.system = cache["system"]
        else:
            self.system = FluidSystem(fgrid, fluid, mat.nu, face_force=ff,
                                      h_reg=h_reg, k0=cfg.reg.k0, markers=markers,
                                      extra_active=extra)
            if cache is not None and markers is None:
                cache.clear()
                cache.update(key=key, system=self.system)
        S = self.system
        self.T, self.dist = trace_matrix(grid, Xk, fgrid, S.constrained)
        self.tau = cfg.tau

    def quadratic(self):
        """Dense Hessian, linear term and constant of ``tau V(T D / tau)``."""
        V0, g0, Sc = self.system.schur()
        T = self.T.toarray()
        tau = self.tau
        dense = T.T @ Sc @ T / tau
        ell = -(T.T @ g0)
        const = tau * (V0 + self.system.in_const)
        C = self.system.compatibility @ T
        return dense, ell, const, C

    def recover(self, D):
        c = self.T @ D / self.tau
        V, dV, U, p = self.system.solve(c)
        return U, p, self.system.parts(U)


# ---------------------------------------------------------------------------
# generic step
# ---------------------------------------------------------------------------
def _step(cfg, grid, state, fgrid=None, w_solid=None, w_markers=None,
          cache=None):
    """One incremental minimization; returns the new state and ledger data."""
    mat, tau = cfg.material, cfg.tau
    hyper = cfg.mode.startswith("hyperbolic")
    fsi = cfg.mode.endswith("fsi")
    Xk = state.X
    xk = Xk.ravel()
    t0, t1 = state.t, state.t + tau
    k0 = cfg.reg.k0
    reg_h = cfg.reg_h
    reg_scale = reg_h ** cfg.reg.a0 if reg_h > 0 else 0.0
    mass = _flat_mass(grid)

    K = dissipation_matrix((grid, Xk))
    if reg_h > 0:
        K = K + reg_h * _reg_matrix(grid, k0)
    H = (2.0 / tau) * K
    fk = cfg.force.averaged(t0, t1, Xk.reshape(-1, 2)).ravel()
    ell = mat.rho_s * mass * fk
    const = 0.0
    if hyper:
        w = np.asarray(w_solid, dtype=float).ravel()
        H = H + sp.diags(mat.rho_s / (cfg.h * tau) * mass)
        ell = ell + (mat.rho_s / cfg.h) * mass * w
        const += tau * mat.rho_s / (2 * cfg.h) * float(np.sum(mass * w * w))
    quad = _Quadratic(H=H.tocsr(), ell=ell, const=const)
    coupling = None
    C = None
    if fsi:
        h_reg = 0.0
        if hyper:
            h_reg = cfg.h if cfg.fluid_reg is None else cfg.fluid_reg
        coupling = _FluidCoupling(cfg, fgrid, grid, Xk, t0, t1, state.flow,
                                  w_markers, h_reg, cache)
        dense, ell_f, const_f, C = coupling.quadratic()
        quad.dense = dense
        quad.ell = quad.ell + ell_f
        quad.const += const_f

    Ek = _energy_h_value(grid, Xk, mat, reg_scale, k0)
    report = _minimize_step(grid, Xk, quad, mat, reg_scale, k0, cfg.container,
                            cfg.tol, constraints=C)
    X1 = report.argmin.reshape(Xk.shape)
    D = X1.ravel() - xk
    b = D / tau
    E1 = _energy_h_value(grid, X1, mat, reg_scale, k0)
    R_step = tau * float(b @ (K @ b))
    work = tau * mat.rho_s * float(np.sum(mass * fk * b))
    kin_b = tau * mat.rho_s / (2 * cfg.h) * float(np.sum(mass * b * b)) if hyper else 0.0
    kin_w = 0.0
    inertia = 0.0
    if hyper:
        kin_w = tau * mat.rho_s / (2 * cfg.h) * float(np.sum(mass * w * w))
        inertia = tau * mat.rho_s / (2 * cfg.h) * float(np.sum(mass * (b - w) ** 2))
    fluid_diss = 0.0
    U = None
    out = {}
    if fsi:
        U, p, parts = coupling.recover(D)
        fluid_diss = tau * (parts["eps"] + parts["reg"])
        work += tau * parts["work_grid"] + tau * parts["work_markers"]
        inertia += tau * parts["inertia"]
        if hyper and state.flow is not None and state.flow.n_markers:
            coef = tau * mat.rho_f / (2 * cfg.h)
            wm = np.concatenate([w_markers[:, 0], w_markers[:, 1]])
            wt = np.concatenate([state.flow.weights, state.flow.weights])
            kin_b += coef * parts["marker_kinetic"]
            kin_w += coef * float(np.sum(wt * wm * wm))
        out.update(U=U, pressure=p, mask=coupling.mask, system=coupling.system,
                   T=coupling.T, coupling=coupling)
    # comparison with the null increment: value(accepted) <= value(eta_k)
    comparison = (Ek + kin_w + work) - (E1 + R_step + fluid_diss + inertia)
    out.update(X=X1, b=b, E0=Ek, E1=E1, R_step=R_step, fluid_diss=fluid_diss,
               work=work, kin_b=kin_b, kin_w=kin_w, comparison=comparison,
               report=report, objective_drop=report.decrease)
    return out


def _scale(cfg, E0):
    return cfg.tol.ineq_factor * (1.0 + abs(E0))


def _row(step, t, E, Eh, R, fd, ks, kf, work, slack, tele, diag, drift):
    return LedgerRow(step=step, t=t, E=E, E_h=Eh, R_step=R, fluid_diss=fd,
                     kin_avg_solid=ks, kin_avg_fluid=kf, work_f=work,
                     slack_single=slack, slack_telescope=tele,
                     cn_defect=diag["cn_defect"], min_det_eta=diag["min_det"],
                     max_detJ_drift=drift, self_distance=diag["self_distance"])


def _plain_energy(grid, X, mat):
    from .energetics import energy
    return energy((grid, X), mat)


def _korn_entry(grid, X, b, U, fgrid, coupling, mat):
    """Global Korn quantities for the global field of (v, b o eta^-1)."""
    from .fluid import global_korn_report
    Ug = U.copy()
    nonfree = np.setdiff1d(np.nonzero(~fgrid.wall_faces)[0], coupling.system.free)
    T, _ = trace_matrix(grid, X, fgrid, nonfree)
    Ug[nonfree] = T @ b
    fluid = coupling.mask.fluid.ravel()
    rep = global_korn_report(fgrid, Ug, (grid, X), b.reshape(X.shape), mat.nu, fluid)
    return rep


# ---------------------------------------------------------------------------
# parabolic
# ---------------------------------------------------------------------------
def _new_record(cfg, grid, X0):
    rec = TrajectoryRecord(config=cfg)
    rec.times.append(0.0)
    rec.snapshots.append(X0.copy())
    return rec


def step_parabolic_solid(state, config, grid=None):
    """One parabolic solid step; returns ``(state', step data)``."""
    grid = grid or config.grid.build()
    d = _step(replace(config, mode="parabolic_solid"), grid, state)
    new = SchemeState(X=d["X"], t=state.t + config.tau, step=state.step + 1)
    return new, d


def step_parabolic_fsi(state, config, grid=None, fgrid=None, cache=None):
    """One parabolic FSI step with the fluid eliminated exactly."""
    grid = grid or config.grid.build()
    fgrid = fgrid or FluidGrid(config.container)
    d = _step(replace(config, mode="parabolic_fsi"), grid, state, fgrid=fgrid,
              cache=cache)
    new = SchemeState(X=d["X"], t=state.t + config.tau, step=state.step + 1,
                      U=d["U"])
    return new, d


def run_parabolic(cfg, grid=None, X0=None, raise_on_stop=False, korn=False):
    """Chain parabolic steps to ``T_end``; stops are recorded, not raised."""
    if grid is None or X0 is None:
        grid, X0, _ = initial_state(cfg)
    fsi = cfg.mode == "parabolic_fsi"
    fgrid = FluidGrid(cfg.container) if fsi else None
    cache = {}
    mat = cfg.material
    rec = _new_record(cfg, grid, X0)
    E0 = _plain_energy(grid, X0, mat)
    tol = _scale(cfg, E0)
    diag0 = _check_state(grid, X0, cfg, 0.0)
    rec.rows.append(_row(0, 0.0, E0, E0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                         diag0, 0.0))
    state = SchemeState(X=X0.copy())
    tele = 0.0
    try:
        for k in range(cfg.n_steps):
            if fsi:
                new, d = step_parabolic_fsi(state, cfg, grid, fgrid, cache)
            else:
                new, d = step_parabolic_solid(state, cfg, grid)
            t = (k + 1) * cfg.tau
            new.t = t
            diag = _check_state(grid, new.X, cfg, t)
            slack = d["E0"] + d["work"] - d["E1"] - d["R_step"] - d["fluid_diss"]
            rec.comparison_slacks.append(d["comparison"])
            if d["comparison"] < -tol:
                raise InequalityViolation(
                    f"single-step comparison failed at step {k + 1}: "
                    f"slack {d['comparison']:.3e}")
            tele += slack
            rec.rows.append(_row(k + 1, t, d["E1"], d["E1"], d["R_step"],
                                 d["fluid_diss"], 0.0, 0.0, d["work"], slack,
                                 tele, diag, 0.0))
            if fsi:
                rec.interface_mismatch.append(float(np.max(d["coupling"].dist)))
                if korn:
                    rec.korn.append(_korn_entry(grid, new.X, d["b"], d["U"],
                                                fgrid, d["coupling"], mat))
            rec.times.append(t)
            rec.snapshots.append(new.X.copy())
            state = new
    except SchemeStop as stop:
        rec.stop_reason, rec.stop_time = stop.reason, stop.time
        if raise_on_stop:
            rec.final_state = state
            raise
    rec.final_state = state
    return rec


# ---------------------------------------------------------------------------
# hyperbolic
# ---------------------------------------------------------------------------
def run_time_delayed_epoch(state, w_data, config, grid=None, fgrid=None,
                           record=None, kin_hist=None):
    """Solve one epoch of length ``h`` of the time-delayed problem.

    Parameters
    ----------
    w_data : dict
        ``solid``: array (m, n_dofs) of previous-epoch solid velocities;
        ``markers``: array (m, P, 2) of previous-epoch marker velocities
        (FSI only).
    record : TrajectoryRecord, optional
        Rows are appended here; a row for the initial state is added first
        if the record has none.
    kin_hist : dict, optional
        Running per-step kinetic contributions used for moving averages.
        Defaults to the contributions of ``w_data`` (the previous epoch).

    Returns
    -------
    state : SchemeState
    next_w : dict
        Data for the next epoch (this epoch's velocities).
    """
    cfg = config
    grid = grid or cfg.grid.build()
    fsi = cfg.mode == "hyperbolic_fsi"
    if fsi and fgrid is None:
        fgrid = FluidGrid(cfg.container)
    m = cfg.steps_per_epoch
    mat = cfg.material
    tau = cfg.tau
    flow = state.flow
    if kin_hist is None:
        # standalone epoch: the moving averages start from the w data
        coef = tau / (2 * cfg.h)
        mass = _flat_mass(grid)
        ks = [coef * mat.rho_s * float(np.sum(mass * w * w)) for w in w_data["solid"]]
        kf = [0.0] * m
        if fsi:
            wt = flow.weights[:, None]
            kf = [coef * mat.rho_f * float(np.sum(wt * w * w)) for w in w_data["markers"]]
        kin_hist = {"solid": ks, "fluid": kf, "tele": 0.0, "pre_solid": 0.0,
                    "pre_fluid": 0.0}
    if record is None:
        record = _new_record(cfg, grid, state.X)
    if not record.rows:
        reg0 = cfg.reg_h ** cfg.reg.a0
        record.rows.append(_row(
            state.step, state.t, _plain_energy(grid, state.X, mat),
            _energy_h_value(grid, state.X, mat, reg0, cfg.reg.k0), 0.0, 0.0,
            float(np.sum(kin_hist["solid"][-m:])), float(np.sum(kin_hist["fluid"][-m:])),
            0.0, 0.0, 0.0, _check_state(grid, state.X, cfg, state.t), 0.0))
    rows0 = len(record.rows)
    next_solid = np.zeros((m, state.X.size))
    next_markers = None
    if fsi:
        flow = flow.restart_epoch()
        next_markers = np.zeros((m, flow.n_markers, 2))
    E0_run = record.rows[0].E_h if record.rows else 0.0
    tol = _scale(cfg, E0_run)
    reg_scale = cfg.reg_h ** cfg.reg.a0
    start_Eh = _energy_h_value(grid, state.X, mat, reg_scale, cfg.reg.k0)
    epoch_slack = 0.0
    for j in range(m):
        wm = w_data["markers"][j] if fsi else None
        st = replace(state, flow=flow)
        d = _step(cfg, grid, st, fgrid=fgrid, w_solid=w_data["solid"][j],
                  w_markers=wm)
        t = state.t + tau
        step = state.step + 1
        diag = _check_state(grid, d["X"], cfg, t)
        next_solid[j] = d["b"]
        drift = 0.0
        U = None
        if fsi:
            U = d["U"]
            vm = fm.marker_velocities(flow, fgrid, U)
            next_markers[j] = vm
            flow = fm.advance(flow, fgrid, U, tau, d["mask"].fluid)
            dd = fm.det_drift(flow)
            drift = dd["max_abs"]
            if dd["min"] < cfg.tol.det_bounds[0] or dd["max"] > cfg.tol.det_bounds[1]:
                record.stop_reason, record.stop_time = "det_drift", t
                raise DetDriftStop(t, f"flow-map determinant in [{dd['min']:.4f}, "
                                      f"{dd['max']:.4f}]")
            record.interface_mismatch.append(float(np.max(d["coupling"].dist)))
            record.momentum_gap.append(_momentum_gap(grid, d, fgrid, flow, mat))
        record.comparison_slacks.append(d["comparison"])
        if d["comparison"] < -tol:
            raise InequalityViolation(
                f"single-step comparison failed at step {step}: "
                f"slack {d['comparison']:.3e}")
        # kinetic moving averages over the last m steps
        ks = tau * mat.rho_s / (2 * cfg.h) * float(
            np.sum(_flat_mass(grid) * d["b"] ** 2))
        kf = d["kin_b"] - ks
        kin_hist["solid"].append(ks)
        kin_hist["fluid"].append(kf)
        kin_s = float(np.sum(kin_hist["solid"][-m:])) + kin_hist["pre_solid"] * max(
            0, m - len(kin_hist["solid"]))
        kin_f = float(np.sum(kin_hist["fluid"][-m:])) + kin_hist["pre_fluid"] * max(
            0, m - len(kin_hist["fluid"]))
        prev = record.rows[-1]
        slack = (prev.E_h - d["E1"] - ((kin_s + kin_f) - (prev.kin_avg_solid
                                                          + prev.kin_avg_fluid))
                 - d["R_step"] - d["fluid_diss"] + d["work"])
        epoch_slack += slack
        kin_hist["tele"] += slack
        E_plain = _plain_energy(grid, d["X"], mat)
        record.rows.append(_row(step, t, E_plain, d["E1"], d["R_step"],
                                d["fluid_diss"], kin_s, kin_f, d["work"], slack,
                                kin_hist["tele"], diag, drift))
        record.times.append(t)
        record.snapshots.append(d["X"].copy())
        state = SchemeState(X=d["X"], t=t, step=step, U=U, flow=flow)
    record.epochs.append({"t_start": state.t - m * tau, "t_end": state.t,
                          "E_h_start": start_Eh, "E_h_end": record.rows[-1].E_h,
                          "epoch_slack": epoch_slack,
                          "rows": (rows0, len(record.rows))})
    if fsi:
        record.marker_states.append(flow)
    nxt = {"solid": next_solid}
    if fsi:
        nxt["markers"] = next_markers
    return state, nxt


def _momentum_gap(grid, d, fgrid, flow, mat):
    """Solid-side plus fluid-side momentum against the global-field form.

    Both sides are evaluated for the uniform test field ``e_x``: the split
    form is ``rho_s int_Q b + rho_f int_fluid v`` and the global form is
    ``int_Omega rho u`` with ``rho`` from the mask; their difference is
    the transfer error of the mask coupling.
    """
    U = d["U"]
    b = d["b"].reshape(-1, 2)
    mass = grid.lumped_mass
    solid = mat.rho_s * np.sum(mass * b[:, 0])
    comp = fgrid.face_ij[0]
    free = np.zeros(fgrid.n_faces, dtype=bool)
    free[d["system"].free] = True
    h2 = fgrid.h ** 2
    fluid = mat.rho_f * h2 * np.sum(U[(comp == 0) & free])
    glob = h2 * np.sum(np.where(free, mat.rho_f, mat.rho_s)[comp == 0]
                       * U[comp == 0])
    return float(solid + fluid - glob)


def run_hyperbolic(cfg, grid=None, X0=None, V0=None, n_epochs=None,
                   raise_on_stop=False):
    """Chain time-delayed epochs; velocities before ``t = 0`` are the initial ones."""
    if grid is None or X0 is None:
        grid, X0, V0 = initial_state(cfg)
    if V0 is None:
        V0 = np.zeros_like(X0)
    fsi = cfg.mode == "hyperbolic_fsi"
    mat = cfg.material
    m = cfg.steps_per_epoch
    if n_epochs is None:
        n_epochs = int(round(cfg.T_end / cfg.h))
    fgrid = FluidGrid(cfg.container) if fsi else None
    rec = _new_record(cfg, grid, X0)
    reg_scale = cfg.reg_h ** cfg.reg.a0
    Eh0 = _energy_h_value(grid, X0, mat, reg_scale, cfg.reg.k0)
    mass = _flat_mass(grid)
    v0 = V0.ravel()
    pre_solid = cfg.tau * mat.rho_s / (2 * cfg.h) * float(np.sum(mass * v0 * v0))
    flow = None
    pre_fluid = 0.0
    w = {"solid": np.tile(v0, (m, 1))}
    if fsi:
        mask = build_mask((grid, X0), cfg.container, cfg.tol.subsamples)
        flow = fm.seed_markers(fgrid, mask.fluid)
        w["markers"] = np.zeros((m, flow.n_markers, 2))
    diag0 = _check_state(grid, X0, cfg, 0.0)
    rec.rows.append(_row(0, 0.0, _plain_energy(grid, X0, mat), Eh0, 0.0, 0.0,
                         m * pre_solid, m * pre_fluid, 0.0, 0.0, 0.0, diag0, 0.0))
    kin_hist = {"solid": [], "fluid": [], "tele": 0.0, "pre_solid": pre_solid,
                "pre_fluid": pre_fluid}
    state = SchemeState(X=X0.copy(), flow=flow)
    try:
        for _ in range(n_epochs):
            state, w = run_time_delayed_epoch(state, w, cfg, grid, fgrid, rec,
                                              kin_hist)
    except SchemeStop as stop:
        rec.stop_reason, rec.stop_time = stop.reason, stop.time
        if raise_on_stop:
            rec.final_state = state
            raise
    rec.final_state = state
    return rec


def run(cfg, **kw):
    """Dispatch on ``cfg.mode``."""
    problems = cfg.violations()
    if problems:
        raise ValidationError(problems)
    if cfg.mode.startswith("parabolic"):
        return run_parabolic(cfg, **kw)
    return run_hyperbolic(cfg, **kw)
