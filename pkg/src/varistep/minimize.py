"""Deterministic limited-memory quasi-Newton minimizer.

Infeasible trial points (objective ``inf``) are handled by halving the
step, so the barrier in the energy acts as a hard wall for the line
search.  Every accepted step satisfies an Armijo decrease, which makes
the returned value never exceed the value at the initial point.

Optional features
-----------------
* a sparse SPD preconditioner ``M`` on the free dofs, used as the
  initial inverse Hessian ``gamma * M^{-1}``;
* linear equality constraints ``C (x - x0) = 0`` on the free dofs, kept
  exactly by projecting every search direction.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LineSearchStall, NonFiniteGradient, ValidationError

__all__ = [
    "MinimizeProblem",
    "MinimizeReport",
    "solve",
    "check_step_acceptance",
    "acceptance_reason",
]


@dataclass
class MinimizeProblem:
    """Incremental minimization problem on a full nodal vector.

    Parameters
    ----------
    objective : callable
        Full flat vector -> extended real (``inf`` for infeasible).
    gradient : callable
        Full flat vector -> full flat gradient.
    free_dofs : ndarray of int
        Indices that may move; the rest stay at ``initial_point``.
    initial_point : ndarray
        Full flat starting vector; must have a finite objective.
    grad_tol : float
        Stop once the (projected) gradient 2-norm is below this.
    value_and_gradient : callable, optional
        Combined evaluation, used instead of the two callables if given.
    preconditioner : sparse matrix, optional
        SPD matrix on the free dofs approximating the Hessian.
    constraints : ndarray, optional
        Matrix ``C`` (m x n_free) of equality constraints on the increment.
    feasibility : callable, optional
        Full flat argmin -> dict of flags stored in the report.
    """

    objective: object
    gradient: object
    free_dofs: np.ndarray
    initial_point: np.ndarray
    grad_tol: float = 1e-8
    max_iters: int = 500
    value_and_gradient: object = None
    preconditioner: object = None
    constraints: object = None
    feasibility: object = None
    memory: int = 10
    max_halvings: int = 60
    armijo: float = 1e-4


@dataclass
class MinimizeReport:
    """Outcome of :func:`solve`."""

    argmin: np.ndarray
    value: float
    grad_norm: float
    iters: int
    decrease: float
    initial_value: float
    status: str
    n_evals: int = 0
    feasibility_flags: dict = field(default_factory=dict)


class _InverseHessian0:
    """Initial inverse Hessian ``M^{-1}`` restricted to ``C d = 0``."""

    def __init__(self, n, M=None, C=None):
        self.n = n
        if M is not None:
            M = sp.csc_matrix(M)
            self._solve = spla.factorized(M)
        else:
            self._solve = None
        self.C = None
        if C is not None and np.size(C):
            C = np.atleast_2d(np.asarray(C, dtype=float))
            W = np.column_stack([self.base(c) for c in C])
            S = C @ W
            self.C, self.W, self.S = C, W, S

    def base(self, g):
        return self._solve(g) if self._solve is not None else g.copy()

    def __call__(self, g):
        r = self.base(g)
        if self.C is not None:
            r = r - self.W @ np.linalg.solve(self.S, self.C @ r)
        return r

    def project(self, g):
        """Euclidean projection onto the constraint null space."""
        if self.C is None:
            return g
        C = self.C
        return g - C.T @ np.linalg.solve(C @ C.T, C @ g)


def solve(problem):
    """Minimize with L-BFGS and Armijo backtracking by halving.

    Returns
    -------
    MinimizeReport

    Raises
    ------
    LineSearchStall
        If 60 halvings never produce a finite trial value.
    NonFiniteGradient
        If the gradient at an accepted point is not finite.
    """
    pb = problem
    free = np.asarray(pb.free_dofs)
    base = np.array(pb.initial_point, dtype=float)
    n_evals = 0

    def full(x):
        v = base.copy()
        v[free] = x
        return v

    def vg(x):
        nonlocal n_evals
        n_evals += 1
        v = full(x)
        if pb.value_and_gradient is not None:
            f, g = pb.value_and_gradient(v)
        else:
            f = pb.objective(v)
            g = pb.gradient(v) if np.isfinite(f) else None
        if not np.isfinite(f):
            return np.inf, None
        g = np.asarray(g, dtype=float).ravel()[free]
        return float(f), g

    x = base[free].copy()
    f, g = vg(x)
    if not np.isfinite(f):
        raise ValidationError(["initial point has infinite objective"])
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient at the initial point is not finite")
    f0 = f
    H0 = _InverseHessian0(x.size, pb.preconditioner, pb.constraints)
    S, Y, RHO = [], [], []
    status = "max_iters"
    it = 0
    gp = H0.project(g)
    gnorm = float(np.linalg.norm(gp))
    for it in range(pb.max_iters + 1):
        if gnorm <= pb.grad_tol:
            status = "converged"
            break
        if it == pb.max_iters:
            break
        accepted = False
        for attempt in range(2):
            # the two-loop recursion amplifies roundoff in the constraint
            # directions near the floating-point floor; project every time
            d = H0.project(_direction(g, S, Y, RHO, H0))
            slope = float(g @ d)
            if not slope < 0:
                S, Y, RHO = [], [], []
                d = H0.project(-H0(g))
                slope = float(g @ d)
            if not slope < 0:
                d = -gp
                slope = float(g @ d)
            alpha = 1.0
            seen_finite = False
            floor = 4.0 * np.finfo(float).eps * max(abs(f), 1e-300)
            for _ in range(pb.max_halvings + 1):
                xt = x + alpha * d
                ft, gt = vg(xt)
                if np.isfinite(ft):
                    seen_finite = True
                    # a trial equal to f in floating point is no progress
                    if ft < f and ft <= f + pb.armijo * alpha * slope:
                        accepted = True
                        break
                    # predicted decrease below the resolution of f
                    if alpha * abs(slope) < floor:
                        break
                alpha *= 0.5
            if accepted or not S:
                break
            S, Y, RHO = [], [], []
        if not accepted:
            if not seen_finite:
                raise LineSearchStall(
                    f"no finite trial value after {pb.max_halvings} halvings")
            status = "line_search_exhausted"
            break
        if not np.all(np.isfinite(gt)):
            raise NonFiniteGradient("gradient is not finite at accepted point")
        s = xt - x
        y = gt - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            S.append(s)
            Y.append(y)
            RHO.append(1.0 / sy)
            if len(S) > pb.memory:
                S.pop(0)
                Y.pop(0)
                RHO.pop(0)
        x, f, g = xt, ft, gt
        gp = H0.project(g)
        gnorm = float(np.linalg.norm(gp))
    argmin = full(x)
    flags = pb.feasibility(argmin) if pb.feasibility is not None else {}
    return MinimizeReport(argmin=argmin, value=f, grad_norm=gnorm, iters=it,
                          decrease=f0 - f, initial_value=f0, status=status,
                          n_evals=n_evals, feasibility_flags=flags)


def _direction(g, S, Y, RHO, H0):
    """Two-loop recursion with scaled initial matrix ``gamma * H0``."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(S), reversed(Y), reversed(RHO)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    r = H0(q)
    if S:
        s, y = S[-1], Y[-1]
        Hy = H0(y)
        yHy = float(y @ Hy)
        if yHy > 0:
            r *= float(s @ y) / yHy
    for (s, y, rho), a in zip(zip(S, Y, RHO), reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def acceptance_reason(report, cn_defect_tol, det_floor=0.0):
    """Return ``None`` if the step is acceptable, else a short reason."""
    fl = report.feasibility_flags
    if fl.get("cn_defect", 0.0) > cn_defect_tol:
        return "ciarlet_necas"
    if fl.get("min_det", 1.0) < det_floor or fl.get("min_det", 1.0) <= 0.0:
        return "det_floor"
    if fl.get("self_distance", 1.0) <= 0.0:
        return "collision"
    return None


def check_step_acceptance(report, cn_defect_tol, det_floor=0.0):
    """True iff CN defect, determinant floor and self-distance checks pass."""
    return acceptance_reason(report, cn_defect_tol, det_floor) is None
