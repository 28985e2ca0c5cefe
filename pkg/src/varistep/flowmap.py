"""Marker-based discrete flow map and the transported inertia pairing.

Markers are seeded at fluid-cell centres.  Each step moves them with the
interpolated face velocity, ``x <- x + tau v(x)``, and updates their
Jacobian by ``J <- (I + tau A) J`` with ``A`` the cell-constant velocity
gradient of the cell holding the marker.  ``A`` is trace-free (discrete
divergence on fluid cells, trace-free projection elsewhere), so
``det(I + tau A) = 1 + tau^2 det A`` and the determinant drift over a
horizon ``h`` is of order ``tau h``.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DetDriftStop, MarkerEscaped

__all__ = [
    "FlowMapState",
    "seed_markers",
    "advance",
    "det_drift",
    "transported_inertia_pair",
    "forward_backward_error",
    "marker_velocities",
    "write_markers",
    "read_markers",
]


@dataclass(frozen=True)
class FlowMapState:
    """Marker positions and accumulated Jacobians.

    Attributes
    ----------
    origins : ndarray (P, 2)
        Positions at the start of the current epoch.
    positions : ndarray (P, 2)
    jacobians : ndarray (P, 2, 2)
        Jacobian of the flow map since the epoch start.
    weights : ndarray (P,)
        Lagrangian volume carried by each marker.
    t0, t : float
        Epoch start and current time.
    """

    origins: np.ndarray
    positions: np.ndarray
    jacobians: np.ndarray
    weights: np.ndarray
    t0: float = 0.0
    t: float = 0.0

    @property
    def n_markers(self):
        return len(self.positions)

    def restart_epoch(self):
        """Start a new epoch at the current time; markers are kept."""
        P = self.n_markers
        return replace(self, origins=self.positions.copy(),
                       jacobians=np.tile(np.eye(2), (P, 1, 1)), t0=self.t)


def seed_markers(fgrid, fluid_cells, t0=0.0):
    """One marker at the centre of every fluid cell, weight ``h^2``."""
    fl = np.asarray(fluid_cells, dtype=bool).reshape(fgrid.nx, fgrid.ny)
    I, J = np.nonzero(fl)
    pts = np.stack([fgrid.lo[0] + (I + 0.5) * fgrid.h,
                    fgrid.lo[1] + (J + 0.5) * fgrid.h], axis=1)
    P = len(pts)
    return FlowMapState(origins=pts.copy(), positions=pts,
                        jacobians=np.tile(np.eye(2), (P, 1, 1)),
                        weights=np.full(P, fgrid.h ** 2), t0=t0, t=t0)


def advance(state, fgrid, U, tau, fluid_cells=None):
    """Advance markers by one step of the face velocity ``U``.

    Raises
    ------
    MarkerEscaped
        If a marker leaves the container by more than one fluid cell.
    """
    U = np.asarray(U, dtype=float)
    x = state.positions
    P = len(x)
    if P == 0:
        return replace(state, t=state.t + tau)
    vel = (fgrid.interp_matrix(x) @ U).reshape(2, P).T
    A = fgrid.cell_velocity_gradients(U, fluid_cells)[fgrid.cell_of(x)]
    xn = x + tau * vel
    lo = fgrid.lo
    hi = lo + fgrid.h * np.array([fgrid.nx, fgrid.ny])
    out = np.max(np.maximum(lo - xn, xn - hi), axis=1)
    if np.any(out > fgrid.h):
        k = int(np.argmax(out))
        raise MarkerEscaped(f"marker {k} left the container by {out[k]:.3e}")
    xn = np.clip(xn, lo, hi)
    Jn = (np.eye(2) + tau * A) @ state.jacobians
    return replace(state, positions=xn, jacobians=Jn, t=state.t + tau)


def det_drift(state, bounds=(0.5, 2.0), raise_on_violation=False):
    """Determinant diagnostics of the accumulated Jacobians.

    Raises
    ------
    DetDriftStop
        If ``raise_on_violation`` and some determinant leaves ``bounds``.
    """
    if state.n_markers == 0:
        return {"max_abs": 0.0, "min": 1.0, "max": 1.0}
    d = np.linalg.det(state.jacobians)
    out = {"max_abs": float(np.max(np.abs(d - 1.0))), "min": float(d.min()),
           "max": float(d.max())}
    if raise_on_violation and (out["min"] < bounds[0] or out["max"] > bounds[1]):
        raise DetDriftStop(state.t, f"flow-map determinant left {bounds}: "
                                    f"[{out['min']:.4f}, {out['max']:.4f}]")
    return out


def transported_inertia_pair(state, fgrid, U, w_prev, h, rho_f=1.0):
    """Marker form of ``rho_f/(2h) ||v o Phi - w||^2`` and its U-gradient.

    Parameters
    ----------
    w_prev : ndarray (P, 2)
        Velocities carried by the markers from the previous epoch.

    Returns
    -------
    value : float
    grad : ndarray (n_faces,)
    """
    if state.n_markers == 0:
        return 0.0, np.zeros(fgrid.n_faces)
    Im = fgrid.interp_matrix(state.positions)
    vm = Im @ np.asarray(U, dtype=float)
    w = np.concatenate([w_prev[:, 0], w_prev[:, 1]])
    wt = np.concatenate([state.weights, state.weights])
    diff = vm - w
    coef = rho_f / (2.0 * h)
    value = coef * float(np.sum(wt * diff * diff))
    grad = 2.0 * coef * (Im.T @ (wt * diff))
    return value, grad


def marker_velocities(state, fgrid, U):
    """Interpolated velocity at every marker, shape (P, 2)."""
    P = state.n_markers
    return (fgrid.interp_matrix(state.positions) @ np.asarray(U, float)).reshape(2, P).T


def forward_backward_error(state, fgrid, fields, tau):
    """Transport forward through ``fields`` and back in reverse order.

    Returns the maximum distance between the returned and the original
    marker positions.
    """
    s = state
    for U in fields:
        s = advance(s, fgrid, U, tau)
    for U in reversed(fields):
        s = advance(s, fgrid, -np.asarray(U), tau)
    if state.n_markers == 0:
        return 0.0
    return float(np.max(np.linalg.norm(s.positions - state.positions, axis=1)))


def write_markers(path, state):
    """Dump rows ``x0 y0 x y detJ``."""
    d = np.linalg.det(state.jacobians) if state.n_markers else np.zeros(0)
    with open(path, "w") as fh:
        fh.write("# x0 y0 x y detJ\n")
        for o, p, dj in zip(state.origins.tolist(), state.positions.tolist(),
                            d.tolist()):
            fh.write(f"{o[0]!r} {o[1]!r} {p[0]!r} {p[1]!r} {dj!r}\n")


def read_markers(path):
    """Read a marker dump; returns an array of shape (P, 5)."""
    with warnings.catch_warnings():
        # a dump with no markers is valid and yields shape (0, 5)
        warnings.simplefilter("ignore", UserWarning)
        data = np.loadtxt(path, comments="#", ndmin=2)
    return data.reshape(-1, 5)
