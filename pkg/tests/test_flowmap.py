import numpy as np
import pytest
from dataclasses import replace

from varistep import flowmap as fm
from varistep.errors import DetDriftStop, MarkerEscaped
from varistep.fluid import FluidGrid, face_values
from varistep.geometry import ContainerBox


@pytest.fixture
def fg():
    return FluidGrid(ContainerBox(lo=(0.0, 0.0), hi=(1.0, 1.0), nx=16, ny=16))


def _interior(fg, margin=3):
    fl = np.zeros((fg.nx, fg.ny), dtype=bool)
    fl[margin:-margin, margin:-margin] = True
    return fl


def _linear(fg, L, c=(0.0, 0.0)):
    L = np.asarray(L, float)
    return face_values(fg, lambda p: (p - 0.5) @ L.T + np.asarray(c))


def _vortex(fg):
    """Discrete curl of psi = sin(pi x) sin(pi y) / pi (exactly div-free)."""
    x = np.arange(fg.nx + 1) * fg.h
    y = np.arange(fg.ny + 1) * fg.h
    psi = np.outer(np.sin(np.pi * x), np.sin(np.pi * y)) / np.pi
    comp, i, j = fg.face_ij
    U = np.zeros(fg.n_faces)
    u, v = comp == 0, comp == 1
    U[u] = (psi[i[u], j[u] + 1] - psi[i[u], j[u]]) / fg.h
    U[v] = -(psi[i[v] + 1, j[v]] - psi[i[v], j[v]]) / fg.h
    return U


def test_seed_markers(fg):
    fl = _interior(fg)
    s = fm.seed_markers(fg, fl, t0=0.3)
    assert s.n_markers == fl.sum()
    assert np.all(s.weights == fg.h ** 2)
    assert np.array_equal(fg.cell_of(s.positions), np.nonzero(fl.ravel())[0])
    assert s.t == s.t0 == 0.3


def test_zero_velocity_leaves_state_unchanged(fg):
    s = fm.seed_markers(fg, np.ones((16, 16), bool))
    s1 = fm.advance(s, fg, np.zeros(fg.n_faces), 0.1)
    assert np.array_equal(s1.positions, s.positions)
    assert np.array_equal(s1.jacobians, s.jacobians)
    assert fm.det_drift(s1) == {"max_abs": 0.0, "min": 1.0, "max": 1.0}
    assert s1.t == pytest.approx(0.1)


def test_constant_velocity_translates(fg):
    s = fm.seed_markers(fg, _interior(fg))
    c = np.array([0.3, -0.1])
    U = face_values(fg, c)
    s1 = fm.advance(s, fg, U, 0.05)
    assert np.allclose(s1.positions, s.positions + 0.05 * c, atol=1e-14)
    assert np.all(np.linalg.det(s1.jacobians) == 1.0)


def test_shear_jacobian_matches_product_oracle(fg):
    s = fm.seed_markers(fg, _interior(fg, 5))
    shear = 0.8
    U = _linear(fg, [[0.0, shear], [0.0, 0.0]])
    tau, N = 0.01, 10
    for _ in range(N):
        s = fm.advance(s, fg, U, tau)
    A = np.array([[0.0, shear], [0.0, 0.0]])
    oracle = np.linalg.matrix_power(np.eye(2) + tau * A, N)
    assert np.allclose(oracle, np.eye(2) + N * tau * A, atol=1e-15)
    assert np.allclose(s.jacobians, oracle, atol=1e-12)
    assert np.allclose(np.linalg.det(s.jacobians), 1.0, atol=1e-14)


@pytest.mark.parametrize("L", [[[0.4, 1.0], [-0.5, -0.4]], [[0.0, -2.0], [2.0, 0.0]]])
def test_single_step_determinant_expansion(fg, L):
    # trace-free generator: det(I + tau A) = 1 + tau tr A + tau^2 det A
    s = fm.seed_markers(fg, _interior(fg, 5))
    tau = 0.05
    s1 = fm.advance(s, fg, _linear(fg, L), tau)
    A = np.asarray(L, float)
    expect = 1 + tau * np.trace(A) + tau ** 2 * np.linalg.det(A)
    assert np.allclose(np.linalg.det(s1.jacobians), expect, atol=1e-13)


def test_gradient_projection_outside_fluid(fg):
    # a compressive field seen through non-fluid cells gives a trace-free A
    U = _linear(fg, [[1.0, 0.0], [0.0, 1.0]])
    A = fg.cell_velocity_gradients(U, fluid_cells=np.zeros(fg.n_cells, bool))
    assert np.allclose(np.trace(A, axis1=1, axis2=2), 0)


def test_det_drift_is_first_order_in_tau(fg):
    U = _vortex(fg)
    assert np.abs(fg.div @ U).max() < 1e-12
    fluid = np.ones((16, 16), bool)
    horizon, drifts = 0.4, []
    for n in (8, 16, 32):
        s = fm.seed_markers(fg, fluid)
        tau = horizon / n
        for _ in range(n):
            s = fm.advance(s, fg, U, tau, fluid)
        d = fm.det_drift(s)
        assert 0.5 <= d["min"] and d["max"] <= 2.0
        drifts.append(d["max_abs"])
    ratios = np.array(drifts[:-1]) / np.array(drifts[1:])
    assert np.all(ratios >= 1.6), ratios
    assert np.all(ratios <= 2.4), ratios


def test_forward_backward_returns_within_tau_squared(fg):
    U = _vortex(fg)
    s = fm.seed_markers(fg, np.ones((16, 16), bool))
    n = 8
    L = fg.lipschitz(U)
    V = np.abs(fg.interp_matrix(s.positions) @ U).max() * np.sqrt(2)
    errs = []
    for tau in (0.02, 0.01, 0.005):
        e = fm.forward_backward_error(s, fg, [U] * n, tau)
        # each forward/backward pair misses by <= tau^2 L V, amplified by the flow
        assert e <= n * tau ** 2 * L * V * np.exp(2 * n * tau * L)
        errs.append(e)
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > 3.5), ratios


def test_restart_epoch_resets_jacobians(fg):
    s = fm.seed_markers(fg, _interior(fg))
    s = fm.advance(s, fg, _linear(fg, [[0.0, 1.0], [0.0, 0.0]]), 0.1)
    r = s.restart_epoch()
    assert np.array_equal(r.origins, s.positions)
    assert np.all(r.jacobians == np.eye(2))
    assert r.t0 == r.t == s.t


def test_marker_escape(fg):
    s = fm.seed_markers(fg, np.ones((16, 16), bool))
    with pytest.raises(MarkerEscaped):
        fm.advance(s, fg, face_values(fg, (50.0, 0.0)), 0.1)
    # an overshoot below one cell is clipped back onto the wall
    s2 = fm.advance(s, fg, face_values(fg, (1.0, 0.0)), 0.05)
    assert s2.positions[:, 0].max() == 1.0


def test_det_drift_bounds():
    J = np.array([np.eye(2), 3.0 * np.eye(2)])
    s = fm.FlowMapState(origins=np.zeros((2, 2)), positions=np.zeros((2, 2)),
                        jacobians=J, weights=np.ones(2), t=1.5)
    d = fm.det_drift(s)
    assert d["max"] == pytest.approx(9.0) and d["max_abs"] == pytest.approx(8.0)
    with pytest.raises(DetDriftStop) as exc:
        fm.det_drift(s, raise_on_violation=True)
    assert exc.value.time == 1.5


def test_inertia_pair(fg, rng):
    s = fm.seed_markers(fg, _interior(fg))
    L = np.array([[0.2, -0.7], [0.4, -0.2]])
    U = _linear(fg, L, c=(0.1, 0.3))
    v_markers = (s.positions - 0.5) @ L.T + [0.1, 0.3]
    # matching data -> 0
    val, grad = fm.transported_inertia_pair(s, fg, U, v_markers, h=0.1)
    assert val == pytest.approx(0.0, abs=1e-24)
    assert np.abs(grad).max() < 1e-12
    # w = 0 -> direct weighted marker sum
    val, grad = fm.transported_inertia_pair(s, fg, U, np.zeros_like(v_markers), h=0.1, rho_f=2.0)
    oracle = 2.0 / (2 * 0.1) * np.sum(s.weights[:, None] * v_markers ** 2)
    assert val == pytest.approx(oracle, rel=1e-12)
    # gradient by central differences (the pair is quadratic in U)
    w = rng.standard_normal(v_markers.shape)
    _, g = fm.transported_inertia_pair(s, fg, U, w, h=0.1)
    d = rng.standard_normal(fg.n_faces)
    fp = fm.transported_inertia_pair(s, fg, U + 1e-3 * d, w, h=0.1)[0]
    fmn = fm.transported_inertia_pair(s, fg, U - 1e-3 * d, w, h=0.1)[0]
    assert (fp - fmn) / 2e-3 == pytest.approx(g @ d, rel=1e-9)
    # weight 1/(2h) -> 0 as h grows
    big = fm.transported_inertia_pair(s, fg, U, w, h=1e12)[0]
    assert big < 1e-10


def test_marker_dump_roundtrip(fg, tmp_path):
    s = fm.seed_markers(fg, _interior(fg))
    s = fm.advance(s, fg, _vortex(fg), 0.01)
    path = tmp_path / "m.txt"
    fm.write_markers(path, s)
    data = fm.read_markers(path)
    assert data.shape == (s.n_markers, 5)
    assert np.array_equal(data[:, 2:4], s.positions)
    assert np.array_equal(data[:, 4], np.linalg.det(s.jacobians))
    empty = replace(s, origins=np.zeros((0, 2)), positions=np.zeros((0, 2)),
                    jacobians=np.zeros((0, 2, 2)), weights=np.zeros(0))
    fm.write_markers(path, empty)
    assert fm.read_markers(path).shape[0] == 0
