import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_feasible, random_rate, random_rotation, rotate_about
from oracles import fd_errors, gradient_check, kth_difference_sum, svk_barrier_density
from varistep.energetics import (MaterialParams, RegularizationParams, dissipation,
                                 dissipation_gradient, dissipation_matrix, energy,
                                 energy_and_gradient, energy_gradient, energy_hessian,
                                 korn_constant, regularized_dissipation,
                                 regularized_dissipation_gradient, regularized_energy,
                                 regularized_energy_gradient, regularizer)
from varistep.errors import Infeasible, ValidationError
from varistep.geometry import DeformationField, ReferenceGrid


def _centre(grid):
    return grid.identity().reshape(-1, 2).mean(0)


def _affine(grid, F, c=(0.0, 0.0)):
    ref = grid.identity()
    o = _centre(grid)
    return (ref - o) @ np.asarray(F).T + o + np.asarray(c)


# ---------------------------------------------------------------------------
# stored energy values
# ---------------------------------------------------------------------------
def test_identity_energy_is_barrier_only(grid5):
    # A = 0 and G = 0, so only det^{-a} = 1 survives on |Q| = 1
    assert energy(DeformationField.identity(grid5)) == pytest.approx(1.0, rel=1e-14)


@pytest.mark.parametrize("F", [np.diag([1.2, 1.0]), np.array([[1.1, 0.3], [-0.1, 0.9]])])
@pytest.mark.parametrize("n", [2, 5])
def test_affine_energy_matches_closed_form(F, n):
    grid = ReferenceGrid(n, n)
    X = _affine(grid, F)
    assert energy((grid, X)) == pytest.approx(svk_barrier_density(F), rel=1e-12)


def test_stretch_closed_form_value():
    # F = diag(1.2, 1): A = diag(0.44, 0); 0.125 (0.44^2 + 2 0.44^2) + 1.2^-5
    grid = ReferenceGrid(2, 2)
    expect = 0.125 * 3 * 0.44 ** 2 + 1.2 ** -5
    assert energy((grid, _affine(grid, np.diag([1.2, 1.0])))) == pytest.approx(expect, rel=1e-13)


def test_energy_rotation_invariant(grid5, rng):
    X = random_feasible(grid5, rng, amp=0.05)
    E0 = energy((grid5, X))
    for _ in range(20):
        Y = rotate_about(X, random_rotation(rng), rng.uniform(0, 2, 2))
        assert energy((grid5, Y)) == pytest.approx(E0, rel=1e-12)


def test_energy_batched_matches_loop(grid5, rng):
    Xs = np.stack([random_feasible(grid5, rng) for _ in range(3)])
    vals = energy((grid5, Xs))
    assert vals.shape == (3,)
    for X, v in zip(Xs, vals):
        assert v == pytest.approx(energy((grid5, X)), rel=1e-14)


def test_barrier_blows_up_under_compression(grid5):
    s = np.array([1.0, 0.8, 0.5, 0.3, 0.1])
    E = [energy((grid5, _affine(grid5, si * np.eye(2)))) for si in s]
    assert np.all(np.diff(E) > 0)
    assert E[-1] == pytest.approx(0.01 ** -5, rel=1e-9)


def test_inverted_configuration_has_infinite_energy(grid5):
    X = _affine(grid5, np.diag([-1.0, 1.0]))
    assert energy((grid5, X)) == np.inf
    with pytest.raises(Infeasible):
        energy_and_gradient((grid5, X))


# ---------------------------------------------------------------------------
# energy derivative
# ---------------------------------------------------------------------------
def _trace_grad_integral(grid, phi):
    """Midpoint integral of tr(grad phi) with edge-averaged differences."""
    px, py = phi[..., 0], phi[..., 1]
    dxx = ((px[1:, :-1] - px[:-1, :-1]) + (px[1:, 1:] - px[:-1, 1:])) / (2 * grid.dx)
    dyy = ((py[:-1, 1:] - py[:-1, :-1]) + (py[1:, 1:] - py[1:, :-1])) / (2 * grid.dy)
    return float(np.sum(dxx + dyy) * grid.cell_area)


def test_identity_gradient_is_pressure_like(grid5, rng):
    p = MaterialParams()
    g = energy_gradient(DeformationField.identity(grid5), p)
    for _ in range(5):
        phi = random_rate(grid5, rng)
        expect = -p.a * p.w_bar * _trace_grad_integral(grid5, phi)
        assert np.sum(g * phi) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_gradient_vanishes_on_dirichlet(grid5, rng):
    X = random_feasible(grid5, rng)
    assert np.all(energy_gradient((grid5, X))[grid5.dirichlet] == 0)
    assert np.all(dissipation_gradient((grid5, X), random_rate(grid5, rng))[grid5.dirichlet] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_finite_difference_gradients(seed):
    rng = np.random.default_rng(seed)
    grid = ReferenceGrid(5, 5)
    X = random_feasible(grid, rng, amp=0.05)
    b = random_rate(grid, rng)
    phi = random_rate(grid, rng)
    eE4, eR4 = fd_errors(grid, X, b, phi, 1e-4)
    eE5, eR5 = fd_errors(grid, X, b, phi, 1e-5)
    assert gradient_check(eE4, eE5), (eE4, eE5)
    assert gradient_check(eR4, eR5), (eR4, eR5)


def test_energy_hessian_matches_gradient_differences(grid5, rng):
    X = random_feasible(grid5, rng, amp=0.05)
    H = energy_hessian((grid5, X), psd=False)
    phi = random_rate(grid5, rng)
    eps = 1e-6
    fd = (energy_gradient((grid5, X + eps * phi))
          - energy_gradient((grid5, X - eps * phi))) / (2 * eps)
    Hphi = (H @ phi.reshape(-1)).reshape(phi.shape)
    Hphi[grid5.dirichlet] = 0.0
    assert np.allclose(Hphi, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())


def test_psd_hessian_is_positive_semidefinite(grid5, rng):
    X = random_feasible(grid5, rng, amp=0.1)
    H = energy_hessian((grid5, X), psd=True).toarray()
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > -1e-9 * np.abs(H).max()


# ---------------------------------------------------------------------------
# dissipation
# ---------------------------------------------------------------------------
def test_dissipation_shear_and_rotation(grid5):
    ref = grid5.identity()
    c = _centre(grid5)
    idt = DeformationField.identity(grid5)
    shear = np.stack([ref[..., 1] - ref[0, 0, 1], np.zeros(ref.shape[:2])], -1)
    assert dissipation(idt, shear) == pytest.approx(2.0, rel=1e-13)
    rot = np.stack([-(ref[..., 1] - c[1]), ref[..., 0] - c[0]], -1)
    assert dissipation(idt, rot) == pytest.approx(0.0, abs=1e-13)


def test_dissipation_vanishes_on_infinitesimal_rotation_of_deformed(grid5, rng):
    # b = W eta with W skew is an infinitesimal rigid motion of the deformed state
    X = random_feasible(grid5, rng, amp=0.05)
    W = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert dissipation((grid5, X), X @ W.T) == pytest.approx(0.0, abs=1e-12)


def test_dissipation_algebra(grid5, rng):
    X = random_feasible(grid5, rng)
    b1, b2 = random_rate(grid5, rng), random_rate(grid5, rng)
    R = dissipation((grid5, X), b1)
    assert dissipation((grid5, X), 2.5 * b1) == pytest.approx(6.25 * R, rel=1e-12)
    g1 = dissipation_gradient((grid5, X), b1)
    assert np.sum(g1 * b1) == pytest.approx(2 * R, rel=1e-12)
    g12 = dissipation_gradient((grid5, X), b1 + b2)
    assert np.allclose(g12, g1 + dissipation_gradient((grid5, X), b2), atol=1e-12)
    K = dissipation_matrix((grid5, X))
    assert b1.reshape(-1) @ (K @ b1.reshape(-1)) == pytest.approx(R, rel=1e-12)


def test_dissipation_frame_indifferent(grid5, rng):
    X = random_feasible(grid5, rng, amp=0.05)
    b = random_rate(grid5, rng)
    R0 = dissipation((grid5, X), b)
    for _ in range(20):
        Q = random_rotation(rng)
        Y = rotate_about(X, Q, rng.uniform(0, 2, 2))
        assert dissipation((grid5, Y), b @ Q.T) == pytest.approx(R0, rel=1e-12)


def test_korn_constant(grid5, rng):
    X = random_feasible(grid5, rng)
    vals = [korn_constant((grid5, X), random_rate(grid5, rng)) for _ in range(10)]
    assert min(vals) > 0
    assert np.isnan(korn_constant((grid5, X), np.zeros_like(X)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3))
def test_dissipation_homogeneous_property(seed, lam):
    rng = np.random.default_rng(seed)
    grid = ReferenceGrid(4, 3)
    X = random_feasible(grid, rng)
    b = random_rate(grid, rng)
    R = dissipation((grid, X), b)
    assert R >= 0
    assert dissipation((grid, X), lam * b) == pytest.approx(lam ** 2 * R, rel=1e-10, abs=1e-14)


# ---------------------------------------------------------------------------
# regularized functionals
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("shape", [(5, 5), (6, 4), (4, 7)])
def test_regularizer_matches_difference_oracle(shape, rng):
    grid = ReferenceGrid(*shape, lengths=(1.0, 1.3))
    U = rng.standard_normal((grid.nx, grid.ny, 2))
    assert regularizer(grid, U) == pytest.approx(
        kth_difference_sum(U, grid.dx, grid.dy), rel=1e-12)


def test_regularizer_kills_quadratics(grid5, rng):
    ref = grid5.identity()
    x, y = ref[..., 0], ref[..., 1]
    U = np.stack([x ** 2 - 3 * x * y + 2, y ** 2 + x], -1)
    assert regularizer(grid5, U) == pytest.approx(0.0, abs=1e-20)
    cubic = np.stack([x ** 3, np.zeros_like(x)], -1)
    assert regularizer(grid5, cubic) > 0


def test_regularized_functionals(grid5, rng):
    X = random_feasible(grid5, rng, amp=0.05)
    b = random_rate(grid5, rng)
    assert regularized_energy((grid5, X), reg=RegularizationParams(h=0.0)) == energy((grid5, X))
    reg = RegularizationParams(k0=3, a0=0.5, h=0.04)
    oracle = kth_difference_sum(X, grid5.dx, grid5.dy)
    assert regularized_energy((grid5, X), reg=reg) == pytest.approx(
        energy((grid5, X)) + 0.2 * oracle, rel=1e-12)
    oracle_b = kth_difference_sum(b, grid5.dx, grid5.dy)
    assert regularized_dissipation((grid5, X), b, reg=reg) == pytest.approx(
        dissipation((grid5, X), b) + 0.04 * oracle_b, rel=1e-12)
    # affine states see no regularization
    A = _affine(grid5, [[1.1, 0.2], [0.0, 0.95]])
    assert regularized_energy((grid5, A), reg=reg) == pytest.approx(energy((grid5, A)), rel=1e-14)


def test_regularized_gradients_finite_difference(grid5, rng):
    reg = RegularizationParams(h=0.05)
    X = random_feasible(grid5, rng, amp=0.05)
    b, phi = random_rate(grid5, rng), random_rate(grid5, rng)
    eps = 1e-5
    gE = np.sum(regularized_energy_gradient((grid5, X), reg=reg) * phi)
    fE = (regularized_energy((grid5, X + eps * phi), reg=reg)
          - regularized_energy((grid5, X - eps * phi), reg=reg)) / (2 * eps)
    assert fE == pytest.approx(gE, rel=1e-6)
    gR = np.sum(regularized_dissipation_gradient((grid5, X), b, reg=reg) * phi)
    fR = (regularized_dissipation((grid5, X), b + eps * phi, reg=reg)
          - regularized_dissipation((grid5, X), b - eps * phi, reg=reg)) / (2 * eps)
    assert fR == pytest.approx(gR, rel=1e-8)


# ---------------------------------------------------------------------------
# parameter validation
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("kw, field", [
    ({"a": 4.0}, "material.a"),
    ({"q": 2.0}, "material.q"),
    ({"mu": 0.0}, "material.mu"),
    ({"lam": -1.0}, "material.lam"),
])
def test_material_validation(kw, field):
    with pytest.raises(ValidationError, match=field):
        MaterialParams(**kw)


def test_material_default_reg_weight():
    assert MaterialParams(q=5.0, a=4.0).w_reg == pytest.approx(0.2)


@pytest.mark.parametrize("kw, field", [
    ({"a0": 1.2}, "regularization.a0"),
    ({"a0": 0.0}, "regularization.a0"),
    ({"k0": 2}, "regularization.k0"),
    ({"h": -0.1}, "regularization.h"),
])
def test_regularization_validation(kw, field):
    with pytest.raises(ValidationError, match=field):
        RegularizationParams(**kw)
