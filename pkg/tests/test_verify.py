import json
import math

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.special import i0

from conftest import random_algebra_element
from kamcocycle.fourier import HalfIndex, TorusSeries, directional_derivative
from kamcocycle.spectral import LieGroupTag, TrivialMap, eigen_clusters
from kamcocycle.verify import (ResidualReport, cocycle_integrate, conjugacy_residual,
                               eigenvalue_drift_bound, entire_sum, floquet_exponents,
                               floquet_monodromy, npp_check, series_bounds_check,
                               spectral_set_distance, torus_grid, trajectory_defect)

OMEGA = np.array([(math.sqrt(5) - 1) / 2])


def rotating_frame():
    """Half-turn rotation Z(theta) on the double circle, as a series."""
    plus = 0.5 * np.array([[1, 1j], [-1j, 1]])
    minus = 0.5 * np.array([[1, -1j], [1j, 1]])
    # cos(pi theta) I + sin(pi theta) J with J the quarter turn
    return TorusSeries.from_modes({(0.5,): plus, (-0.5,): minus}, real=True)


def conjugated_system(B):
    """``A = d_omega Z Z^-1 + Z B Z^-1`` so that ``Z`` reduces ``A`` to ``B``."""
    Z = rotating_frame()
    Z_inv = Z.conj_transpose()
    return (directional_derivative(Z, OMEGA) @ Z_inv) + (Z @ B @ Z_inv), Z


def test_grid_layout():
    pts = torus_grid(2, 4)
    assert pts.shape == (16, 2)
    assert pts.max() == 1.5 and pts.min() == 0.0
    assert torus_grid(1, 4, double=False).max() == 0.75


def test_constant_cocycle_is_matrix_exponential(rng):
    B = rng.standard_normal((3, 3))
    A = TorusSeries.constant(B, 1)
    np.testing.assert_allclose(cocycle_integrate(A, [0.2], 1.5, 400, OMEGA), expm(1.5 * B),
                               rtol=1e-9)
    with pytest.raises(ValueError):
        cocycle_integrate(A, [0.0], 1.0, 0, OMEGA)


def test_integrator_is_fourth_order():
    A, _ = conjugated_system(np.array([[0.1, 1.0], [-1.0, 0.0]]))
    exact = cocycle_integrate(A, [0.3], 2.0, 4000, OMEGA)
    errors = [np.abs(cocycle_integrate(A, [0.3], 2.0, s, OMEGA) - exact).max() for s in (20, 40)]
    order = math.log2(errors[0] / errors[1])
    assert 3.7 < order < 4.3


def test_cocycle_property():
    A, _ = conjugated_system(np.array([[0.0, 0.7], [-0.3, 0.0]]))
    theta, t, s = np.array([0.4]), 0.8, 1.1
    whole = cocycle_integrate(A, theta, t + s, 2000, OMEGA)
    first = cocycle_integrate(A, theta, t, 1000, OMEGA)
    second = cocycle_integrate(A, theta + t * OMEGA, s, 1000, OMEGA)
    np.testing.assert_allclose(whole, second @ first, atol=1e-10)


def test_floquet_recovers_reducible_constant():
    B = np.array([[0.2, 0.5], [-0.5, -0.1]])
    A, _ = conjugated_system(B)
    M, period = floquet_monodromy(A, OMEGA, steps=3000)
    np.testing.assert_allclose(period, 2 / OMEGA[0])
    # Z has period 2, so the monodromy is exp(B T) up to conjugation
    expected = np.linalg.eigvals(expm(B * period))
    assert spectral_set_distance(np.linalg.eigvals(M), expected) <= 1e-9
    B_rec, _ = floquet_exponents(A, OMEGA, steps=3000)
    assert spectral_set_distance(np.linalg.eigvals(B_rec), np.linalg.eigvals(B)) <= 1e-9
    with pytest.raises(ValueError):
        floquet_monodromy(TorusSeries.zero(2, 2), np.array([1.0, 0.5]))


def test_residual_separates_exact_and_corrupted_conjugacy():
    B = np.array([[0.2, 0.5], [-0.5, -0.1]])
    A, Z = conjugated_system(B)
    Bs = TorusSeries.constant(B, 1)
    exact = conjugacy_residual(A, Z, Bs, 64, OMEGA, relative_to=2.0)
    assert exact.sup_residual <= 1e-13 and exact.relative == exact.sup_residual / 2
    assert json.loads(exact.to_json())["grid_points"] == 64
    bump = TorusSeries.from_modes({(1,): 1e-3 * np.eye(2), (-1,): 1e-3 * np.eye(2)}, real=True)
    corrupted = conjugacy_residual(A, Z + bump, Bs, 64, OMEGA)
    assert corrupted.sup_residual >= 1e-4
    assert isinstance(corrupted, ResidualReport)


def test_trajectories_follow_the_conjugacy():
    B = np.array([[0.0, 0.4], [-0.4, 0.0]])
    A, Z = conjugated_system(B)
    defect = trajectory_defect(A, TorusSeries.constant(B, 1), Z, OMEGA, np.array([[0.1], [1.3]]),
                               T=5.0, samples=5)
    assert defect <= 1e-8


def test_nice_periodicity_check(golden2):
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    dec = eigen_clusters(A, 0.1)
    # one subspace moves by a half index, so the cross blocks change periodicity
    phi = TrivialMap(dec, {dec.labels[0]: HalfIndex((1, 0))}, 2)
    G = TorusSeries.from_modes({(1, 0): np.array([[0.0, 1e-3], [2e-3, 0.0]]),
                                (-1, 0): np.array([[0.0, 1e-3], [2e-3, 0.0]])})
    F = phi.as_series() @ G @ phi.inverse().as_series()
    assert not F.is_torus_periodic(1e-14)
    assert npp_check(F, phi)
    assert not npp_check(F, phi.compose(phi))
    assert npp_check(TorusSeries.zero(2, 2), phi)


def test_eigenvalue_drift_general_and_compact(rng):
    worst = 0.0
    for _ in range(20):
        A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        F = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        report = eigenvalue_drift_bound(A, F / np.linalg.norm(F, 2), lam_samples=40)
        worst = max(worst, report.worst_ratio)
        assert report.compact_worst_ratio is None
    assert worst <= 1.0
    u3 = LieGroupTag("U", 3)
    for _ in range(20):
        A = random_algebra_element(rng, u3)
        F = random_algebra_element(rng, u3)
        report = eigenvalue_drift_bound(A, F / np.linalg.norm(F, 2), lam_samples=40)
        assert report.compact_worst_ratio <= 1.0 + 1e-9
    with pytest.raises(ValueError):
        eigenvalue_drift_bound(np.eye(2), 3 * np.eye(2))


def test_entire_sums_against_closed_forms():
    np.testing.assert_allclose(entire_sum(2.0, 1.0), i0(2.0), rtol=1e-14)
    np.testing.assert_allclose(entire_sum(1.0, 4.0), math.exp(4.0), rtol=1e-13)
    assert entire_sum(3.0, 0.0) == 1.0


@pytest.mark.parametrize("a,lam", [(2.0, 0.5), (3.0, 0.9), (0.5, 2.0)])
def test_two_sided_entire_bounds(a, lam):
    checks = series_bounds_check(a, lam, [0.1, 1.0, 5.0])
    assert all(c.holds for c in checks)
    assert all(c.lower <= c.upper for c in checks)


def test_entire_bound_argument_checks():
    with pytest.raises(ValueError):
        series_bounds_check(2.0, 1.5, [1.0])
    with pytest.raises(ValueError):
        series_bounds_check(0.5, 0.5, [1.0])
    with pytest.raises(ValueError):
        series_bounds_check(1.0, 0.5, [1.0])
