import json
import math

import numpy as np
import pytest

from kamcocycle.diophantine import spectrum_is_dc
from kamcocycle.fourier import directional_derivative, eval_grid
from kamcocycle.resonance import (ResonanceRemovalError, check_shift_conditions,
                                  kappa_double_prime, reduction_of_eigenvalues,
                                  remove_resonances_iterated, remove_resonances_once)
from kamcocycle.spectral import LieGroupTag, default_grid, group_defect

ROTATION = np.array([[0.0, -math.pi], [math.pi, 0.0]])


def test_kappa_double_prime_formula():
    # n = 2: kappa / (2 (8 R^2 N)^tau)
    assert kappa_double_prime(0.1, 1.0, 2, 2.0, 4.0) == pytest.approx(0.1 / (2 * 8 * 4 * 4))
    assert kappa_double_prime(0.1, 2.0, 3, 1.0, 2.0) == pytest.approx(0.1 / (3 * 16 ** 2))


def test_single_pass_collapses_rotation_pair(golden2):
    alphas = np.array([1j * math.pi, -1j * math.pi])
    kappa1 = kappa_double_prime(golden2.kappa, golden2.tau, 2, 1.0, 4.0)
    shift = remove_resonances_once(alphas, 4.0, kappa1, golden2)
    assert shift.m_js[0] == -shift.m_js[1] and not shift.is_zero()
    shifted = alphas - 2j * math.pi * np.array([m.value @ golden2.vector for m in shift.m_js])
    np.testing.assert_allclose(shifted, 0, atol=1e-12)
    assert check_shift_conditions(alphas, shift, golden2, kappa1).all()
    payload = json.loads(shift.to_json())
    assert payload["lattice"] == "half_integer" and len(payload["m_js"]) == 2
    with pytest.raises(ValueError):
        remove_resonances_once(alphas, 4.0, 1.0, golden2)


def test_iterated_removal_needs_valid_orders(golden2):
    with pytest.raises(ValueError):
        remove_resonances_iterated(np.array([0.1j, -0.1j]), 0.5, 4.0, golden2)


def test_rotation_reduction_is_real_special_and_dc(golden2):
    group = LieGroupTag("SL_R", 2)
    res = reduction_of_eigenvalues(ROTATION, group, 2.0, 4.0, golden2)
    np.testing.assert_allclose(res.A_tilde, 0, atol=1e-12)
    assert res.sl2_dichotomy
    assert res.conditions.all()
    order = res.shift.search_order
    assert spectrum_is_dc(res.A_tilde, res.shift.kappa2, golden2.tau, order, golden2).holds
    Phi = res.phi.as_series()
    values = eval_grid(Phi, default_grid(2, 50))
    assert np.abs(values.imag).max() <= 1e-12
    np.testing.assert_allclose(np.linalg.det(values), 1.0, atol=1e-12)
    assert group_defect(Phi, group) <= 1e-10
    # half-integer exponents: the map lives on the double torus
    assert not res.phi.is_torus_periodic()
    pts = default_grid(2, 9)
    lhs = eval_grid(directional_derivative(Phi, golden2.vector), pts)
    rhs = eval_grid(ROTATION @ Phi - Phi @ res.A_tilde, pts)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_unitary_resonance_uses_integer_shift(golden2):
    gap = 2 * math.pi * (1 + golden2.omega[1])
    A = np.diag([0.3j + 1j * gap, 0.3j + 1e-5j])
    res = reduction_of_eigenvalues(A, LieGroupTag("U", 2), 2.0, 4.0, golden2)
    assert res.shift.lattice == "integer"
    assert res.phi.is_torus_periodic()
    np.testing.assert_allclose(np.sort(np.diag(res.A_tilde).imag), [0.3, 0.30001], atol=1e-12)
    assert res.group_defect <= 1e-12


def test_nonresonant_spectrum_is_left_alone(golden2):
    res = reduction_of_eigenvalues(np.diag([0.3j, -0.3j]), LieGroupTag("U", 2), 2.0, 4.0, golden2)
    assert res.shift.is_zero() and res.shift.rounds == 0
    np.testing.assert_allclose(res.A_tilde, np.diag([0.3j, -0.3j]))
    assert res.shift_norm == 0.0


def test_theoretical_mode_refuses_capped_search(golden2):
    with pytest.raises(ResonanceRemovalError):
        reduction_of_eigenvalues(ROTATION, LieGroupTag("SL_R", 2), 2.0, 4.0, golden2,
                                 practical=False, search_cap=5)
    capped = reduction_of_eigenvalues(ROTATION, LieGroupTag("SL_R", 2), 2.0, 4.0, golden2,
                                      practical=True, search_cap=5)
    assert capped.shift.capped
