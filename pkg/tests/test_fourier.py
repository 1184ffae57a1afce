import math

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.special import i0

from kamcocycle.fourier import (HalfIndex, SeriesDivergenceError, TorusSeries, analytic_norm,
                                directional_derivative, eval_grid, eval_series, exp_series,
                                gevrey_entire_sum, gevrey_mode_factor, gevrey_norm, multiply,
                                prune, truncate)
from kamcocycle.verify import torus_grid


def decaying_series(rng, d, degree, n=2, rate=1.0, half=False, beta=None, r=0.3):
    modes = {}
    step = 0.5 if half else 1.0
    grid = np.arange(-degree, degree + step / 2, step)
    for m in np.array(np.meshgrid(*[grid] * d)).reshape(d, -1).T:
        size = np.abs(m).sum()
        if size > degree:
            continue
        coef = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        modes[tuple(m)] = coef * math.exp(-rate * size)
    return TorusSeries.from_modes(modes, n=n, d=d, declared_r=r, beta=beta)


def test_half_index_roundtrip():
    m = HalfIndex.from_value((0.5, -1.0, 2.5))
    assert m.doubled == (1, -2, 5)
    np.testing.assert_allclose(m.value, [0.5, -1.0, 2.5])
    assert m.norm == 4.0
    assert not m.is_integer
    assert HalfIndex.from_value((1, -3)).is_integer
    with pytest.raises(ValueError):
        HalfIndex.from_value((0.25,))


def test_product_matches_pointwise(rng):
    F = decaying_series(rng, 2, 3, half=True)
    G = decaying_series(rng, 2, 2)
    pts = torus_grid(2, 7)
    np.testing.assert_allclose(eval_grid(multiply(F, G), pts),
                               eval_grid(F, pts) @ eval_grid(G, pts), atol=1e-12)
    fast = multiply(F, G, deterministic=False)
    np.testing.assert_allclose(eval_grid(fast, pts), eval_grid(F, pts) @ eval_grid(G, pts),
                               atol=1e-11)


def test_derivative_matches_finite_difference(rng):
    F = decaying_series(rng, 2, 3, half=True)
    omega = np.array([1.0, (math.sqrt(5) - 1) / 2])
    theta = np.array([0.3, 1.1])
    h = 1e-5
    fd = (eval_series(F, theta + h * omega) - eval_series(F, theta - h * omega)) / (2 * h)
    np.testing.assert_allclose(eval_series(directional_derivative(F, omega), theta), fd,
                               atol=1e-7)


def test_single_mode_norm_is_exact_and_dominates_sup(rng):
    coef = np.array([[1.0, 2.0], [0.0, 1.0]])
    F = TorusSeries.from_modes({(1.5, -1.0): coef}, declared_r=0.2)
    bound = analytic_norm(F, 0.2)
    assert bound.kind == "exact"
    np.testing.assert_allclose(bound.value, np.linalg.norm(coef, 2) * math.exp(2 * math.pi * 2.5 * 0.2))

    G = decaying_series(rng, 1, 4)
    # the strip supremum is reached on the boundary lines Im theta = +-r
    r = 0.15
    xs = np.linspace(0, 2, 400)
    worst = 0.0
    for sign in (1, -1):
        phases = np.exp(1j * np.pi * np.outer(xs + 1j * sign * r, G.keys[:, 0]))
        vals = np.einsum("pk,kij->pij", phases, G.coefs)
        worst = max(worst, np.linalg.norm(vals, 2, axis=(1, 2)).max())
    assert worst <= analytic_norm(G, r).value * (1 + 1e-12)


def test_norms_are_monotone_in_width(rng):
    F = decaying_series(rng, 2, 3, half=True, beta=2.0)
    widths = [0.0, 0.05, 0.1, 0.2]
    analytic = [analytic_norm(F, w).value for w in widths]
    gevrey = [gevrey_norm(F, 2.0, w).value for w in widths]
    assert np.all(np.diff(analytic) > 0)
    assert np.all(np.diff(gevrey) > 0)
    np.testing.assert_allclose(analytic[0], gevrey[0])


def test_gevrey_entire_sum_against_bessel():
    # sum 1/k!^2 = I0(2)
    np.testing.assert_allclose(gevrey_entire_sum(1.0, 2.0), i0(2.0), rtol=1e-14)
    np.testing.assert_allclose(gevrey_entire_sum(3.7, 1.0), math.exp(3.7), rtol=1e-13)


def test_gevrey_mode_factor_product_form():
    expected = gevrey_entire_sum(0.2 ** 2 * 2 * math.pi * 1.5, 2.0) * gevrey_entire_sum(0.2 ** 2 * 2 * math.pi, 2.0)
    np.testing.assert_allclose(gevrey_mode_factor((1.5, -1), 2.0, 0.2), expected)
    assert gevrey_mode_factor((0, 0), 3.0, 0.4) == 1.0


def test_truncation_tail_is_exact_and_below_bound(rng):
    F = decaying_series(rng, 2, 6, half=True, rate=0.5, r=0.4)
    res = truncate(F, 3, 0.3)
    assert res.series.max_index_norm() <= 3
    dropped = F - res.series
    assert dropped.index_norms().min() > 3
    np.testing.assert_allclose(res.tail.value, analytic_norm(dropped, 0.3).value)
    assert res.tail.value <= res.lemma_bound
    with pytest.raises(ValueError):
        truncate(F, 3, 0.5)


def test_gevrey_truncation_reports_both_tails(rng):
    F = decaying_series(rng, 1, 8, half=True, beta=2.0, r=0.4)
    res = truncate(F, 2, 0.2)
    assert res.gevrey_tail is not None
    assert res.gevrey_tail.value <= res.gevrey_lemma_bound


def test_prune_keeps_mirror_pairs():
    big, small = np.eye(2), 1e-12 * np.eye(2)
    F = TorusSeries.from_modes({(1,): big, (-1,): big, (2,): small, (-2,): small}, real=True)
    kept, mass = prune(F, 0.1, 1e-9)
    assert len(kept) == 2 and mass > 0
    lopsided = TorusSeries.from_modes({(1,): big, (-1,): small}, real=True)
    kept, _ = prune(lopsided, 0.1, 1e-9)
    assert len(kept) == 2


def test_exponential_pair_is_inverse(rng):
    X = decaying_series(rng, 2, 2, half=True, r=0.1)
    X = X.scale(0.05 / analytic_norm(X, 0.1).value)
    pair = exp_series(X, tol=1e-14, r=0.1)
    product = multiply(pair.forward, pair.inverse) - np.eye(2)
    assert analytic_norm(product, 0.1).value <= 2e-14 + 1e-15
    theta = np.array([0.4, 1.3])
    np.testing.assert_allclose(eval_series(pair.forward, theta), expm(eval_series(X, theta)),
                               atol=1e-13)
    with pytest.raises(SeriesDivergenceError):
        exp_series(X.scale(1e4), tol=1e-10)


def test_text_roundtrip_is_exact(rng):
    F = decaying_series(rng, 2, 2, half=True, beta=1.5, r=0.25)
    G = TorusSeries.from_text(F.to_text())
    np.testing.assert_array_equal(G.keys, F.keys)
    np.testing.assert_array_equal(G.coefs, F.coefs)
    assert G.regularity == F.regularity and G.declared_r == F.declared_r
    with pytest.raises(ValueError):
        TorusSeries.from_text("nonsense\n")


def test_periodicity_class_tolerance():
    base = TorusSeries.from_modes({(1, 0): np.eye(2), (0.5, 0): 1e-14 * np.eye(2)})
    assert base.periodicity_class() == "double_torus"
    assert base.periodicity_class(tol=1e-12) == "torus"
    assert TorusSeries.from_modes({(2, -1): np.eye(2)}).is_torus_periodic()


def test_reality_defect(rng):
    coef = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    F = TorusSeries.from_modes({(1,): coef, (-1,): coef.conj()})
    assert F.reality_defect() == 0.0
    vals = eval_grid(F, torus_grid(1, 9))
    assert np.abs(vals.imag).max() < 1e-14
    G = TorusSeries.from_modes({(1,): coef})
    assert G.reality_defect() > 0
