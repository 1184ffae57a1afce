"""End-to-end acceptance checks, one recorded pass/fail line per criterion."""

import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from conftest import group_size, random_algebra_element, random_series
from kamcocycle.cli import FIXTURES, build_perturbation, load_config, main
from kamcocycle.diophantine import Frequency, spectrum_is_dc
from kamcocycle.fourier import TorusSeries, eval_grid, gevrey_mode_factor, truncate
from kamcocycle.homology import series_algebra_defect, solve_homological
from kamcocycle.kam import ScheduleParams, almost_reduce, schedules
from kamcocycle.resonance import reduction_of_eigenvalues
from kamcocycle.spectral import (GROUP_KINDS, LieGroupTag, default_grid, eigen_clusters,
                                 group_defect)
from kamcocycle.verify import (eigenvalue_drift_bound, floquet_monodromy, series_bounds_check,
                               spectral_set_distance)

EXACTNESS_FIXTURES = ("scalar_d1", "gl2C_generic", "u2_compact")
GOLDEN = Frequency((1.0, (math.sqrt(5) - 1) / 2), 0.1, 1.0)


def run_fixture(name, grid=64):
    cfg = load_config(name)
    F = build_perturbation(cfg)
    params = ScheduleParams.derive(cfg.freq, cfg.n, mode=cfg.mode, beta=cfg.beta, **cfg.params)
    start = time.perf_counter()
    run = almost_reduce(cfg.A, F, cfg.group, cfg.r, cfg.r_prime, cfg.target_eps, params, cfg.freq,
                        cfg.mode, cfg.step_budget, grid)
    return cfg, F, params, run, time.perf_counter() - start


@pytest.fixture(scope="module")
def fixture_runs():
    return {name: run_fixture(name) for name in FIXTURES}


def random_group_run(rng, kind, d=2):
    """A short practical run for ``kind`` with a random constant part and tiny perturbation."""
    group = LieGroupTag(kind, group_size(kind))
    A = random_algebra_element(rng, group)
    if group.is_real:
        A = A.real
    A = 0.5 * A / max(np.linalg.norm(A, 2), 1e-12)
    F = random_series(rng, group, d, 2, 1e-6, r=0.1)
    params = ScheduleParams.derive(GOLDEN, group.n)
    run = almost_reduce(A, F, group, 0.1, 0.099, 1e-18, params, GOLDEN, step_budget=6, grid=16)
    return group, A, F, params, run


@pytest.fixture(scope="module")
def group_runs():
    rng = np.random.default_rng(7)
    return {kind: random_group_run(rng, kind) for kind in GROUP_KINDS}


def test_criterion_01_conjugacy_exactness(fixture_runs, criterion):
    worst = 0.0
    ok = True
    for name in EXACTNESS_FIXTURES:
        cfg, _, _, run, _ = fixture_runs[name]
        limit = 1e-8 * (1 + np.linalg.norm(cfg.A, 2))
        ok &= len(run.states) > 1 and max(run.residual_log) <= limit
        worst = max(worst, max(run.residual_log) / limit)
    criterion(1, ok, f"worst residual / limit = {worst:.2e} on 64^d grids")


def test_criterion_02_contraction(fixture_runs, criterion):
    details, ok = [], True
    for name in EXACTNESS_FIXTURES:
        _, _, _, run, seconds = fixture_runs[name]
        start, final = run.norm_log[0], run.final.eps
        steps = run.contraction_steps(1.5)
        ok &= steps >= 3 and final < 1e-18 and start <= 1e-5 and seconds < 60
        details.append(f"{name}: {steps} steps, {start:.1e}->{final:.1e}, {seconds:.1f}s")
    criterion(2, ok, "; ".join(details))


def test_criterion_03_resonance_removal(fixture_runs, criterion):
    cfg, _, params, run, _ = fixture_runs["sl2_resonant"]
    np.testing.assert_allclose(cfg.A, [[0, -math.pi], [math.pi, 0]])
    # the first step works between r and the midpoint of its halving schedule
    r_mid = 0.5 * (cfg.r + cfg.r_prime)
    sched = schedules(cfg.r, r_mid + (cfg.r - r_mid) / 2, run.norm_log[0], params, cfg.mode)
    res = reduction_of_eigenvalues(cfg.A, cfg.group, sched.R, sched.N, cfg.freq, practical=True,
                                   search_cap=params.search_cap, budget=params.budget,
                                   kappa2=sched.kappa2)
    order = res.shift.search_order
    dc = spectrum_is_dc(res.A_tilde, res.shift.kappa2, cfg.freq.tau, order, cfg.freq).holds
    values = eval_grid(res.phi.as_series(), default_grid(cfg.d, 50))
    real_defect = float(np.abs(values.imag).max())
    det_defect = float(np.abs(np.linalg.det(values) - 1).max())
    first = run.states[1]
    size, allowed = np.linalg.norm(first.A, 2), sched.kappa2 + math.sqrt(run.norm_log[0])
    ok = (dc and real_defect <= 1e-10 and det_defect <= 1e-10 and size <= allowed
          and res.sl2_dichotomy)
    criterion(3, ok, f"DC at order {order:g}: {dc}, real {real_defect:.1e}, det {det_defect:.1e}, "
                     f"||A'|| = {size:.2e} <= {allowed:.2e}")


def test_criterion_04_homological_uniqueness(criterion):
    rng = np.random.default_rng(404)
    group = LieGroupTag("GL_C", 3)
    worst, done, tried = 0.0, 0, 0
    while done < 50:
        tried += 1
        N = float(rng.integers(1, 4))
        A = random_algebra_element(rng, group)
        if not spectrum_is_dc(A, 1e-3, GOLDEN.tau, N, GOLDEN).holds:
            continue
        F = random_series(rng, group, 2, int(N) + 1, 1e-2)
        dec = eigen_clusters(A, 1e-6)
        a = solve_homological(A, F, N, dec, GOLDEN, method="schur")
        b = solve_homological(A, F, N, dec, GOLDEN, method="dense")
        worst = max(worst, float(np.abs(a.X.coefs - b.X.coefs).max()) if len(a.X) else 0.0)
        done += 1
    criterion(4, worst <= 1e-9, f"max path difference {worst:.1e} over 50 certified instances "
                                f"({tried} drawn)")


def test_criterion_05_algebra_and_group(group_runs, criterion):
    rng = np.random.default_rng(505)
    details, ok = [], True
    for kind in GROUP_KINDS:
        group, A, F, params, run = group_runs[kind]
        dec = eigen_clusters(A, 1e-6)
        sol = solve_homological(A, random_series(rng, group, 2, 2, 1e-2), 2, dec, GOLDEN,
                                algebra=group)
        x_def = max(sol.algebra_defect, series_algebra_defect(sol.X, group))
        z_def = group_defect(run.Z, group)
        psi_def = max(group_defect(s.Psi, group) for s in run.states)
        ok &= len(run.states) > 1 and x_def <= 1e-9 and z_def <= 1e-7 and psi_def <= 1e-7
        details.append(f"{kind} {max(z_def, psi_def):.0e}")
    criterion(5, ok, "group defects: " + ", ".join(details))


def test_criterion_06_tail_bounds(criterion):
    rng = np.random.default_rng(606)
    worst_a = worst_g = worst_m = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        F = random_series(rng, LieGroupTag("GL_C", 2), d, int(rng.integers(2, 6)), 1.0, r=0.4)
        r_target = float(rng.uniform(0.05, 0.35))
        res = truncate(F, float(rng.integers(0, 4)), r_target)
        worst_a = max(worst_a, res.tail.value / res.lemma_bound)
    for _ in range(100):
        d = int(rng.integers(1, 3))
        beta = float(rng.uniform(1.7, 3.0))
        F = random_series(rng, LieGroupTag("GL_C", 2), d, int(rng.integers(2, 5)), 1.0,
                          r=0.4, beta=beta)
        res = truncate(F, float(rng.integers(0, 3)), float(rng.uniform(0.05, 0.35)))
        worst_g = max(worst_g, res.gevrey_tail.value / res.gevrey_lemma_bound)
    for _ in range(100):
        d = int(rng.integers(1, 4))
        m = rng.integers(-40, 41, size=d) / 2
        beta = float(rng.uniform(1.61, 4.0))
        r_p = float(rng.uniform(0.01, 0.5))
        size = np.abs(m).sum()
        bound = math.exp(beta * math.pi * r_p * d * size ** (1 / beta))
        worst_m = max(worst_m, gevrey_mode_factor(m, beta, r_p) / bound)
    ok = worst_a <= 1 and worst_g <= 1 and worst_m <= 1
    criterion(6, ok, f"tail/bound max: analytic {worst_a:.1e}, Gevrey {worst_g:.1e}, "
                     f"mode factor {worst_m:.2f}")


def test_criterion_07_appendix_lemmas(criterion):
    rng = np.random.default_rng(707)
    worst_gl = worst_compact = 0.0
    for _ in range(200):
        A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        F = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        report = eigenvalue_drift_bound(A, F / np.linalg.norm(F, 2), lam_samples=20)
        worst_gl = max(worst_gl, report.worst_ratio)
    for i in range(200):
        group = LieGroupTag("U" if i % 2 else "O", 3)
        A = random_algebra_element(rng, group)
        F = random_algebra_element(rng, group)
        if group.is_real:
            A, F = A.real, F.real
        report = eigenvalue_drift_bound(A, F / np.linalg.norm(F, 2), lam_samples=20)
        worst_compact = max(worst_compact, report.compact_worst_ratio)
    entire_ok = all(c.holds for a, lam in [(2.0, 0.5), (3.0, 0.9), (0.5, 2.0)]
                 for c in series_bounds_check(a, lam, [0.1, 1.0, 5.0]))
    ok = worst_gl <= 1 and worst_compact <= 1 + 1e-9 and entire_ok
    criterion(7, ok, f"drift ratio gl(3) {worst_gl:.2f}, u(3)/o(3) {worst_compact:.2f}, "
                     f"two-sided entire bounds {entire_ok}")


def test_criterion_08_periodicity_discipline(fixture_runs, group_runs, criterion):
    ok, details = True, []
    for name, (cfg, _, _, run, _) in fixture_runs.items():
        if cfg.group.is_real:
            ok &= run.periodicity_transitions() <= 1
        if name in ("gl2C_generic", "u2_compact", "sl2_resonant"):
            ok &= all(s.periodicity() == "torus" for s in run.states)
        details.append(f"{name} {run.periodicity_transitions()}")
    for kind, (group, _, _, _, run) in group_runs.items():
        if group.is_real:
            ok &= run.periodicity_transitions() <= 1
        else:
            ok &= all(s.periodicity() == "torus" for s in run.states)
    criterion(8, ok, "transitions: " + ", ".join(details))


def test_criterion_09_floquet_cross_validation(fixture_runs, criterion):
    ok, details = True, []
    for name, (cfg, F, _, run, _) in fixture_runs.items():
        if cfg.d != 1:
            continue
        original = TorusSeries.constant(cfg.A, 1) + F
        M, T = floquet_monodromy(original, cfg.freq, steps=6000)
        dist = spectral_set_distance(np.linalg.eigvals(M), np.linalg.eigvals(expm(run.final.A * T)))
        ok &= dist <= 1e-6
        details.append(f"{name} {dist:.1e}")
    criterion(9, ok and len(details) >= 2, "monodromy spectrum distance: " + ", ".join(details))


def test_criterion_10_determinism(tmp_path, criterion):
    ok = True
    for name in FIXTURES:
        outputs = []
        for tag in ("first", "second"):
            out = tmp_path / f"{name}_{tag}"
            ok &= main(["--config", name, "--out", str(out)]) == 0
            outputs.append((out / "run.csv").read_bytes())
        ok &= outputs[0] == outputs[1]
    criterion(10, ok, f"byte-identical run.csv on rerun for {len(FIXTURES)} fixtures")
