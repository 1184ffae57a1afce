import itertools

import numpy as np
import pytest

from kamcocycle.diophantine import Frequency
from kamcocycle.fourier import TorusSeries, analytic_norm
from kamcocycle.spectral import GROUP_KINDS, LieGroupTag


def group_size(kind):
    return 4 if kind == "Sp_R" else 2 if kind in ("SL2_C",) else 3


def random_algebra_element(rng, group):
    raw = rng.standard_normal((group.n, group.n)) + 1j * rng.standard_normal((group.n, group.n))
    return group.project_algebra(raw)


def random_series(rng, group, d, degree, amplitude, r=0.1, beta=None):
    """Trigonometric polynomial with values in the algebra, scaled in the strip norm at ``r``."""
    modes = {}
    for m in itertools.product(range(-degree, degree + 1), repeat=d):
        size = sum(abs(x) for x in m)
        mirror = tuple(-x for x in m)
        if size == 0 or size > degree or mirror in modes:
            continue
        raw = rng.standard_normal((group.n, group.n)) + 1j * rng.standard_normal((group.n, group.n))
        if group.kind == "U":
            # skew-hermitian values need F(-m) = -F(m)^*
            modes[m], modes[mirror] = raw, -raw.conj().T
        elif group.is_real:
            coef = group.project_algebra(raw.real) + 1j * group.project_algebra(raw.imag)
            modes[m], modes[mirror] = coef, np.conj(coef)
        else:
            modes[m] = group.project_algebra(raw)
            raw2 = rng.standard_normal((group.n, group.n)) + 1j * rng.standard_normal((group.n, group.n))
            modes[mirror] = group.project_algebra(raw2)
    F = TorusSeries.from_modes(modes, n=group.n, d=d, declared_r=r, beta=beta, real=group.is_real)
    return F.scale(amplitude / analytic_norm(F, r).value)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def golden2():
    return Frequency.named("golden2", 0.1, 1.0)


@pytest.fixture
def golden1():
    return Frequency.named("golden1", 0.1, 1.0)


@pytest.fixture(params=GROUP_KINDS)
def any_group(request):
    kind = request.param
    return LieGroupTag(kind, group_size(kind))


# acceptance lines are collected here and echoed in the terminal summary
def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record
