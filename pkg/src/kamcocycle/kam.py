"""The KAM scheme: schedules, inductive steps, the two-phase step and the driver.

All perturbations are carried as exact Fourier series.  The only places where
information is thrown away are truncations whose dropped mass is logged:
modes that are too small to be worth solving stay in the perturbation, and
the new perturbation is pruned below ``prune_out * eps^2`` at the output strip.

Conventions
-----------
The state after step ``k`` holds a constant ``A_k``, series ``Abar_k`` and
``Fbar_k``, and a reducing map ``Psi_k`` with
``d_omega Psi_k = Abar_k Psi_k - Psi_k A_k``.  The accumulated conjugation
``Z`` satisfies ``d_omega Z = (A + F) Z - Z (Abar_k + Fbar_k)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from . import __version__
from .diophantine import DEFAULT_BUDGET, Frequency, spectrum_is_dc
from .fourier import (SeriesDivergenceError, TorusSeries, _taylor_order, analytic_norm,
                      gevrey_mode_factor, gevrey_norm, multiply, prune)
from .homology import HomologicalSolution, homology_constants, solve_homological
from .resonance import ReductionResult, kappa_double_prime, reduction_of_eigenvalues
from .spectral import (CoarseningError, Decomposition, LieGroupTag, TrivialMap,
                       coarsen_decomposition, eigen_clusters, group_defect)
from .verify import conjugacy_residual, npp_check

MODES = ("theoretical", "practical")
PERIODICITY_TOL = 1e-12


class PreconditionError(ValueError):
    """An input violates a hypothesis of the step it was given to."""


class ContractionError(RuntimeError):
    """A step did not contract as required; the step is rejected, never retried."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# -- constants -------------------------------------------------------------------------------

def persistence_constant(k: float) -> float:
    """Largest ``x`` with ``y^(1/2) |log y|^k <= 1`` for every ``0 < y <= x``.

    With ``t = -log y`` the condition reads ``k log t <= t / 2``.  When
    ``2k <= e`` it holds for every ``t``; otherwise ``x = exp(-t*)`` with
    ``t*`` the largest root of ``k log t = t / 2``.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if 2 * k <= math.e:
        return 1.0
    g = lambda t: k * math.log(t) - t / 2.0
    hi = 4 * k
    while g(hi) > 0:
        hi *= 2
    return math.exp(-brentq(g, 2 * k, hi, xtol=1e-14, rtol=1e-15))


@dataclass(frozen=True)
class ScheduleParams:
    """Every constant of the scheme, derived once and overridable.

    ``C_prime`` is the homological estimate constant and ``C_tilde = min(1,
    1 / C_prime)`` the smallness constant that appears in the step bounds.
    Caps and the pruning knobs only act in practical mode.
    """

    kappa: float
    tau: float
    n: int
    d: int
    gamma0: float
    C0: float
    C_prime: float
    C_tilde: float
    C_dprime: float
    D: float
    D1: float
    D3: float
    D5: float
    D7: float
    D8: float
    contraction_exponent: float = 1.5
    eps_power: float = 100.0
    N_max: float = 40.0
    R_max: float = 2.0
    modes_max: int = 20_000
    mode: str = "practical"
    beta: float | None = None
    inner_max: int = 8
    search_cap: float = 400.0
    budget: int = DEFAULT_BUDGET
    prune_rel: float = 1e-6
    prune_out: float = 1e-9
    safety: float = 0.5
    practical_eps0: float = 1e-3
    check_grid: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("kappa", "tau", "gamma0", "C0", "C_prime", "C_tilde", "C_dprime", "D",
                     "D3", "D5", "D7", "N_max", "R_max", "modes_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta is not None and not self.beta > 1:
            raise ValueError("Gevrey exponent must exceed 1")

    @classmethod
    def derive(cls, freq: Frequency, n: int, mode: str = "practical",
               beta: float | None = None, **overrides) -> "ScheduleParams":
        tau = freq.tau
        gamma0 = overrides.pop("gamma0", n * (n + 1))
        C_prime, D = homology_constants(n, freq.d, tau)
        D1 = D
        D3 = math.ceil(max(96 * n * (n + 1), 64 * n * (n * (n - 1) + 2) * tau,
                           2 * D1 * gamma0) / gamma0)
        D5 = 2 * D3
        D7 = 4 * gamma0 * D5 + 1
        values = dict(kappa=freq.kappa, tau=tau, n=n, d=freq.d, gamma0=gamma0, C0=8.0,
                      C_prime=C_prime, C_tilde=min(1.0, 1.0 / C_prime),
                      C_dprime=persistence_constant(n * tau) / (16 * n) ** (2 * n),
                      D=D, D1=D1, D3=D3, D5=D5, D7=D7, D8=D7 + D, mode=mode, beta=beta)
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- norms -------------------------------------------------------------------------------------

def series_norm(F: TorusSeries, r: float, beta: float | None = None) -> float:
    """Analytic strip norm, or the Gevrey norm when ``beta`` is given."""
    if beta is None:
        return analytic_norm(F, r).value
    return gevrey_norm(F, beta, r).value if len(F) else 0.0


def _weighted_sizes(F: TorusSeries, r: float, beta: float | None) -> np.ndarray:
    if beta is None:
        return F.mode_norms() * np.exp(2 * np.pi * F.index_norms() * r)
    return F.mode_norms() * np.array([gevrey_mode_factor(k / 2.0, beta, r) for k in F.keys])


def _select(F: TorusSeries, mask: np.ndarray) -> TorusSeries:
    return F._like(F.keys[mask], F.coefs[mask])


def _identity(n: int, d: int, r: float, beta=None) -> TorusSeries:
    return TorusSeries.constant(np.eye(n), d, r, beta, real=True)


# -- schedules -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    N: float
    R: float
    kappa2: float
    capped: bool
    N_formula: float
    R_formula: float


def schedules(r: float, r_prime: float, eps: float, params: ScheduleParams,
              mode: str | None = None) -> Schedule:
    """``N = |log eps| / (2 pi r)`` (to the power ``beta`` for Gevrey), ``R`` and ``kappa''``.

    ``R = 80^4 (n(n-1)/2 + 1)^2 / (r - r')^8``.  Practical mode caps ``N`` at
    ``N_max`` and ``R`` at ``R_max``; both modes keep ``N >= 2``, the least
    order at which resonances are searched.
    """
    mode = params.mode if mode is None else mode
    if not 0 < r_prime < r <= 0.5:
        raise PreconditionError("need 0 < r' < r <= 1/2")
    if not 0 < eps < 1:
        raise PreconditionError("need 0 < eps < 1")
    n = params.n
    N = abs(math.log(eps)) / (2 * math.pi * r)
    if params.beta is not None:
        N = N ** params.beta
    R = 80.0 ** 4 * (0.5 * n * (n - 1) + 1) ** 2 / (r - r_prime) ** 8
    N_used, R_used, capped = max(N, 2.0), R, False
    if mode == "practical":
        if N_used > params.N_max:
            N_used, capped = float(params.N_max), True
        if R_used > params.R_max:
            R_used, capped = float(params.R_max), True
    kappa2 = kappa_double_prime(params.kappa, params.tau, n, R_used, N_used)
    return Schedule(N_used, R_used, kappa2, capped, N, R)


# -- persistence of a Diophantine spectrum ---------------------------------------------------------

@dataclass(frozen=True)
class PersistenceReport:
    holds: bool
    cond1: bool
    cond2: bool
    direct: bool
    threshold: float
    margin: float  # log(threshold / eps), +inf when eps = 0


def spectrum_persistence(A_tilde, eps_tilde: float, N_tilde: float, kappa_p: float, C: float,
                         group: LieGroupTag, freq: Frequency) -> PersistenceReport:
    """Whether ``A_tilde + E`` keeps a ``(3 kappa'/4)`` Diophantine spectrum for ``||E|| <= eps``.

    The compact groups use the threshold ``c (C^tau kappa' / 8)^2`` with
    ``c = persistence_constant(tau)``; the others
    ``c (C^tau kappa' / (16 n (1 + ||A||)))^(2n)`` with ``c`` at ``n tau``.
    """
    A = np.asarray(A_tilde, dtype=complex)
    n, tau = A.shape[0], freq.tau
    if eps_tilde == 0:
        return PersistenceReport(True, True, True, True, math.inf, math.inf)
    if group.compact:
        c = persistence_constant(tau)
        threshold = c * min(1.0, (C ** tau * kappa_p / 8.0) ** 2)
        direct = 2 * eps_tilde * N_tilde ** tau <= kappa_p / 4
    else:
        normA = float(np.linalg.norm(A, 2))
        c = persistence_constant(n * tau)
        threshold = c * min(1.0, (C ** tau * kappa_p / (16 * n * (1 + normA))) ** (2 * n))
        direct = 4 * n * N_tilde ** tau * (normA + 1) * eps_tilde ** (1.0 / n) <= kappa_p / 4
    cond1 = eps_tilde <= threshold
    cond2 = N_tilde <= abs(math.log(eps_tilde)) / C
    margin = math.log(threshold) - math.log(eps_tilde) if threshold > 0 else -math.inf
    return PersistenceReport(cond1 and cond2, cond1, cond2, direct, threshold, margin)


# -- one step without reduction -----------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    holds: bool
    measured: float
    bound: float

    def to_dict(self) -> dict:
        return {"holds": bool(self.holds), "measured": self.measured, "bound": self.bound}


def _cert(measured: float, bound: float, slack: float = 1e-12) -> Certificate:
    return Certificate(bool(measured <= bound * (1 + slack)), float(measured), float(bound))


@dataclass(frozen=True)
class InductiveResult:
    X: TorusSeries
    A_new: np.ndarray
    F_new: TorusSeries
    dec_new: Decomposition | None
    Em1: TorusSeries       # exp(X) - Id, summed without forming Id
    Eim1: TorusSeries      # exp(-X) - Id
    eps_in: float
    eps_out: float
    taylor_order: int
    unsolved_norm: float
    pruned_mass: float
    solution: HomologicalSolution | None
    certificates: dict


def inductive_step(A_tilde, F_tilde: TorusSeries, dec: Decomposition, phi: TrivialMap | None,
                   params: ScheduleParams, r: float, r_prime: float, kappa_p: float,
                   N_tilde: float, C: float, group: LieGroupTag, freq: Frequency,
                   mode: str | None = None, check_grid: int | None = None) -> InductiveResult:
    """Conjugate ``A_tilde + F_tilde`` by ``exp(X)`` to ``A' + F'`` with ``A' = A_tilde + mean``.

    ``X`` solves the homological equation for the modes ``0 < |m| <= N_tilde``
    whose weighted size reaches ``prune_rel * eps^2``.  With ``H`` those modes,
    ``tail`` the rest of the non-mean part, ``E = Id + Em1`` and
    ``E^-1 = Id + Eim1``, the new perturbation is

        F' = tail + Eim1 tail + F Em1 + Eim1 F Em1 + Eim1 F(0) - S - Eim1 S

    where ``S = sum_{k>=2} T_k / k!`` with ``T_1 = H`` and
    ``T_{k+1} = X T_k + H X^k``.  This is exact for the truncated exponential
    since ``d_omega E = [A_tilde, E] + H + S``.
    """
    mode = params.mode if mode is None else mode
    beta = params.beta
    A = np.asarray(A_tilde, dtype=complex)
    n, d = A.shape[0], F_tilde.d
    eps = series_norm(F_tilde, r, beta)
    mean = F_tilde.mean()
    if group.is_real and np.abs(mean.imag).max() <= 1e-12 * (1 + np.abs(mean).max()):
        mean = mean.real.astype(complex)
    A_new = A + mean
    zero = TorusSeries.zero(n, d, r_prime, beta, F_tilde.real)
    certs: dict = {}
    if eps == 0:
        return InductiveResult(zero, A, zero, dec, zero, zero, 0.0, 0.0, 0, 0.0, 0.0, None, certs)

    # hypotheses
    dc = spectrum_is_dc(A, kappa_p, params.tau, N_tilde, freq, params.budget, params.search_cap,
                        integer_only=group.integer_lattice_only)
    persist = spectrum_persistence(A, float(np.linalg.norm(mean, 2)), N_tilde, kappa_p, C, group, freq)
    certs["dc_input"] = Certificate(dc.holds, dc.worst_margin, 0.0)
    certs["persistence"] = Certificate(persist.holds, float(np.linalg.norm(mean, 2)), persist.threshold)
    certs["order_condition"] = _cert(N_tilde, abs(math.log(eps)) / C if eps < 1 else 0.0)
    if phi is not None:
        certs["nice_periodicity"] = Certificate(npp_check(F_tilde, phi), 0.0, 0.0)
    if mode == "theoretical":
        failed = [k for k, c in certs.items() if not c.holds]
        if failed:
            raise PreconditionError(f"inductive step hypotheses fail: {', '.join(failed)}")
    elif not dc.holds:
        raise PreconditionError(f"constant part is not Diophantine: {dc.summary()}")

    # split into mean, solved modes and tail
    norms = F_tilde.index_norms()
    weighted = _weighted_sizes(F_tilde, r, beta)
    nonzero = norms > 0
    solve = nonzero & (norms <= N_tilde + 1e-12) & (weighted >= params.prune_rel * eps * eps)
    H = _select(F_tilde, solve)
    tail = _select(F_tilde, nonzero & ~solve)
    unsolved = series_norm(tail, r_prime, beta)

    sol = solve_homological(A, H, N_tilde, dec, freq, algebra=group, beta=beta, kappa1=kappa_p,
                            safety=params.safety)
    X = sol.X.with_meta(declared_r=r_prime)

    # exponential pieces, never subtracting the identity
    nu = series_norm(X, r, beta)
    if nu >= 5.0:
        raise SeriesDivergenceError(f"exponential argument has norm {nu:.3g}; step size invalid")
    target = params.prune_out * eps * eps * 1e-3 / max(eps, 1e-300)
    order = max(2, _taylor_order(nu, max(target, 1e-300)) if nu > 0 else 2)
    power = X                      # X^k / k!
    Em1, Eim1 = X, -X
    U = H                          # T_k / k!
    S = TorusSeries.zero(n, d, r_prime, beta, X.real)
    for k in range(2, order + 1):
        U = (multiply(X, U) + multiply(H, power)).scale(1.0 / k)
        power = multiply(power, X).scale(1.0 / k)
        Em1 = Em1 + power
        Eim1 = Eim1 + (power if k % 2 == 0 else -power)
        S = S + U
        if len(power) > params.modes_max:
            raise ContractionError(f"exponential support exceeds {params.modes_max} modes",
                                   {"order": k, "modes": len(power)})

    F_new = (tail + multiply(Eim1, tail) + multiply(F_tilde, Em1)
             + multiply(multiply(Eim1, F_tilde), Em1) + (Eim1 @ mean) - S - multiply(Eim1, S))
    F_new, pruned = prune(F_new.with_meta(declared_r=r_prime), r_prime,
                          params.prune_out * eps * eps)
    if len(F_new) > params.modes_max:
        raise ContractionError(f"perturbation support exceeds {params.modes_max} modes",
                               {"modes": len(F_new)})
    eps_out = series_norm(F_new, r_prime, beta)

    # conclusions
    certs["mean_shift"] = _cert(float(np.linalg.norm(A_new - A, 2)), eps)
    dc_out = spectrum_is_dc(A_new, 0.75 * kappa_p, params.tau, N_tilde, freq, params.budget,
                            params.search_cap, integer_only=group.integer_lattice_only)
    certs["dc_output"] = Certificate(dc_out.holds, dc_out.worst_margin, 0.0)
    try:
        dec_new = coarsen_decomposition(F_new, A, A_new, dec)
        certs["coarsening"] = Certificate(True, 0.0, 0.0)
    except CoarseningError:
        dec_new = None
        certs["coarsening"] = Certificate(False, 1.0, 0.0)
    grid = params.check_grid if check_grid is None else check_grid
    if grid:
        E = _identity(n, d, r_prime, beta) + Em1
        lhs = TorusSeries.constant(A, d, r, beta) + F_tilde
        rhs = TorusSeries.constant(A_new, d, r_prime, beta) + F_new
        res = conjugacy_residual(lhs, E, rhs, grid, freq).sup_residual
        certs["conjugacy"] = _cert(res, 1e-8 * (1 + np.linalg.norm(A, 2)) + pruned)
    return InductiveResult(X, A_new, F_new, dec_new, Em1, Eim1, eps, eps_out, order,
                           unsolved, pruned, sol, certs)


# -- the full step -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class StepOutput:
    Zm1: TorusSeries          # Z' - Id
    Zim1: TorusSeries         # Z'^-1 - Id
    Abar: TorusSeries
    Fbar: TorusSeries
    Psi: TorusSeries
    Psi_inv: TorusSeries
    A: np.ndarray
    eps: float
    eps_target: float
    eps_in: float
    resonance_flag: bool
    Nbar: float
    kappa2: float
    schedule: Schedule
    inner_steps: int
    inner_norms: tuple
    pruned_mass: float
    reduction: ReductionResult | None
    sl2_dichotomy: bool | None
    certificates: dict


def _log_bound_A(normA: float, eps: float, r: float, r_prime: float, D3: float) -> float:
    """Log of ``||A|| + |log eps| (1 / (r - r'))^D3``."""
    return float(np.logaddexp(math.log(normA) if normA > 0 else -math.inf,
                              math.log(abs(math.log(eps))) - D3 * math.log(r - r_prime)))


def full_step(A, Abar: TorusSeries, Fbar: TorusSeries, Psi: TorusSeries, Psi_inv: TorusSeries,
              r: float, r_dd: float, gamma: float, params: ScheduleParams, group: LieGroupTag,
              freq: Frequency, mode: str | None = None) -> StepOutput:
    """One step of the scheme: remove resonances, then iterate steps without reduction.

    Works in the frame of ``Psi``: ``G = Psi^-1 Fbar Psi`` perturbs the constant
    ``A``.  The trivial map ``Phi`` of the reduction and the exponentials of the
    inner steps conjugate ``A + G`` to ``A' + F'``; with ``Psi' = Psi Phi`` the
    outputs are ``Fbar' = Psi' F' Psi'^-1``, ``Abar' = Abar + Psi' (A' - A_tilde) Psi'^-1``
    and ``Z' = Psi' E Psi'^-1``.
    """
    mode = params.mode if mode is None else mode
    beta = params.beta
    A = np.asarray(A, dtype=complex)
    n, d = A.shape[0], Fbar.d
    if not 0 < r_dd < r:
        raise PreconditionError("need 0 < r'' < r")
    certs: dict = {}
    if r_dd < 95 * r / 96:
        if mode == "theoretical":
            raise PreconditionError("r'' must lie in [95 r / 96, r)")
        certs["strip_ratio"] = Certificate(False, r_dd / r, 95 / 96)
    eps = series_norm(Fbar, r, beta)
    zero = TorusSeries.zero(n, d, r_dd, beta, Fbar.real)
    if eps == 0:
        return StepOutput(zero, zero, Abar, zero, Psi, Psi_inv, A, 0.0, 0.0, 0.0, False, 0.0, 0.0,
                          Schedule(0, 0, 0, False, 0, 0), 0, (), 0.0, None, None, certs)
    if eps >= 1:
        raise PreconditionError(f"perturbation norm {eps:.3g} is not below 1")

    # hypotheses on the frame
    omega = freq.vector
    frame = conjugacy_residual(Abar, Psi, TorusSeries.constant(A, d, r, beta),
                               params.check_grid or 8, omega).sup_residual
    certs["frame_reducible"] = _cert(frame, 1e-9 * (1 + np.linalg.norm(A, 2)))
    log_frame = 0.5 * (r - r_dd) * math.log(1 / eps)
    certs["frame_growth"] = _cert(math.log(max(series_norm(Psi, r, beta),
                                               series_norm(Psi_inv, r, beta))), log_frame)
    log_small = (math.log(params.C_tilde) + params.D3 * gamma
                 * (math.log(r - r_dd) - math.log(np.linalg.norm(A, 2) + 1)))
    certs["smallness"] = _cert(math.log(eps), log_small)
    if mode == "theoretical":
        failed = [k for k in ("frame_reducible", "frame_growth", "smallness") if not certs[k].holds]
        if failed:
            raise PreconditionError(f"step hypotheses fail: {', '.join(failed)}")

    # phase 1: reduction of the eigenvalues
    sched = schedules(r, r_dd, eps, params, mode)
    G = multiply(multiply(Psi_inv, Fbar), Psi).with_meta(declared_r=r)
    red = reduction_of_eigenvalues(A, group, sched.R, sched.N, freq, practical=mode == "practical",
                                   search_cap=params.search_cap, budget=params.budget,
                                   r_check=r, c0=params.C0, beta=beta, kappa2=sched.kappa2)
    phi = red.phi
    resonant = not red.shift.is_zero()
    Nbar = red.shift.Nbar
    if resonant:
        F_t = multiply(multiply(phi.inverse().as_series(r), G), phi.as_series(r))
    else:
        F_t = G
    A_t = red.A_tilde
    R = sched.R
    N_tilde = R * Nbar
    if mode == "practical":
        N_tilde = min(N_tilde, params.R_max * params.N_max)
    n0 = 0.5 * n * (n - 1)
    kappa_p = sched.kappa2 / params.C0
    C1 = 2 * math.pi * r / R ** (n0 + 1)
    formula_target = math.exp(-2 * math.pi * (r - r_dd) * R ** 0.25 * Nbar)
    eps_target = formula_target
    if mode == "practical":
        eps_target = min(formula_target, eps ** params.contraction_exponent)
    certs["npp_input"] = Certificate(npp_check(F_t, phi.inverse()) if resonant else
                                     F_t.is_torus_periodic(PERIODICITY_TOL) or not
                                     G.is_torus_periodic(PERIODICITY_TOL), 0.0, 0.0)

    r0 = 0.5 * (r + r_dd)
    step = inductive_step(A_t, F_t, red.decomposition, phi.inverse() if resonant else None,
                          params, r, r0, kappa_p, N_tilde, C1, group, freq, mode)
    Em1, Eim1 = step.Em1, step.Eim1
    A_cur, F_cur = step.A_new, step.F_new
    pruned = step.pruned_mass
    inner_norms = [step.eps_out]
    _merge_certs(certs, "phase1", step.certificates)

    # phase 2: steps far from resonances
    ratio = math.log(eps_target) / math.log(eps)
    ell = max(1, int(math.floor(math.log(ratio) / math.log(4.0 / 3.0)))) if ratio > 1 else 1
    ell_eff = max(ell, params.inner_max) if mode == "practical" else ell
    C2 = ((r - r_dd) / (160 * (n0 + 1))) ** (8 * (n0 + 1))
    j = 1
    r_prev = r0
    measured = series_norm(F_cur, r_dd, beta)
    while measured > eps_target and j <= params.inner_max:
        r_next = max(r0 - j * (r - r_dd) / (2 * ell_eff), r_dd)
        kappa_j = 0.75 ** j * sched.kappa2 / params.C0
        dec_j = eigen_clusters(A_cur, kappa_j)
        inner = inductive_step(A_cur, F_cur, dec_j, None, params, r_prev, r_next, kappa_j,
                               N_tilde, C2, group, freq, mode)
        eps_j = eps ** (1.5 ** j - 1.0 / 48)
        certs[f"inner{j}_schedule"] = _cert(inner.eps_in, eps_j)
        _merge_certs(certs, f"inner{j}", inner.certificates)
        # compose exponentials: (Id + a)(Id + b) - Id = a + b + a b
        Em1 = Em1 + inner.Em1 + multiply(Em1, inner.Em1)
        Eim1 = inner.Eim1 + Eim1 + multiply(inner.Eim1, Eim1)
        A_cur, F_cur = inner.A_new, inner.F_new
        pruned += inner.pruned_mass
        r_prev = r_next
        measured = series_norm(F_cur, r_dd, beta)
        inner_norms.append(measured)
        j += 1

    # back to the original frame
    if resonant:
        Psi_new = multiply(Psi, phi.as_series(r))
        Psi_inv_new = multiply(phi.inverse().as_series(r), Psi_inv)
    else:
        Psi_new, Psi_inv_new = Psi, Psi_inv
    conj = lambda S: multiply(multiply(Psi_new, S), Psi_inv_new).with_meta(declared_r=r_dd)
    Fbar_new = conj(F_cur)
    shift = A_cur - A_t
    Abar_new = (Abar + conj(TorusSeries.constant(shift, d, r, beta, real=None))).with_meta(declared_r=r_dd)
    Zm1 = conj(Em1)
    Zim1 = conj(Eim1)
    eps_new = series_norm(Fbar_new, r_dd, beta)

    # conclusions
    if mode == "practical":
        if eps_new > eps ** params.contraction_exponent:
            raise ContractionError(
                f"step failed to contract: {eps_new:.3e} > {eps:.3e}^{params.contraction_exponent}",
                {"eps_in": eps, "eps_out": eps_new, "inner_norms": inner_norms,
                 "resonant": resonant, "Nbar": Nbar, "kappa2": sched.kappa2, "N_tilde": N_tilde})
    else:
        lo = math.log(eps) * R ** (n * n)
        certs["eps_range"] = Certificate(lo <= math.log(max(eps_new, 1e-300))
                                         <= 100 * math.log(eps), eps_new, eps ** 100)
    normA_new = float(np.linalg.norm(A_cur, 2))
    certs["A_growth"] = Certificate(
        math.log(max(normA_new, 1e-300)) <= _log_bound_A(np.linalg.norm(A, 2), eps, r, r_dd,
                                                         params.D3),
        normA_new, math.nan)
    zsize = series_norm(Zm1, r_dd, beta)
    log_z = (-math.log(params.C_tilde) + params.D3 * gamma * math.log(
        (1 + np.linalg.norm(A, 2)) * abs(math.log(eps)) / (r - r_dd))
        + (1 - 4 * (r - r_dd)) * math.log(eps))
    certs["Z_minus_identity"] = Certificate(
        zsize == 0 or math.log(zsize) <= log_z, zsize, math.exp(min(log_z, 700.0)))
    if eps_new > 0:
        growth = math.log(max(series_norm(Psi_new, r_dd, beta),
                              series_norm(Psi_inv_new, r_dd, beta)))
        certs["frame_growth_out"] = _cert(growth, 0.25 * (r - r_dd) * math.log(1 / eps_new))
    sl2 = None
    if n == 2 and group.kind in ("SL2_C", "SL_R"):
        sl2 = (not resonant) or normA_new <= sched.kappa2 + math.sqrt(eps)
        certs["sl2_dichotomy"] = Certificate(sl2, normA_new, sched.kappa2 + math.sqrt(eps))
    periodic_in = Abar.is_torus_periodic(PERIODICITY_TOL) and Fbar.is_torus_periodic(PERIODICITY_TOL)
    if n == 2 and periodic_in:
        outs = (Zm1, Abar_new, Fbar_new)
        certs["torus_continuity"] = Certificate(
            all(s.is_torus_periodic(PERIODICITY_TOL) for s in outs), 0.0, 0.0)
    return StepOutput(Zm1, Zim1, Abar_new, Fbar_new, Psi_new, Psi_inv_new, A_cur, eps_new,
                      eps_target, eps, resonant, Nbar, sched.kappa2, sched, j - 1,
                      tuple(inner_norms), pruned, red, sl2, certs)


def _merge_certs(into: dict, prefix: str, certs: dict) -> None:
    for k, v in certs.items():
        into[f"{prefix}_{k}"] = v


# -- planning ---------------------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationPlan:
    log_eps: tuple
    r: tuple
    gamma: tuple
    log_b: tuple
    epsk0: tuple
    epsk1: tuple
    threshold_log: float
    below_threshold: bool

    @property
    def admissible(self) -> bool:
        return self.below_threshold and all(self.epsk0) and all(self.epsk1)


def plan_iteration(params: ScheduleParams, b0: float, r: float, r_prime: float, eps: float,
                   horizon: int = 5) -> IterationPlan:
    """Sequences ``eps_k = eps^(p^k)``, ``r_k``, ``gamma_k``, ``b_k`` and the two numeric checks.

    Everything is kept in log space since ``eps_k`` underflows after one or two
    steps.  ``below_threshold`` compares ``eps`` with
    ``C (r - r') / (b0 + 1))^(2 gamma0 D5)`` using ``C_tilde`` for ``C``.
    """
    if not 0 < r_prime < r:
        raise ValueError("need 0 < r' < r")
    if not 0 < eps < 1:
        raise ValueError("need 0 < eps < 1")
    D5, g0, p = params.D5, params.gamma0, params.eps_power
    log_eps = [math.log(eps) * p ** k for k in range(horizon + 2)]
    rs = [r_prime + (r - r_prime) / 2 ** k for k in range(horizon + 2)]
    gammas = [2 ** k * g0 for k in range(horizon + 1)]
    log_b = [math.log(b0) if b0 > 0 else -math.inf]
    for k in range(1, horizon + 1):
        term = math.log(abs(log_eps[k - 1])) + D5 * math.log(2 ** k / (r - r_prime))
        log_b.append(float(np.logaddexp(log_b[-1], term)))
    e0, e1 = [], []
    for k in range(horizon + 1):
        L = abs(log_eps[k])
        e0.append(2 * D5 * gammas[k] * math.log(L) <= L / 4)
        log_b1 = float(np.logaddexp(log_b[k], 0.0))
        e1.append(D5 * gammas[k] * (log_b1 - math.log(rs[k] - rs[k + 1])) + log_eps[k]
                  <= math.log(params.C_tilde))
    thr = math.log(params.C_tilde) + 2 * g0 * D5 * (math.log(r - r_prime) - math.log(b0 + 1))
    return IterationPlan(tuple(log_eps[:horizon + 1]), tuple(rs[:horizon + 1]), tuple(gammas),
                         tuple(log_b), tuple(e0), tuple(e1), thr, math.log(eps) <= thr)


# -- driver -------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class KamState:
    k: int
    r_k: float
    A: np.ndarray
    Abar: TorusSeries
    Fbar: TorusSeries
    Psi: TorusSeries
    Psi_inv: TorusSeries
    decomposition: Decomposition | None
    gamma: float
    log_b: float
    eps: float
    eps_scheduled: float
    resonance_flag: bool
    Nbar: float
    kappa2: float
    residual: float
    group_defect: float
    certificates: dict = field(default_factory=dict)

    def periodicity(self) -> str:
        periodic = all(s.is_torus_periodic(PERIODICITY_TOL) for s in (self.Abar, self.Fbar))
        return "torus" if periodic else "double_torus"

    def summary(self) -> dict:
        return {
            "k": self.k, "r_k": self.r_k, "eps_measured": self.eps,
            "eps_scheduled": self.eps_scheduled, "normA_k": float(np.linalg.norm(self.A, 2)),
            "A_k": [[[z.real, z.imag] for z in row] for row in self.A],
            "resonance_flag": self.resonance_flag, "Nbar_k": self.Nbar, "kappa2_k": self.kappa2,
            "residual": self.residual, "group_defect": self.group_defect,
            "gamma_k": self.gamma, "log_b_k": self.log_b, "periodicity": self.periodicity(),
            "certificates": {k: v.to_dict() for k, v in sorted(self.certificates.items())},
        }


CSV_COLUMNS = ("k", "r_k", "eps_measured", "eps_scheduled", "normA_k", "resonance_flag",
               "Nbar_k", "kappa2_k", "residual", "group_defect")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12e")


@dataclass(frozen=True)
class KamRun:
    states: tuple
    Z: TorusSeries
    Z_inv: TorusSeries
    residual_log: tuple
    norm_log: tuple
    cauchy_log: tuple
    certificates: dict
    group: LieGroupTag
    target_eps: float
    reached: bool

    @property
    def final(self) -> KamState:
        return self.states[-1]

    def contraction_steps(self, exponent: float = 1.5) -> int:
        """Longest run of consecutive steps with ``eps_{k+1} <= eps_k^exponent``."""
        best = cur = 0
        for a, b in zip(self.norm_log, self.norm_log[1:]):
            cur = cur + 1 if b <= a ** exponent else 0
            best = max(best, cur)
        return best

    def periodicity_transitions(self) -> int:
        classes = [s.periodicity() for s in self.states]
        return sum(1 for a, b in zip(classes, classes[1:]) if a == "torus" and b == "double_torus")

    def sl2_sequence(self, tau: float) -> list[float]:
        """``||A_k|| |log eps_k|^tau`` along the run."""
        return [float(np.linalg.norm(s.A, 2)) * abs(math.log(s.eps)) ** tau
                for s in self.states if 0 < s.eps < 1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in self.states:
            w.writerow([_fmt(s.k), _fmt(s.r_k), _fmt(s.eps), _fmt(s.eps_scheduled),
                        _fmt(np.linalg.norm(s.A, 2)), _fmt(s.resonance_flag), _fmt(s.Nbar),
                        _fmt(s.kappa2), _fmt(s.residual), _fmt(s.group_defect)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "version": __version__,
            "group": self.group.kind,
            "target_eps": self.target_eps,
            "reached": self.reached,
            "states": [s.summary() for s in self.states],
            "certificates": _jsonable(self.certificates),
            "residuals": list(self.residual_log),
            "cauchy": list(self.cauchy_log),
        }, sort_keys=True, indent=1)


def _jsonable(obj):
    if isinstance(obj, Certificate):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _smallness_threshold(A, params: ScheduleParams, group: LieGroupTag, r: float,
                         r_dd: float, mode: str) -> float:
    """Log of the admissible perturbation size for the chosen mode."""
    normA = float(np.linalg.norm(A, 2))
    if mode == "theoretical":
        if group.compact:
            return params.D7 * math.log(r - r_dd)
        return params.D7 * (math.log(r - r_dd) - math.log(normA + 1))
    if group.compact:
        return math.log(params.practical_eps0)
    return math.log(params.practical_eps0) - math.log(1 + normA)


def almost_reduce(A, F: TorusSeries, group: LieGroupTag, r: float, r_prime: float,
                  target_eps: float, params: ScheduleParams, freq: Frequency,
                  mode: str | None = None, step_budget: int = 8, grid: int = 64,
                  z_prune: float = 1e-30, progress=None) -> KamRun:
    """Iterate :func:`full_step` until the perturbation is below ``target_eps``.

    Strips follow ``r_k = r'' + (r - r'') / 2^k`` with ``r'' = (r + r') / 2``.
    After every step the conjugacy of ``Z`` is checked on ``grid^d`` points of
    the double torus and group membership at 50 points.  ``progress`` is called
    with each new state.
    """
    mode = params.mode if mode is None else mode
    beta = params.beta
    A = np.asarray(A, dtype=complex)
    n, d = A.shape[0], F.d
    if F.n != n:
        raise PreconditionError("matrix and perturbation sizes differ")
    if not 0 < r_prime < r <= 0.5:
        raise PreconditionError("need 0 < r' < r <= 1/2")
    if group.algebra_defect(A) > 1e-10:
        raise PreconditionError("constant part is not in the algebra")
    r_dd = 0.5 * (r + r_prime)
    eps0 = series_norm(F, r, beta)
    log_thr = _smallness_threshold(A, params, group, r, r_dd, mode)
    run_certs: dict = {}
    if eps0 > 0 and math.log(eps0) > log_thr:
        raise PreconditionError(
            f"perturbation norm {eps0:.3g} exceeds the admissible size exp({log_thr:.4g})")
    run_certs["smallness"] = Certificate(True, eps0, math.exp(max(log_thr, -745.0)))
    if eps0 > 0:
        plan = plan_iteration(params, float(np.linalg.norm(A, 2)), r, r_dd, min(eps0, 0.5))
        run_certs["plan_epsk0"] = Certificate(all(plan.epsk0), 0.0, 0.0)
        run_certs["plan_epsk1"] = Certificate(all(plan.epsk1), 0.0, 0.0)
        run_certs["plan_threshold"] = Certificate(plan.below_threshold, math.log(eps0),
                                                  plan.threshold_log)
    # nice periodicity of the input with respect to the eigen-cluster decomposition
    run_certs["input_npp"] = Certificate(F.is_torus_periodic(PERIODICITY_TOL), 0.0, 0.0)

    ident = _identity(n, d, r, beta)
    Abar = TorusSeries.constant(A, d, r, beta, real=None)
    original = Abar + F
    Psi, Psi_inv = ident, ident
    Z, Z_inv = ident, ident
    dec = eigen_clusters(A, params.kappa)
    state = KamState(0, r, A, Abar, F, Psi, Psi_inv, dec, params.gamma0,
                     math.log(np.linalg.norm(A, 2)) if np.any(A) else -math.inf,
                     eps0, eps0, False, 0.0, 0.0, 0.0, group_defect(ident, group))
    states = [state]
    if progress:
        progress(state)
    residuals, norms, cauchy = [0.0], [eps0], []
    limit = 1e-8 * (1 + np.linalg.norm(A, 2))
    reached = eps0 <= target_eps
    k = 0
    while not reached and k < step_budget:
        k += 1
        r_k = r_dd + (r - r_dd) / 2 ** (k - 1)
        r_next = r_dd + (r - r_dd) / 2 ** k
        out = full_step(state.A, state.Abar, state.Fbar, state.Psi, state.Psi_inv, r_k, r_next,
                        state.gamma, params, group, freq, mode)
        Z = Z + multiply(Z, out.Zm1)
        Z_inv = Z_inv + multiply(out.Zim1, Z_inv)
        Z, _ = prune(Z.with_meta(declared_r=r_next), r_next, z_prune)
        Z_inv, _ = prune(Z_inv.with_meta(declared_r=r_next), r_next, z_prune)
        res = conjugacy_residual(original, Z, out.Abar + out.Fbar, grid, freq)
        if res.sup_residual > limit:
            raise ContractionError(
                f"conjugacy residual {res.sup_residual:.3e} exceeds {limit:.3e} at step {k}",
                {"step": k, "residual": res.sup_residual})
        gdef = max(group_defect(Z, group), group_defect(out.Psi, group))
        cauchy.append(float(np.linalg.norm(out.A - state.A, 2)))
        eps_sched = math.exp(math.log(eps0) * params.contraction_exponent ** k) if mode == \
            "practical" else math.exp(math.log(eps0) * params.eps_power ** k)
        log_b = float(np.logaddexp(state.log_b, math.log(abs(math.log(state.eps)))
                                   + params.D5 * math.log(2 ** k / (r - r_dd))))
        dec_k = eigen_clusters(out.A, out.kappa2) if out.kappa2 > 0 else None
        state = KamState(k, r_next, out.A, out.Abar, out.Fbar, out.Psi, out.Psi_inv, dec_k,
                         2 * state.gamma, log_b, out.eps, eps_sched, out.resonance_flag,
                         out.Nbar, out.kappa2, res.sup_residual, gdef, out.certificates)
        states.append(state)
        if progress:
            progress(state)
        residuals.append(res.sup_residual)
        norms.append(out.eps)
        reached = out.eps <= target_eps
    # property 4 chain and the th1 form, reported side by side
    zsize = series_norm(Z - ident, r_dd, beta) if len(states) > 1 else 0.0
    run_certs["Z_minus_identity_th1"] = _cert(zsize, 2 * math.sqrt(eps0))
    log_pr = params.D7 * math.log(2) + (0.25 - 4 * (r - r_dd)) * math.log(max(eps0, 1e-300))
    run_certs["Z_minus_identity_PR"] = Certificate(zsize == 0 or math.log(zsize) <= log_pr,
                                                   zsize, math.exp(min(log_pr, 700.0)))
    run_certs["transitions"] = Certificate(
        sum(1 for a, b in zip(states, states[1:])
            if a.periodicity() == "torus" and b.periodicity() == "double_torus") <= 1, 0.0, 1.0)
    return KamRun(tuple(states), Z, Z_inv, tuple(residuals), tuple(norms), tuple(cauchy),
                  run_certs, group, target_eps, reached)


@dataclass(frozen=True)
class NearbyReducible:
    H: TorusSeries
    conjugation: TorusSeries
    A_target: np.ndarray
    distance: float
    residual: float
    run: KamRun


def nearby_reducible(A, F: TorusSeries, group: LieGroupTag, r: float, r_prime: float, eps: float,
                     params: ScheduleParams, freq: Frequency, mode: str | None = None,
                     step_budget: int = 8, grid: int = 64) -> NearbyReducible:
    """A reducible ``H`` with ``|A + F - H|_{r'} <= eps``.

    ``H = (A + F) - Z Fbar Z^-1`` from a run driven to ``eps / 4``.  The map
    ``Z Psi`` conjugates ``H`` to the constant ``A_k``.
    """
    run = almost_reduce(A, F, group, r, r_prime, eps / 4, params, freq, mode, step_budget, grid)
    last = run.final
    A = np.asarray(A, dtype=complex)
    d = F.d
    original = TorusSeries.constant(A, d, r, params.beta, real=None) + F
    correction = multiply(multiply(run.Z, last.Fbar), run.Z_inv)
    H = original - correction
    conjugation = multiply(run.Z, last.Psi)
    distance = series_norm(correction, r_prime, params.beta)
    res = conjugacy_residual(H, conjugation, TorusSeries.constant(last.A, d, r, params.beta),
                             grid, freq).sup_residual
    if distance > eps:
        raise ContractionError(f"reducible approximation is {distance:.3e} away, above {eps:.3e}",
                               {"distance": distance})
    return NearbyReducible(H, conjugation, last.A, distance, res, run)
