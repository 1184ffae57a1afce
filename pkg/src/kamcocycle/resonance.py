"""Resonance removal by half-lattice eigenvalue shifts.

Shifting an eigenvalue ``alpha`` by ``-2 pi i <m, omega>`` is realised by the
trivial map ``exp(2 pi i <m, theta>)`` on its spectral subspace.  The single
pass works in two stages:

1. (half lattice only) an eigenvalue whose doubled imaginary part is close to
   ``2 pi <m, omega>`` for an integer ``m`` is moved by ``m / 2``, which puts it
   near the real axis together with its conjugate;
2. eigenvalues are clustered by imaginary part and processed outwards from the
   real axis; a cluster resonating with an already placed eigenvalue is moved
   onto it.  In a spectrum closed under conjugation (or under negation for
   n = 2) mirror clusters move by opposite shifts.

All conclusions are checked afterwards by brute force.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diophantine import (DEFAULT_BUDGET, DEFAULT_CAP, DcReport, Frequency, find_resonance,
                          spectrum_is_dc)
from .fourier import HalfIndex, TorusSeries, analytic_norm, directional_derivative, gevrey_norm
from .spectral import (Decomposition, LieGroupTag, TrivialMap, eigen_clusters, group_defect,
                       nilpotent_part)


class ResonanceRemovalError(RuntimeError):
    """A resonance-removal conclusion failed its brute-force check."""


@dataclass(frozen=True)
class ResonanceShift:
    m_js: tuple[HalfIndex, ...]
    Nbar: float
    kappa2: float
    rounds: int
    lattice: str  # "integer" or "half_integer"
    search_order: float = 0.0
    capped: bool = False
    round_log: tuple = ()

    def to_json(self) -> str:
        return json.dumps({
            "m_js": [list(m.doubled) for m in self.m_js],
            "Nbar": self.Nbar,
            "kappa2": self.kappa2,
            "rounds": self.rounds,
            "lattice": self.lattice,
            "search_order": self.search_order,
            "capped": self.capped,
        }, sort_keys=True)

    def max_shift(self) -> float:
        return max((m.norm for m in self.m_js), default=0.0)

    def is_zero(self) -> bool:
        return all(m.norm == 0 for m in self.m_js)


def kappa_double_prime(kappa: float, tau: float, n: int, R: float, N: float) -> float:
    """``kappa / (n (8 R^(n(n-1)/2 + 1) N)^tau)``."""
    return kappa / (n * (8.0 * R ** (0.5 * n * (n - 1) + 1) * N) ** tau)


def _shifted(alphas: np.ndarray, shifts: list[HalfIndex], omega: np.ndarray) -> np.ndarray:
    return np.array([a - 2j * np.pi * float(m.value @ omega) for a, m in zip(alphas, shifts)])


def _mirror_map(alphas: np.ndarray, tol: float) -> list[int] | None:
    """Index of the mirror of each eigenvalue, or ``None`` if the spectrum has no mirror symmetry.

    Mirror is complex conjugation when the spectrum is conjugation closed, and
    negation for a two-point spectrum ``{a, -a}``.
    """
    n = len(alphas)

    def match(images):
        used = [False] * n
        out = [-1] * n
        for j in range(n):
            best, best_d = -1, math.inf
            for k in range(n):
                if used[k]:
                    continue
                dist = abs(alphas[k] - images[j])
                if dist < best_d:
                    best, best_d = k, dist
            if best_d > tol:
                return None
            used[best] = True
            out[j] = best
        # make the matching an involution
        for j in range(n):
            if out[out[j]] != j:
                return None
        return out

    conj = match(np.conj(alphas))
    if conj is not None:
        return conj
    if n == 2:
        return match(-alphas)
    return None


def _im_clusters(values: np.ndarray, gap: float) -> list[list[int]]:
    order = np.argsort(values.imag, kind="stable")
    groups, current = [], [int(order[0])]
    for a, b in zip(order[:-1], order[1:]):
        if abs(values[b].imag - values[a].imag) <= gap:
            current.append(int(b))
        else:
            groups.append(current)
            current = [int(b)]
    groups.append(current)
    return groups


def remove_resonances_once(alphas, Ntilde: float, kappa1: float, freq: Frequency,
                           lattice: str = "half_integer", check_precondition: bool = True,
                           budget: int = DEFAULT_BUDGET, cap: float = DEFAULT_CAP) -> ResonanceShift:
    """One resonance-removal pass at order ``Ntilde`` with constant ``kappa1``."""
    alphas = np.asarray(alphas, dtype=complex)
    n, d = len(alphas), freq.d
    omega = freq.vector
    if check_precondition and kappa1 > freq.kappa / (n * (8 * Ntilde) ** freq.tau) * (1 + 1e-12):
        raise ValueError("kappa' exceeds kappa / (n (8 N)^tau)")
    if lattice not in ("integer", "half_integer"):
        raise ValueError("lattice must be 'integer' or 'half_integer'")
    zero = HalfIndex((0,) * d)
    shifts = [zero] * n
    tol = 1e-10 * (1 + float(np.abs(alphas).max()) if n else 1.0)
    mirror = _mirror_map(alphas, tol)
    half = lattice == "half_integer"

    # stage 1: half shifts bring near-half-resonant eigenvalues to the real axis
    if half:
        done = [False] * n
        for j in range(n):
            if done[j]:
                continue
            m = find_resonance(2j * alphas[j].imag, 1, kappa1, freq.tau, Ntilde, freq, budget, cap)
            if m is not None:
                # m is an integer index; m / 2 in doubled units is m itself
                shifts[j] = HalfIndex(tuple(k // 2 for k in m.doubled))
            done[j] = True
            if mirror is not None and mirror[j] != j:
                shifts[mirror[j]] = -shifts[j]
                done[mirror[j]] = True
    primed = _shifted(alphas, shifts, omega)

    # stage 2: cluster by imaginary part, place clusters outwards from the axis
    groups = _im_clusters(primed, kappa1)
    centers = [float(np.mean(primed[g].imag)) for g in groups]
    cluster_of = {j: c for c, g in enumerate(groups) for j in g}
    mirror_cluster = None
    if mirror is not None:
        mirror_cluster = {}
        for c, g in enumerate(groups):
            images = {cluster_of[mirror[j]] for j in g}
            if len(images) != 1:
                mirror_cluster = None
                break
            mirror_cluster[c] = images.pop()
    nu = 2 if half else 1
    order = sorted(range(len(groups)), key=lambda c: (abs(centers[c]), centers[c]))
    cluster_shift: dict[int, HalfIndex] = {}
    placed: list[int] = []
    for c in order:
        if c in cluster_shift:
            continue
        partner = mirror_cluster[c] if mirror_cluster is not None else None
        found: set[tuple] = set()
        for k in groups[c]:
            for j in placed:
                target = primed[j] - 2j * np.pi * float(cluster_shift[cluster_of[j]].value @ omega)
                m = find_resonance(target - primed[k], nu, kappa1, freq.tau, Ntilde, freq, budget, cap)
                if m is not None:
                    found.add(m.doubled)
        if len(found) > 1:
            raise ResonanceRemovalError(
                f"cluster {c} resonates through several distinct indices {sorted(found)}")
        s = -HalfIndex(found.pop()) if found else HalfIndex((0,) * d)
        cluster_shift[c] = s
        placed.extend(groups[c])
        if partner is not None and partner != c:
            cluster_shift[partner] = -s
            placed.extend(groups[partner])
    total = [shifts[j] + cluster_shift[cluster_of[j]] for j in range(n)]
    return ResonanceShift(tuple(total), Ntilde, kappa1, 1, lattice, Ntilde)


@dataclass(frozen=True)
class ShiftConditions:
    conjugate_pairs: bool
    sl2_pair: bool
    opposite_conjugate: bool
    proximity: bool
    imaginary_decrease: bool
    collapse: bool

    def all(self) -> bool:
        return all((self.conjugate_pairs, self.sl2_pair, self.opposite_conjugate,
                    self.proximity, self.imaginary_decrease, self.collapse))


def check_shift_conditions(alphas, shift: ResonanceShift, freq: Frequency, kappa1: float,
                           tol: float | None = None) -> ShiftConditions:
    """Evaluate the structural conditions a shift family must satisfy."""
    alphas = np.asarray(alphas, dtype=complex)
    n = len(alphas)
    if tol is None:
        tol = 1e-10 * (1 + float(np.abs(alphas).max()))
    ms = shift.m_js
    tilde = _shifted(alphas, list(ms), freq.vector)
    closed = _mirror_map(alphas, tol) is not None and np.allclose(
        np.sort_complex(alphas), np.sort_complex(np.conj(alphas)), atol=tol)
    conj_ok = opp_ok = prox_ok = True
    for j in range(n):
        for k in range(n):
            if closed and abs(alphas[j] - np.conj(alphas[k])) <= tol and ms[j] != -ms[k]:
                conj_ok = False
            if abs(alphas[j] + np.conj(alphas[k])) <= tol and ms[j] != ms[k]:
                opp_ok = False
            if abs(alphas[j] - alphas[k]) <= kappa1 and ms[j] != ms[k]:
                prox_ok = False
    sl2_ok = True
    if n == 2 and abs(alphas[0] + alphas[1]) <= tol:
        sl2_ok = ms[0] == -ms[1]
    decr = bool(np.all(np.abs(tilde.imag) <= np.abs(alphas.imag) + tol))
    collapse = True
    if not shift.is_zero():
        collapse = any(abs(alphas[j] - alphas[k]) >= kappa1 and abs(tilde[j] - tilde[k]) < kappa1
                       for j in range(n) for k in range(n))
    return ShiftConditions(conj_ok, sl2_ok, opp_ok, prox_ok, decr, collapse)


def _dc(alphas, kappa, tau, order, freq, integer_only, budget, cap) -> DcReport:
    return spectrum_is_dc(np.diag(alphas), kappa, tau, order, freq, budget, cap,
                          eigenvalues=alphas, integer_only=integer_only)


def remove_resonances_iterated(alphas, R: float, N: float, freq: Frequency,
                               lattice: str = "half_integer", practical: bool = True,
                               search_cap: float = DEFAULT_CAP, budget: int = DEFAULT_BUDGET,
                               kappa2: float | None = None) -> tuple[ResonanceShift, DcReport]:
    """Iterate single passes with growing order until the spectrum is DC at ``R * Nbar``.

    In practical mode every search order is capped at ``search_cap`` and the cap
    is recorded; in theoretical mode exceeding the cap raises.
    """
    alphas = np.asarray(alphas, dtype=complex)
    n, d = len(alphas), freq.d
    if R < 1 or N < 2:
        raise ValueError("need R >= 1 and N >= 2")
    if kappa2 is None:
        kappa2 = kappa_double_prime(freq.kappa, freq.tau, n, R, N)
    integer_only = lattice == "integer"
    capped = False

    def order_of(x):
        nonlocal capped
        if x > search_cap:
            if not practical:
                raise ResonanceRemovalError(
                    f"search order {x:.3g} exceeds cap {search_cap:g} in theoretical mode")
            capped = True
            return float(search_cap)
        return float(x)

    shifts = [HalfIndex((0,) * d)] * n
    log = []
    max_rounds = n * (n - 1) // 2
    rounds = 0
    while True:
        current = _shifted(alphas, shifts, freq.vector)
        check_order = order_of(R ** (rounds + 1) * N)
        report = _dc(current, kappa2, freq.tau, check_order, freq, integer_only, budget, search_cap)
        log.append({"round": rounds, "check_order": check_order, "holds": report.holds,
                    "margin": report.worst_margin})
        if report.holds:
            break
        if rounds >= max_rounds:
            raise ResonanceRemovalError(
                f"spectrum still resonant after {rounds} rounds: {report.summary()}")
        rounds += 1
        step = remove_resonances_once(current, order_of(R ** rounds * N), kappa2, freq, lattice,
                                      check_precondition=False, budget=budget, cap=search_cap)
        shifts = [a + b for a, b in zip(shifts, step.m_js)]
    Nbar = R ** rounds * N
    result = ResonanceShift(tuple(shifts), Nbar, kappa2, rounds, lattice,
                            order_of(R * Nbar), capped, tuple(log))
    return result, report


@dataclass(frozen=True)
class ReductionResult:
    phi: TrivialMap
    A_tilde: np.ndarray
    shift: ResonanceShift
    decomposition: Decomposition
    dc_report: DcReport
    conjugacy_residual: float
    shift_norm: float
    group_defect: float
    sl2_dichotomy: bool | None
    conditions: ShiftConditions
    phi_norm_bound: float


def phi_norm_bound(n: int, Nbar: float, r: float, kappa2: float, nilpotent_norm: float,
                   compact: bool, c0: float = 8.0, beta: float | None = None, d: int = 1) -> float:
    """Bound on the strip norm of the reduction map and of its inverse."""
    if beta is None:
        growth = math.exp(4 * math.pi * Nbar * r)
    else:
        growth = math.exp(2 * beta * math.pi * r * d * Nbar ** (1.0 / beta))
    if compact:
        return n * growth
    base = max(1.0, (1 + nilpotent_norm) / kappa2)
    return n * c0 * base ** (n * (n + 1)) * growth


def reduction_of_eigenvalues(A, group: LieGroupTag, R: float, N: float, freq: Frequency,
                             practical: bool = True, search_cap: float = DEFAULT_CAP,
                             budget: int = DEFAULT_BUDGET, r_check: float = 0.1,
                             c0: float = 8.0, beta: float | None = None,
                             kappa2: float | None = None) -> ReductionResult:
    """Trivial map ``Phi`` and shifted constant ``A_tilde`` with Diophantine spectrum.

    ``Phi`` satisfies ``d_omega Phi = A Phi - Phi A_tilde`` and takes values in
    the group; both facts are checked before returning.
    """
    A = np.asarray(A, dtype=complex)
    n = A.shape[0]
    if kappa2 is None:
        kappa2 = kappa_double_prime(freq.kappa, freq.tau, n, R, N)
    lattice = "integer" if group.integer_lattice_only else "half_integer"
    dec = eigen_clusters(A, kappa2)
    alphas, owner = [], []
    for s in dec.subspaces:
        for a in s.eigenvalues:
            alphas.append(a)
            owner.append(s.label)
    alphas = np.array(alphas)
    shift, report = remove_resonances_iterated(alphas, R, N, freq, lattice, practical,
                                               search_cap, budget, kappa2)
    exps: dict[int, HalfIndex] = {}
    for lab, m in zip(owner, shift.m_js):
        if lab in exps and exps[lab] != m:
            raise ResonanceRemovalError(
                f"subspace {lab} received distinct exponents {exps[lab].doubled} and {m.doubled}")
        exps[lab] = m
    phi = TrivialMap(dec, exps, freq.d)
    A_tilde = A - phi.shift_matrix(freq.vector)
    if group.is_real:
        if np.abs(A_tilde.imag).max() > 1e-8 * (1 + np.abs(A).max()):
            raise ResonanceRemovalError("shifted constant is not real for a real group")
        A_tilde = A_tilde.real.astype(complex)
    phi_series = phi.as_series()
    lhs = directional_derivative(phi_series, freq.vector)
    rhs = (A @ phi_series) - (phi_series @ A_tilde)
    residual = analytic_norm(lhs - rhs, 0.0).value
    shift_norm = float(np.linalg.norm(A_tilde - A, 2))
    gdef = group_defect(phi_series, group)
    sl2 = None
    if n == 2 and group.kind in ("SL2_C", "SL_R"):
        sl2 = bool(shift.is_zero() or np.linalg.norm(A_tilde, 2) <= kappa2)
    conditions = check_shift_conditions(alphas, shift, freq, kappa2)
    nil = float(np.linalg.norm(nilpotent_part(A).matrix, 2))
    bound = phi_norm_bound(n, shift.Nbar, r_check, kappa2, nil, group.compact, c0, beta, freq.d)
    if residual > 1e-10 * (1 + np.abs(A).max()):
        raise ResonanceRemovalError(f"reduction map fails its equation by {residual:.3g}")
    if gdef > 1e-8:
        raise ResonanceRemovalError(f"reduction map leaves the group (defect {gdef:.3g})")
    return ReductionResult(phi, A_tilde, shift, dec, report, residual, shift_norm, gdef,
                           sl2, conditions, bound)


def reduction_phi_norms(result: ReductionResult, r: float, beta: float | None = None):
    """Measured analytic (or Gevrey) norms of ``Phi`` and ``Phi^-1`` at ``r``."""
    fwd = result.phi.as_series()
    inv = result.phi.inverse().as_series()
    if beta is None:
        return analytic_norm(fwd, r).value, analytic_norm(inv, r).value
    return gevrey_norm(fwd, beta, r).value, gevrey_norm(inv, beta, r).value
