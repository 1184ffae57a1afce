"""Truncated homological equation ``d_omega X = [A, X] + F^N - F(0)``.

Each Fourier mode gives a Sylvester equation

    (2 pi i <m, omega>) X(m) - A X(m) + X(m) A = F(m),

solved here either entrywise in a Schur basis of ``A`` or by a dense solve of
the vectorised operator.  The two paths are independent and are used to
cross-check each other.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln

from .diophantine import Frequency
from .fourier import (HalfIndex, TorusSeries, analytic_norm, directional_derivative, gevrey_norm)
from .spectral import Decomposition, LieGroupTag, TrivialMap, nilpotent_part, symplectic_form

METHODS = ("schur", "dense", "eigen")


class SmallDivisorError(ValueError):
    """A divisor fell below the Diophantine lower bound it was certified to respect."""


@dataclass(frozen=True)
class DivisorEntry:
    m: HalfIndex
    block: tuple[int, int]
    modulus: float        # min |2 pi i <m, omega> - (alpha - alpha')| over the block spectra
    min_singular: float   # smallest singular value of the block Sylvester operator
    bound: float          # kappa' / |m|^tau, or nan when no kappa' was supplied


@dataclass(frozen=True)
class EstimateCertificate:
    measured: float
    bound: float
    holds: bool
    C_prime: float
    D: float
    worst_mode_ratio: float  # largest measured / predicted per block and mode


@dataclass(frozen=True)
class HomologicalSolution:
    X: TorusSeries
    N: float
    estimate_cert: EstimateCertificate | None
    divisor_log: tuple[DivisorEntry, ...]
    residual: float
    algebra_defect: float
    method: str
    path_difference: float | None = None

    def min_divisor_ratio(self) -> float:
        """Smallest ``modulus / bound`` over the log (``inf`` if nothing was bounded)."""
        ratios = [e.modulus / e.bound for e in self.divisor_log if e.bound > 0]
        return min(ratios, default=math.inf)

    def divisor_csv(self) -> str:
        d = self.X.d
        buf = io.StringIO()
        head = [f"m_doubled_{j}" for j in range(d)] + ["L", "L'", "divisor_modulus", "bound"]
        buf.write(",".join(head) + "\n")
        for e in self.divisor_log:
            row = [str(k) for k in e.m.doubled] + [str(e.block[0]), str(e.block[1]),
                                                   repr(e.modulus), repr(e.bound)]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


# -- algebra membership of series ---------------------------------------------------

def series_algebra_defect(S: TorusSeries, algebra: LieGroupTag) -> float:
    """Coefficientwise distance of a series from the loop algebra of ``algebra``."""
    if len(S) == 0:
        return 0.0
    out = 0.0
    if algebra.is_real:
        out += S.reality_defect()
    if algebra.kind in ("SL2_C", "SL_R"):
        out += float(np.abs(np.trace(S.coefs, axis1=1, axis2=2)).max())
    if algebra.kind == "Sp_R":
        J = symplectic_form(algebra.n)
        M = np.swapaxes(S.coefs, 1, 2) @ J + J @ S.coefs
        out += float(np.linalg.norm(M, 2, axis=(1, 2)).max())
    if algebra.kind in ("O", "U"):
        diff = S + S.conj_transpose()
        out += float(diff.mode_norms().max()) if len(diff) else 0.0
    return out


# -- Sylvester solvers -------------------------------------------------------------------

def _factors(keys: np.ndarray, omega: np.ndarray) -> np.ndarray:
    return 1j * np.pi * (keys @ omega)


def sylvester_schur(A: np.ndarray, factors: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``c X - A X + X A = F`` for a stack of ``(c, F)`` by back substitution.

    With ``A = Q T Q^*`` the unknown ``Y = Q^* X Q`` satisfies
    ``Y_ij (c - T_ii + T_jj) = G_ij + sum_{p>i} T_ip Y_pj - sum_{q<j} Y_iq T_qj``,
    solved for rows from the bottom and columns from the left.
    """
    T, Q = sla.schur(np.asarray(A, dtype=complex), output="complex")
    n = T.shape[0]
    G = Q.conj().T[None] @ rhs @ Q[None]
    Y = np.zeros_like(G)
    diag = np.diag(T)
    for i in range(n - 1, -1, -1):
        for j in range(n):
            acc = G[:, i, j].copy()
            if i + 1 < n:
                acc += Y[:, i + 1:, j] @ T[i, i + 1:]
            if j > 0:
                acc -= Y[:, i, :j] @ T[:j, j]
            Y[:, i, j] = acc / (factors - diag[i] + diag[j])
    return Q[None] @ Y @ Q.conj().T[None]


def sylvester_operator(A: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> A X - X A`` acting on row-major ``vec(X)``."""
    n = A.shape[0]
    eye = np.eye(n)
    return np.kron(A, eye) - np.kron(eye, A.T)


def sylvester_dense(A: np.ndarray, factors: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Same equation as :func:`sylvester_schur` by a dense ``n^2 x n^2`` solve per mode."""
    A = np.asarray(A, dtype=complex)
    n = A.shape[0]
    op = sylvester_operator(A)
    mats = factors[:, None, None] * np.eye(n * n)[None] - op[None]
    sol = np.linalg.solve(mats, rhs.reshape(-1, n * n, 1))
    return sol.reshape(-1, n, n)


def sylvester_eigen(A: np.ndarray, factors: np.ndarray, rhs: np.ndarray,
                    nilpotent_tol: float = 1e-12) -> np.ndarray:
    """Diagonal solve in an eigenbasis; only valid when ``A`` has no nilpotent part."""
    A = np.asarray(A, dtype=complex)
    if np.linalg.norm(nilpotent_part(A).matrix, 2) > nilpotent_tol:
        raise ValueError("eigenbasis solve needs a semisimple matrix")
    vals, V = np.linalg.eig(A)
    Vinv = np.linalg.inv(V)
    G = Vinv[None] @ rhs @ V[None]
    Y = G / (factors[:, None, None] - vals[None, :, None] + vals[None, None, :])
    return V[None] @ Y @ Vinv[None]


def neumann_sylvester_inverse(A: np.ndarray, factor: complex) -> np.ndarray:
    """Inverse of ``c - ad_A`` as ``A_D^{-1} sum_k (A_N A_D^{-1})^k`` with ``k < n^2``.

    ``A_D = c - ad_S`` and ``A_N = ad_{A_N}`` come from the semisimple and
    nilpotent parts of ``A``; they commute, so the finite sum is exact.
    """
    A = np.asarray(A, dtype=complex)
    n = A.shape[0]
    parts = nilpotent_part(A)
    AD = factor * np.eye(n * n) - sylvester_operator(parts.semisimple)
    AN = sylvester_operator(parts.matrix)
    AD_inv = np.linalg.inv(AD)
    step = AN @ AD_inv
    total = np.eye(n * n, dtype=complex)
    power = np.eye(n * n, dtype=complex)
    for _ in range(1, n * n):
        power = power @ step
        total = total + power
    return AD_inv @ total


_SOLVERS = {"schur": sylvester_schur, "dense": sylvester_dense, "eigen": sylvester_eigen}


# -- certificates --------------------------------------------------------------------------

def homology_constants(n: int, d: int, tau: float) -> tuple[float, float]:
    """Explicit ``(C', D)`` for the strip estimate of the solution.

    Per mode the block inverse is at most ``n^2 2^(n^2) (1 + ||A_N||)^(n^2-1)
    (|m|^tau / kappa')^(n^2)``.  Summing ``|m|^p exp(-2 pi |m| delta)`` over the
    half lattice with ``p = (n^2 - 1) tau`` costs at most
    ``4^d Gamma(p + d + 1) / (pi delta)^(p + d + 1)``.  Collecting powers gives
    ``D = p + d + 1 + n^2`` and the constant below.
    """
    p = (n * n - 1) * tau
    log_c = (4 * math.log(n) + n * n * math.log(2) + d * math.log(4)
             + float(gammaln(p + d + 1)) - (p + d + 1) * math.log(math.pi))
    return math.exp(log_c), p + d + 1 + n * n


def _block_bases(A: np.ndarray, dec: Decomposition):
    """Restriction of ``A`` to each subspace, acting on the left and on the right."""
    left, right = {}, {}
    for s in dec.subspaces:
        B = s.basis
        left[s.label] = B.conj().T @ A @ B
        # rows of P span a space invariant under right multiplication by A
        Qr, _ = np.linalg.qr(s.projection.conj().T)
        Qr = Qr[:, :B.shape[1]]
        V = Qr.conj().T
        right[s.label] = V @ A @ V.conj().T
    return left, right


def _estimate_certificate(A, F, X, dec, phi, r, r_prime, kappa1, tau, beta, per_mode_ratio):
    n, d = A.shape[0], F.d
    C_prime, D = homology_constants(n, d, tau)
    nil = float(np.linalg.norm(nilpotent_part(A).matrix, 2))
    gamma = dec.gamma_cert
    Phi = phi.as_series()
    Phi_inv = phi.inverse().as_series()
    Xc = Phi_inv @ X @ Phi
    Fc = Phi_inv @ F @ Phi
    delta = r - r_prime
    if beta is None:
        measured = analytic_norm(Xc, r_prime).value
        source = analytic_norm(Fc, r).value
        base = max(1.0, (1 + nil) / (delta * kappa1))
        log_bound = math.log(C_prime) + (2 * n * n * gamma + D) * math.log(base)
    else:
        measured = gevrey_norm(Xc, beta, r_prime).value if len(Xc) else 0.0
        source = gevrey_norm(Fc, beta, r).value if len(Fc) else 0.0
        reach = max(1.0, phi.max_exponent())
        base = max(1.0, (1 + nil) * reach / (delta * kappa1))
        Dprime = 2 * n * n + D  # exponent per unit of gamma, Gevrey branch
        log_bound = math.log(C_prime) + Dprime * gamma * math.log(base)
    if source == 0:
        bound = 0.0
    else:
        bound = math.exp(min(log_bound + math.log(source), 700.0))
    return EstimateCertificate(measured, bound, measured <= bound * (1 + 1e-12) + 1e-300,
                               C_prime, D, per_mode_ratio)


# -- main entry -------------------------------------------------------------------------------

def solve_homological(A_tilde, F_tilde: TorusSeries, N: float, dec: Decomposition,
                      freq: Frequency, phi: TrivialMap | None = None,
                      algebra: LieGroupTag | None = None, beta: float | None = None,
                      kappa1: float | None = None, r: float | None = None,
                      r_prime: float | None = None, safety: float = 0.5,
                      method: str = "schur", cross_check: bool = False,
                      log_divisors: bool = True) -> HomologicalSolution:
    """Solve the truncated homological equation mode by mode.

    Parameters
    ----------
    A_tilde : (n, n) array
        Constant part; its spectrum should be Diophantine up to order ``N``.
    F_tilde : TorusSeries
        Perturbation.  Modes with ``|m| > N`` and the mean are ignored.
    dec : Decomposition
        Invariant splitting of ``A_tilde`` used for the divisor log.
    kappa1 : float, optional
        Diophantine constant.  When given, a divisor below
        ``safety * kappa1 / |m|^tau`` raises :class:`SmallDivisorError`.
    phi : TrivialMap, optional
        When given together with ``r > r_prime``, the strip estimate for
        ``Phi^-1 X Phi`` is measured and compared with its bound.
    method : {"schur", "dense", "eigen"}
        Solver path.  ``cross_check`` also runs the dense path and records the
        largest coefficient difference.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    A = np.asarray(A_tilde, dtype=complex)
    n, d = A.shape[0], F_tilde.d
    omega = freq.vector
    if dec.n != n:
        raise ValueError("decomposition size does not match the matrix")
    for P in dec.projections:
        if np.linalg.norm(P @ A - A @ P, 2) > 1e-8 * (1 + np.linalg.norm(A, 2)) * np.linalg.norm(P, 2):
            raise ValueError("decomposition projections do not commute with the matrix")
    norms = F_tilde.index_norms()
    keep = (norms <= N + 1e-12) & (norms > 0)
    keys = F_tilde.keys[keep]
    rhs = F_tilde.coefs[keep]
    factors = _factors(keys, omega)
    if keys.shape[0] == 0:
        X = TorusSeries.zero(n, d, F_tilde.declared_r if r_prime is None else r_prime,
                             F_tilde.beta, F_tilde.real)
        cert = None
        if phi is not None and r is not None and r_prime is not None:
            cert = _estimate_certificate(A, F_tilde, X, dec, phi, r, r_prime,
                                         kappa1 or freq.kappa, freq.tau, beta, 0.0)
        return HomologicalSolution(X, N, cert, (), 0.0, 0.0, method, 0.0 if cross_check else None)

    log, worst_ratio = _divisor_log(A, dec, keys, factors, rhs, kappa1, freq.tau, safety,
                                    log_divisors)
    sol = _SOLVERS[method](A, factors, rhs)
    difference = None
    if cross_check:
        other = sylvester_dense(A, factors, rhs) if method != "dense" else sylvester_schur(A, factors, rhs)
        difference = float(np.abs(sol - other).max())

    declared = F_tilde.declared_r if r_prime is None else r_prime
    X = TorusSeries(n, d, keys, sol, declared, F_tilde.beta, real=False)
    if F_tilde.real and np.all(A.imag == 0):
        X = X.with_meta(real=X.reality_defect() <= 1e-12 * (1 + float(X.mode_norms().max())))

    # residual of the equation, coefficient sum
    source = TorusSeries(n, d, keys, rhs, declared, F_tilde.beta)
    resid = directional_derivative(X, omega) - (A @ X - X @ A) - source
    residual = analytic_norm(resid, 0.0).value
    limit = 1e-9 * (1 + np.linalg.norm(A, 2)) * max(analytic_norm(F_tilde, 0.0).value, 1e-300)
    if residual > limit:
        raise np.linalg.LinAlgError(
            f"homological residual {residual:.3g} exceeds {limit:.3g}; Sylvester solve ill conditioned")
    defect = series_algebra_defect(X, algebra) if algebra is not None else 0.0
    cert = None
    if phi is not None and r is not None and r_prime is not None:
        cert = _estimate_certificate(A, F_tilde, X, dec, phi, r, r_prime,
                                     kappa1 or freq.kappa, freq.tau, beta, worst_ratio)
    return HomologicalSolution(X, N, cert, tuple(log), residual, defect, method, difference)


def _divisor_log(A, dec, keys, factors, rhs, kappa1, tau, safety, keep_log):
    """Per nonzero block: divisor modulus, block singular value, bound check."""
    left, right = _block_bases(A, dec)
    eig_left = {lab: np.linalg.eigvals(M) for lab, M in left.items()}
    eig_right = {lab: np.linalg.eigvals(M) for lab, M in right.items()}
    nil = float(np.linalg.norm(nilpotent_part(A).matrix, 2))
    nn = A.shape[0] ** 2
    mode_norm = np.linalg.norm(rhs.reshape(rhs.shape[0], -1), axis=1)
    half_norms = np.abs(keys).sum(axis=1) / 2.0
    log, worst = [], 0.0
    for s in dec.subspaces:
        for t in dec.subspaces:
            blocks = s.projection[None] @ rhs @ t.projection[None]
            bnorm = np.linalg.norm(blocks.reshape(blocks.shape[0], -1), axis=1)
            active = np.flatnonzero(bnorm > 1e-12 * mode_norm)
            if active.size == 0:
                continue
            diffs = (eig_left[s.label][:, None] - eig_right[t.label][None, :]).reshape(-1)
            moduli = np.abs(factors[active, None] - diffs[None, :]).min(axis=1)
            if kappa1 is not None:
                bounds = kappa1 / half_norms[active] ** tau
                bad = np.flatnonzero(moduli < safety * bounds)
                if bad.size:
                    i = active[bad[0]]
                    raise SmallDivisorError(
                        f"divisor {moduli[bad[0]]:.3g} at m={tuple(k / 2 for k in keys[i])} "
                        f"block ({s.label}, {t.label}) is below {safety} * {bounds[bad[0]]:.3g}")
                # predicted per-mode size from the Neumann expansion
                pnorm = np.linalg.norm(s.projection, 2) + np.linalg.norm(t.projection, 2)
                q = np.maximum(1.0, half_norms[active] ** tau / kappa1)
                pred = nn * 2.0 ** nn * (1 + nil * pnorm) ** (nn - 1) * q ** nn
                # measured block inverse size is at most 1 / modulus for normal blocks
                worst = max(worst, float(np.max(1.0 / moduli / pred)))
            else:
                bounds = np.full(active.shape, np.nan)
            if not keep_log:
                continue
            Tl, Sr = left[s.label], right[t.label]
            kl, kr = Tl.shape[0], Sr.shape[0]
            op = np.kron(Tl, np.eye(kr)) - np.kron(np.eye(kl), Sr.T)
            for idx, i in enumerate(active):
                mat = factors[i] * np.eye(kl * kr) - op
                smin = float(np.linalg.svd(mat, compute_uv=False).min())
                log.append(DivisorEntry(HalfIndex(tuple(int(v) for v in keys[i])),
                                        (s.label, t.label), float(moduli[idx]), smin,
                                        float(bounds[idx])))
    return log, worst
