"""Diophantine conditions on frequencies and on spectra, by exhaustive search.

Every check enumerates the whole l1 ball of the relevant lattice, integer
(``nu = 1``) or half-integer (``nu = 2``), in lexicographic order.  Ties in
the worst case go to the lexicographically smallest index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .fourier import HalfIndex

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
NAMED_FREQUENCIES = {
    "golden1": (GOLDEN,),
    "golden2": (1.0, GOLDEN),
    "golden3": (1.0, GOLDEN, GOLDEN ** 2),
}

DEFAULT_BUDGET = 100_000_000
DEFAULT_CAP = 10_000
_CHUNK = 400_000


class SearchBudgetError(RuntimeError):
    """The exhaustive search would enumerate more indices than allowed."""


@dataclass(frozen=True)
class Frequency:
    omega: tuple[float, ...]
    kappa: float
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        if not 0 < self.kappa:
            raise ValueError("kappa must be positive")
        if self.tau < max(1.0, len(self.omega) - 1):
            raise ValueError("tau must be at least max(1, d - 1)")

    @property
    def d(self) -> int:
        return len(self.omega)

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)

    @classmethod
    def named(cls, name: str, kappa: float, tau: float) -> "Frequency":
        try:
            return cls(NAMED_FREQUENCIES[name], kappa, tau)
        except KeyError:
            raise ValueError(f"unknown frequency name {name!r}") from None


@dataclass(frozen=True)
class DcReport:
    holds: bool
    worst_m: HalfIndex
    worst_margin: float
    N: float
    nu: int
    kappa: float = 0.0
    tau: float = 1.0
    effective_constant: float = math.inf  # min over m of |m|^tau * distance
    pair: tuple[int, int] | None = None
    checked: int = 0

    def summary(self) -> str:
        m = "(" + ",".join(f"{k / 2:g}" for k in self.worst_m.doubled) + ")"
        pair = "" if self.pair is None else f" pair={self.pair}"
        return (f"DC nu={self.nu} N={self.N:g} kappa={self.kappa:.6g} tau={self.tau:g}: "
                f"{'holds' if self.holds else 'FAILS'} worst_m={m} margin={self.worst_margin:.6g} "
                f"effective_kappa={self.effective_constant:.6g}{pair}")

    def to_json(self) -> str:
        return json.dumps({
            "holds": self.holds,
            "worst_m": list(self.worst_m.doubled),
            "margin": self.worst_margin,
            "N": self.N,
            "nu": self.nu,
        }, sort_keys=True)


def ball_size(d: int, radius: int) -> int:
    """Number of integer points with l1 norm at most ``radius`` in dimension ``d``."""
    return sum(2 ** k * math.comb(d, k) * math.comb(radius, k) for k in range(d + 1))


def _ball(d: int, radius: int) -> np.ndarray:
    if radius < 0:
        return np.zeros((0, d), dtype=np.int64)
    if d == 1:
        return np.arange(-radius, radius + 1, dtype=np.int64)[:, None]
    parts = []
    for a in range(-radius, radius + 1):
        rest = _ball(d - 1, radius - abs(a))
        parts.append(np.hstack([np.full((rest.shape[0], 1), a, dtype=np.int64), rest]))
    return np.vstack(parts)


def enumerate_lattice(d: int, nu: int, N: float, budget: int = DEFAULT_BUDGET,
                      cap: float = DEFAULT_CAP, chunk: int = _CHUNK) -> Iterator[np.ndarray]:
    """Yield chunks of doubled indices ``m`` in ``(1/nu) Z^d`` with ``0 < |m| <= N``.

    Chunks arrive in lexicographic order of the index.
    """
    if nu not in (1, 2):
        raise ValueError("nu must be 1 or 2")
    if N > cap:
        raise SearchBudgetError(f"search order {N:g} exceeds cap {cap:g}; use a smaller N")
    radius = int(math.floor(nu * N + 1e-9))
    total = ball_size(d, radius)
    if total > budget:
        raise SearchBudgetError(
            f"search over {total} indices exceeds budget {budget}; use a smaller N")
    step = 2 // nu
    if d == 1:
        v = np.arange(-radius, radius + 1, dtype=np.int64)
        v = v[v != 0]
        yield (v * step)[:, None]
        return
    buf, size = [], 0
    for a in range(-radius, radius + 1):
        rest = _ball(d - 1, radius - abs(a))
        block = np.hstack([np.full((rest.shape[0], 1), a, dtype=np.int64), rest])
        if a == 0:
            block = block[np.any(block != 0, axis=1)]
        buf.append(block * step)
        size += block.shape[0]
        if size >= chunk:
            yield np.vstack(buf)
            buf, size = [], 0
    if buf:
        yield np.vstack(buf)


@dataclass
class _Worst:
    margin: float = math.inf
    m: tuple = ()
    constant: float = math.inf
    count: int = 0


def _scan(zs: np.ndarray, nu: int, kappa: float, tau: float, N: float, omega: np.ndarray,
          budget: int, cap: float) -> list[_Worst]:
    """For each z, worst margin of ``|z - 2 pi i <m, omega>| - kappa / |m|^tau``."""
    d = omega.shape[0]
    out = [_Worst(m=(0,) * d) for _ in zs]
    for keys in enumerate_lattice(d, nu, N, budget, cap):
        norms = np.abs(keys).sum(axis=1) / 2.0
        phase = 1j * np.pi * (keys @ omega)  # 2 pi i <m, omega>
        thresh = kappa / norms ** tau
        for i, z in enumerate(zs):
            dist = np.abs(z - phase)
            margin = dist - thresh
            j = int(np.argmin(margin))
            w = out[i]
            w.count += keys.shape[0]
            if margin[j] < w.margin:
                w.margin = float(margin[j])
                w.m = tuple(int(k) for k in keys[j])
            w.constant = min(w.constant, float(np.min(dist * norms ** tau)))
    return out


def verify_frequency(freq: Frequency, N: float, budget: int = DEFAULT_BUDGET,
                     cap: float = DEFAULT_CAP) -> DcReport:
    """Check ``|<m, omega>| >= kappa / |m|^tau`` for all integer ``0 < |m| <= N``."""
    if N < 1:
        raise ValueError("search order must be at least 1")
    omega = freq.vector
    w = _Worst(m=(0,) * freq.d)
    for keys in enumerate_lattice(freq.d, 1, N, budget, cap):
        norms = np.abs(keys).sum(axis=1) / 2.0
        dist = np.abs(keys @ omega) / 2.0
        margin = dist - freq.kappa / norms ** freq.tau
        j = int(np.argmin(margin))
        if margin[j] < w.margin:
            w.margin = float(margin[j])
            w.m = tuple(int(k) for k in keys[j])
        w.constant = min(w.constant, float(np.min(dist * norms ** freq.tau)))
        w.count += keys.shape[0]
    return DcReport(w.margin >= 0, HalfIndex(w.m), w.margin, N, 1, freq.kappa, freq.tau,
                    w.constant, None, w.count)


def dc_modulo(z: complex, nu: int, kappa: float, tau: float, N: float, freq: Frequency,
              budget: int = DEFAULT_BUDGET, cap: float = DEFAULT_CAP) -> DcReport:
    """Check ``|z - 2 pi i <m, omega>| >= kappa / |m|^tau`` over ``(1/nu) Z^d``."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if N < 1.0 / nu:
        return DcReport(True, HalfIndex((0,) * freq.d), math.inf, N, nu, kappa, tau)
    w = _scan(np.array([complex(z)]), nu, kappa, tau, N, freq.vector, budget, cap)[0]
    return DcReport(w.margin >= 0, HalfIndex(w.m), w.margin, N, nu, kappa, tau,
                    w.constant, None, w.count)


def conjugate_pairs(eigs: np.ndarray, tol: float) -> np.ndarray:
    """Boolean matrix: ``True`` where ``eig_j`` equals ``conj(eig_k)`` to ``tol``."""
    return np.abs(eigs[:, None] - np.conj(eigs)[None, :]) <= tol


def spectrum_is_dc(A, kappa: float, tau: float, N: float, freq: Frequency,
                   budget: int = DEFAULT_BUDGET, cap: float = DEFAULT_CAP,
                   eigenvalues=None, integer_only: bool = False) -> DcReport:
    """Diophantine check of all eigenvalue differences of ``A``.

    Differences of non-conjugate pairs are checked on the half lattice, the
    others on the integer lattice.  ``integer_only`` restricts every pair to
    the integer lattice, the setting of groups that never double the period.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    A = np.asarray(A, dtype=complex)
    eigs = np.linalg.eigvals(A) if eigenvalues is None else np.asarray(eigenvalues, dtype=complex)
    n = eigs.shape[0]
    tol = 1e-10 * (1 + (np.linalg.norm(A, 2) if A.size else 0.0))
    conj = conjugate_pairs(eigs, tol)
    z1, z2, pairs1, pairs2 = [], [], [], []
    for j in range(n):
        for k in range(j, n):
            z = eigs[j] - eigs[k]
            z1.append(z)
            pairs1.append((j, k))
            if not integer_only and not conj[j, k]:
                z2.append(z)
                pairs2.append((j, k))
    d = freq.d
    best = DcReport(True, HalfIndex((0,) * d), math.inf, N, 1, kappa, tau)
    for nu, zs, pairs in ((1, z1, pairs1), (2, z2, pairs2)):
        if not zs or N < 1.0 / nu:
            continue
        results = _scan(np.array(zs), nu, kappa, tau, N, freq.vector, budget, cap)
        for w, pair in zip(results, pairs):
            if w.margin < best.worst_margin:
                best = DcReport(w.margin >= 0, HalfIndex(w.m), w.margin, N, nu, kappa, tau,
                                min(w.constant, best.effective_constant), pair, 0)
    return best


def find_resonance(z: complex, nu: int, kappa: float, tau: float, N: float, freq: Frequency,
                   budget: int = DEFAULT_BUDGET, cap: float = DEFAULT_CAP) -> HalfIndex | None:
    """Among ``m`` violating the DC bound for ``z``, the lexicographically first closest one."""
    if N < 1.0 / nu:
        return None
    omega = freq.vector
    best, best_m = math.inf, None
    for keys in enumerate_lattice(freq.d, nu, N, budget, cap):
        norms = np.abs(keys).sum(axis=1) / 2.0
        dist = np.abs(complex(z) - 1j * np.pi * (keys @ omega))
        bad = dist < kappa / norms ** tau
        if not np.any(bad):
            continue
        idx = np.flatnonzero(bad)
        j = idx[int(np.argmin(dist[idx]))]
        if dist[j] < best:
            best, best_m = float(dist[j]), tuple(int(k) for k in keys[j])
    return None if best_m is None else HalfIndex(best_m)
