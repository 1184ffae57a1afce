"""Matrix-valued trigonometric polynomials on the torus and the double torus.

Fourier indices live on the half lattice (1/2)Z^d and are stored as doubled
integer vectors, so one container covers both periodicities: a series is
periodic on the torus exactly when every stored doubled index is even.

Norms are coefficient sums.  For a strip half-width ``r`` the analytic norm is
``sum_m ||F(m)|| exp(2 pi |m| r)`` with ``|m|`` the l1 norm and ``||.||`` the
operator 2-norm; it dominates the supremum of the holomorphic extension on
the strip and is exact for a single mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.special import gammaln

__all__ = [
    "HalfIndex",
    "NormBound",
    "TorusSeries",
    "TruncationResult",
    "ExpPair",
    "SeriesDivergenceError",
    "eval_series",
    "eval_grid",
    "directional_derivative",
    "analytic_norm",
    "gevrey_norm",
    "gevrey_mode_factor",
    "gevrey_entire_sum",
    "truncate",
    "clip_support",
    "prune",
    "multiply",
    "exp_series",
    "truncation_constant",
    "gevrey_truncation_constant",
    "truncation_bound",
    "gevrey_truncation_bound",
]

_ZERO_TOL = 0.0


class SeriesDivergenceError(ValueError):
    """Raised when an exponential series is requested for too large an argument."""


@dataclass(frozen=True)
class HalfIndex:
    """A point of the half lattice, stored as twice its value."""

    doubled: tuple[int, ...]

    @classmethod
    def from_value(cls, m: Iterable[float]) -> "HalfIndex":
        doubled = []
        for x in m:
            twice = 2.0 * float(x)
            k = int(round(twice))
            if abs(twice - k) > 1e-9:
                raise ValueError(f"{x} is not a half integer")
            doubled.append(k)
        return cls(tuple(doubled))

    @property
    def value(self) -> np.ndarray:
        return np.asarray(self.doubled, dtype=float) / 2.0

    @property
    def norm(self) -> float:
        return sum(abs(k) for k in self.doubled) / 2.0

    @property
    def is_integer(self) -> bool:
        return all(k % 2 == 0 for k in self.doubled)

    def __neg__(self) -> "HalfIndex":
        return HalfIndex(tuple(-k for k in self.doubled))

    def __add__(self, other: "HalfIndex") -> "HalfIndex":
        return HalfIndex(tuple(a + b for a, b in zip(self.doubled, other.doubled)))


@dataclass(frozen=True)
class NormBound:
    value: float
    kind: str  # "exact" or "upper_bound"
    r: float
    beta: float | None = None

    def __float__(self) -> float:
        return float(self.value)


def _op_norms(coefs: np.ndarray) -> np.ndarray:
    if coefs.shape[0] == 0:
        return np.zeros(0)
    if coefs.shape[1] == 1:
        return np.abs(coefs[:, 0, 0])
    return np.linalg.norm(coefs, ord=2, axis=(1, 2))


def _l1_half(keys: np.ndarray) -> np.ndarray:
    return np.abs(keys).sum(axis=1) / 2.0


def _lexsort_keys(keys: np.ndarray) -> np.ndarray:
    if keys.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(keys.T[::-1])


class TorusSeries:
    """Finite Fourier series with n x n complex matrix coefficients.

    Parameters
    ----------
    n, d : int
        Matrix size and torus dimension.
    keys : array of shape (K, d)
        Doubled half-lattice indices.
    coefs : array of shape (K, n, n)
        Coefficients; rows that are exactly zero are dropped and duplicate
        keys are summed.
    declared_r : float
        Strip half-width the series is declared analytic on.
    beta : float or None
        Gevrey exponent, ``None`` for analytic regularity.
    real : bool
        Declares conjugate symmetry ``F(-m) = conj(F(m))``.
    """

    __slots__ = ("n", "d", "keys", "coefs", "declared_r", "beta", "real", "_norms")
    __array_ufunc__ = None  # let numpy arrays defer to the series operators

    def __init__(self, n, d, keys, coefs, declared_r=0.5, beta=None, real=False):
        n, d = int(n), int(d)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, d)
        coefs = np.asarray(coefs, dtype=complex).reshape(-1, n, n)
        if keys.shape[0] != coefs.shape[0]:
            raise ValueError("keys and coefficients disagree in length")
        if beta is not None and not beta > 1:
            raise ValueError("Gevrey exponent must exceed 1")
        if keys.shape[0]:
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            if uniq.shape[0] != keys.shape[0]:
                summed = np.zeros((uniq.shape[0], n, n), dtype=complex)
                np.add.at(summed, inverse, coefs)
                keys, coefs = uniq, summed
            else:
                order = _lexsort_keys(keys)
                keys, coefs = keys[order], coefs[order]
            nonzero = np.any(coefs != 0, axis=(1, 2))
            keys, coefs = keys[nonzero], coefs[nonzero]
        keys = np.ascontiguousarray(keys)
        coefs = np.ascontiguousarray(coefs)
        keys.setflags(write=False)
        coefs.setflags(write=False)
        self.n, self.d = n, d
        self.keys, self.coefs = keys, coefs
        self.declared_r = float(declared_r)
        self.beta = None if beta is None else float(beta)
        self.real = bool(real)
        self._norms = None

    # construction helpers -------------------------------------------------
    @classmethod
    def zero(cls, n, d, declared_r=0.5, beta=None, real=True):
        return cls(n, d, np.zeros((0, d)), np.zeros((0, n, n)), declared_r, beta, real)

    @classmethod
    def constant(cls, matrix, d, declared_r=0.5, beta=None, real=None):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=complex))
        if real is None:
            real = bool(np.all(matrix.imag == 0))
        return cls(matrix.shape[0], d, np.zeros((1, d)), matrix[None], declared_r, beta, real)

    @classmethod
    def from_modes(cls, modes: Mapping, n=None, d=None, declared_r=0.5, beta=None, real=False):
        """Build from ``{m: matrix}`` where ``m`` is a HalfIndex or a tuple of half integers."""
        keys, coefs = [], []
        for m, c in modes.items():
            hi = m if isinstance(m, HalfIndex) else HalfIndex.from_value(m)
            keys.append(hi.doubled)
            coefs.append(np.atleast_2d(np.asarray(c, dtype=complex)))
        if d is None:
            d = len(keys[0])
        if n is None:
            n = coefs[0].shape[0]
        return cls(n, d, np.array(keys).reshape(-1, d), np.array(coefs).reshape(-1, n, n),
                   declared_r, beta, real)

    def _like(self, keys, coefs, real=None):
        return TorusSeries(self.n, self.d, keys, coefs, self.declared_r, self.beta,
                           self.real if real is None else real)

    def with_meta(self, declared_r=None, beta="keep", real=None):
        return TorusSeries(self.n, self.d, self.keys, self.coefs,
                           self.declared_r if declared_r is None else declared_r,
                           self.beta if beta == "keep" else beta,
                           self.real if real is None else real)

    # views ----------------------------------------------------------------
    @property
    def coeffs(self) -> dict[HalfIndex, np.ndarray]:
        return {HalfIndex(tuple(int(v) for v in k)): c for k, c in zip(self.keys, self.coefs)}

    @property
    def regularity(self) -> str:
        return "analytic" if self.beta is None else f"gevrey:{self.beta:g}"

    def __len__(self):
        return self.keys.shape[0]

    def coefficient(self, m) -> np.ndarray:
        hi = m if isinstance(m, HalfIndex) else HalfIndex.from_value(m)
        hit = np.all(self.keys == np.asarray(hi.doubled), axis=1)
        if np.any(hit):
            return self.coefs[np.argmax(hit)].copy()
        return np.zeros((self.n, self.n), dtype=complex)

    def mean(self) -> np.ndarray:
        return self.coefficient((0,) * self.d)

    def mode_norms(self) -> np.ndarray:
        if self._norms is None:
            self._norms = _op_norms(self.coefs)
        return self._norms

    def index_norms(self) -> np.ndarray:
        return _l1_half(self.keys)

    def max_index_norm(self) -> float:
        return float(self.index_norms().max()) if len(self) else 0.0

    def periodicity_class(self, tol: float = 0.0) -> str:
        """``"torus"`` unless some half-integer mode exceeds ``tol`` times the largest mode."""
        odd = np.any(self.keys % 2 != 0, axis=1)
        if not np.any(odd):
            return "torus"
        if tol > 0 and self.mode_norms()[odd].max() <= tol * self.mode_norms().max():
            return "torus"
        return "double_torus"

    def is_torus_periodic(self, tol: float = 0.0) -> bool:
        return self.periodicity_class(tol) == "torus"

    def reality_defect(self) -> float:
        """Largest ``||F(-m) - conj(F(m))||`` over stored modes."""
        mirrored = self._like(-self.keys, np.conj(self.coefs), real=False)
        diff = self - mirrored
        return float(diff.mode_norms().max()) if len(diff) else 0.0

    # arithmetic -------------------------------------------------------------
    def _check(self, other):
        if not isinstance(other, TorusSeries):
            raise TypeError("expected a TorusSeries")
        if (self.n, self.d) != (other.n, other.d):
            raise ValueError("dimension mismatch between series")

    def __add__(self, other):
        if not isinstance(other, TorusSeries):
            other = TorusSeries.constant(other, self.d, self.declared_r, self.beta)
        self._check(other)
        return TorusSeries(self.n, self.d, np.vstack([self.keys, other.keys]),
                           np.concatenate([self.coefs, other.coefs]),
                           min(self.declared_r, other.declared_r), self.beta,
                           self.real and other.real)

    __radd__ = __add__

    def __neg__(self):
        return self._like(self.keys, -self.coefs)

    def __sub__(self, other):
        if not isinstance(other, TorusSeries):
            other = TorusSeries.constant(other, self.d, self.declared_r, self.beta)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c):
        real = self.real and np.isreal(c)
        return self._like(self.keys, self.coefs * c, real=real)

    def __mul__(self, c):
        if isinstance(c, TorusSeries):
            return multiply(self, c)
        return self.scale(c)

    __rmul__ = scale

    def __matmul__(self, other):
        if isinstance(other, TorusSeries):
            return multiply(self, other)
        other = np.asarray(other, dtype=complex)
        real = self.real and bool(np.all(other.imag == 0))
        return self._like(self.keys, self.coefs @ other, real=real)

    def __rmatmul__(self, other):
        other = np.asarray(other, dtype=complex)
        real = self.real and bool(np.all(other.imag == 0))
        return self._like(self.keys, other @ self.coefs, real=real)

    def conj_transpose(self):
        """Pointwise conjugate transpose for real theta: index flips sign."""
        return self._like(-self.keys, np.conj(np.swapaxes(self.coefs, 1, 2)))

    def transpose(self):
        return self._like(self.keys, np.swapaxes(self.coefs, 1, 2))

    def conjugate(self):
        """Pointwise complex conjugate for real theta."""
        return self._like(-self.keys, np.conj(self.coefs))

    def trace(self):
        tr = np.trace(self.coefs, axis1=1, axis2=2)
        return TorusSeries(1, self.d, self.keys, tr.reshape(-1, 1, 1), self.declared_r,
                           self.beta, self.real)

    def map_coefficients(self, fn):
        return self._like(self.keys, np.array([fn(c) for c in self.coefs]).reshape(-1, self.n, self.n))

    def shift(self, doubled_shift):
        return self._like(self.keys + np.asarray(doubled_shift, dtype=np.int64), self.coefs, real=False)

    # serialization -----------------------------------------------------------
    def to_text(self, header="torus-series v1") -> str:
        lines = [f"{header} n={self.n} d={self.d} r={self.declared_r!r} regularity={self.regularity}"]
        for k, c in zip(self.keys, self.coefs):
            parts = [str(int(v)) for v in k]
            for z in c.reshape(-1):
                parts.append(repr(float(z.real)))
                parts.append(repr(float(z.imag)))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, header="torus-series v1") -> "TorusSeries":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith(header):
            raise ValueError(f"missing '{header}' header")
        fields = dict(tok.split("=", 1) for tok in lines[0][len(header):].split())
        n, d, r = int(fields["n"]), int(fields["d"]), float(fields["r"])
        reg = fields.get("regularity", "analytic")
        beta = None if reg == "analytic" else float(reg.split(":", 1)[1])
        keys, coefs = [], []
        for ln in lines[1:]:
            toks = ln.split()
            if len(toks) != d + 2 * n * n:
                raise ValueError(f"malformed coefficient line: {ln!r}")
            keys.append([int(t) for t in toks[:d]])
            vals = np.array([float(t) for t in toks[d:]])
            coefs.append((vals[0::2] + 1j * vals[1::2]).reshape(n, n))
        series = cls(n, d, np.array(keys).reshape(-1, d), np.array(coefs).reshape(-1, n, n), r, beta)
        if len(series) and series.reality_defect() == 0.0:
            series = series.with_meta(real=True)
        return series

    def __repr__(self):
        return (f"TorusSeries(n={self.n}, d={self.d}, modes={len(self)}, "
                f"r={self.declared_r}, {self.regularity}, real={self.real})")


# evaluation ---------------------------------------------------------------

def eval_grid(F: TorusSeries, thetas) -> np.ndarray:
    """Evaluate at an array of points of shape (P, d); returns (P, n, n)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != F.d:
        raise ValueError(f"theta has length {thetas.shape[1]}, expected {F.d}")
    if len(F) == 0:
        return np.zeros((thetas.shape[0], F.n, F.n), dtype=complex)
    phases = np.exp(1j * np.pi * (thetas @ F.keys.T.astype(float)))
    return np.einsum("pk,kij->pij", phases, F.coefs)


def eval_series(F: TorusSeries, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != F.d:
        raise ValueError(f"theta has length {theta.shape[0]}, expected {F.d}")
    return eval_grid(F, theta[None, :])[0]


def directional_derivative(F: TorusSeries, omega) -> TorusSeries:
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if omega.shape[0] != F.d:
        raise ValueError("frequency length does not match torus dimension")
    factor = 1j * np.pi * (F.keys @ omega)
    return F._like(F.keys, F.coefs * factor[:, None, None])


# norms ----------------------------------------------------------------------

def analytic_norm(F: TorusSeries, r: float) -> NormBound:
    if r < 0:
        raise ValueError("strip width must be nonnegative")
    if len(F) == 0:
        return NormBound(0.0, "exact", r)
    weights = np.exp(2 * np.pi * F.index_norms() * r)
    value = float(np.sum(F.mode_norms() * weights))
    return NormBound(value, "exact" if len(F) == 1 else "upper_bound", r)


def gevrey_entire_sum(x: float, a: float, terms: int | None = None) -> float:
    """``sum_k x^k / (k!)^a`` by direct summation in log space."""
    if x == 0:
        return 1.0
    if terms is None:
        # the largest term sits near k = x**(1/a); go well past it
        peak = x ** (1.0 / a) if a > 0 else 0.0
        terms = int(60 + 4 * peak + 20 * math.sqrt(peak + 1))
        if a < 1:
            terms = max(terms, int(60 + 6 * x ** (1.0 / a)))
    k = np.arange(terms, dtype=float)
    logs = k * math.log(x) - a * gammaln(k + 1)
    top = logs.max()
    return float(math.exp(top) * np.exp(logs - top).sum())


def gevrey_mode_factor(m, beta: float, r: float) -> float:
    """Gevrey norm of ``exp(2 pi i <m, theta>)``: ``prod_j E_beta(r^beta 2 pi |m_j|)``."""
    m = np.asarray(m.value if isinstance(m, HalfIndex) else m, dtype=float).reshape(-1)
    out = 1.0
    for mj in np.abs(m):
        out *= gevrey_entire_sum(r ** beta * 2 * np.pi * mj, beta)
    return out


def gevrey_norm(F: TorusSeries, beta: float, r: float) -> NormBound:
    if not beta > 1 or r < 0:
        raise ValueError("need beta > 1 and r >= 0")
    if len(F) == 0:
        return NormBound(0.0, "upper_bound", r, beta)
    norms = F.mode_norms()
    factors = np.array([gevrey_mode_factor(k / 2.0, beta, r) for k in F.keys])
    return NormBound(float(np.sum(norms * factors)), "upper_bound", r, beta)


# truncation ------------------------------------------------------------------

def truncation_constant(d: int) -> float:
    """Constant of the analytic truncation bound, valid for r - r' <= 1/2.

    Counting doubled indices of l1 norm k by ``2^(2d-1) k^(d-1)`` and summing the
    geometric-polynomial tail with Eulerian numbers gives
    ``4^(d-1) (d-1)! 3^(d-1) pi^-d e^(pi d / 2)``.
    """
    return 4.0 ** (d - 1) * math.factorial(d - 1) * 3.0 ** (d - 1) * math.pi ** (-d) * math.exp(math.pi * d / 2)


def truncation_bound(norm_r: float, N: float, r: float, r_target: float, d: int) -> float:
    delta = r - r_target
    if delta <= 0:
        raise ValueError("target strip must be strictly narrower")
    wide = max(1.0, 2 * delta * math.exp(math.pi * d * (delta - 0.5)))
    big_n = max(N, 1.0)
    return (truncation_constant(d) * wide * big_n ** d / delta ** (d + 1) * norm_r
            * math.exp(-2 * math.pi * N * delta))


def gevrey_truncation_constant(d: int, beta: float) -> float:
    """Constant of the Gevrey truncation bound for r <= 1: ``2^(d (beta - 1))``."""
    return 2.0 ** (d * (beta - 1))


def gevrey_truncation_bound(norm_r: float, N: float, r: float, r_target: float, d: int,
                            beta: float) -> float:
    delta = r - r_target
    if delta <= 0:
        raise ValueError("target strip must be strictly narrower")
    scale = max(r, 1.0) ** (d * (beta - 1))
    inverse_width = max(delta ** (-2 * (d + 1)), delta ** (-d * (beta - 1)))
    big_n = max(N, 1.0)
    return (gevrey_truncation_constant(d, beta) * scale * norm_r * big_n ** (d + 1) * inverse_width
            * math.exp(-2 * delta * N ** (1.0 / beta)))


@dataclass(frozen=True)
class TruncationResult:
    series: TorusSeries
    tail: NormBound
    lemma_bound: float
    gevrey_tail: NormBound | None = None
    gevrey_lemma_bound: float | None = None


def truncate(F: TorusSeries, N: float, r_target: float, r: float | None = None) -> TruncationResult:
    """Keep modes with ``|m| <= N`` and measure what was dropped at ``r_target``."""
    r = F.declared_r if r is None else r
    if r_target >= r:
        raise ValueError(f"target strip {r_target} must be below {r}")
    if N < 0:
        raise ValueError("truncation order must be nonnegative")
    keep = F.index_norms() <= N + 1e-12
    kept = F._like(F.keys[keep], F.coefs[keep])
    dropped = F._like(F.keys[~keep], F.coefs[~keep])
    tail = NormBound(analytic_norm(dropped, r_target).value, "exact", r_target)
    bound = truncation_bound(analytic_norm(F, r).value, N, r, r_target, F.d)
    if F.beta is None:
        return TruncationResult(kept, tail, bound)
    gtail = NormBound(gevrey_norm(dropped, F.beta, r_target).value if len(dropped) else 0.0,
                      "exact", r_target, F.beta)
    gbound = gevrey_truncation_bound(gevrey_norm(F, F.beta, r).value if len(F) else 0.0,
                          N, r, r_target, F.d, F.beta)
    return TruncationResult(kept, tail, bound, gtail, gbound)


def clip_support(F: TorusSeries, n_max: float, r: float) -> tuple[TorusSeries, float]:
    """Drop modes beyond ``n_max``; return the series and the dropped analytic norm at ``r``."""
    keep = F.index_norms() <= n_max + 1e-12
    if np.all(keep):
        return F, 0.0
    dropped = F._like(F.keys[~keep], F.coefs[~keep])
    return F._like(F.keys[keep], F.coefs[keep]), analytic_norm(dropped, r).value


def prune(F: TorusSeries, r: float, threshold: float) -> tuple[TorusSeries, float]:
    """Drop modes whose weighted size at ``r`` is below ``threshold``.

    Mirror modes are dropped together so conjugate symmetry survives.
    """
    if len(F) == 0 or threshold <= 0:
        return F, 0.0
    weighted = F.mode_norms() * np.exp(2 * np.pi * F.index_norms() * r)
    small = weighted < threshold
    if F.real and np.any(small):
        lookup = {tuple(k): i for i, k in enumerate(F.keys)}
        for i in np.flatnonzero(~small):
            j = lookup.get(tuple(-F.keys[i]))
            if j is not None:
                small[j] = False
    if not np.any(small):
        return F, 0.0
    return F._like(F.keys[~small], F.coefs[~small]), float(weighted[small].sum())


# products --------------------------------------------------------------------

def _encode(keys: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    code = np.zeros(keys.shape[0], dtype=np.int64)
    for j in range(keys.shape[1]):
        code = code * span[j] + (keys[:, j] - lo[j])
    return code


def multiply(F: TorusSeries, G: TorusSeries, deterministic: bool = True,
             chunk: int = 2_000_000) -> TorusSeries:
    """Pointwise product ``F(theta) G(theta)`` as a convolution of coefficients.

    Every pair product is formed explicitly and accumulated in a fixed order,
    so rounding errors stay relative to each pair (small high modes are not
    swamped by large low ones).  With ``deterministic=False`` the pairs are
    grouped by a dense FFT convolution instead, which is faster for wide
    supports but only accurate to rounding relative to the largest coefficient.
    """
    F._check(G)
    real = F.real and G.real
    r = min(F.declared_r, G.declared_r)
    if len(F) == 0 or len(G) == 0:
        return TorusSeries.zero(F.n, F.d, r, F.beta, real)
    if not deterministic:
        return _multiply_fft(F, G, real, r)
    lo = F.keys.min(axis=0) + G.keys.min(axis=0)
    hi = F.keys.max(axis=0) + G.keys.max(axis=0)
    span = hi - lo + 1
    out_codes, out_coefs = [], []
    per = max(1, chunk // max(1, len(G) * F.n * F.n))
    for start in range(0, len(F), per):
        fk = F.keys[start:start + per]
        fc = F.coefs[start:start + per]
        sums = (fk[:, None, :] + G.keys[None, :, :]).reshape(-1, F.d)
        prods = np.matmul(fc[:, None], G.coefs[None, :]).reshape(-1, F.n, F.n)
        out_codes.append(_encode(sums, lo, span))
        out_coefs.append(prods)
    codes = np.concatenate(out_codes)
    prods = np.concatenate(out_coefs)
    uniq, inverse = np.unique(codes, return_inverse=True)
    acc = np.zeros((uniq.shape[0], F.n, F.n), dtype=complex)
    np.add.at(acc, inverse.reshape(-1), prods)
    keys = np.zeros((uniq.shape[0], F.d), dtype=np.int64)
    rest = uniq.copy()
    for j in reversed(range(F.d)):
        keys[:, j] = rest % span[j] + lo[j]
        rest //= span[j]
    return TorusSeries(F.n, F.d, keys, acc, r, F.beta, real)


def _multiply_fft(F, G, real, r):
    from scipy.signal import fftconvolve

    def dense(S):
        lo = S.keys.min(axis=0)
        shape = tuple(S.keys.max(axis=0) - lo + 1)
        arr = np.zeros(shape + (S.n, S.n), dtype=complex)
        arr[tuple((S.keys - lo).T)] = S.coefs
        return arr, lo

    a, alo = dense(F)
    b, blo = dense(G)
    d, n = F.d, F.n
    axes = tuple(range(d))
    shape = tuple(np.array(a.shape[:d]) + np.array(b.shape[:d]) - 1)
    out = np.zeros(shape + (n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out[..., i, j] += fftconvolve(a[..., i, k], b[..., k, j], axes=axes)
    idx = np.argwhere(np.any(np.abs(out) > 0, axis=(-1, -2)))
    keys = idx + alo + blo
    return TorusSeries(n, d, keys, out[tuple(idx.T)], r, F.beta, real)


# exponentials ----------------------------------------------------------------

@dataclass(frozen=True)
class ExpPair:
    """``exp(X)`` and ``exp(-X)`` as truncated Taylor sums."""

    forward: TorusSeries
    inverse: TorusSeries
    order: int
    argument_norm: float
    tol: float


def _taylor_order(nu: float, tol: float) -> int:
    k = 0
    term = 1.0  # nu^k / k!
    while True:
        term_next = term * nu / (k + 1)  # nu^(k+1)/(k+1)!
        ratio = nu / (k + 2)
        if ratio < 1 and term_next / (1 - ratio) <= tol:
            return k
        term = term_next
        k += 1
        if k > 10_000:
            raise SeriesDivergenceError("Taylor order search did not terminate")


def _taylor(X: TorusSeries, order: int, sign: float, n_max, r, prune_below):
    identity = TorusSeries.constant(np.eye(X.n), X.d, X.declared_r, X.beta, real=True)
    total = identity
    power = identity
    dropped = 0.0
    for k in range(1, order + 1):
        power = multiply(power, X).scale(sign / k)
        if n_max is not None:
            power, lost = clip_support(power, n_max, r)
            dropped += lost
        if prune_below:
            power, lost = prune(power, r, prune_below)
            dropped += lost
        total = total + power
    return total.with_meta(real=X.real), dropped


def exp_series(X: TorusSeries, tol: float, guard: float = 5.0, r: float | None = None,
               n_max: float | None = None, prune_below: float = 0.0) -> ExpPair:
    """Truncated exponential of a series together with its inverse.

    The Taylor order ``K`` is the least one whose remainder bound
    ``nu^(K+1)/(K+1)! / (1 - nu/(K+2))`` is below ``tol * exp(-nu) / 2``, where
    ``nu`` is the analytic norm of ``X`` at ``r``.  This makes the defect of
    ``exp(X) exp(-X) - Id`` at most ``2 tol`` in that norm.
    """
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    r = X.declared_r if r is None else r
    nu = analytic_norm(X, r).value
    if nu >= guard:
        raise SeriesDivergenceError(
            f"exponential argument has norm {nu:.3g} >= guard {guard}; step size invalid")
    order = _taylor_order(nu, tol * math.exp(-nu) / 2.0)
    fwd, _ = _taylor(X, order, 1.0, n_max, r, prune_below)
    inv, _ = _taylor(X, order, -1.0, n_max, r, prune_below)
    return ExpPair(fwd, inv, order, nu, tol)
