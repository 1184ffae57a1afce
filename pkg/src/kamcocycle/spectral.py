"""Spectral clustering, invariant decompositions and trivial maps.

A decomposition splits C^n into invariant subspaces of a constant matrix,
grouped so that eigenvalues in different groups are more than a gap apart.
Subspaces come from a reordered complex Schur form, so each basis is
orthonormal even when the projections themselves are oblique.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .fourier import HalfIndex, TorusSeries, eval_grid

GROUP_KINDS = ("GL_C", "GL_R", "SL2_C", "SL_R", "Sp_R", "O", "U")
PAIRING_TOL = 1e-8


class ProjectionCertificateError(RuntimeError):
    """A spectral projection is larger than the conditioning certificate allows."""


class CoarseningError(ValueError):
    """The parity hypothesis for merging a decomposition fails on a block pair."""


def symplectic_form(n: int) -> np.ndarray:
    if n % 2:
        raise ValueError("symplectic form needs even dimension")
    h = n // 2
    J = np.zeros((n, n))
    J[:h, h:] = -np.eye(h)
    J[h:, :h] = np.eye(h)
    return J


@dataclass(frozen=True)
class LieGroupTag:
    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group {self.kind!r}; expected one of {GROUP_KINDS}")
        if self.kind == "Sp_R" and self.n % 2:
            raise ValueError("Sp_R needs even n")
        if self.kind == "SL2_C" and self.n != 2:
            raise ValueError("SL2_C needs n = 2")

    @property
    def is_real(self) -> bool:
        return self.kind in ("GL_R", "SL_R", "Sp_R", "O")

    @property
    def compact(self) -> bool:
        return self.kind in ("O", "U")

    @property
    def integer_lattice_only(self) -> bool:
        """Groups whose resonances can be removed without period doubling."""
        return self.kind in ("GL_C", "U")

    def algebra_defect(self, X) -> float:
        """Distance-like defect of a matrix (or stack of matrices) from the Lie algebra."""
        X = np.asarray(X, dtype=complex)
        if X.ndim == 2:
            X = X[None]
        out = 0.0
        if self.is_real:
            out += float(np.abs(X.imag).max())
        if self.kind in ("SL2_C", "SL_R"):
            out += float(np.abs(np.trace(X, axis1=1, axis2=2)).max())
        if self.kind == "Sp_R":
            J = symplectic_form(self.n)
            out += _stack_norm(np.swapaxes(X, 1, 2) @ J + J @ X)
        if self.kind in ("O", "U"):
            out += _stack_norm(np.conj(np.swapaxes(X, 1, 2)) + X)
        return out

    def project_algebra(self, X: np.ndarray) -> np.ndarray:
        """Nearest-ish algebra element, used to clean rounding in constants."""
        X = np.asarray(X, dtype=complex)
        if self.is_real:
            X = X.real.astype(complex)
        if self.kind in ("SL2_C", "SL_R"):
            X = X - np.trace(X) / self.n * np.eye(self.n)
        if self.kind == "Sp_R":
            J = symplectic_form(self.n)
            X = 0.5 * (X + J @ X.T @ J)  # sp means X = J X^T J
        if self.kind in ("O", "U"):
            X = 0.5 * (X - X.conj().T)
        return X


def _stack_norm(X: np.ndarray) -> float:
    if X.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(X, ord=2, axis=(1, 2)).max())


def default_grid(d: int, total: int = 50) -> np.ndarray:
    """A regular grid on the double torus [0, 2)^d with at least ``total`` points."""
    per = max(2, math.ceil(total ** (1.0 / d)))
    axes = [np.arange(per) * 2.0 / per for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def group_defect(M, group: LieGroupTag, thetas=None) -> float:
    """Largest defect from ``group`` over a matrix, a stack of matrices, or a sampled series."""
    if isinstance(M, TorusSeries):
        if thetas is None:
            thetas = default_grid(M.d)
        M = eval_grid(M, thetas)
    M = np.asarray(M, dtype=complex)
    if M.ndim == 2:
        M = M[None]
    if M.shape[-1] != group.n:
        raise ValueError("matrix size does not match the group")
    out = 0.0
    if group.is_real:
        out += float(np.abs(M.imag).max())
    if group.kind in ("SL2_C", "SL_R"):
        out += float(np.abs(np.linalg.det(M) - 1).max())
    if group.kind == "Sp_R":
        J = symplectic_form(group.n)
        out += _stack_norm(np.swapaxes(M, 1, 2) @ J @ M - J)
    if group.kind in ("O", "U"):
        out += _stack_norm(np.conj(np.swapaxes(M, 1, 2)) @ M - np.eye(group.n))
    return out


def matrix_hash(A: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(np.asarray(A, dtype=complex)).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class Subspace:
    label: int
    basis: np.ndarray        # n x k, orthonormal columns
    projection: np.ndarray   # n x n
    eigenvalues: np.ndarray  # eigenvalues of the restriction


@dataclass(frozen=True)
class Decomposition:
    subspaces: tuple[Subspace, ...]
    gap: float
    gamma_cert: int
    source_matrix_hash: str
    real_source: bool = False

    @property
    def n(self) -> int:
        return self.subspaces[0].basis.shape[0]

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.subspaces]

    @property
    def projections(self) -> list[np.ndarray]:
        return [s.projection for s in self.subspaces]

    def subspace(self, label: int) -> Subspace:
        for s in self.subspaces:
            if s.label == label:
                return s
        raise KeyError(label)

    def conjugate_label(self, label: int, tol: float = 1e-8) -> int | None:
        P = np.conj(self.subspace(label).projection)
        scale = 1.0 + np.linalg.norm(P, 2)
        for s in self.subspaces:
            if np.linalg.norm(s.projection - P, 2) <= tol * scale:
                return s.label
        return None

    def projection_defects(self) -> tuple[float, float]:
        """``||sum P - Id||`` and the largest ``||P_L P_L' - delta P_L||``."""
        Ps = self.projections
        total = np.linalg.norm(sum(Ps) - np.eye(self.n), 2)
        worst = 0.0
        for i, P in enumerate(Ps):
            for j, Q in enumerate(Ps):
                target = P if i == j else 0.0
                worst = max(worst, np.linalg.norm(P @ Q - target, 2))
        return float(total), float(worst)

    def to_text(self) -> str:
        n = self.n
        lines = [f"decomposition v1 n={n} gap={self.gap!r} gamma={self.gamma_cert} "
                 f"source={self.source_matrix_hash} count={len(self.subspaces)}"]
        for s in self.subspaces:
            lines.append(f"{s.label} {s.basis.shape[1]} " + _cplx_tokens(s.basis)
                         + " " + _cplx_tokens(s.projection) + " " + _cplx_tokens(s.eigenvalues))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Decomposition":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines[0].startswith("decomposition v1"):
            raise ValueError("missing 'decomposition v1' header")
        f = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
        n = int(f["n"])
        subs = []
        for ln in lines[1:]:
            toks = ln.split()
            label, k = int(toks[0]), int(toks[1])
            vals = np.array([float(t) for t in toks[2:]])
            z = vals[0::2] + 1j * vals[1::2]
            basis = z[: n * k].reshape(n, k)
            proj = z[n * k: n * k + n * n].reshape(n, n)
            eig = z[n * k + n * n:]
            subs.append(Subspace(label, basis, proj, eig))
        return cls(tuple(subs), float(f["gap"]), int(f["gamma"]), f["source"])


def _cplx_tokens(arr) -> str:
    out = []
    for z in np.asarray(arr, dtype=complex).reshape(-1):
        out.append(repr(float(z.real)))
        out.append(repr(float(z.imag)))
    return " ".join(out)


def _cluster(values: np.ndarray, gap: float) -> list[list[int]]:
    """Transitive closure of ``|a - b| <= gap`` as sorted index groups."""
    k = len(values)
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(k):
        for j in range(i + 1, k):
            if abs(values[i] - values[j]) <= gap:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(k):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def _cluster_key(values) -> tuple:
    c = np.mean(values)
    return (round(float(c.imag), 12), round(float(c.real), 12))


def eigen_clusters(A, gap: float) -> Decomposition:
    """Decompose C^n into invariant subspaces of ``A`` over eigenvalue clusters.

    Clusters are the transitive closure of ``|alpha - beta| <= gap``.  They are
    ordered by the imaginary then real part of their mean eigenvalue, and
    labelled 0, 1, ... in that order.
    """
    A = np.asarray(A, dtype=complex)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    n = A.shape[0]
    real_source = bool(np.all(A.imag == 0))
    T, Z = sla.schur(A, output="complex")
    diag = np.diag(T).copy()
    groups = _cluster(diag, gap)
    groups.sort(key=lambda g: _cluster_key(diag[g]))
    bases = []
    for g in groups:
        members = diag[g]

        def pick(x, members=members, others=np.delete(diag, g)):
            near_in = np.min(np.abs(members - x))
            near_out = np.min(np.abs(others - x)) if len(others) else np.inf
            return near_in <= near_out

        k = len(g)
        if k == n:
            bases.append(np.eye(n, dtype=complex) if n else Z)
            continue
        Ts, Zs, sdim = sla.schur(A, output="complex", sort=pick)
        if sdim != k:
            raise np.linalg.LinAlgError("Schur reordering split a cluster")
        bases.append(Zs[:, :k])
    full = np.hstack(bases)
    inverse = np.linalg.inv(full)
    subs = []
    col = 0
    for label, (g, B) in enumerate(zip(groups, bases)):
        k = B.shape[1]
        P = B @ inverse[col:col + k]
        col += k
        subs.append(Subspace(label, B, P, np.sort_complex(diag[g])))
    dec = Decomposition(tuple(subs), float(gap), n * (n + 1), matrix_hash(A), real_source)
    if real_source:
        dec = _symmetrize_real(dec)
    return dec


def _symmetrize_real(dec: Decomposition) -> Decomposition:
    """Make conjugate subspaces carry exactly conjugate projections."""
    subs = list(dec.subspaces)
    done = set()
    for i, s in enumerate(subs):
        if i in done:
            continue
        j = dec.conjugate_label(s.label, tol=1e-6)
        if j is None:
            continue
        j = dec.labels.index(j)
        if j == i:
            P = s.projection.real.astype(complex)
            subs[i] = Subspace(s.label, s.basis, P, s.eigenvalues)
        else:
            t = subs[j]
            subs[j] = Subspace(t.label, np.conj(s.basis), np.conj(s.projection),
                               np.sort_complex(np.conj(s.eigenvalues)))
            done.add(j)
        done.add(i)
    return Decomposition(tuple(subs), dec.gap, dec.gamma_cert, dec.source_matrix_hash, dec.real_source)


@dataclass(frozen=True)
class NilpotentPart:
    matrix: np.ndarray
    semisimple: np.ndarray
    warning: bool
    nilpotency_residual: float


def nilpotent_part(A, jordan_tol: float | None = None) -> NilpotentPart:
    """Split ``A = S + A_N`` with ``S`` the cluster-averaged semisimple part."""
    A = np.asarray(A, dtype=complex)
    n = A.shape[0]
    normA = np.linalg.norm(A, 2)
    if jordan_tol is None:
        jordan_tol = 1e-8 * (1 + normA)
    dec = eigen_clusters(A, jordan_tol)
    S = np.zeros_like(A)
    for s in dec.subspaces:
        S = S + np.mean(s.eigenvalues) * s.projection
    AN = A - S
    if np.linalg.norm(AN, 2) <= 1e-10 * (1 + normA):
        AN = np.zeros_like(A)
    residual = float(np.linalg.norm(np.linalg.matrix_power(AN, n), 2))
    spread = max(float(np.abs(s.eigenvalues - np.mean(s.eigenvalues)).max()) for s in dec.subspaces)
    warning = residual > 1e-6 * (1 + normA) ** n or spread > jordan_tol
    return NilpotentPart(AN, S, bool(warning), residual)


@dataclass(frozen=True)
class ProjectionCertificate:
    projections: list
    norms: list
    bound: float
    ratio: float
    nilpotent_norm: float


def spectral_projections(dec: Decomposition, A, c0: float = 8.0) -> ProjectionCertificate:
    """Measure projection norms against ``C0 ((1 + ||A_N||) / gap)^(n(n+1))``.

    The base of the power is floored at 1, since projections never have norm
    below 1 and the certificate is meant for small gaps.
    """
    A = np.asarray(A, dtype=complex)
    if matrix_hash(A) != dec.source_matrix_hash:
        raise ValueError("decomposition was not built from this matrix")
    an = float(np.linalg.norm(nilpotent_part(A).matrix, 2))
    n = A.shape[0]
    if dec.gap > 0:
        base = max(1.0, (1 + an) / dec.gap)
        bound = c0 * base ** (n * (n + 1))
    else:
        bound = math.inf
    norms = [float(np.linalg.norm(P, 2)) for P in dec.projections]
    ratio = max(norms) / bound
    if ratio > 1:
        raise ProjectionCertificateError(
            f"projection norm {max(norms):.4g} exceeds certificate {bound:.4g}; enlarge the gap")
    return ProjectionCertificate(dec.projections, norms, bound, ratio, an)


@dataclass(frozen=True)
class DecompositionFlags:
    real: bool
    symplectic: bool
    unitary: bool


def symplectic_partner(dec: Decomposition, tol: float = PAIRING_TOL) -> dict[int, list[int]]:
    n = dec.n
    J = symplectic_form(n)
    out = {}
    for s in dec.subspaces:
        out[s.label] = [t.label for t in dec.subspaces
                        if np.linalg.norm(s.basis.T @ J @ t.basis, 2) > tol]
    return out


def classify_decomposition(dec: Decomposition, tol: float = PAIRING_TOL) -> DecompositionFlags:
    real = all(dec.conjugate_label(s.label, tol) is not None for s in dec.subspaces)
    symplectic = False
    if dec.n % 2 == 0:
        partners = symplectic_partner(dec, tol)
        symplectic = all(len(v) == 1 for v in partners.values())
    unitary = True
    for i, s in enumerate(dec.subspaces):
        for t in dec.subspaces[i + 1:]:
            if np.linalg.norm(s.basis.conj().T @ t.basis, 2) > tol:
                unitary = False
    return DecompositionFlags(real, symplectic, unitary)


def merge_subspaces(dec: Decomposition, groups: list[list[int]], source_hash: str | None = None) -> Decomposition:
    subs = []
    for new_label, g in enumerate(groups):
        members = [dec.subspace(lab) for lab in g]
        B = np.hstack([m.basis for m in members])
        Q, _ = np.linalg.qr(B)
        P = sum(m.projection for m in members)
        eig = np.sort_complex(np.concatenate([m.eigenvalues for m in members]))
        subs.append(Subspace(new_label, Q, P, eig))
    return Decomposition(tuple(subs), dec.gap, dec.gamma_cert,
                         dec.source_matrix_hash if source_hash is None else source_hash,
                         dec.real_source)


def _block_is_torus_periodic(H: TorusSeries, P: np.ndarray, Q: np.ndarray, tol: float) -> bool:
    odd = np.any(H.keys % 2 != 0, axis=1)
    if not np.any(odd):
        return True
    blocks = P[None] @ H.coefs[odd] @ Q[None]
    return float(np.abs(blocks).max()) <= tol


def coarsen_decomposition(H: TorusSeries, A, A_new, dec: Decomposition, tol: float = 1e-10) -> Decomposition:
    """Merge subspaces whose cross blocks of ``H`` live on the torus.

    Before merging, every nonzero block of ``A_new - A`` must sit where the
    matching block of ``H`` is torus-periodic.
    """
    A = np.asarray(A, dtype=complex)
    A_new = np.asarray(A_new, dtype=complex)
    scale = tol * (1 + H.mode_norms().max() if len(H) else 1.0)
    labels = dec.labels
    diff = A_new - A
    periodic = {}
    for s in dec.subspaces:
        for t in dec.subspaces:
            periodic[s.label, t.label] = _block_is_torus_periodic(H, s.projection, t.projection, scale)
            block = s.projection @ diff @ t.projection
            if np.abs(block).max() > tol * (1 + np.abs(A).max()) and not periodic[s.label, t.label]:
                raise CoarseningError(
                    f"blocks ({s.label}, {t.label}): constant part changes where the perturbation "
                    f"block is only double-torus periodic")
    parent = {lab: lab for lab in labels}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for (a, b), ok in periodic.items():
        if ok:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for lab in labels:
        groups.setdefault(find(lab), []).append(lab)
    return merge_subspaces(dec, list(groups.values()), matrix_hash(A_new))


@dataclass(frozen=True)
class TrivialMap:
    """``Phi(theta) = sum_L exp(2 pi i <m_L, theta>) P_L`` over a decomposition."""

    decomposition: Decomposition
    exponents: dict = field(default_factory=dict)  # label -> HalfIndex
    d: int = 1

    def exponent(self, label: int) -> HalfIndex:
        return self.exponents.get(label, HalfIndex((0,) * self.d))

    def as_series(self, declared_r: float = 0.5) -> TorusSeries:
        n = self.decomposition.n
        keys = [self.exponent(s.label).doubled for s in self.decomposition.subspaces]
        coefs = [s.projection for s in self.decomposition.subspaces]
        S = TorusSeries(n, self.d, np.array(keys).reshape(-1, self.d), np.array(coefs), declared_r)
        return S.with_meta(real=bool(len(S) and S.reality_defect() <= 1e-12))

    def inverse(self) -> "TrivialMap":
        return TrivialMap(self.decomposition, {k: -v for k, v in self.exponents.items()}, self.d)

    def compose(self, other: "TrivialMap") -> "TrivialMap":
        if other.decomposition is not self.decomposition:
            raise ValueError("trivial maps must share a decomposition to compose")
        labels = set(self.exponents) | set(other.exponents)
        return TrivialMap(self.decomposition,
                          {lab: self.exponent(lab) + other.exponent(lab) for lab in labels}, self.d)

    def eval(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        out = np.zeros((self.decomposition.n,) * 2, dtype=complex)
        for s in self.decomposition.subspaces:
            m = self.exponent(s.label).value
            out += np.exp(2j * np.pi * float(m @ theta)) * s.projection
        return out

    def shift_matrix(self, omega) -> np.ndarray:
        """``sum_L 2 pi i <m_L, omega> P_L``, the constant absorbed by the map."""
        omega = np.asarray(omega, dtype=float)
        out = np.zeros((self.decomposition.n,) * 2, dtype=complex)
        for s in self.decomposition.subspaces:
            out += 2j * np.pi * float(self.exponent(s.label).value @ omega) * s.projection
        return out

    def max_exponent(self) -> float:
        return max((self.exponent(s.label).norm for s in self.decomposition.subspaces), default=0.0)

    def is_torus_periodic(self) -> bool:
        return all(self.exponent(s.label).is_integer for s in self.decomposition.subspaces)

    def reality_condition(self) -> bool:
        for s in self.decomposition.subspaces:
            bar = self.decomposition.conjugate_label(s.label)
            if bar is None or self.exponent(bar) != -self.exponent(s.label):
                return False
        return True

    def symplectic_condition(self) -> bool:
        if not self.reality_condition():
            return False
        for lab, partners in symplectic_partner(self.decomposition).items():
            if any(self.exponent(p) != self.exponent(lab) for p in partners):
                return False
        return True

    def to_text(self) -> str:
        lines = [f"trivial-map v1 n={self.decomposition.n} d={self.d} "
                 f"count={len(self.decomposition.subspaces)}"]
        for s in self.decomposition.subspaces:
            m = " ".join(str(k) for k in self.exponent(s.label).doubled)
            lines.append(f"{s.label} {m} " + _cplx_tokens(s.projection))
        return "\n".join(lines) + "\n"
