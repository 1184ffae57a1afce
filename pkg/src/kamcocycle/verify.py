"""Independent oracles: ODE integration, grid residuals and numeric lemma checks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from .diophantine import Frequency
from .fourier import TorusSeries, eval_grid, directional_derivative
from .spectral import TrivialMap


@dataclass(frozen=True)
class ResidualReport:
    grid_points: int
    sup_residual: float
    relative_to: float

    @property
    def relative(self) -> float:
        return self.sup_residual / self.relative_to

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _omega(freq) -> np.ndarray:
    return freq.vector if isinstance(freq, Frequency) else np.asarray(freq, dtype=float).reshape(-1)


def torus_grid(d: int, points: int, double: bool = True) -> np.ndarray:
    """Regular grid with ``points`` nodes per axis on ``[0, 2)^d`` (or ``[0, 1)^d``)."""
    period = 2.0 if double else 1.0
    axes = [np.arange(points) * period / points for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


# -- cocycle integration -----------------------------------------------------------------

def cocycle_integrate(A: TorusSeries, theta0, T: float, steps: int, freq) -> np.ndarray:
    """Classical RK4 for ``X' = A(theta0 + t omega) X`` on ``[0, T]`` with ``X(0) = Id``."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    omega = _omega(freq)
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    h = T / steps
    times = np.arange(steps + 1) * h
    half = times[:-1] + h / 2
    nodes = np.vstack([theta0 + np.outer(times, omega), theta0 + np.outer(half, omega)])
    values = eval_grid(A, nodes)
    at_nodes, at_half = values[:steps + 1], values[steps + 1:]
    X = np.eye(A.n, dtype=complex)
    for k in range(steps):
        a0, am, a1 = at_nodes[k], at_half[k], at_nodes[k + 1]
        k1 = a0 @ X
        k2 = am @ (X + 0.5 * h * k1)
        k3 = am @ (X + 0.5 * h * k2)
        k4 = a1 @ (X + h * k3)
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def floquet_monodromy(A: TorusSeries, freq, theta0=None, steps: int = 4000,
                      double: bool = True) -> tuple[np.ndarray, float]:
    """Monodromy over one period of ``A`` along the flow (d = 1) and that period."""
    omega = _omega(freq)
    if omega.shape[0] != 1:
        raise ValueError("Floquet oracle needs d = 1")
    period = (2.0 if double else 1.0) / abs(float(omega[0]))
    theta0 = np.zeros(1) if theta0 is None else theta0
    return cocycle_integrate(A, theta0, period, steps, omega), period


def floquet_exponents(A: TorusSeries, freq, steps: int = 4000) -> tuple[np.ndarray, np.ndarray]:
    """Reduced constant ``B = log(M) / period`` of the monodromy and the monodromy eigenvalues."""
    M, period = floquet_monodromy(A, freq, steps=steps)
    B = sla.logm(M) / period
    return B, np.linalg.eigvals(M)


def spectral_set_distance(a, b) -> float:
    """Hausdorff distance between two finite point sets in the plane."""
    a = np.asarray(a, dtype=complex).reshape(-1)
    b = np.asarray(b, dtype=complex).reshape(-1)
    dist = np.abs(a[:, None] - b[None, :])
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))


# -- conjugacy residuals -------------------------------------------------------------------------

def conjugacy_residual(lhs: TorusSeries, Z: TorusSeries, rhs: TorusSeries, grid: int, freq,
                       relative_to: float = 1.0, chunk: int = 1024) -> ResidualReport:
    """Sup over a grid on the double torus of ``||d_omega Z - lhs Z + Z rhs||``."""
    omega = _omega(freq)
    if not (lhs.n == Z.n == rhs.n and lhs.d == Z.d == rhs.d):
        raise ValueError("incompatible series")
    dZ = directional_derivative(Z, omega)
    pts = torus_grid(Z.d, grid)
    worst = 0.0
    for start in range(0, pts.shape[0], chunk):
        th = pts[start:start + chunk]
        z = eval_grid(Z, th)
        res = eval_grid(dZ, th) - eval_grid(lhs, th) @ z + z @ eval_grid(rhs, th)
        worst = max(worst, float(np.linalg.norm(res, 2, axis=(1, 2)).max()))
    return ResidualReport(int(pts.shape[0]), worst, float(relative_to))


def trajectory_defect(original: TorusSeries, reduced: TorusSeries, Z: TorusSeries, freq,
                      thetas, T: float = 10.0, samples: int = 20, steps_per_unit: int = 200) -> float:
    """Largest ``||X_orig^t(theta) - Z(theta + t omega) X_red^t(theta) Z(theta)^-1||``.

    Uses the conjugacy ``d_omega Z = original Z - Z reduced``, so both sides solve
    the same ODE.
    """
    omega = _omega(freq)
    worst = 0.0
    for theta in np.atleast_2d(thetas):
        for t in np.linspace(T / samples, T, samples):
            steps = max(4, int(steps_per_unit * t))
            Xo = cocycle_integrate(original, theta, t, steps, omega)
            Xr = cocycle_integrate(reduced, theta, t, steps, omega)
            z0 = eval_grid(Z, theta[None])[0]
            zt = eval_grid(Z, (theta + t * omega)[None])[0]
            pred = zt @ Xr @ np.linalg.inv(z0)
            worst = max(worst, float(np.linalg.norm(Xo - pred, 2)))
    return worst


# -- nice periodicity ---------------------------------------------------------------------------------

def npp_check(F: TorusSeries, phi: TrivialMap, threshold: float = 1e-12) -> bool:
    """Whether ``Phi^-1 F Phi`` has all coefficients above ``threshold`` on integer indices."""
    conj = phi.inverse().as_series() @ F @ phi.as_series()
    if len(conj) == 0:
        return True
    odd = np.any(conj.keys % 2 != 0, axis=1)
    return bool(np.all(conj.mode_norms()[odd] <= threshold))


# -- eigenvalue drift ------------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftReport:
    worst_ratio: float            # set distance over 2 n lambda^(1/n) (||A|| + 1)
    compact_worst_ratio: float | None  # path drift over lambda, compact algebras only
    collisions: int
    samples: int


def eigenvalue_drift_bound(A, F, lam_samples: int = 200, compact: bool | None = None) -> DriftReport:
    """Track eigenvalues of ``A + lambda F`` and compare with the appendix bounds.

    The primary check is the set distance form.  For skew-hermitian pairs the
    paths are followed by minimal total displacement between samples and each
    path is compared with ``lambda``.
    """
    A = np.asarray(A, dtype=complex)
    F = np.asarray(F, dtype=complex)
    n = A.shape[0]
    if np.linalg.norm(F, 2) > 1 + 1e-12:
        raise ValueError("perturbation must have norm at most 1")
    if compact is None:
        compact = (np.linalg.norm(A + A.conj().T) <= 1e-12 * (1 + np.linalg.norm(A))
                   and np.linalg.norm(F + F.conj().T) <= 1e-12)
    base = np.linalg.eigvals(A)
    normA = np.linalg.norm(A, 2)
    lams = np.linspace(0, 1, lam_samples + 1)[1:]
    worst = 0.0
    cworst = 0.0 if compact else None
    collisions = 0
    previous = base.copy()
    for lam in lams:
        vals = np.linalg.eigvals(A + lam * F)
        set_dist = np.abs(base[:, None] - vals[None, :]).min(axis=1).max()
        worst = max(worst, float(set_dist / (2 * n * lam ** (1.0 / n) * (normA + 1))))
        if compact:
            cost = np.abs(previous[:, None] - vals[None, :])
            rows, cols = linear_sum_assignment(cost)
            tracked = np.empty_like(previous)
            tracked[rows] = vals[cols]
            gaps = np.abs(vals[:, None] - vals[None, :])
            np.fill_diagonal(gaps, np.inf)
            if n > 1 and gaps.min() < 1e-9:
                collisions += 1
            previous = tracked
            cworst = max(cworst, float(np.abs(tracked - base).max() / lam))
    return DriftReport(worst, cworst, collisions, lam_samples)


# -- Gevrey entire functions ------------------------------------------------------------------------

@dataclass(frozen=True)
class EntireSumCheck:
    a: float
    lam: float
    r: float
    value: float
    lower: float
    upper: float
    holds: bool


def entire_sum(a: float, r: float, tail_tol: float = 1e-14) -> float:
    """``sum_k r^k / k!^a`` summed until the geometric tail bound is below ``tail_tol`` relative."""
    if r == 0:
        return 1.0
    logs = []
    k = 0
    log_r = math.log(r)
    while True:
        logs.append(k * log_r - a * float(gammaln(k + 1)))
        ratio = r / (k + 2) ** a  # bound on term_{j+1} / term_j for j > k
        if k > 2 and ratio < 0.5:
            top = max(logs)
            tail = math.exp(logs[-1] - top) * ratio / (1 - ratio)
            total = sum(math.exp(v - top) for v in logs)
            if tail < tail_tol * total:
                return math.exp(top) * total
        k += 1
        if k > 100_000:
            raise RuntimeError("entire sum did not converge")


def series_bounds_check(a: float, lam: float, r_samples) -> list[EntireSumCheck]:
    """Two-sided bounds of ``E_a`` with ``K1 = (1 - lam^(a/(a-1)))^(a-1)``."""
    if a <= 0 or a == 1:
        raise ValueError("need a > 0 and a != 1")
    if a > 1 and not 0 < lam < 1:
        raise ValueError("a > 1 needs 0 < lambda < 1")
    if a < 1 and not lam > 1:
        raise ValueError("a < 1 needs lambda > 1")
    K1 = (1 - lam ** (a / (a - 1))) ** (a - 1)
    out = []
    for r in r_samples:
        value = entire_sum(a, r)
        grow = a * r ** (1.0 / a)
        if a > 1:
            lower, upper = K1 * math.exp(lam * grow), math.exp(grow)
        else:
            lower, upper = math.exp(grow), K1 * math.exp(lam * grow)
        slack = 1e-12 * value
        out.append(EntireSumCheck(a, lam, float(r), value, lower, upper,
                               lower <= value + slack and value <= upper + slack))
    return out
