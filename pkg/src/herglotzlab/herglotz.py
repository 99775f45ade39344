"""Matrix-valued Herglotz functions sampled on the upper half-plane.

Everything here works on an abstract :class:`HerglotzSampler`; the
compressed resolvent of a finite Hermitian operator is one source
(:meth:`HerglotzSampler.from_operator`), closed-form test functions are
another.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad_vec

from .lattice_model import HermitianOperator, ProjectionFamily
from .resolvent import COND_LIMIT, EPS, green_block, imag_part

__all__ = [
    "HerglotzSampler",
    "NevanlinnaConstants",
    "BlockMatrix2",
    "CauchySchwarzReport",
    "QuadratureWarning",
    "nevanlinna_constants",
    "stieltjes_invert",
    "ac_density",
    "mobius_conjugation",
    "block_cauchy_schwarz_check",
    "random_constrained_blocks",
    "random_herglotz_matrix",
    "vanishing_intervals",
]

PSD_TOL = 1e-12
QUAD_ABS_TOL = 1e-10


class QuadratureWarning(UserWarning):
    """Adaptive quadrature stopped before reaching its tolerance."""


@dataclass
class HerglotzSampler:
    """``z -> M(z)`` for ``Im z > 0``.

    Positivity of ``Im M`` is probed lazily on every evaluation; violations
    beyond ``PSD_TOL`` are collected in ``violations`` rather than raised.
    """

    n: int
    func: Callable[[complex], np.ndarray]
    bounded: bool = False
    poles: np.ndarray | None = None
    violations: list = field(default_factory=list)

    def __call__(self, z) -> np.ndarray:
        z = complex(z)
        if not z.imag > 0:
            raise ValueError(f"Herglotz functions are sampled on Im z > 0, got {z}")
        M = np.atleast_2d(np.asarray(self.func(z), dtype=complex))
        if M.shape != (self.n, self.n):
            raise ValueError(f"sampler returned shape {M.shape}, expected {(self.n, self.n)}")
        lo = float(np.linalg.eigvalsh(imag_part(M))[0])
        if lo < -PSD_TOL:
            self.violations.append((z, lo))
        return M

    @classmethod
    def from_operator(cls, H: HermitianOperator, family: ProjectionFamily, i: int):
        """Sampler for ``G_ii(z)``; its poles are the eigenvalues seen by ``P_i``."""
        F = family.frame(i)
        poles = []
        for k, (lam, sl) in enumerate(H.clusters):
            V = H.eigenvectors[:, sl]
            if np.linalg.norm(F.conj().T @ V) > 1e-10:
                poles.append(lam)
        return cls(family.rank, lambda z: green_block(H, family, i, i, z).value,
                   bounded=True, poles=np.array(poles))

    @classmethod
    def scalar(cls, func: Callable[[complex], complex], bounded: bool = False, poles=None):
        return cls(1, lambda z: np.array([[func(z)]]), bounded=bounded,
                   poles=None if poles is None else np.asarray(poles, dtype=float))


@dataclass
class NevanlinnaConstants:
    C: np.ndarray
    D: np.ndarray
    etas: np.ndarray
    D_samples: list
    richardson_gap: float
    psd: bool


@dataclass(frozen=True)
class BlockMatrix2:
    """Coefficients of the matrix Moebius map ``A -> (A11 - A12 A)(A21 - A22 A)^{-1}``."""

    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray

    def constraint_residual(self) -> float:
        """Largest violation of the three coefficient constraints."""
        h = lambda X: X.conj().T
        n = self.A11.shape[0]
        r1 = np.linalg.norm(h(self.A11) @ self.A22 - h(self.A21) @ self.A12 - np.eye(n), 2)
        r2 = np.linalg.norm(h(self.A21) @ self.A11 - h(self.A11) @ self.A21, 2)
        r3 = np.linalg.norm(h(self.A22) @ self.A12 - h(self.A12) @ self.A22, 2)
        return float(max(r1, r2, r3))

    def as_matrix(self) -> np.ndarray:
        return np.block([[self.A11, self.A12], [self.A21, self.A22]])


def nevanlinna_constants(sampler: HerglotzSampler, eta_max: float) -> NevanlinnaConstants:
    """``C = M(i)`` and ``D = lim_{eta -> inf} M(i eta) / (i eta)``.

    ``D`` is sampled on a three-point ladder ending at ``eta_max``; the
    reported value is the first-order Richardson extrapolation of the last
    two, and ``richardson_gap`` is its distance from the raw value at
    ``eta_max``.
    """
    if eta_max < 10:
        raise ValueError("eta_max must be at least 10")
    C = sampler(1j)
    etas = np.array([eta_max / 4, eta_max / 2, eta_max])
    samples = [sampler(1j * eta) / (1j * eta) for eta in etas]
    D = 2.0 * samples[2] - samples[1]
    D = 0.5 * (D + D.conj().T)
    gap = float(np.max(np.abs(D - samples[2])))
    w = np.linalg.eigvalsh(D)
    scale = max(1.0, float(np.max(np.abs(w))))
    psd = bool(w[0] >= -1e-10 * scale)
    if not psd:
        sampler.violations.append(("D", float(w[0])))
    return NevanlinnaConstants(C, D, etas, samples, gap, psd)


def stieltjes_invert(
    sampler: HerglotzSampler,
    interval: tuple[float, float],
    eps: float,
    breakpoints: Sequence[float] | None = None,
) -> np.ndarray:
    """``(1/pi) int_{l1}^{l2} Im M(lambda + i eps) dlambda``.

    Adaptive Gauss-Kronrod (``scipy.integrate.quad_vec``) with absolute
    tolerance 1e-10. The interval is split at every known pole inside it and
    a few widths ``eps`` around it, so the Lorentzian peaks are resolved.
    """
    l1, l2 = map(float, interval)
    if not l1 < l2:
        raise ValueError("interval must satisfy lambda1 < lambda2")
    if not eps > 0:
        raise ValueError("eps must be positive")
    pts = list(breakpoints or [])
    if sampler.poles is not None:
        pts.extend(sampler.poles.tolist())
    cuts = set()
    for p in pts:
        for off in (-10 * eps, -eps, 0.0, eps, 10 * eps):
            x = p + off
            if l1 < x < l2:
                cuts.add(x)

    def integrand(lam):
        return imag_part(sampler(lam + 1j * eps)).real

    edges = [l1, *sorted(cuts), l2]
    total = np.zeros((sampler.n, sampler.n))
    for a, b in zip(edges[:-1], edges[1:]):
        val, err, info = quad_vec(integrand, a, b, epsabs=QUAD_ABS_TOL / len(edges),
                                  epsrel=0.0, limit=2000, full_output=True)
        if not info.success:
            warnings.warn(f"quadrature on [{a}, {b}] did not converge (error {err:.3g})",
                          QuadratureWarning, stacklevel=2)
        total += val
    return total / np.pi


def ac_density(sampler: HerglotzSampler, E: float, eps: float) -> np.ndarray:
    """Smoothed density ``(1/pi) Im M(E + i eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return imag_part(sampler(E + 1j * eps)) / np.pi


def mobius_conjugation(A: np.ndarray, coeffs: BlockMatrix2) -> tuple[np.ndarray, float]:
    """Apply the matrix Moebius map and measure the imaginary-part conjugation identity.

    Returns ``At = (A11 - A12 A)(A21 - A22 A)^{-1}`` and
    ``||Im At - X^{-*} Im A X^{-1}||_2`` with ``X = A21 - A22 A``.
    """
    A = np.asarray(A, dtype=complex)
    X = coeffs.A21 - coeffs.A22 @ A
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        raise ValueError(f"denominator A21 - A22 A is singular (condition {cond:.3g})")
    Xinv = np.linalg.inv(X)
    At = (coeffs.A11 - coeffs.A12 @ A) @ Xinv
    rhs = Xinv.conj().T @ imag_part(A) @ Xinv
    return At, float(np.linalg.norm(imag_part(At) - rhs, 2))


@dataclass
class CauchySchwarzReport:
    max_excess: float
    violations: int
    trials: int
    kernel_residual: float
    kernel_dim: int


def block_cauchy_schwarz_check(
    A: np.ndarray,
    trials: int,
    rng: np.random.Generator | None = None,
    slack: float = 1e-10,
    rank_tol: float | None = None,
) -> CauchySchwarzReport:
    """Random-vector test of ``|<u, B v>|^2 <= 2 <u, Im A11 u> <v, Im A22 v>``.

    ``B = (A12 - A21^*) / 2i`` is the off-diagonal block of ``Im A``. Also
    checks ``A12 v = A21^* v`` on the numeric kernel of ``Im A22``
    (singular values ``<= rank_tol * sigma_max``).
    """
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] % 2:
        raise ValueError("A must be a square matrix of even size")
    ImA = imag_part(A)
    lo = float(np.linalg.eigvalsh(ImA)[0])
    if lo < -PSD_TOL * max(1.0, np.linalg.norm(ImA, 2)):
        raise ValueError(f"hypothesis Im A >= 0 fails (min eigenvalue {lo:.3g})")
    rng = rng or np.random.default_rng(0)
    n = A.shape[0] // 2
    A11, A12, A21, A22 = A[:n, :n], A[:n, n:], A[n:, :n], A[n:, n:]
    B = (A12 - A21.conj().T) / 2j
    I11, I22 = imag_part(A11), imag_part(A22)

    max_excess = -np.inf
    violations = 0
    done = 0
    batch = 4096
    while done < trials:
        m = min(batch, trials - done)
        u = rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))
        v = rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))
        u /= np.linalg.norm(u, axis=0)
        v /= np.linalg.norm(v, axis=0)
        lhs = np.abs(np.sum(u.conj() * (B @ v), axis=0)) ** 2
        qu = np.sum(u.conj() * (I11 @ u), axis=0).real
        qv = np.sum(v.conj() * (I22 @ v), axis=0).real
        excess = lhs - 2.0 * qu * qv
        max_excess = max(max_excess, float(np.max(excess)))
        violations += int(np.sum(excess > slack))
        done += m

    _, s, vh = np.linalg.svd(I22)
    tol = (rank_tol if rank_tol is not None else max(I22.shape) * EPS) * (s[0] if s[0] > 0 else 1.0)
    kernel = vh[s <= tol].conj().T
    resid = 0.0
    if kernel.size:
        resid = float(np.linalg.norm((A12 - A21.conj().T) @ kernel, 2))
    return CauchySchwarzReport(max_excess, violations, trials, resid, kernel.shape[1])


def _random_hermitian(rng, n, scale=1.0):
    X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (X + X.conj().T) / 2


def random_constrained_blocks(rng: np.random.Generator, n: int, factors: int = 3,
                              scale: float = 0.5) -> BlockMatrix2:
    """Random coefficients satisfying the Moebius constraints.

    The constraints say ``M^* J M = J`` for ``M = [[A11, A12], [A21, A22]]`` and
    ``J = [[0, I], [-I, 0]]``, a group generated by ``[[I, S], [0, I]]``,
    ``[[I, 0], [T, I]]`` (``S``, ``T`` Hermitian) and ``diag(G, G^{-*})``.
    """
    eye = np.eye(n)
    zero = np.zeros((n, n))
    M = np.eye(2 * n, dtype=complex)
    for _ in range(factors):
        S = _random_hermitian(rng, n, scale)
        T = _random_hermitian(rng, n, scale)
        G = eye + scale * (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2 * n)
        M = M @ np.block([[eye, S], [zero, eye]])
        M = M @ np.block([[eye, zero], [T, eye]])
        M = M @ np.block([[G, zero], [zero, np.linalg.inv(G).conj().T]])
    return BlockMatrix2(M[:n, :n], M[:n, n:], M[n:, :n], M[n:, n:])


def random_herglotz_matrix(rng: np.random.Generator, n: int, rank: int | None = None) -> np.ndarray:
    """Random ``n x n`` matrix with ``Im A`` PSD of the given rank (full by default)."""
    rank = n if rank is None else rank
    R = _random_hermitian(rng, n)
    Y = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    return R + 1j * (Y @ Y.conj().T) / n


def vanishing_intervals(
    sampler: HerglotzSampler,
    energies: Sequence[float],
    eps: float = 1e-6,
    threshold: float = 1e-12,
) -> list[tuple[float, float]]:
    """Maximal runs of grid energies where every diagonal ``Im M_ii(E + i eps)`` is below ``threshold``."""
    energies = np.sort(np.asarray(energies, dtype=float))
    small = []
    for E in energies:
        d = np.diag(imag_part(sampler(E + 1j * eps))).real
        small.append(bool(np.all(d < threshold)))
    runs = []
    start = None
    for k, flag in enumerate(small + [False]):
        if flag and start is None:
            start = k
        elif not flag and start is not None:
            if k - 1 > start:
                runs.append((float(energies[start]), float(energies[k - 1])))
            start = None
    return runs
