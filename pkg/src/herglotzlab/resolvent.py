"""Compressed resolvents ``G_ij(z) = P_i (H - z)^{-1} P_j`` and their boundary values.

Two independent evaluation paths are provided: :func:`green_block` sums over
the cached eigendecomposition, :func:`green_blocks_dense` solves the dense
linear system. The second is the oracle for the first and also backs the
rank-one-update identity checks, where both sides must be assembled
independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice_model import HermitianOperator, ProjectionFamily, assemble_hamiltonian

__all__ = [
    "GreenBlock",
    "EpsilonSchedule",
    "BoundaryLimitReport",
    "ScaledLimitReport",
    "IdentityResiduals",
    "green_block",
    "green_blocks_dense",
    "check_resolvent_identities",
    "boundary_limit",
    "det_offdiagonal",
    "scaled_singular_limit",
    "trace_ratio_limit",
    "imag_part",
    "numeric_rank",
    "richardson",
    "COND_LIMIT",
]

COND_LIMIT = 1e12
EPS = np.finfo(float).eps


def imag_part(M: np.ndarray) -> np.ndarray:
    """Hermitian imaginary part ``(M - M^*) / 2i``."""
    return (M - M.conj().T) / 2j


def numeric_rank(M: np.ndarray, tol: float | None = None) -> int:
    """SVD rank with absolute threshold ``tol``.

    The default threshold is ``max(M.shape) * eps * sigma_max``.
    """
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if tol is None:
        tol = max(M.shape) * EPS * (s[0] if s.size else 0.0)
    return int(np.sum(s > tol))


def richardson(values, ratio: float, levels: int = 2) -> list[np.ndarray]:
    """Richardson table along a geometric step sequence.

    ``values[j]`` is a sample at ``eps_0 * ratio**j`` of a function analytic
    in ``eps``. Each level removes the next integer power of ``eps``. Returns
    the last-level column (shorter than ``values`` by ``levels``).
    """
    col = [np.asarray(v) for v in values]
    for p in range(1, levels + 1):
        rp = ratio ** p
        col = [(col[j] - rp * col[j - 1]) / (1.0 - rp) for j in range(1, len(col))]
    return col


@dataclass(frozen=True)
class GreenBlock:
    i: int
    j: int
    z: complex
    value: np.ndarray

    @property
    def imag(self) -> np.ndarray:
        return imag_part(self.value)

    def min_imag_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.imag)[0])


@dataclass(frozen=True)
class EpsilonSchedule:
    """Geometric sequence ``eps_j = eps0 * ratio**j``, ``j < max_steps``."""

    eps0: float = 1e-2
    ratio: float = 0.5
    max_steps: int = 20
    tol_conv: float = 1e-8

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.max_steps < 3:
            raise ValueError("max_steps must be at least 3")
        if not self.tol_conv > 0:
            raise ValueError("tol_conv must be positive")

    @property
    def epsilons(self) -> np.ndarray:
        return self.eps0 * self.ratio ** np.arange(self.max_steps)

    @property
    def eps_final(self) -> float:
        return float(self.eps0 * self.ratio ** (self.max_steps - 1))


@dataclass
class BoundaryLimitReport:
    energy: float
    status: str
    limit: np.ndarray | None
    exponent: float
    norms: np.ndarray
    increment: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass
class ScaledLimitReport:
    energy: float
    f_values: np.ndarray
    status: str
    limit: np.ndarray | None
    rank: int
    error_estimate: float
    f_slope: float = field(default=float("nan"))

    @property
    def singular(self) -> bool:
        return self.status == "singular_point"


@dataclass
class IdentityResiduals:
    """Residuals of the rank-N update identities; ``flagged`` means not asserted."""

    r6: float
    r7: float
    r8: float
    condition: float
    flagged: bool

    def max(self) -> float:
        return max(self.r6, self.r7, self.r8)


def _check_z(z: complex) -> complex:
    z = complex(z)
    if z.imag == 0.0:
        raise ValueError(f"z={z} is real; the resolvent is only guaranteed off the real axis")
    return z


def green_block(H: HermitianOperator, family: ProjectionFamily, i: int, j: int, z) -> GreenBlock:
    """``F_i^* (H - z)^{-1} F_j`` from the cached eigendecomposition."""
    z = _check_z(z)
    V = H.eigenvectors
    left = family.frame(i).conj().T @ V
    right = V.conj().T @ family.frame(j)
    g = (left / (H.eigenvalues - z)) @ right
    return GreenBlock(i, j, z, g)


def green_blocks_dense(H, family: ProjectionFamily, z) -> np.ndarray:
    """Full compressed resolvent ``F^* (H - z)^{-1} F`` by an LU solve.

    ``F`` stacks all frames, so block ``(p, q)`` of the result (in index-set
    order, ``N x N`` each) is ``G_{n_p n_q}(z)``.
    """
    z = _check_z(z)
    M = H.matrix if isinstance(H, HermitianOperator) else np.asarray(H)
    F = family.stacked()
    X = np.linalg.solve(M - z * np.eye(M.shape[0]), F)
    return F.conj().T @ X


def _block(G: np.ndarray, family: ProjectionFamily, i: int, j: int) -> np.ndarray:
    N = family.rank
    p, q = family.position(i), family.position(j)
    return G[p * N:(p + 1) * N, q * N:(q + 1) * N]


def check_resolvent_identities(
    H: HermitianOperator,
    family: ProjectionFamily,
    perturbed_index: int,
    mu: float,
    z,
) -> IdentityResiduals:
    """Residuals of the rank-N perturbation identities for ``H + mu P``.

    ``r6 = ||G^mu_11 - G_11 (I + mu G_11)^{-1}||``,
    ``r7 = ||(I + mu G_11)(I - mu G^mu_11) - I||``,
    ``r8 = max_{(i,j) != (1,1)} ||G^mu_ij - G_ij + mu G_i1 (I + mu G_11)^{-1} G_1j||``,
    with ``1`` the perturbed index. Both resolvents come from separate dense
    solves of separately assembled matrices.
    """
    z = _check_z(z)
    if z.imag < 0:
        raise ValueError("identity checks run in the upper half-plane")
    p = perturbed_index
    Hmu = assemble_hamiltonian(H, family, None, extra=[(p, mu)])
    G = green_blocks_dense(H, family, z)
    Gmu = green_blocks_dense(Hmu, family, z)
    N = family.rank
    eye = np.eye(N)
    G11 = _block(G, family, p, p)
    X = eye + mu * G11
    cond = float(np.linalg.cond(X))
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        nan = float("nan")
        return IdentityResiduals(nan, nan, nan, cond, True)
    Xinv = np.linalg.inv(X)
    r6 = np.linalg.norm(_block(Gmu, family, p, p) - G11 @ Xinv, 2)
    r7 = np.linalg.norm(X @ (eye - mu * _block(Gmu, family, p, p)) - eye, 2)
    r8 = 0.0
    for i in family.indices:
        Gi1 = _block(G, family, i, p)
        for j in family.indices:
            if i == p and j == p:
                continue
            lhs = _block(Gmu, family, i, j)
            rhs = _block(G, family, i, j) - mu * Gi1 @ Xinv @ _block(G, family, p, j)
            r8 = max(r8, np.linalg.norm(lhs - rhs, 2))
    return IdentityResiduals(float(r6), float(r7), float(r8), cond, False)


def _loglog_slope(eps: np.ndarray, values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        return float("nan")
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


def _max_entry(M) -> float:
    return float(np.max(np.abs(M)))


def boundary_limit(
    H: HermitianOperator,
    family: ProjectionFamily,
    i: int,
    j: int,
    E: float,
    schedule: EpsilonSchedule | None = None,
) -> BoundaryLimitReport:
    """Classify ``lim_{eps -> 0} G_ij(E + i eps)`` along ``schedule``.

    Iterates are Richardson-extrapolated in ``eps`` (the block is analytic
    in ``eps`` away from the spectrum), so the convergence test compares
    extrapolated values. A log-log slope of ``-1 +- 0.1`` over the last five
    raw norms marks a simple pole.
    """
    schedule = schedule or EpsilonSchedule()
    eps = schedule.epsilons
    raw = [green_block(H, family, i, j, E + 1j * e).value for e in eps]
    norms = np.array([_max_entry(g) for g in raw])
    ext = richardson(raw, schedule.ratio, levels=2)
    increment = _max_entry(ext[-1] - ext[-2])
    exponent = _loglog_slope(eps[-5:], norms[-5:])
    if increment < schedule.tol_conv:
        return BoundaryLimitReport(float(E), "converged", ext[-1], exponent, norms, increment)
    status = "diverging" if abs(exponent + 1.0) < 0.1 else "oscillating"
    return BoundaryLimitReport(float(E), status, None, exponent, norms, increment)


def det_offdiagonal(
    H: HermitianOperator,
    family: ProjectionFamily,
    n: int,
    m: int,
    z,
    rank_tol: float | None = None,
) -> tuple[complex, bool]:
    """``det G_nm(z)`` and whether it is distinguishable from roundoff.

    ``rank_tol`` defaults to ``D * eps * ||(H - z)^{-1}||``, the roundoff scale
    of a compressed resolvent entry. A rank-deficient block still has
    ``|det| ~ rank_tol * ||G_nm||^(N-1)`` from noise, so that is the cutoff.
    """
    z = _check_z(z)
    g = green_block(H, family, n, m, z).value
    det = complex(np.linalg.det(g))
    if rank_tol is None:
        res_norm = 1.0 / np.min(np.abs(H.eigenvalues - z))
        rank_tol = H.dim * EPS * res_norm
    gnorm = np.linalg.norm(g, 2)
    return det, bool(abs(det) > rank_tol * gnorm ** (family.rank - 1))


def scaled_singular_limit(
    H: HermitianOperator,
    family: ProjectionFamily,
    i: int,
    E: float,
    schedule: EpsilonSchedule | None = None,
    rank_tol: float | None = None,
) -> ScaledLimitReport:
    """``lim f_E(eps) G_ii(E + i eps)`` with ``f_E = 1 / tr G_ii``.

    ``E`` is declared a singular point when ``|f_E|`` decreases monotonically
    over the last five steps at the rate of a simple pole (log-log slope
    within 0.1 of 1). The limit is the Richardson-extrapolated scaled block;
    its numeric rank uses an absolute threshold of at least ten times the
    extrapolation error (or ``rank_tol`` if that is larger).
    """
    schedule = schedule or EpsilonSchedule()
    eps = schedule.epsilons
    blocks = [green_block(H, family, i, i, E + 1j * e).value for e in eps]
    f = np.array([1.0 / np.trace(g) for g in blocks])
    tail = np.abs(f[-5:])
    slope = _loglog_slope(eps[-5:], tail)
    monotone = bool(np.all(np.diff(tail) < 0))
    if not (monotone and abs(slope - 1.0) < 0.1):
        return ScaledLimitReport(float(E), f, "not_singular", None, 0, float("nan"), slope)
    scaled = [fv * g for fv, g in zip(f, blocks)]
    ext = richardson(scaled, schedule.ratio, levels=2)
    limit = 0.5 * (ext[-1] + ext[-1].conj().T)
    err = _max_entry(ext[-1] - ext[-2])
    s = np.linalg.svd(limit, compute_uv=False)
    floor = max(limit.shape) * EPS * s[0]
    tol = max(floor, 10.0 * err * limit.shape[0], rank_tol or 0.0)
    rank = int(np.sum(s > tol))
    return ScaledLimitReport(float(E), f, "singular_point", limit, rank, err, slope)


def trace_ratio_limit(
    H: HermitianOperator,
    family: ProjectionFamily,
    n: int,
    m: int,
    E: float,
    schedule: EpsilonSchedule | None = None,
) -> tuple[float | complex, float]:
    """Extrapolated ``lim tr G_mm(E + i eps) / tr G_nn(E + i eps)`` and its error estimate.

    At an eigenvalue seen by both blocks this tends to the ratio of the
    compressed point masses.
    """
    schedule = schedule or EpsilonSchedule()
    ratios = []
    for e in schedule.epsilons:
        z = E + 1j * e
        ratios.append(np.trace(green_block(H, family, m, m, z).value)
                      / np.trace(green_block(H, family, n, n, z).value))
    ext = richardson(ratios, schedule.ratio, levels=2)
    value = complex(ext[-1])
    return value, float(abs(ext[-1] - ext[-2]))
