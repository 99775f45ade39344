"""Cyclic subspaces and the compressed spectral measures built on them.

For a finite Hermitian ``H`` the cyclic subspace generated by ``P_n H`` is the
block Krylov space ``span{H^p P_n H : p >= 0}``; the compressed spectral
measure ``P_n E_H(.) P_n`` is a finite sum of PSD point masses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice_model import CLUSTER_TOL, HermitianOperator, ProjectionFamily, assemble_hamiltonian
from .resolvent import (
    COND_LIMIT,
    EpsilonSchedule,
    _block,
    boundary_limit,
    det_offdiagonal,
    green_blocks_dense,
    imag_part,
    numeric_rank,
    richardson,
    scaled_singular_limit,
    trace_ratio_limit,
    green_block,
)

__all__ = [
    "CyclicBasis",
    "MatrixMeasure",
    "RankEvent",
    "RepresentationCertificate",
    "VSpaceReport",
    "krylov_cyclic_basis",
    "rank_event",
    "matrix_measure",
    "spectral_representation",
    "v_space_report",
    "conjugation_residual",
]


@dataclass(frozen=True)
class CyclicBasis:
    index: int
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def orthonormality_residual(self) -> float:
        Q = self.basis
        return float(np.linalg.norm(Q.conj().T @ Q - np.eye(Q.shape[1]), 2))

    def invariance_residual(self, H: HermitianOperator) -> float:
        """``||(I - Q Q^*) H Q||_2``."""
        Q = self.basis
        HQ = H.matrix @ Q
        return float(np.linalg.norm(HQ - Q @ (Q.conj().T @ HQ), 2))


def krylov_cyclic_basis(
    H: HermitianOperator,
    family: ProjectionFamily,
    n: int,
    tol: float | None = None,
) -> CyclicBasis:
    """Orthonormal basis of ``span{H^p P_n H}`` by block Krylov iteration.

    Each new block ``H Q_last`` is orthogonalized twice against the whole
    basis; directions whose singular value falls below ``tol`` (default
    ``1e-10 * max(1, ||H||)``) are dropped, and the iteration stops when
    nothing survives or the basis spans the space.
    """
    if tol is None:
        tol = 1e-10 * max(1.0, H.norm)
    if not tol > 0:
        raise ValueError("tol must be positive")
    M = H.matrix
    D = H.dim
    Q = np.array(family.frame(n))
    last = Q
    # deflated blocks may add a single direction, so the dimension is the only safe bound
    for _ in range(D):
        if Q.shape[1] >= D:
            break
        W = M @ last
        for _ in range(2):
            W = W - Q @ (Q.conj().T @ W)
        U, s, _ = np.linalg.svd(W, full_matrices=False)
        keep = s > tol
        if not np.any(keep):
            break
        new = U[:, keep]
        new = new - Q @ (Q.conj().T @ new)
        new, _ = np.linalg.qr(new)
        Q = np.hstack([Q, new])
        last = new
    return CyclicBasis(n, Q)


@dataclass(frozen=True)
class RankEvent:
    n: int
    m: int
    rank: int
    N: int
    cyclic_dim: int
    det_corroborates: bool

    @property
    def indicator(self) -> bool:
        return self.rank == self.N


def rank_event(
    H: HermitianOperator,
    family: ProjectionFamily,
    n: int,
    m: int,
    tol: float | None = None,
    basis: CyclicBasis | None = None,
    probes=None,
) -> RankEvent:
    """Does ``Q_n P_m`` have full rank ``N``?

    The Krylov rank is authoritative. As corroboration ``det G_nm(z)`` is
    evaluated at the probe points (five fixed points in the upper half-plane
    by default): an invertible ``G_nm(z)`` at any ``z`` forces full rank,
    while full rank makes ``G_nm(z)`` invertible for almost every ``z``.
    ``det_corroborates`` is False when the two disagree.
    """
    basis = basis or krylov_cyclic_basis(H, family, n)
    C = basis.basis.conj().T @ family.frame(m)
    r = numeric_rank(C, tol)
    if probes is None:
        probes = [0.37 + 0.5j, -1.1 + 0.25j, 0.05 + 1.3j, 1.7 + 0.8j, -0.6 + 0.1j]
    invertible = [det_offdiagonal(H, family, n, m, z)[1] for z in probes]
    full = r == family.rank
    agrees = any(invertible) if full else not any(invertible)
    return RankEvent(n, m, r, family.rank, basis.dim, agrees)


@dataclass
class MatrixMeasure:
    """Point masses ``(lambda_k, W_k)`` of ``F_n^* E_H(.) F_n``."""

    index: int
    eigenvalues: np.ndarray
    weights: np.ndarray

    def total(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    def trace_masses(self) -> np.ndarray:
        return np.einsum("kii->k", self.weights).real

    def borel_transform(self, z) -> np.ndarray:
        z = complex(z)
        return np.tensordot(1.0 / (self.eigenvalues - z), self.weights, axes=1)

    def min_weight_eigenvalue(self) -> float:
        return float(min(np.linalg.eigvalsh(w)[0] for w in self.weights))

    def restrict(self, lo: float, hi: float) -> np.ndarray:
        """Sum of weights with ``lo <= lambda_k < hi``."""
        sel = (self.eigenvalues >= lo) & (self.eigenvalues < hi)
        return self.weights[sel].sum(axis=0)


def matrix_measure(H: HermitianOperator, family: ProjectionFamily, n: int) -> MatrixMeasure:
    F = family.frame(n)
    lams, ws = [], []
    for lam, sl in H.clusters:
        X = F.conj().T @ H.eigenvectors[:, sl]
        W = X @ X.conj().T
        lams.append(lam)
        ws.append(0.5 * (W + W.conj().T))
    return MatrixMeasure(n, np.array(lams), np.array(ws))


@dataclass
class RepresentationCertificate:
    pairs: int
    max_error: float
    tolerance: float
    passed: bool
    worst_pair: tuple | None = None


def _poly_apply(M: np.ndarray, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = coeffs[-1] * x
    for c in coeffs[-2::-1]:
        out = M @ out + c * x
    return out


def spectral_representation(
    H: HermitianOperator,
    family: ProjectionFamily,
    n: int,
    rng: np.random.Generator | None = None,
    pairs: int = 20,
    degree: int = 6,
    tol: float = 1e-9,
) -> tuple[MatrixMeasure, RepresentationCertificate]:
    """Compressed measure plus a polynomial-pairing isometry certificate.

    For random polynomials ``f``, ``g`` and random ``phi = F c1``,
    ``psi = F c2`` it compares ``<f(H) phi, g(H) psi>`` with
    ``sum_k conj(f(lambda_k)) g(lambda_k) c1^* W_k c2``. Errors are relative to
    ``||f(H) phi|| ||g(H) psi||``.
    """
    rng = rng or np.random.default_rng(0)
    meas = matrix_measure(H, family, n)
    F = family.frame(n)
    N = family.rank
    M = H.matrix
    worst, worst_pair = 0.0, None
    for t in range(pairs):
        deg_f, deg_g = rng.integers(0, degree + 1, size=2)
        cf = rng.standard_normal(deg_f + 1) + 1j * rng.standard_normal(deg_f + 1)
        cg = rng.standard_normal(deg_g + 1) + 1j * rng.standard_normal(deg_g + 1)
        c1 = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        c2 = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        u = _poly_apply(M, cf, F @ c1)
        v = _poly_apply(M, cg, F @ c2)
        lhs = np.vdot(u, v)
        fl = np.polyval(cf[::-1], meas.eigenvalues)
        gl = np.polyval(cg[::-1], meas.eigenvalues)
        quad = np.einsum("i,kij,j->k", c1.conj(), meas.weights, c2)
        rhs = np.sum(fl.conj() * gl * quad)
        scale = max(np.linalg.norm(u) * np.linalg.norm(v), np.finfo(float).tiny)
        err = abs(lhs - rhs) / scale
        if err > worst:
            worst, worst_pair = err, (t, tuple(cf), tuple(cg))
    passed = worst <= tol
    return meas, RepresentationCertificate(pairs, float(worst), tol, passed,
                                           None if passed else worst_pair)


def conjugation_residual(G_base: np.ndarray, G_pert: np.ndarray, mu: float) -> tuple[float, float]:
    """``||Im G^mu - X^{-*} Im G X^{-1}||`` with ``X = I + mu G``; returns (residual, cond X)."""
    N = G_base.shape[0]
    X = np.eye(N) + mu * G_base
    cond = float(np.linalg.cond(X))
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        return float("nan"), cond
    Xinv = np.linalg.inv(X)
    rhs = Xinv.conj().T @ imag_part(G_base) @ Xinv
    return float(np.linalg.norm(imag_part(G_pert) - rhs, 2)), cond


@dataclass
class VSpaceReport:
    energy: float
    n: int
    m: int
    mu_n: float
    mu_m: float
    eps: float
    rank_im_n: int
    rank_im_m: int
    conj_residual: float
    ill_conditioned: bool
    at_eigenvalue: bool = False
    scaled_rank_n: int | None = None
    scaled_rank_m: int | None = None
    injection_residual_nm: float | None = None
    injection_residual_mn: float | None = None
    injection_ok: bool | None = None
    maps_skipped: bool = False
    ratio: complex | None = None
    ratio_oracle: float | None = None
    mass_n: float | None = None
    mass_m: float | None = None
    notes: list = field(default_factory=list)

    @property
    def finite_eps_ranks_equal(self) -> bool:
        return self.rank_im_n == self.rank_im_m

    @property
    def scaled_ranks_equal(self) -> bool | None:
        if self.scaled_rank_n is None:
            return None
        return self.scaled_rank_n == self.scaled_rank_m


def _scaled_cross_limit(H, family, src, dst, E, schedule):
    """``lim f_src(eps) G_dst,dst(E + i eps)`` with ``f_src = 1 / tr G_src,src``."""
    vals = []
    for e in schedule.epsilons:
        z = E + 1j * e
        g_src = green_block(H, family, src, src, z).value
        g_dst = green_block(H, family, dst, dst, z).value
        vals.append(g_dst / np.trace(g_src))
    return richardson(vals, schedule.ratio, levels=2)[-1]


def _injection(H, Hp, family, src, dst, mu_src, mu_dst, E, schedule, S_src):
    """Quadratic-form identity behind ``G_src,dst(E + i0)^{-1}: V~_src -> V~_dst``.

    The base operator carries only the ``dst`` shift. Returns
    ``(residual, injective)`` or ``None`` if ``E`` is outside the set where the
    base boundary values exist and the off-diagonal block is invertible.
    """
    base = assemble_hamiltonian(H, family, None, extra=[(dst, mu_dst)])
    reports = [boundary_limit(base, family, a, b, E, schedule)
               for a, b in ((src, src), (dst, dst), (src, dst))]
    if not all(r.converged for r in reports):
        return None
    G = reports[2].limit
    if np.linalg.cond(G) >= COND_LIMIT:
        return None
    w, U = np.linalg.eigh(S_src)
    keep = w > max(w[-1], 0.0) * 1e-8
    V = U[:, keep]
    if V.shape[1] == 0:
        return None
    Phi = np.linalg.solve(G, V)
    T = _scaled_cross_limit(Hp, family, src, dst, E, schedule)
    lhs = np.einsum("ik,ij,jk->k", Phi.conj(), T, Phi)
    rhs = mu_src ** 2 * np.einsum("ik,ij,jk->k", V.conj(), S_src, V)
    resid = float(np.max(np.abs(lhs - rhs)))
    # Phi must keep a component outside ker T
    injective = bool(np.min(np.abs(lhs)) > 1e-8 * max(1.0, float(np.max(np.abs(rhs)))))
    return resid, injective


def v_space_report(
    H: HermitianOperator,
    family: ProjectionFamily,
    n: int,
    m: int,
    mu_n: float,
    mu_m: float,
    E: float,
    schedule: EpsilonSchedule | None = None,
    eps: float = 1e-3,
    rank_tol: float | None = None,
) -> VSpaceReport:
    """Rank diagnostics for ``H' = H + mu_n P_n + mu_m P_m`` at energy ``E``.

    At finite ``eps`` it records the ranks of ``Im G'_nn`` and ``Im G'_mm`` and
    the exact conjugation identity relating ``Im G'_nn`` to the block of the
    operator without the ``P_n`` shift (and symmetrically for ``m``).

    When ``E`` is an eigenvalue of ``H'`` it also records the ranks of both
    scaled singular limits, the trace ratio against the point-mass oracle,
    and the residual of ``<phi, T phi> = mu^2 <v, S v>`` for
    ``phi = G_nm(E + i0)^{-1} v``, ``v`` in the range of the scaled limit
    ``S`` (and the reverse direction). Here ``T`` is the ``P_m`` block scaled
    by ``1 / tr G'_nn``. Energies where a base boundary value diverges or
    ``G_nm(E + i0)`` is singular skip the maps and set ``maps_skipped``.
    """
    schedule = schedule or EpsilonSchedule()
    Hp = assemble_hamiltonian(H, family, None, extra=[(n, mu_n), (m, mu_m)])
    z = E + 1j * eps
    Gp = green_blocks_dense(Hp, family, z)
    base_n = assemble_hamiltonian(H, family, None, extra=[(m, mu_m)])
    base_m = assemble_hamiltonian(H, family, None, extra=[(n, mu_n)])
    Gb_n = green_blocks_dense(base_n, family, z)
    Gb_m = green_blocks_dense(base_m, family, z)
    res_n, cond_n = conjugation_residual(_block(Gb_n, family, n, n), _block(Gp, family, n, n), mu_n)
    res_m, cond_m = conjugation_residual(_block(Gb_m, family, m, m), _block(Gp, family, m, m), mu_m)
    ill = bool(np.isnan(res_n) or np.isnan(res_m))
    rep = VSpaceReport(
        energy=float(E), n=n, m=m, mu_n=float(mu_n), mu_m=float(mu_m), eps=float(eps),
        rank_im_n=numeric_rank(imag_part(_block(Gp, family, n, n)), rank_tol),
        rank_im_m=numeric_rank(imag_part(_block(Gp, family, m, m)), rank_tol),
        conj_residual=float(np.nanmax([res_n, res_m])) if not ill else float("nan"),
        ill_conditioned=ill,
    )

    lam_k = None
    tol = CLUSTER_TOL * max(1.0, Hp.norm)
    for k, (lam, sl) in enumerate(Hp.clusters):
        if abs(lam - E) <= tol:
            lam_k, k_hit = lam, k
            break
    if lam_k is None:
        return rep

    rep.at_eigenvalue = True
    Pi = Hp.eigenprojection(k_hit)
    Wn = family.frame(n).conj().T @ Pi @ family.frame(n)
    Wm = family.frame(m).conj().T @ Pi @ family.frame(m)
    rep.mass_n = float(np.trace(Wn).real)
    rep.mass_m = float(np.trace(Wm).real)
    sn = scaled_singular_limit(Hp, family, n, lam_k, schedule, rank_tol)
    sm = scaled_singular_limit(Hp, family, m, lam_k, schedule, rank_tol)
    rep.scaled_rank_n = sn.rank if sn.singular else 0
    rep.scaled_rank_m = sm.rank if sm.singular else 0
    if rep.mass_n > 0:
        rep.ratio, _ = trace_ratio_limit(Hp, family, n, m, lam_k, schedule)
        rep.ratio_oracle = rep.mass_m / rep.mass_n
    if not (sn.singular and sm.singular):
        rep.maps_skipped = True
        rep.notes.append("scaled limit missing on one side")
        return rep
    fwd = _injection(H, Hp, family, n, m, mu_n, mu_m, lam_k, schedule, sn.limit)
    bwd = _injection(H, Hp, family, m, n, mu_m, mu_n, lam_k, schedule, sm.limit)
    if fwd is None or bwd is None:
        rep.maps_skipped = True
        rep.notes.append("energy outside the set where the off-diagonal boundary value is invertible")
        return rep
    rep.injection_residual_nm, ok_f = fwd
    rep.injection_residual_mn, ok_b = bwd
    rep.injection_ok = ok_f and ok_b
    return rep
