"""Finite lattice truncations of the generalized Anderson model.

The random operator is ``H = A + sum_n omega_n P_n`` where ``A`` is the
adjacency operator of a box in Z^d (Dirichlet boundary, i.e. edges leaving
the box are dropped) and ``P_n`` are rank-N orthogonal projections that sum
to the identity.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "LatticeBox",
    "HermitianOperator",
    "ProjectionFamily",
    "DisorderDescriptor",
    "DisorderRealization",
    "build_laplacian",
    "build_projection_family",
    "sample_disorder",
    "assemble_hamiltonian",
    "disorder_generator",
    "ModelSpec",
    "MODEL_KINDS",
    "CLUSTER_TOL",
]

# relative eigenvalue gap below which eigenvectors share one eigenprojection
CLUSTER_TOL = 1e-8

# stream tags for counter-based seed splitting
STREAM_DISORDER = 0
STREAM_PERTURBATION = 1
STREAM_PROBE = 2


@dataclass(frozen=True)
class LatticeBox:
    """Box ``[0, L_1) x ... x [0, L_d)``, optionally repeated ``strip_copies`` times.

    Sites are ordered lexicographically by coordinate with the copy index
    outermost, so site ``s`` of copy ``c`` has global index
    ``c * sites_per_copy + s``.
    """

    side_lengths: tuple[int, ...]
    strip_copies: int = 1

    def __post_init__(self):
        sides = tuple(int(x) for x in self.side_lengths)
        if not sides:
            raise ValueError("box needs at least one axis")
        if any(x < 1 for x in sides):
            raise ValueError(f"side lengths must be positive, got {sides}")
        if int(self.strip_copies) < 1:
            raise ValueError(f"strip_copies must be positive, got {self.strip_copies}")
        object.__setattr__(self, "side_lengths", sides)
        object.__setattr__(self, "strip_copies", int(self.strip_copies))

    @property
    def dimension(self) -> int:
        return len(self.side_lengths)

    @property
    def sites_per_copy(self) -> int:
        return int(np.prod(self.side_lengths))

    @property
    def size(self) -> int:
        """Total Hilbert space dimension D."""
        return self.strip_copies * self.sites_per_copy

    def site_index(self, coord: Sequence[int], copy: int = 0) -> int:
        local = int(np.ravel_multi_index(tuple(coord), self.side_lengths))
        if not 0 <= copy < self.strip_copies:
            raise IndexError(f"copy {copy} out of range")
        return copy * self.sites_per_copy + local

    def coordinate(self, index: int) -> tuple[tuple[int, ...], int]:
        """Inverse of :meth:`site_index`: returns ``(coord, copy)``."""
        if not 0 <= index < self.size:
            raise IndexError(f"site {index} out of range for D={self.size}")
        copy, local = divmod(int(index), self.sites_per_copy)
        coord = np.unravel_index(local, self.side_lengths)
        return tuple(int(c) for c in coord), copy


class HermitianOperator:
    """Finite Hermitian matrix with a lazily cached spectral decomposition.

    The matrix is copied and frozen on construction. The eigendecomposition
    is computed once under a lock and shared read-only afterwards.

    Eigenvalues closer than ``CLUSTER_TOL * ||H||`` are merged into a single
    eigenprojection; ``clusters`` holds ``(eigenvalue, column slice)`` pairs
    into ``eigenvectors``.
    """

    def __init__(self, matrix, check: bool = True):
        m = np.array(matrix, dtype=complex, copy=True)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        if check and not np.array_equal(m, m.conj().T):
            raise ValueError("matrix is not exactly Hermitian")
        m.setflags(write=False)
        self._matrix = m
        self._lock = threading.Lock()
        self._spectrum = None

    def __getstate__(self):
        return {"matrix": self._matrix, "spectrum": self._spectrum}

    def __setstate__(self, state):
        self._matrix = state["matrix"]
        self._spectrum = state["spectrum"]
        self._lock = threading.Lock()

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[0]

    @property
    def norm(self) -> float:
        ev = self.eigenvalues
        return float(np.max(np.abs(ev))) if ev.size else 0.0

    def _decompose(self):
        with self._lock:
            if self._spectrum is None:
                w, v = np.linalg.eigh(self._matrix)
                w.setflags(write=False)
                v.setflags(write=False)
                scale = float(np.max(np.abs(w))) if w.size else 0.0
                tol = CLUSTER_TOL * scale
                clusters = []
                start = 0
                for k in range(1, w.size + 1):
                    if k == w.size or w[k] - w[k - 1] > tol:
                        clusters.append((float(np.mean(w[start:k])), slice(start, k)))
                        start = k
                self._spectrum = (w, v, tuple(clusters))
        return self._spectrum

    @property
    def eigenvalues(self) -> np.ndarray:
        """Raw eigenvalues in ascending order (one per eigenvector)."""
        return self._decompose()[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self._decompose()[1]

    @property
    def clusters(self) -> tuple[tuple[float, slice], ...]:
        return self._decompose()[2]

    @property
    def distinct_eigenvalues(self) -> np.ndarray:
        return np.array([lam for lam, _ in self.clusters])

    def eigenprojection(self, k: int) -> np.ndarray:
        _, sl = self.clusters[k]
        v = self.eigenvectors[:, sl]
        return v @ v.conj().T

    def decomposition_residual(self) -> float:
        """``||H - sum_k lambda_k Pi_k||_2`` using the clustered eigenvalues."""
        recon = np.zeros_like(self._matrix)
        for k, (lam, _) in enumerate(self.clusters):
            recon += lam * self.eigenprojection(k)
        return float(np.linalg.norm(self._matrix - recon, 2))

    def __repr__(self):
        return f"HermitianOperator(dim={self.dim})"


@dataclass(frozen=True)
class ProjectionFamily:
    """Indexed rank-N orthogonal projections given by orthonormal D x N frames."""

    indices: tuple[int, ...]
    rank: int
    frames: tuple[np.ndarray, ...]
    kind: str = "custom"
    _position: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.indices) != len(self.frames):
            raise ValueError("one frame per index required")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate indices")
        frozen = []
        for f in self.frames:
            f = np.array(f, dtype=complex, copy=True)
            if f.ndim != 2 or f.shape[1] != self.rank:
                raise ValueError(f"frame shape {f.shape} incompatible with rank {self.rank}")
            f.setflags(write=False)
            frozen.append(f)
        if len({f.shape[0] for f in frozen}) > 1:
            raise ValueError("frames live in different dimensions")
        object.__setattr__(self, "frames", tuple(frozen))
        object.__setattr__(self, "indices", tuple(int(n) for n in self.indices))
        object.__setattr__(self, "_position", {n: p for p, n in enumerate(self.indices)})

    @property
    def dim(self) -> int:
        return self.frames[0].shape[0]

    def position(self, n: int) -> int:
        try:
            return self._position[n]
        except KeyError:
            raise KeyError(f"index {n} not in family") from None

    def frame(self, n: int) -> np.ndarray:
        return self.frames[self.position(n)]

    def projector(self, n: int) -> np.ndarray:
        f = self.frame(n)
        return f @ f.conj().T

    def stacked(self) -> np.ndarray:
        """All frames side by side (D x N|indices|); unitary when the family is complete."""
        return np.hstack(self.frames)

    def completeness_residual(self) -> float:
        """``||sum_n P_n - I||_2``."""
        total = sum(self.projector(n) for n in self.indices)
        return float(np.linalg.norm(total - np.eye(self.dim), 2))

    def orthonormality_residual(self) -> float:
        s = self.stacked()
        return float(np.linalg.norm(s.conj().T @ s - np.eye(s.shape[1]), 2))

    def validate(self, tol: float = 1e-12) -> None:
        if self.rank * len(self.indices) != self.dim:
            raise ValueError(
                f"N*|indices| = {self.rank * len(self.indices)} differs from D = {self.dim}"
            )
        if self.orthonormality_residual() > tol:
            raise ValueError("frames are not mutually orthonormal")
        if self.completeness_residual() > tol:
            raise ValueError("projections do not sum to the identity")


@dataclass(frozen=True)
class DisorderDescriptor:
    """Absolutely continuous single-site law; only ``uniform(a, b)`` is supported."""

    kind: str = "uniform"
    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind != "uniform":
            raise ValueError(f"unsupported disorder kind {self.kind!r}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("disorder bounds must be finite")
        if not self.a < self.b:
            raise ValueError(
                f"distribution must be absolutely continuous (need a < b, got a={self.a}, b={self.b})"
            )

    @property
    def bound(self) -> float:
        return max(abs(self.a), abs(self.b))

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.uniform(self.a, self.b, size=size)


@dataclass(frozen=True)
class DisorderRealization:
    indices: tuple[int, ...]
    values: np.ndarray
    descriptor: DisorderDescriptor
    master_seed: int
    sample_index: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, n: int) -> float:
        return float(self.values[self.indices.index(n)])

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.indices, self.values.tolist()))


def disorder_generator(master_seed: int, sample_index: int, stream: int = STREAM_DISORDER):
    """Counter-based generator for one (seed, sample, stream) triple.

    Philox streams keyed through ``SeedSequence.spawn_key`` are independent of
    the order in which samples are processed.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(sample_index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def build_laplacian(box: LatticeBox, boundary: str = "dirichlet") -> HermitianOperator:
    """Adjacency operator ``(Au)(n) = sum_{|n-m|=1} u(m)`` restricted to the box.

    Strip boxes give a block-diagonal operator, one block per copy.
    """
    if boundary != "dirichlet":
        raise ValueError(f"unsupported boundary {boundary!r}")
    n = box.sites_per_copy
    block = np.zeros((n, n))
    grid = np.arange(n).reshape(box.side_lengths)
    for axis in range(box.dimension):
        a = np.take(grid, np.arange(box.side_lengths[axis] - 1), axis=axis).ravel()
        b = np.take(grid, np.arange(1, box.side_lengths[axis]), axis=axis).ravel()
        block[a, b] = 1.0
        block[b, a] = 1.0
    return HermitianOperator(np.kron(np.eye(box.strip_copies), block))


def _check_bijection(perm, n: int) -> np.ndarray:
    p = np.asarray(perm, dtype=int)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ValueError(f"permutation is not a bijection on {n} sites: {perm!r}")
    return p


def build_projection_family(
    kind: str,
    N: int,
    box: LatticeBox,
    permutations=None,
    frames=None,
) -> ProjectionFamily:
    """Build one of the supported projection families.

    ``dimer_polymer`` groups ``N`` consecutive sites (global ordering) into one
    index. ``strip`` requires ``box.strip_copies == N`` and sets
    ``P_n = span{delta^i_{pi_i(n)}}``; the index set is the sites of one copy.
    ``custom`` takes explicit ``frames``.
    """
    N = int(N)
    if N < 1:
        raise ValueError("rank N must be positive")
    D = box.size
    if kind == "dimer_polymer":
        if D % N:
            raise ValueError(f"N={N} does not divide D={D}")
        eye = np.eye(D)
        fr = [eye[:, N * n: N * (n + 1)] for n in range(D // N)]
        return _validated(ProjectionFamily(tuple(range(D // N)), N, tuple(fr), kind))
    if kind == "strip":
        if box.strip_copies != N:
            raise ValueError(f"strip model needs N copies (N={N}, copies={box.strip_copies})")
        L = box.sites_per_copy
        if permutations is None:
            permutations = [np.arange(L)] * N
        if len(permutations) != N:
            raise ValueError(f"need one bijection per copy, got {len(permutations)}")
        perms = [_check_bijection(p, L) for p in permutations]
        eye = np.eye(D)
        fr = []
        for n in range(L):
            cols = [i * L + perms[i][n] for i in range(N)]
            fr.append(eye[:, cols])
        return _validated(ProjectionFamily(tuple(range(L)), N, tuple(fr), kind))
    if kind == "custom":
        if frames is None:
            raise ValueError("custom family needs explicit frames")
        return _validated(ProjectionFamily(tuple(range(len(frames))), N, tuple(frames), kind))
    raise ValueError(f"unknown projection family kind {kind!r}")


def _validated(fam: ProjectionFamily) -> ProjectionFamily:
    fam.validate()
    return fam


def sample_disorder(
    descriptor: DisorderDescriptor,
    master_seed: int,
    sample_index: int,
    indices: Sequence[int],
) -> DisorderRealization:
    rng = disorder_generator(master_seed, sample_index, STREAM_DISORDER)
    values = descriptor.draw(rng, len(indices))
    return DisorderRealization(tuple(int(n) for n in indices), values, descriptor,
                               int(master_seed), int(sample_index))


def assemble_hamiltonian(
    A: HermitianOperator,
    family: ProjectionFamily,
    omega: DisorderRealization | None = None,
    extra: Sequence[tuple[int, float]] = (),
) -> HermitianOperator:
    """``H = A + sum_n omega_n P_n + sum (mu P_index)`` over the ``extra`` shifts."""
    if A.dim != family.dim:
        raise ValueError(f"operator dimension {A.dim} differs from family dimension {family.dim}")
    if omega is not None and tuple(omega.indices) != tuple(family.indices):
        raise ValueError("disorder realization and projection family have different index sets")
    coeff = dict.fromkeys(family.indices, 0.0)
    if omega is not None:
        for n, w in zip(omega.indices, omega.values):
            coeff[n] += float(w)
    for n, mu in extra:
        if n not in coeff:
            raise KeyError(f"extra shift on unknown index {n}")
        coeff[n] += float(mu)
    if all(c == 0.0 for c in coeff.values()):
        return A
    H = np.array(A.matrix, copy=True)
    for n, c in coeff.items():
        if c != 0.0:
            H += c * family.projector(n)
    # symmetric assignment makes the result exactly Hermitian
    H = 0.5 * (H + H.conj().T)
    return HermitianOperator(H)


MODEL_KINDS = ("dimer_polymer", "strip", "decoupled")


@dataclass(frozen=True)
class ModelSpec:
    """Preset models.

    ``dimer_polymer``: one box, ``N`` consecutive sites per index.
    ``strip``: ``N`` copies of the box, one site per copy per index.
    ``decoupled``: ``copies`` disconnected boxes with dimer/polymer grouping;
    indices in different copies never talk to each other, which makes it the
    counterexample for the rank event.
    """

    kind: str = "dimer_polymer"
    L: tuple[int, ...] = (8,)
    N: int = 2
    copies: int = 1
    permutations: tuple | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "L", tuple(int(x) for x in self.L))
        if self.permutations is not None:
            object.__setattr__(self, "permutations",
                               tuple(tuple(int(v) for v in p) for p in self.permutations))

    @property
    def box(self) -> LatticeBox:
        return LatticeBox(self.L, self.copies)

    def build(self) -> tuple[HermitianOperator, ProjectionFamily]:
        box = self.box
        if self.kind == "decoupled":
            if self.copies < 2:
                raise ValueError("decoupled model needs at least two copies")
            if box.sites_per_copy % self.N:
                raise ValueError(
                    f"N={self.N} must divide the sites per copy ({box.sites_per_copy})")
            family = build_projection_family("dimer_polymer", self.N, box)
        elif self.kind == "strip":
            family = build_projection_family("strip", self.N, box, self.permutations)
        else:
            family = build_projection_family("dimer_polymer", self.N, box)
        return build_laplacian(box), family
