import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from herglotzlab.lattice_model import (
    DisorderDescriptor,
    HermitianOperator,
    ModelSpec,
    ProjectionFamily,
    assemble_hamiltonian,
    sample_disorder,
)

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def disordered(spec: ModelSpec, seed: int = 0, sample: int = 0, a: float = -1.0, b: float = 1.0):
    A, fam = spec.build()
    omega = sample_disorder(DisorderDescriptor("uniform", a, b), seed, sample, fam.indices)
    return assemble_hamiltonian(A, fam, omega), fam


def random_instance(seed: int, D: int = 8, N: int = 2):
    """Random Hermitian H with a random complete family of rank-N frames."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))
    H = HermitianOperator((X + X.conj().T) / 2)
    Q, _ = np.linalg.qr(rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D)))
    frames = tuple(Q[:, N * k: N * (k + 1)] for k in range(D // N))
    return H, ProjectionFamily(tuple(range(D // N)), N, frames, "custom")


@pytest.fixture
def dimer4():
    return disordered(ModelSpec("dimer_polymer", (4,), 2), seed=42)


@pytest.fixture
def dimer6():
    return disordered(ModelSpec("dimer_polymer", (6,), 2), seed=7)
