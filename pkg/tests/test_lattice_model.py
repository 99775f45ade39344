import pickle
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from herglotzlab.lattice_model import (
    DisorderDescriptor,
    HermitianOperator,
    LatticeBox,
    ModelSpec,
    assemble_hamiltonian,
    build_laplacian,
    build_projection_family,
    disorder_generator,
    sample_disorder,
)

from conftest import disordered


# -- box ----------------------------------------------------------------------


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(1, 3))
def test_site_index_roundtrip(sides, copies):
    box = LatticeBox(tuple(sides), copies)
    assert box.size == copies * int(np.prod(sides))
    for k in range(box.size):
        coord, c = box.coordinate(k)
        assert box.site_index(coord, c) == k


def test_box_rejects_bad_sides():
    with pytest.raises(ValueError):
        LatticeBox((0,))
    with pytest.raises(ValueError):
        LatticeBox(())


# -- laplacian ----------------------------------------------------------------


def test_laplacian_chain_of_three():
    A = build_laplacian(LatticeBox((3,))).matrix
    np.testing.assert_array_equal(A, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_laplacian_single_site():
    A = build_laplacian(LatticeBox((1,))).matrix
    assert A.shape == (1, 1) and A[0, 0] == 0


def test_laplacian_square_is_four_cycle():
    A = build_laplacian(LatticeBox((2, 2)))
    cycle = np.array([[0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 0, 1], [0, 1, 1, 0]])
    np.testing.assert_array_equal(A.matrix, cycle)
    np.testing.assert_allclose(A.eigenvalues, [-2, 0, 0, 2], atol=1e-14)


def test_laplacian_strip_is_block_diagonal():
    A = build_laplacian(LatticeBox((4,), 2)).matrix
    np.testing.assert_array_equal(A[:4, 4:], 0)
    np.testing.assert_array_equal(A[:4, :4], A[4:, 4:])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_laplacian_symmetric_zero_diagonal(sides):
    A = build_laplacian(LatticeBox(tuple(sides))).matrix
    assert np.all(A == A.T) and np.all(np.diag(A) == 0)
    # degree never exceeds 2d
    assert A.real.sum(axis=1).max() <= 2 * len(sides)


# -- projection families ------------------------------------------------------


def test_dimer_family_l6():
    fam = build_projection_family("dimer_polymer", 2, LatticeBox((6,)))
    assert fam.indices == (0, 1, 2)
    for n in range(3):
        expect = np.zeros((6, 6))
        expect[2 * n, 2 * n] = expect[2 * n + 1, 2 * n + 1] = 1
        np.testing.assert_array_equal(fam.projector(n), expect)
    assert fam.completeness_residual() == 0.0


def test_full_rank_family_is_identity():
    fam = build_projection_family("dimer_polymer", 5, LatticeBox((5,)))
    assert len(fam.indices) == 1
    np.testing.assert_array_equal(fam.projector(0), np.eye(5))


def test_strip_identity_permutations():
    box = LatticeBox((4,), 2)
    fam = build_projection_family("strip", 2, box)
    assert fam.indices == (0, 1, 2, 3)
    for n in fam.indices:
        F = fam.frame(n)
        assert F.shape == (8, 2)
        assert F[n, 0] == 1 and F[4 + n, 1] == 1
    assert fam.completeness_residual() < 1e-12


def test_strip_with_permutation():
    box = LatticeBox((3,), 2)
    fam = build_projection_family("strip", 2, box, permutations=[[0, 1, 2], [2, 0, 1]])
    assert fam.frame(0)[3 + 2, 1] == 1
    assert fam.completeness_residual() < 1e-12


def test_family_errors():
    with pytest.raises(ValueError, match="N=4 does not divide D=6"):
        build_projection_family("dimer_polymer", 4, LatticeBox((6,)))
    with pytest.raises(ValueError, match="bijection"):
        build_projection_family("strip", 2, LatticeBox((3,), 2), permutations=[[0, 1, 2], [0, 0, 1]])
    with pytest.raises(ValueError):
        build_projection_family("strip", 3, LatticeBox((3,), 2))
    with pytest.raises(KeyError):
        build_projection_family("dimer_polymer", 2, LatticeBox((4,))).frame(7)


@given(st.sampled_from(["dimer_polymer", "strip", "decoupled"]), st.integers(1, 3), st.integers(1, 4))
def test_families_complete(kind, N, k):
    L = N * k
    copies = {"strip": N, "decoupled": 2}.get(kind, 1)
    _, fam = ModelSpec(kind, (L,), N, copies).build()
    assert fam.completeness_residual() <= 1e-12
    assert fam.orthonormality_residual() <= 1e-12


# -- disorder -----------------------------------------------------------------


def test_disorder_deterministic():
    d = DisorderDescriptor()
    a = sample_disorder(d, 123, 4, range(10))
    b = sample_disorder(d, 123, 4, range(10))
    assert a.values.tobytes() == b.values.tobytes()
    c = sample_disorder(d, 123, 5, range(10))
    assert not np.array_equal(a.values, c.values)


def test_disorder_streams_independent_of_order():
    g1 = disorder_generator(9, 3, 0).random(5)
    disorder_generator(9, 2, 0).random(100)
    g2 = disorder_generator(9, 3, 0).random(5)
    np.testing.assert_array_equal(g1, g2)
    assert not np.array_equal(g1, disorder_generator(9, 3, 1).random(5))


def test_disorder_degenerate_rejected():
    with pytest.raises(ValueError, match="distribution must be absolutely continuous"):
        DisorderDescriptor("uniform", 0.5, 0.5)


def test_uniform_mean_within_three_sigma():
    vals = sample_disorder(DisorderDescriptor(), 2024, 0, range(10_000)).values
    sigma = 1 / np.sqrt(3 * 10_000)
    assert abs(vals.mean()) < 3 * sigma


def test_uniform_kolmogorov_smirnov():
    pooled = np.concatenate([sample_disorder(DisorderDescriptor(), 11, s, range(100)).values
                             for s in range(50)])
    assert stats.kstest(pooled, stats.uniform(loc=-1, scale=2).cdf).pvalue > 0.01


def test_realization_lookup():
    r = sample_disorder(DisorderDescriptor(), 0, 0, [3, 5, 8])
    assert r[5] == r.values[1]
    assert list(r.as_dict()) == [3, 5, 8]


# -- hamiltonian --------------------------------------------------------------


def test_zero_disorder_returns_a():
    A, fam = ModelSpec("dimer_polymer", (6,), 2).build()
    zero = sample_disorder(DisorderDescriptor(), 0, 0, fam.indices)
    object.__setattr__(zero, "values", np.zeros(3))
    assert assemble_hamiltonian(A, fam, zero) is A
    assert assemble_hamiltonian(A, fam) is A


def test_dimer_diagonal_shift():
    H, fam = disordered(ModelSpec("dimer_polymer", (6,), 2), seed=5)
    A, _ = ModelSpec("dimer_polymer", (6,), 2).build()
    omega = sample_disorder(DisorderDescriptor(), 5, 0, fam.indices)
    d = np.diag(H.matrix - A.matrix).real
    for n in fam.indices:
        assert d[2 * n] == d[2 * n + 1] == pytest.approx(omega[n], abs=0)


def test_hamiltonian_exactly_hermitian():
    H, _ = disordered(ModelSpec("strip", (5,), 3, 3), seed=1)
    assert np.array_equal(H.matrix, H.matrix.conj().T)


def test_mismatched_index_sets():
    A, fam = ModelSpec("dimer_polymer", (6,), 2).build()
    omega = sample_disorder(DisorderDescriptor(), 0, 0, [0, 1])
    with pytest.raises(ValueError):
        assemble_hamiltonian(A, fam, omega)
    with pytest.raises(KeyError):
        assemble_hamiltonian(A, fam, None, extra=[(9, 1.0)])


@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.sampled_from(["dimer_polymer", "strip"]))
def test_weyl_bound(seed, mu, kind):
    spec = ModelSpec(kind, (6,), 2, 2 if kind == "strip" else 1)
    A, fam = spec.build()
    omega = sample_disorder(DisorderDescriptor(), seed, 0, fam.indices)
    H = assemble_hamiltonian(A, fam, omega, extra=[(fam.indices[0], mu)])
    bound = np.max(np.abs(omega.values)) + abs(mu)
    ev_A = np.linalg.eigvalsh(A.matrix)
    for lam in np.linalg.eigvalsh(H.matrix):
        assert np.min(np.abs(ev_A - lam)) <= bound + 1e-12


# -- operator -----------------------------------------------------------------


def test_operator_rejects_non_hermitian():
    with pytest.raises(ValueError):
        HermitianOperator(np.array([[0, 1], [0, 0]]))


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_decomposition_residual(seed, D):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))
    H = HermitianOperator(X + X.conj().T)
    assert H.decomposition_residual() <= 1e-10 * max(H.norm, 1.0)
    total = sum(H.eigenprojection(k) for k in range(len(H.clusters)))
    np.testing.assert_allclose(total, np.eye(D), atol=1e-10)


def test_decomposition_residual_large_lattice():
    H, _ = disordered(ModelSpec("dimer_polymer", (8, 8, 8), 2), seed=3)
    assert H.dim == 512
    assert H.decomposition_residual() <= 1e-10 * H.norm


def test_clusters_merge_degenerate_eigenvalues():
    A = build_laplacian(LatticeBox((2, 2)))
    assert len(A.clusters) == 3
    P0 = A.eigenprojection(1)
    assert np.trace(P0).real == pytest.approx(2)
    np.testing.assert_allclose(P0 @ P0, P0, atol=1e-14)


def test_operator_thread_safe_and_picklable():
    H, _ = disordered(ModelSpec("dimer_polymer", (20,), 2))
    out = []
    threads = [threading.Thread(target=lambda: out.append(H.eigenvalues)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(o is out[0] for o in out)
    H2 = pickle.loads(pickle.dumps(H))
    np.testing.assert_array_equal(H2.eigenvalues, H.eigenvalues)


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("decoupled", (4,), 2, copies=1).build()
    with pytest.raises(ValueError, match="N=3"):
        ModelSpec("decoupled", (4,), 3, copies=2).build()
    with pytest.raises(ValueError):
        ModelSpec("nonsense")
