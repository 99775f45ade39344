"""Acceptance criteria, one test each.

Every test prints a single ``[criterion k] PASS|FAIL ...`` line (shown even
with output capture on) before asserting.
"""

import json
import time

import numpy as np
import pytest

from herglotzlab.cli import COMMANDS, main
from herglotzlab.cyclic import spectral_representation
from herglotzlab.disorder_lab import (
    ExperimentPlan,
    equivalence_sweep,
    estimate_event_probability,
    singular_equivalence_sweep,
    spectral_averaging_check,
)
from herglotzlab.herglotz import (
    HerglotzSampler,
    block_cauchy_schwarz_check,
    mobius_conjugation,
    random_constrained_blocks,
    random_herglotz_matrix,
    stieltjes_invert,
)
from herglotzlab.lattice_model import DisorderDescriptor, ModelSpec, assemble_hamiltonian, sample_disorder
from herglotzlab.resolvent import check_resolvent_identities, green_block

from conftest import disordered

DIMER = ModelSpec("dimer_polymer", (8,), 2)


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {k}] {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


def test_c01_resolvent_identity_suite(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, flagged = 0.0, 0
    for t in range(100):
        if t % 2 == 0:
            spec = ModelSpec("dimer_polymer", (2 * int(rng.integers(1, 6)),), 2)
        else:
            N = int(rng.integers(2, 4))
            spec = ModelSpec("strip", (int(rng.integers(2, 7)),), N, N)
        A, fam = spec.build()
        omega = sample_disorder(DisorderDescriptor(), 101, t, fam.indices)
        H = assemble_hamiltonian(A, fam, omega)
        idx = fam.indices[int(rng.integers(len(fam.indices)))]
        mu = float(rng.uniform(-2, 2))
        z = complex(rng.uniform(-4, 4), 10 ** rng.uniform(-3, 0.5))
        res = check_resolvent_identities(H, fam, idx, mu, z)
        flagged += res.flagged
        if not res.flagged:
            worst = max(worst, res.max())
    elapsed = time.perf_counter() - t0
    ok = flagged == 0 and worst < 1e-10 and elapsed < 30
    report(1, ok, f"max residual {worst:.2e} (< 1e-10), flagged {flagged}, {elapsed:.2f}s (< 30s)")
    assert ok


def test_c02_herglotz_positivity(report):
    energies = np.linspace(-4, 4, 21)
    etas = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)
    lo = np.inf
    for s in range(20):
        H, fam = disordered(DIMER, seed=202, sample=s)
        for i in fam.indices:
            for E in energies:
                for eta in etas:
                    lo = min(lo, green_block(H, fam, i, i, E + 1j * eta).min_imag_eigenvalue())
    ok = lo >= -1e-12
    report(2, ok, f"min eig Im G_ii = {lo:.3e} (>= -1e-12) over 20 samples x 21 x 5")
    assert ok


def test_c03_mobius_and_cauchy_schwarz(report):
    rng = np.random.default_rng(303)
    mob = []
    while len(mob) < 100:
        n = int(rng.integers(1, 5))
        try:
            _, r = mobius_conjugation(random_herglotz_matrix(rng, n), random_constrained_blocks(rng, n))
        except ValueError:
            continue
        mob.append(r)
    violations = trials = 0
    for k in range(10):
        n = 1 + k % 4
        rank = int(rng.integers(1, 2 * n + 1))
        rep = block_cauchy_schwarz_check(random_herglotz_matrix(rng, 2 * n, rank), 10_000, rng)
        violations += rep.violations
        trials += rep.trials
    kernel = []
    for k in range(20):
        n = 1 + k % 4
        # Im A = Y Y^* with the (n+1)-th row of Y zero, then rotated inside the lower block
        Y = rng.standard_normal((2 * n, 2 * n)) + 1j * rng.standard_normal((2 * n, 2 * n))
        Y[n] = 0
        U, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        V = np.eye(2 * n, dtype=complex)
        V[n:, n:] = U
        R = rng.standard_normal((2 * n, 2 * n))
        A = (R + R.T) / 2 + 1j * V @ Y @ Y.conj().T @ V.conj().T
        rep = block_cauchy_schwarz_check(A, 10, rng, rank_tol=1e-10)
        kernel.append(rep.kernel_residual if rep.kernel_dim >= 1 else np.inf)
    ok = max(mob) < 1e-11 and violations == 0 and trials == 100_000 and max(kernel) < 1e-8
    report(3, ok, f"Moebius max {max(mob):.2e} (< 1e-11); Cauchy-Schwarz {violations} violations "
                  f"in {trials} trials; kernel identity max {max(kernel):.2e} (< 1e-8)")
    assert ok


def test_c04_stieltjes_inversion(report):
    lines, ok = [], True
    for s in range(5):
        H, fam = disordered(DIMER, seed=404, sample=s)
        ev = H.distinct_eigenvalues
        gaps = np.minimum(np.diff(ev, prepend=-np.inf), np.diff(ev, append=np.inf))
        k = int(np.argmax(gaps))
        lam, g = ev[k], gaps[k]
        F = fam.frame(0)
        W = F.conj().T @ H.eigenprojection(k) @ F
        sampler = HerglotzSampler.from_operator(H, fam, 0)
        C = 6 / (np.pi * g)
        errs = []
        for eps in (1e-2, 5e-3, 2.5e-3):
            est = stieltjes_invert(sampler, (lam - g / 2, lam + g / 2), eps)
            errs.append(np.linalg.norm(est - W, 2))
            ok &= errs[-1] <= C * eps
        ok &= errs[1] <= 0.55 * errs[0] and errs[2] <= 0.55 * errs[1]
        lines.append("/".join(f"{e:.1e}" for e in errs))
    report(4, ok, f"errors at eps, eps/2, eps/4: {', '.join(lines)} (<= C eps, ratio <= 0.55)")
    assert ok


def test_c05_spectral_representation(report):
    worst, ok = 0.0, True
    for s in range(10):
        H, fam = disordered(ModelSpec("dimer_polymer", (10,), 2), seed=505, sample=s)
        _, cert = spectral_representation(H, fam, s % 5, np.random.default_rng(s), pairs=20)
        ok &= cert.passed
        worst = max(worst, cert.max_error)
    ok = ok and worst <= 1e-9
    report(5, ok, f"max relative pairing error {worst:.2e} (<= 1e-9) over 10 samples x 20 pairs")
    assert ok


def test_c06_zero_one_law(report):
    counts = {}
    for name, spec in (("dimer", DIMER), ("strip", ModelSpec("strip", (6,), 2, 2)),
                       ("decoupled", ModelSpec("decoupled", (4,), 2, 2))):
        est, _, _ = estimate_event_probability(ExperimentPlan(spec, samples=200, master_seed=606))
        (e,) = est.values()
        counts[name] = e.successes
    ok = counts == {"dimer": 200, "strip": 200, "decoupled": 0}
    report(6, ok, "event frequencies " + ", ".join(f"{k} {v}/200" for k, v in counts.items()))
    assert ok


def test_c07_rank_equivalence(report):
    t = equivalence_sweep(ExperimentPlan(DIMER, samples=100, master_seed=707))
    rows = [r for r in t.rows if not r[6]]
    flagged = (len(t.rows) - len(rows)) / len(t.rows)
    good = sum(r[5] < 1e-9 and r[3] == r[4] for r in rows) / len(rows)
    ok = len(t.rows) == 2100 and good >= 0.99 and flagged <= 0.01
    report(7, ok, f"{good:.2%} of non-flagged rows pass (>= 99%), flagged {flagged:.2%} (<= 1%), "
                  f"max residual {max(r[5] for r in rows):.2e}")
    assert ok


def test_c08_singular_equivalence(report):
    plan = ExperimentPlan(DIMER, samples=100, master_seed=808)
    t = singular_equivalence_sweep(plan)
    tol = 20 * plan.schedule.eps_final
    both = all(r[3] > 1e-10 and r[4] > 1e-10 for r in t.rows)
    ranks = all(r[5] == r[6] and r[5] > 0 for r in t.rows)
    rel = max(abs(r[7] - r[8]) / abs(r[8]) for r in t.rows)
    ok = both and ranks and rel <= tol and len(t.rows) == 100 * 8
    report(8, ok, f"{len(t.rows)} eigenvalues: masses positive on both {both}, scaled ranks equal {ranks}, "
                  f"max ratio error {rel:.2e} (<= {tol:.2e})")
    assert ok


def test_c09_spectral_averaging(report):
    A, fam = DIMER.build()
    res = spectral_averaging_check(A, fam, 0, [0.1, 0.05, 0.025, 0.0125], np.linspace(-1, 1, 4001))
    ok = res.slope >= 0.9
    report(9, ok, f"fitted log-log slope {res.slope:.4f} (>= 0.9)")
    assert ok


def test_c10_determinism(report, tmp_path):
    differing = []
    for cmd in COMMANDS:
        outs = []
        for jobs in ("1", "4"):
            d = tmp_path / cmd / jobs
            assert main([cmd, "--samples", "8", "--seed", "1010", "--jobs", jobs, "--out", str(d)]) == 0
            files = json.loads((d / "manifest.json").read_text())["outputs"]
            outs.append({f: (d / f).read_bytes() for f in files})
        if outs[0] != outs[1]:
            differing.append(cmd)
    ok = not differing
    report(10, ok, f"{len(COMMANDS)} subcommands byte-identical across --jobs 1/4"
                   + (f"; differing: {differing}" if differing else ""))
    assert ok
