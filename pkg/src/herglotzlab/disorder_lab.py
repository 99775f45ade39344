"""Monte Carlo sweeps over disorder samples.

Every sample is an independent work item whose random streams are keyed by
``(master_seed, sample_index, stream)``; results are collected in sample
order, so tables do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binomtest

from .cyclic import conjugation_residual, krylov_cyclic_basis, matrix_measure, rank_event
from .lattice_model import (
    STREAM_PERTURBATION,
    STREAM_PROBE,
    DisorderDescriptor,
    HermitianOperator,
    ModelSpec,
    ProjectionFamily,
    assemble_hamiltonian,
    disorder_generator,
    sample_disorder,
)
from .resolvent import (
    EpsilonSchedule,
    _block,
    check_resolvent_identities,
    green_blocks_dense,
    imag_part,
    numeric_rank,
    scaled_singular_limit,
    trace_ratio_limit,
)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentPlan",
    "FrequencyEstimate",
    "Table",
    "AveragingResult",
    "default_energy_window",
    "draw_perturbations",
    "realize",
    "identity_sweep",
    "estimate_event_probability",
    "equivalence_sweep",
    "singular_equivalence_sweep",
    "spectral_averaging_check",
]

MU_FLOOR = 1e-6


@dataclass(frozen=True)
class ExperimentPlan:
    model: ModelSpec
    disorder: DisorderDescriptor = DisorderDescriptor()
    samples: int = 100
    pairs: tuple[tuple[int, int], ...] = ()
    energies: tuple[float, ...] = ()
    schedule: EpsilonSchedule = EpsilonSchedule()
    master_seed: int = 0
    eps: float = 1e-3
    mass_threshold: float = 1e-10
    mu_law: DisorderDescriptor = DisorderDescriptor()
    fixed_mu: tuple[float, float] | None = None
    rank_tol: float | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("sample count K must be at least 1")
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))
        object.__setattr__(self, "energies", tuple(float(e) for e in self.energies))

    def resolved_pairs(self, family: ProjectionFamily) -> tuple[tuple[int, int], ...]:
        if self.pairs:
            return self.pairs
        return ((family.indices[0], family.indices[-1]),)

    def resolved_energies(self) -> tuple[float, ...]:
        if self.energies:
            return self.energies
        lo, hi = default_energy_window(self)
        return tuple(np.linspace(lo, hi, 21).tolist())


@dataclass(frozen=True)
class FrequencyEstimate:
    successes: int
    trials: int
    estimate: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_counts(cls, successes: int, trials: int) -> "FrequencyEstimate":
        ci = binomtest(successes, trials).proportion_ci(0.95, method="exact")
        return cls(successes, trials, successes / trials, float(ci.low), float(ci.high))

    @property
    def dichotomous(self) -> bool:
        return self.successes in (0, self.trials)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list = field(default_factory=list)

    def column(self, name: str) -> list:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])
        return path

    def to_json(self, path) -> Path:
        def conv(v):
            if isinstance(v, (bool, np.bool_)):
                return bool(v)
            if isinstance(v, (int, np.integer)):
                return int(v)
            if isinstance(v, (float, np.floating)):
                v = float(v)
                return None if math.isnan(v) else v
            return v

        path = Path(path)
        data = [dict(zip(self.columns, (conv(v) for v in r))) for r in self.rows]
        path.write_text(json.dumps(data, indent=1) + "\n")
        return path

    def write(self, directory, fmt: str = "csv") -> Path:
        directory = Path(directory)
        if fmt == "json":
            return self.to_json(directory / f"{self.name}.json")
        return self.to_csv(directory / f"{self.name}.csv")


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def default_energy_window(plan: ExperimentPlan) -> tuple[float, float]:
    """Interval containing every spectrum the plan can produce."""
    A, _ = plan.model.build()
    mu = plan.mu_law.bound if plan.fixed_mu is None else max(abs(x) for x in plan.fixed_mu)
    pad = plan.disorder.bound + 2 * mu
    ev = A.eigenvalues
    return float(ev[0] - pad), float(ev[-1] + pad)


def draw_perturbations(plan: ExperimentPlan, sample: int) -> tuple[float, float, int]:
    """``(mu_n, mu_m, redraws)`` for one sample; draws with ``|mu| < 1e-6`` are redrawn."""
    if plan.fixed_mu is not None:
        return float(plan.fixed_mu[0]), float(plan.fixed_mu[1]), 0
    rng = disorder_generator(plan.master_seed, sample, STREAM_PERTURBATION)
    out, redraws = [], 0
    while len(out) < 2:
        mu = float(plan.mu_law.draw(rng, None))
        if abs(mu) < MU_FLOOR:
            redraws += 1
            continue
        out.append(mu)
    if redraws:
        log.info("sample %d: redrew %d degenerate perturbation(s)", sample, redraws)
    return out[0], out[1], redraws


def realize(plan: ExperimentPlan, sample: int) -> tuple[HermitianOperator, ProjectionFamily]:
    A, family = plan.model.build()
    omega = sample_disorder(plan.disorder, plan.master_seed, sample, family.indices)
    return assemble_hamiltonian(A, family, omega), family


# -- identities ---------------------------------------------------------------

IDENTITY_COLUMNS = ("sample", "index", "mu", "z_re", "z_im", "r6", "r7", "r8", "flagged")


def _identity_rows(plan: ExperimentPlan, sample: int) -> list:
    H, family = realize(plan, sample)
    rng = disorder_generator(plan.master_seed, sample, STREAM_PROBE)
    lo, hi = default_energy_window(plan)
    idx = family.indices[int(rng.integers(len(family.indices)))]
    mu, _, _ = draw_perturbations(plan, sample)
    z = complex(rng.uniform(lo, hi), 10 ** rng.uniform(-2, 0))
    res = check_resolvent_identities(H, family, idx, mu, z)
    return [(sample, idx, mu, z.real, z.imag, res.r6, res.r7, res.r8, res.flagged)]


def identity_sweep(plan: ExperimentPlan) -> Table:
    """One random (index, mu, z) resolvent-identity check per sample."""
    table = Table("identities", IDENTITY_COLUMNS)
    for rows in _parallel_map(partial(_identity_rows, plan), range(plan.samples), plan.jobs):
        table.rows.extend(rows)
    return table


# -- rank event ---------------------------------------------------------------

EVENT_COLUMNS = ("sample", "n", "m", "rank_QnPm", "N", "event")


def _event_rows(plan: ExperimentPlan, sample: int) -> list:
    H, family = realize(plan, sample)
    rng = disorder_generator(plan.master_seed, sample, STREAM_PROBE)
    probes = rng.uniform(-3, 3, 5) + 1j * rng.uniform(0.05, 1.5, 5)
    rows = []
    bases = {}
    for n, m in plan.resolved_pairs(family):
        if n not in bases:
            bases[n] = krylov_cyclic_basis(H, family, n)
        ev = rank_event(H, family, n, m, plan.rank_tol, basis=bases[n], probes=probes)
        if not ev.det_corroborates:
            log.debug("sample %d (%d,%d): determinant probe disagrees with Krylov rank", sample, n, m)
        rows.append((sample, n, m, ev.rank, ev.N, ev.indicator, ev.det_corroborates))
    return rows


def estimate_event_probability(plan: ExperimentPlan) -> tuple[dict, Table, int]:
    """Frequency of ``rank(Q_n P_m) = N`` over the plan's samples.

    Returns ``(estimates by pair, events table, determinant disagreements)``.
    """
    table = Table("events", EVENT_COLUMNS)
    disagreements = 0
    counts: dict[tuple[int, int], int] = {}
    for rows in _parallel_map(partial(_event_rows, plan), range(plan.samples), plan.jobs):
        for *row, agrees in rows:
            table.rows.append(tuple(row))
            key = (row[1], row[2])
            counts[key] = counts.get(key, 0) + int(row[5])
            disagreements += int(not agrees)
    estimates = {k: FrequencyEstimate.from_counts(v, plan.samples) for k, v in counts.items()}
    return estimates, table, disagreements


# -- absolutely continuous part -----------------------------------------------

EQUIVALENCE_COLUMNS = ("sample", "E", "eps", "rank_n", "rank_m", "residual", "flagged")


def _equivalence_rows(plan: ExperimentPlan, sample: int) -> list:
    H, family = realize(plan, sample)
    n, m = plan.resolved_pairs(family)[0]
    mu_n, mu_m, _ = draw_perturbations(plan, sample)
    Hp = assemble_hamiltonian(H, family, None, extra=[(n, mu_n), (m, mu_m)])
    base_n = assemble_hamiltonian(H, family, None, extra=[(m, mu_m)])
    base_m = assemble_hamiltonian(H, family, None, extra=[(n, mu_n)])
    rows = []
    for E in plan.resolved_energies():
        z = E + 1j * plan.eps
        Gp = green_blocks_dense(Hp, family, z)
        Gn = green_blocks_dense(base_n, family, z)
        Gm = green_blocks_dense(base_m, family, z)
        rn, _ = conjugation_residual(_block(Gn, family, n, n), _block(Gp, family, n, n), mu_n)
        rm, _ = conjugation_residual(_block(Gm, family, m, m), _block(Gp, family, m, m), mu_m)
        flagged = bool(math.isnan(rn) or math.isnan(rm))
        resid = float("nan") if flagged else max(rn, rm)
        rank_n = numeric_rank(imag_part(_block(Gp, family, n, n)), plan.rank_tol)
        rank_m = numeric_rank(imag_part(_block(Gp, family, m, m)), plan.rank_tol)
        rows.append((sample, E, plan.eps, rank_n, rank_m, resid, flagged))
    return rows


def equivalence_sweep(plan: ExperimentPlan) -> Table:
    """Finite-eps conjugation residuals and ranks of ``Im G'_nn``, ``Im G'_mm``.

    ``H' = H + mu_n P_n + mu_m P_m`` with ``(n, m)`` the plan's first pair.
    """
    table = Table("equivalence", EQUIVALENCE_COLUMNS)
    for rows in _parallel_map(partial(_equivalence_rows, plan), range(plan.samples), plan.jobs):
        table.rows.extend(rows)
    return table


# -- singular part ------------------------------------------------------------

SINGULAR_COLUMNS = ("sample", "k", "lambda", "mass_n", "mass_m", "rank_n", "rank_m",
                    "ratio", "ratio_oracle", "indicator")


def _singular_rows(plan: ExperimentPlan, sample: int) -> list:
    H, family = realize(plan, sample)
    n, m = plan.resolved_pairs(family)[0]
    mu_n, mu_m, _ = draw_perturbations(plan, sample)
    Hp = assemble_hamiltonian(H, family, None, extra=[(n, mu_n), (m, mu_m)])
    meas_n = matrix_measure(Hp, family, n)
    meas_m = matrix_measure(Hp, family, m)
    mass_n, mass_m = meas_n.trace_masses(), meas_m.trace_masses()
    thr = plan.mass_threshold
    rows = []
    for k, lam in enumerate(meas_n.eigenvalues):
        a, b = float(mass_n[k]), float(mass_m[k])
        if max(a, b) <= thr:
            continue
        rank_n = rank_m = 0
        if a > thr:
            rep = scaled_singular_limit(Hp, family, n, lam, plan.schedule, plan.rank_tol)
            rank_n = rep.rank if rep.singular else 0
        if b > thr:
            rep = scaled_singular_limit(Hp, family, m, lam, plan.schedule, plan.rank_tol)
            rank_m = rep.rank if rep.singular else 0
        ratio = oracle = float("nan")
        if a > thr:
            value, _ = trace_ratio_limit(Hp, family, n, m, lam, plan.schedule)
            ratio = value.real
            oracle = b / a
        indicator = (a > thr) == (b > thr)
        rows.append((sample, k, float(lam), a, b, rank_n, rank_m, ratio, oracle, indicator))
    return rows


def singular_equivalence_sweep(plan: ExperimentPlan) -> Table:
    """Point masses and their scaled-limit diagnostics at every eigenvalue of ``H'``.

    "Singular part" at finite size means the point spectrum.
    """
    table = Table("singular", SINGULAR_COLUMNS)
    for rows in _parallel_map(partial(_singular_rows, plan), range(plan.samples), plan.jobs):
        table.rows.extend(rows)
    return table


# -- spectral averaging -------------------------------------------------------


@dataclass
class AveragingResult:
    table: Table
    slope: float
    center: float


def spectral_averaging_check(
    A: HermitianOperator,
    family: ProjectionFamily,
    index: int,
    widths: Sequence[float],
    lambdas: Sequence[float],
    center: float = 0.3,
) -> AveragingResult:
    """Average of ``tr(P E_{A + lam P}([c - d/2, c + d/2)) P)`` over ``lam`` for each width ``d``.

    The slope is a least-squares fit of log(average) against log(width) over
    the positive widths.
    """
    widths = [float(w) for w in widths]
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise ValueError("widths must be strictly decreasing")
    F = family.frame(index)
    P = F @ F.conj().T
    sums = np.zeros(len(widths))
    lambdas = np.asarray(lambdas, dtype=float)
    for lam in lambdas:
        w, V = np.linalg.eigh(A.matrix + lam * P)
        masses = np.sum(np.abs(F.conj().T @ V) ** 2, axis=0)
        for t, d in enumerate(widths):
            sel = (w >= center - d / 2) & (w < center + d / 2)
            sums[t] += masses[sel].sum()
    avg = sums / len(lambdas)
    table = Table("averaging", ("delta", "average_mass"), list(zip(widths, avg.tolist())))
    pos = [(d, a) for d, a in zip(widths, avg) if d > 0]
    slope = float("nan")
    if len(pos) >= 2 and all(a > 0 for _, a in pos):
        d, a = np.array(pos).T
        slope = float(np.polyfit(np.log(d), np.log(a), 1)[0])
    return AveragingResult(table, slope, center)
