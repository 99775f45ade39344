"""``herglotzlab`` command line.

Every subcommand writes its tables plus ``manifest.json`` into the output
directory. The manifest lists each check with its value and threshold; the
exit status is 0 exactly when all of them pass.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, validate_config, validate_mapping
from .disorder_lab import (
    ExperimentPlan,
    Table,
    estimate_event_probability,
    equivalence_sweep,
    identity_sweep,
    realize,
    singular_equivalence_sweep,
    spectral_averaging_check,
)
from .herglotz import (
    block_cauchy_schwarz_check,
    mobius_conjugation,
    random_constrained_blocks,
    random_herglotz_matrix,
)
from .lattice_model import disorder_generator
from .resolvent import green_block

log = logging.getLogger("herglotzlab")

SEED_ENV = "HERGLOTZ_SEED"
COMMANDS = ("identities", "event-prob", "equivalence", "singular", "spectral-avg",
            "herglotz-check", "model-info")

# thresholds asserted by the subcommands
IDENTITY_TOL = 1e-10
CONJUGATION_TOL = 1e-9
ROW_FRACTION = 0.99
FLAG_FRACTION = 0.01
PSD_FLOOR = -1e-12
MOBIUS_TOL = 1e-11
KERNEL_TOL = 1e-8
SLOPE_MIN = 0.9
EIG_TOL = 1e-10
STREAM_BLOCKS = 3


@dataclass
class Check:
    name: str
    passed: bool
    value: float | int | None = None
    threshold: float | int | None = None
    detail: str = ""

    def as_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            return v

        return {"name": self.name, "passed": bool(self.passed), "value": clean(self.value),
                "threshold": clean(self.threshold), "detail": self.detail}


@dataclass
class RunResult:
    tables: list[Table] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def resolve_seed(flag: int | None, config_seed: int, environ=os.environ) -> int:
    """CLI flag, then ``HERGLOTZ_SEED``, then config, then 0."""
    if flag is not None:
        return flag
    env = environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            value = int(env)
        except ValueError:
            raise ConfigError([f"{SEED_ENV}: expected integer, got {env!r}"]) from None
        if not 0 <= value < 2**64:
            raise ConfigError([f"{SEED_ENV}: must lie in [0, 2^64), got {value}"])
        return value
    return config_seed if config_seed is not None else 0


def build_plan(cfg: RunConfig, seed: int, samples: int | None = None, jobs: int | None = None) -> ExperimentPlan:
    e, nm = cfg.experiment, cfg.numerics
    return ExperimentPlan(
        model=cfg.model,
        disorder=cfg.disorder,
        samples=samples if samples is not None else e["K"],
        pairs=tuple(tuple(p) for p in e["pairs"]),
        energies=cfg.energies(),
        schedule=cfg.schedule,
        master_seed=seed,
        eps=nm["eps"],
        mass_threshold=nm["mass_threshold"],
        fixed_mu=tuple(e["mu"]) if e["mu"] is not None else None,
        rank_tol=nm["rank_tol"],
        jobs=jobs if jobs is not None else e["jobs"],
    )


def _fraction(flags) -> float:
    flags = list(flags)
    return sum(flags) / len(flags) if flags else 1.0


# -- subcommands --------------------------------------------------------------


def cmd_identities(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    t = identity_sweep(plan)
    flagged = t.column("flagged")
    worst = [max(r[5:8]) for r in t.rows if not r[8]]
    res = RunResult([t])
    res.checks.append(Check("identity_residuals", all(w < IDENTITY_TOL for w in worst),
                            max(worst, default=0.0), IDENTITY_TOL))
    res.checks.append(Check("identity_flagged_fraction", _fraction(flagged) <= FLAG_FRACTION,
                            _fraction(flagged), FLAG_FRACTION))
    return res


def cmd_event_prob(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    estimates, t, disagreements = estimate_event_probability(plan)
    res = RunResult([t])
    for (n, m), est in sorted(estimates.items()):
        res.checks.append(Check(f"event_dichotomy_{n}_{m}", est.dichotomous, est.estimate, None,
                                f"{est.successes}/{est.trials}, 95% CI [{est.ci_low:.4g}, {est.ci_high:.4g}]"))
        res.summary[f"{n},{m}"] = {"successes": est.successes, "trials": est.trials,
                                   "estimate": est.estimate, "ci": [est.ci_low, est.ci_high]}
    res.summary["det_probe_disagreements"] = disagreements
    return res


def cmd_equivalence(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    t = equivalence_sweep(plan)
    rows = [r for r in t.rows if not r[6]]
    res = RunResult([t])
    frac_res = _fraction(r[5] < CONJUGATION_TOL for r in rows)
    frac_rank = _fraction(r[3] == r[4] for r in rows)
    frac_flag = _fraction(t.column("flagged"))
    res.checks += [
        Check("conjugation_residual_rows", frac_res >= ROW_FRACTION, frac_res, ROW_FRACTION),
        Check("rank_equality_rows", frac_rank >= ROW_FRACTION, frac_rank, ROW_FRACTION),
        Check("flagged_fraction", frac_flag <= FLAG_FRACTION, frac_flag, FLAG_FRACTION),
    ]
    return res


def cmd_singular(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    t = singular_equivalence_sweep(plan)
    res = RunResult([t])
    thr = plan.mass_threshold
    both = [r[3] > thr and r[4] > thr for r in t.rows]
    ranks = [r[5] == r[6] for r in t.rows]
    tol = 20 * plan.schedule.eps_final
    rel = [abs(r[7] - r[8]) / abs(r[8]) for r in t.rows if r[8] == r[8] and r[8] != 0]
    res.checks += [
        Check("indicator", all(t.column("indicator")), sum(t.column("indicator")), len(t.rows)),
        Check("both_masses_positive", all(both), sum(both), len(t.rows)),
        Check("scaled_rank_equality", all(ranks), sum(ranks), len(t.rows)),
        Check("ratio_relative_error", all(x <= tol for x in rel), max(rel, default=0.0), tol),
    ]
    return res


def cmd_spectral_avg(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    e = cfg.experiment
    A, family = cfg.model.build()
    index = plan.resolved_pairs(family)[0][0]
    lambdas = np.linspace(e["lambda_min"], e["lambda_max"], e["lambda_points"])
    out = spectral_averaging_check(A, family, index, e["widths"], lambdas, e["center"])
    res = RunResult([out.table])
    res.checks.append(Check("averaging_slope", out.slope >= SLOPE_MIN, out.slope, SLOPE_MIN))
    return res


def cmd_herglotz_check(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    pos = Table("positivity", ("sample", "index", "E", "eps", "min_eig"))
    energies = plan.resolved_energies()
    etas = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)
    for s in range(plan.samples):
        H, family = realize(plan, s)
        i = family.indices[s % len(family.indices)]
        for E in energies:
            for eta in etas:
                pos.rows.append((s, i, E, eta, green_block(H, family, i, i, E + 1j * eta).min_imag_eigenvalue()))

    blocks = Table("block_identities", ("case", "trial", "residual"))
    rng = disorder_generator(plan.master_seed, 0, STREAM_BLOCKS)
    mob = []
    while len(mob) < 100:
        n = int(rng.integers(1, 5))
        coeffs = random_constrained_blocks(rng, n)
        try:
            _, r = mobius_conjugation(random_herglotz_matrix(rng, n), coeffs)
        except ValueError:
            continue
        mob.append(r)
        blocks.rows.append(("mobius", len(mob) - 1, r))
    cs_violations = 0
    cs_trials = 0
    kernel = []
    for k in range(10):
        n = int(rng.integers(1, 4))
        A = random_herglotz_matrix(rng, 2 * n)
        rep = block_cauchy_schwarz_check(A, 10_000, rng)
        cs_violations += rep.violations
        cs_trials += rep.trials
        blocks.rows.append(("cauchy_schwarz_excess", k, rep.max_excess))
        Ak = _with_kernel(rng, n)
        rep = block_cauchy_schwarz_check(Ak, 1, rng, rank_tol=1e-10)
        kernel.append(rep.kernel_residual)
        blocks.rows.append(("kernel_identity", k, rep.kernel_residual))

    res = RunResult([pos, blocks])
    mins = pos.column("min_eig")
    res.checks += [
        Check("herglotz_positivity", min(mins) >= PSD_FLOOR, min(mins), PSD_FLOOR),
        Check("mobius_identity", max(mob) < MOBIUS_TOL, max(mob), MOBIUS_TOL),
        Check("cauchy_schwarz_violations", cs_violations == 0, cs_violations, 0, f"{cs_trials} trials"),
        Check("kernel_identity", max(kernel) < KERNEL_TOL, max(kernel), KERNEL_TOL),
    ]
    return res


def _with_kernel(rng, n: int) -> np.ndarray:
    """Random ``2n x 2n`` matrix with ``Im A >= 0`` and a one-dimensional kernel of ``Im A22``."""
    R = random_herglotz_matrix(rng, 2 * n).real
    Y = rng.standard_normal((2 * n, 2 * n)) + 1j * rng.standard_normal((2 * n, 2 * n))
    Y[n, :] = 0.0
    U, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    V = np.eye(2 * n, dtype=complex)
    V[n:, n:] = U
    ImA = V @ (Y @ Y.conj().T) @ V.conj().T / (2 * n)
    return (R + R.T) / 2 + 1j * ImA


def cmd_model_info(cfg: RunConfig, plan: ExperimentPlan) -> RunResult:
    A, family = cfg.model.build()
    H, _ = realize(plan, 0)
    t = Table("spectrum", ("operator", "k", "eigenvalue"))
    for name, op in (("A", A), ("H", H)):
        t.rows += [(name, k, float(x)) for k, x in enumerate(op.eigenvalues)]
    res = RunResult([t])
    for name, op in (("A", A), ("H", H)):
        ref = np.linalg.eigvalsh(op.matrix)
        diff = float(np.max(np.abs(ref - op.eigenvalues)))
        res.checks.append(Check(f"eigensolve_{name}", diff < EIG_TOL, diff, EIG_TOL))
        r = op.decomposition_residual()
        res.checks.append(Check(f"decomposition_{name}", r < EIG_TOL * max(1.0, op.norm), r, EIG_TOL))
    res.checks.append(Check("projection_completeness", family.completeness_residual() < 1e-12,
                            family.completeness_residual(), 1e-12))
    res.summary = {"dimension": A.dim, "indices": len(family.indices), "rank": family.rank,
                   "norm_A": A.norm, "norm_H": H.norm}
    return res


DISPATCH = {
    "identities": cmd_identities,
    "event-prob": cmd_event_prob,
    "equivalence": cmd_equivalence,
    "singular": cmd_singular,
    "spectral-avg": cmd_spectral_avg,
    "herglotz-check": cmd_herglotz_check,
    "model-info": cmd_model_info,
}


# -- driver -------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {v}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="herglotzlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=_u64, help="master seed (overrides HERGLOTZ_SEED and config)")
    common.add_argument("--samples", type=_positive, help="number of disorder samples K")
    common.add_argument("--jobs", type=_positive, help="worker processes")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--format", choices=("csv", "json"), help="table format")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
    v = sub.add_parser("validate", help="validate a config and print it in normalized form")
    v.add_argument("--config", type=Path, required=True)
    return p


def load_config(path: Path | None) -> RunConfig:
    return validate_config(path) if path is not None else validate_mapping({})


def run(command: str, cfg: RunConfig, seed: int, out: Path, fmt: str,
        samples: int | None = None, jobs: int | None = None) -> tuple[int, dict]:
    """Execute one subcommand and write its artifacts; returns (exit status, manifest)."""
    plan = build_plan(cfg, seed, samples, jobs)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    error = None
    try:
        result = DISPATCH[command](cfg, plan)
    except Exception as exc:  # keep a manifest for post-mortem
        log.exception("%s failed", command)
        result = RunResult(checks=[Check("completed", False, detail=f"{type(exc).__name__}: {exc}")])
        error = exc
    files = [str(t.write(out, fmt).name) for t in result.tables]
    manifest = {
        "command": command,
        "status": "OK" if result.ok else "FAILED",
        "config_sha256": cfg.digest(),
        "config": cfg.normalized,
        "seed": seed,
        "samples": plan.samples,
        "jobs": plan.jobs,
        "versions": {"herglotzlab": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": time.perf_counter() - t0,
        "outputs": files,
        "checks": [c.as_dict() for c in result.checks],
        "summary": result.summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if error is not None:
        return 1, manifest
    return (0 if result.ok else 1), manifest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(json.dumps(cfg.normalized, indent=2, sort_keys=True))
            return 0
        seed = resolve_seed(args.seed, cfg.experiment["seed"])
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"error: {msg}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.output["directory"])
    fmt = args.format or cfg.output["format"]
    status, manifest = run(args.command, cfg, seed, out, fmt, args.samples, args.jobs)
    for c in manifest["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']} (threshold {c['threshold']})")
    print(f"{manifest['status']} -> {out / 'manifest.json'}")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
