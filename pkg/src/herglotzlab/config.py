"""Run configuration: TOML file, flat per-section key schema, full validation.

Sections and keys (defaults in parentheses)::

    [model]       kind ("dimer_polymer"), d (len(L) or 1), L (8), N (2),
                  copies (N for strip, 2 for decoupled, else 1)
    [disorder]    kind ("uniform"), a (-1.0), b (1.0)
    [numerics]    eps0 (1e-2), ratio (0.5), max_steps (20), tol_conv (1e-8),
                  rank_tol (unset), eps (1e-3), mass_threshold (1e-10)
    [experiment]  K (200), pairs ([]), grid ({} = automatic 21 points),
                  mu (unset = uniform(-1, 1) draws), seed (0), jobs (1),
                  widths ([0.1, 0.05, 0.025, 0.0125]), center (0.3),
                  lambda_min (-1.0), lambda_max (1.0), lambda_points (4001)
    [output]      directory ("out"), format ("csv")

``grid`` is either a list of energies or a table ``{lo, hi, points}``.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .lattice_model import MODEL_KINDS, DisorderDescriptor, ModelSpec
from .resolvent import EpsilonSchedule

__all__ = ["ConfigError", "RunConfig", "validate_config", "validate_mapping", "DEFAULTS"]

DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {"kind": "dimer_polymer", "d": None, "L": 8, "N": 2, "copies": None},
    "disorder": {"kind": "uniform", "a": -1.0, "b": 1.0},
    "numerics": {"eps0": 1e-2, "ratio": 0.5, "max_steps": 20, "tol_conv": 1e-8,
                 "rank_tol": None, "eps": 1e-3, "mass_threshold": 1e-10},
    "experiment": {"K": 200, "pairs": [], "grid": {}, "mu": None, "seed": 0, "jobs": 1,
                   "widths": [0.1, 0.05, 0.025, 0.0125], "center": 0.3,
                   "lambda_min": -1.0, "lambda_max": 1.0, "lambda_points": 4001},
    "output": {"directory": "out", "format": "csv"},
}

DISORDER_KINDS = ("uniform",)
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    disorder: DisorderDescriptor
    schedule: EpsilonSchedule
    normalized: dict

    @property
    def numerics(self) -> dict:
        return self.normalized["numerics"]

    @property
    def experiment(self) -> dict:
        return self.normalized["experiment"]

    @property
    def output(self) -> dict:
        return self.normalized["output"]

    def energies(self) -> tuple[float, ...]:
        grid = self.experiment["grid"]
        if isinstance(grid, list):
            return tuple(grid)
        if not grid:
            return ()
        step = (grid["hi"] - grid["lo"]) / max(grid["points"] - 1, 1)
        return tuple(grid["lo"] + k * step for k in range(grid["points"]))

    def canonical_json(self) -> str:
        return json.dumps(self.normalized, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)) and math.isfinite(x)


class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def fail(self, path: str, msg: str) -> None:
        self.errors.append(f"{path}: {msg}")

    def integer(self, sec: dict, key: str, path: str, lo: int | None = None):
        v = sec[key]
        if not _is_int(v):
            self.fail(path, f"expected integer, got {v!r}")
            return None
        if lo is not None and v < lo:
            self.fail(path, f"must be >= {lo}, got {v}")
            return None
        return v

    def number(self, sec: dict, key: str, path: str, positive: bool = False):
        v = sec[key]
        if not _is_num(v):
            self.fail(path, f"expected finite number, got {v!r}")
            return None
        if positive and v <= 0:
            self.fail(path, f"must be positive, got {v}")
            return None
        return float(v)

    def choice(self, sec: dict, key: str, path: str, options):
        v = sec[key]
        if v not in options:
            self.fail(path, f"expected one of {', '.join(options)}, got {v!r}")
            return None
        return v


def validate_mapping(raw: Any) -> RunConfig:
    """Validate a parsed mapping; collects every violation before raising :class:`ConfigError`."""
    ck = _Checker()
    if not isinstance(raw, dict):
        raise ConfigError([f"<root>: expected a table, got {type(raw).__name__}"])
    norm: dict[str, dict[str, Any]] = {}
    for name in raw:
        if name not in DEFAULTS:
            ck.fail(name, "unknown section")
    for name, defaults in DEFAULTS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            ck.fail(name, "expected a table")
            sec = {}
        for key in sec:
            if key not in defaults:
                ck.fail(f"{name}.{key}", "unknown key")
        merged = dict(defaults)
        merged.update({k: v for k, v in sec.items() if k in defaults})
        norm[name] = merged

    # model
    m = norm["model"]
    kind = ck.choice(m, "kind", "model.kind", MODEL_KINDS)
    N = ck.integer(m, "N", "model.N", lo=1)
    L = m["L"]
    if _is_int(L):
        d = m["d"] if m["d"] is not None else 1
        if not _is_int(d) or d < 1:
            ck.fail("model.d", f"must be a positive integer, got {d!r}")
            L = None
        else:
            L = [L] * d
    if L is not None:
        if not (isinstance(L, list) and L and all(_is_int(x) and x >= 1 for x in L)):
            ck.fail("model.L", f"expected positive integer or list of positive integers, got {m['L']!r}")
            L = None
        elif m["d"] is not None and m["d"] != len(L):
            ck.fail("model.d", f"d={m['d']} disagrees with len(L)={len(L)}")
    if L is not None:
        m["L"] = L
        m["d"] = len(L)
    copies = m["copies"]
    if copies is None and kind is not None and N is not None:
        copies = {"strip": N, "decoupled": 2}.get(kind, 1)
    if copies is not None and (not _is_int(copies) or copies < 1):
        ck.fail("model.copies", f"must be a positive integer, got {copies!r}")
        copies = None
    m["copies"] = copies
    model = None
    if None not in (kind, N, L, copies):
        per_copy = math.prod(L)
        if kind == "dimer_polymer" and copies != 1:
            ck.fail("model.copies", f"dimer_polymer uses a single box, got copies={copies}")
        elif kind == "strip" and copies != N:
            ck.fail("model.copies", f"strip needs copies == N, got copies={copies}, N={N}")
        elif kind == "decoupled" and copies < 2:
            ck.fail("model.copies", f"decoupled needs copies >= 2, got {copies}")
        elif kind != "strip" and per_copy % N:
            ck.fail("model.N", f"N={N} does not divide D={per_copy}")
        else:
            model = ModelSpec(kind, tuple(L), N, copies)

    # disorder
    dsec = norm["disorder"]
    dk = ck.choice(dsec, "kind", "disorder.kind", DISORDER_KINDS)
    a = ck.number(dsec, "a", "disorder.a")
    b = ck.number(dsec, "b", "disorder.b")
    disorder = None
    if None not in (dk, a, b):
        dsec["a"], dsec["b"] = a, b
        if a >= b:
            ck.fail("disorder", f"distribution must be absolutely continuous (need a < b, got a={a}, b={b})")
        else:
            disorder = DisorderDescriptor(dk, a, b)

    # numerics
    nsec = norm["numerics"]
    vals = {}
    for key in ("eps0", "ratio", "tol_conv", "eps", "mass_threshold"):
        vals[key] = ck.number(nsec, key, f"numerics.{key}", positive=True)
    vals["max_steps"] = ck.integer(nsec, "max_steps", "numerics.max_steps", lo=5)
    if nsec["rank_tol"] is not None:
        vals["rank_tol"] = ck.number(nsec, "rank_tol", "numerics.rank_tol", positive=True)
    if vals["ratio"] is not None and vals["ratio"] >= 1:
        ck.fail("numerics.ratio", f"must lie in (0, 1), got {vals['ratio']}")
        vals["ratio"] = None
    nsec.update({k: v for k, v in vals.items() if v is not None})
    schedule = None
    if all(vals[k] is not None for k in ("eps0", "ratio", "max_steps", "tol_conv")):
        schedule = EpsilonSchedule(vals["eps0"], vals["ratio"], vals["max_steps"], vals["tol_conv"])

    # experiment
    e = norm["experiment"]
    ck.integer(e, "K", "experiment.K", lo=1)
    ck.integer(e, "jobs", "experiment.jobs", lo=1)
    seed = e["seed"]
    if not _is_int(seed) or not 0 <= seed < 2**64:
        ck.fail("experiment.seed", f"expected integer in [0, 2^64), got {seed!r}")
    pairs = e["pairs"]
    if not (isinstance(pairs, list) and all(
            isinstance(p, list) and len(p) == 2 and all(_is_int(x) for x in p) for p in pairs)):
        ck.fail("experiment.pairs", f"expected list of [n, m] integer pairs, got {pairs!r}")
    elif model is not None and pairs:
        nidx = model.box.size // model.N
        for k, (n, mm) in enumerate(pairs):
            for x in (n, mm):
                if not 0 <= x < nidx:
                    ck.fail(f"experiment.pairs[{k}]", f"index {x} outside 0..{nidx - 1}")
    grid = e["grid"]
    if isinstance(grid, list):
        if not grid or not all(_is_num(x) for x in grid):
            ck.fail("experiment.grid", "energy list must be a nonempty list of numbers")
        else:
            e["grid"] = [float(x) for x in grid]
    elif isinstance(grid, dict):
        if grid:
            extra = set(grid) - {"lo", "hi", "points"}
            for k in sorted(extra):
                ck.fail(f"experiment.grid.{k}", "unknown key")
            lo, hi, pts = grid.get("lo"), grid.get("hi"), grid.get("points", 21)
            if not (_is_num(lo) and _is_num(hi) and lo < hi):
                ck.fail("experiment.grid", f"need numbers lo < hi, got lo={lo!r}, hi={hi!r}")
            if not (_is_int(pts) and pts >= 1):
                ck.fail("experiment.grid.points", f"must be a positive integer, got {pts!r}")
            if not extra and _is_num(lo) and _is_num(hi) and lo < hi and _is_int(pts) and pts >= 1:
                e["grid"] = {"lo": float(lo), "hi": float(hi), "points": pts}
    else:
        ck.fail("experiment.grid", f"expected list or table, got {grid!r}")
    mu = e["mu"]
    if mu is not None:
        if _is_num(mu):
            e["mu"] = [float(mu), float(mu)]
        elif isinstance(mu, list) and len(mu) == 2 and all(_is_num(x) for x in mu):
            e["mu"] = [float(x) for x in mu]
        else:
            ck.fail("experiment.mu", f"expected number or [mu_n, mu_m], got {mu!r}")
    widths = e["widths"]
    if not (isinstance(widths, list) and widths and all(_is_num(w) and w >= 0 for w in widths)):
        ck.fail("experiment.widths", f"expected nonempty list of nonnegative numbers, got {widths!r}")
    elif any(y >= x for x, y in zip(widths, widths[1:])):
        ck.fail("experiment.widths", "widths must be strictly decreasing")
    else:
        e["widths"] = [float(w) for w in widths]
    for key in ("center", "lambda_min", "lambda_max"):
        if ck.number(e, key, f"experiment.{key}") is not None:
            e[key] = float(e[key])
    if _is_num(e["lambda_min"]) and _is_num(e["lambda_max"]) and e["lambda_min"] >= e["lambda_max"]:
        ck.fail("experiment.lambda_max", "must exceed lambda_min")
    ck.integer(e, "lambda_points", "experiment.lambda_points", lo=2)

    # output
    o = norm["output"]
    if not isinstance(o["directory"], str) or not o["directory"]:
        ck.fail("output.directory", f"expected nonempty string, got {o['directory']!r}")
    ck.choice(o, "format", "output.format", FORMATS)

    if ck.errors:
        raise ConfigError(ck.errors)
    return RunConfig(model, disorder, schedule, norm)


def validate_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}: no such file"])
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return validate_mapping(raw)
