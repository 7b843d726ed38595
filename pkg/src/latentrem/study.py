"""Simulation-study sweeps over scenario grids."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .em import em_fit, sigma_summary
from .errors import ConfigError, DivergenceError, LatentREMError
from .evaluate import caic, kl_out_of_fold
from .model import ModelConfig
from .simulate import SimScenario, simulate_scenario

log = logging.getLogger(__name__)

METHODS = ("ekf", "ukf", "static")

RESULT_COLUMNS = (
    "cell", "replicate", "method", "kl", "kl_se", "diverged", "divergence_iteration",
    "iterations", "converged", "sigma_summary", "caic", "error",
)
TIMING_COLUMNS = ("cell", "replicate", "method", "seconds", "iterations", "seconds_per_iteration")


@dataclass
class SweepSpec:
    """Cartesian grid over scenario fields.

    ``base`` holds :class:`SimScenario` fields, ``grid`` maps field names to
    lists of values and ``fit`` holds :class:`ModelConfig` overrides shared
    by all methods.  ``fixed_iterations`` runs every fit for exactly that
    many EM iterations, which is what the timing sweeps use.
    """

    base: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    replicates: int = 1
    methods: tuple = METHODS
    seed: int = 0
    fit: dict = field(default_factory=dict)
    fixed_iterations: int | None = None

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        for key in ("replicates", "seed"):
            if key in self.grid:
                raise ConfigError(f"{key!r} cannot be swept")
        SimScenario.from_dict(dict(self.base))
        ModelConfig.from_dict(dict(self.fit))

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        known = {"base", "grid", "replicates", "methods", "seed", "fit", "fixed_iterations"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "grid": self.grid,
            "replicates": self.replicates,
            "methods": list(self.methods),
            "seed": self.seed,
            "fit": self.fit,
            "fixed_iterations": self.fixed_iterations,
        }

    def cells(self) -> list[dict]:
        keys = sorted(self.grid)
        return [dict(zip(keys, values)) for values in itertools.product(*(self.grid[k] for k in keys))]


def method_config(method: str, scenario: SimScenario, fit: dict, fixed_iterations=None) -> ModelConfig:
    cfg = ModelConfig.from_dict({"d": scenario.d, **fit})
    if method == "static":
        cfg = cfg.replace(filter="ekf", static=True)
    else:
        cfg = cfg.replace(filter=method, static=False)
    if fixed_iterations is not None:
        # tol cannot be 0; a negative change test never fires below this
        cfg = cfg.replace(max_iter=int(fixed_iterations), tol=1e-300)
    return cfg


@dataclass
class StudyResult:
    spec: SweepSpec
    rows: list
    timings: list

    def aggregates(self) -> list[dict]:
        out = []
        keys = sorted({(r["cell"], r["method"]) for r in self.rows})
        for cell, method in keys:
            sel = [r for r in self.rows if r["cell"] == cell and r["method"] == method]
            kls = np.array([r["kl"] for r in sel], dtype=float)
            ok = np.isfinite(kls)
            out.append({
                "cell": cell,
                "method": method,
                "replicates": len(sel),
                "median_kl": float(np.median(kls[ok])) if ok.any() else float("nan"),
                "divergence_frequency": float(np.mean([bool(r["diverged"]) for r in sel])),
                "failures": sum(1 for r in sel if r["error"]),
            })
        return out

    def to_csv(self) -> str:
        return _csv(self.rows, RESULT_COLUMNS + tuple(sorted(self.spec.grid)))

    def timings_csv(self) -> str:
        return _csv(self.timings, TIMING_COLUMNS)

    def aggregates_csv(self) -> str:
        return _csv(self.aggregates(), ("cell", "method", "replicates", "median_kl", "divergence_frequency",
                                        "failures"))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _fit_row(method, cfg, data, kl_seed):
    row = {"method": method, "kl": float("nan"), "kl_se": float("nan"), "diverged": False,
           "divergence_iteration": None, "iterations": 0, "converged": False,
           "sigma_summary": float("nan"), "caic": float("nan"), "error": ""}
    sc = data.scenario
    start = time.perf_counter()
    try:
        fit = em_fit(data.panel, cfg)
    except DivergenceError as exc:
        row.update(diverged=True, divergence_iteration=1, error=f"divergence:{exc.reason}")
        return row, time.perf_counter() - start
    except (LatentREMError, np.linalg.LinAlgError, FloatingPointError) as exc:
        row["error"] = f"{type(exc).__name__}:{exc}".replace("\n", " ")
        return row, time.perf_counter() - start
    elapsed = time.perf_counter() - start
    kl = kl_out_of_fold(fit.smoothed, fit.params, data.truth, data.params, sc.family, kl_seed, sc.directed)
    row.update(kl=kl.value, kl_se=kl.se, diverged=fit.diverged, divergence_iteration=fit.divergence_iteration,
               iterations=fit.iterations, converged=fit.converged, sigma_summary=sigma_summary(fit.params.sigma))
    try:
        row["caic"] = caic(fit, data.panel).value
    except LatentREMError:
        pass
    return row, elapsed


def run_replicate(spec: SweepSpec, cell_index: int, cell: dict, replicate: int):
    """All methods on one simulated panel; the KL panel is shared across methods."""
    scenario = SimScenario.from_dict({**spec.base, **cell})
    ss = np.random.SeedSequence(spec.seed, spawn_key=(cell_index, replicate))
    data_seed, kl_seed = ss.spawn(2)
    data = simulate_scenario(scenario, np.random.default_rng(data_seed))
    rows, timings = [], []
    for method in spec.methods:
        cfg = method_config(method, scenario, spec.fit, spec.fixed_iterations)
        row, seconds = _fit_row(method, cfg, data, np.random.default_rng(kl_seed))
        row.update(cell=cell_index, replicate=replicate, **cell)
        rows.append(row)
        its = row["iterations"]
        timings.append({"cell": cell_index, "replicate": replicate, "method": method, "seconds": seconds,
                        "iterations": its, "seconds_per_iteration": seconds / its if its else float("nan")})
        log.info("cell %d rep %d %s: kl=%.4g diverged=%s", cell_index, replicate, method, row["kl"],
                 row["diverged"])
    return rows, timings


def run_study(spec: SweepSpec | dict) -> StudyResult:
    """Run every cell and replicate; per-fit failures become rows, not exceptions."""
    if isinstance(spec, dict):
        spec = SweepSpec.from_dict(spec)
    rows, timings = [], []
    for ci, cell in enumerate(spec.cells()):
        for rep in range(spec.replicates):
            try:
                r, t = run_replicate(spec, ci, cell, rep)
            except (LatentREMError, ValueError) as exc:
                r = [{"cell": ci, "replicate": rep, "method": m, "kl": float("nan"), "kl_se": float("nan"),
                      "diverged": False, "error": f"{type(exc).__name__}:{exc}", **cell} for m in spec.methods]
                t = []
            rows.extend(r)
            timings.extend(t)
    rows.sort(key=lambda r: (r["cell"], r["replicate"], spec.methods.index(r["method"])))
    return StudyResult(spec, rows, timings)
