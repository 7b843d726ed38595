"""Command-line entry point: ``latentrem {simulate,fit,select,evaluate,study}``.

Exit codes: 0 success, 1 usage or input error, 2 filter divergence, 3 I/O
error.  Errors go to stderr as ``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .em import em_fit
from .errors import ConfigError, DivergenceError, IngestError, LatentREMError
from .evaluate import caic, kl_out_of_fold
from .model import ModelConfig
from .simulate import SimScenario, simulate_scenario
from .study import SweepSpec, run_study

EXIT_OK, EXIT_USAGE, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = io.read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _model_config(args) -> ModelConfig:
    data = _read_config(args.config)
    if getattr(args, "filter", None):
        data["filter"] = args.filter
    if getattr(args, "static", False):
        data["static"] = True
    if isinstance(getattr(args, "d", None), int):
        data["d"] = args.d
    if args.seed is not None:
        data["seed"] = args.seed
    return ModelConfig.from_dict(data)


def _panel(args):
    intervals = io.IntervalSpec.parse(args.intervals) if args.intervals else None
    return io.load_panel(args.panel, intervals, not args.undirected, args.exposure)


def cmd_simulate(args) -> int:
    data = _read_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    scenario = SimScenario.from_dict(data)
    out = io.ensure_writable(args.out)
    sim = simulate_scenario(scenario)
    io.write_truth(sim.truth, sim.params, out)
    io.write_panel(sim.panel, out, scenario.seed, {"scenario": scenario.to_dict()})
    print(f"wrote panel n={sim.panel.n} p={sim.panel.p} to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _model_config(args)
    panel = _panel(args)
    out = io.ensure_writable(args.out)
    fit = em_fit(panel, config)
    io.serialize_fit(fit, out, panel)
    if args.groups:
        io.write_csv(out / "groups.csv", ("node", "group"), _read_groups(args.groups))
    status = "converged" if fit.converged else "stopped"
    print(f"{status} after {fit.iterations} iterations; sigma={fit.sigma_summary():.6g}; wrote {out}")
    if fit.diverged:
        _report("divergence", f"filter diverged at EM iteration {fit.divergence_iteration} "
                              f"({fit.divergence_reason}); wrote the last valid iterate")
        return EXIT_DIVERGENCE
    return EXIT_OK


def _read_groups(path):
    header, rows = io.read_csv(path)
    if [h.strip().lower() for h in header[:2]] != ["node", "group"]:
        raise IngestError(f"{path}: grouping map needs columns node,group")
    return rows


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_select(args) -> int:
    base = _model_config(args)
    panel = _panel(args)
    out = io.ensure_writable(args.out)
    ds = _int_list(args.d) if args.d else [base.d]
    filters = args.filters.split(",") if args.filters else [base.filter]
    structures = args.structures.split(",") if args.structures else [base.sigma_structure]
    candidates = []
    for d in ds:
        for f in filters:
            for s in structures:
                candidates.append(base.replace(d=d, filter=f, sigma_structure=s, static=False))
        if args.include_static:
            candidates.append(base.replace(d=d, filter="ekf", static=True))
    rows = []
    for cfg in candidates:
        label = (cfg.d, cfg.filter, "-" if cfg.static else cfg.sigma_structure, int(cfg.static))
        try:
            fit = em_fit(panel, cfg)
            c = caic(fit, panel)
            rows.append([*label, c.loglik, c.df, c.value, int(fit.diverged), ""])
        except LatentREMError as exc:
            rows.append([*label, float("nan"), float("nan"), float("nan"), 1, getattr(exc, "code", "error")])
    values = np.array([r[6] for r in rows], dtype=float)
    best = int(np.nanargmin(values)) if np.isfinite(values).any() else -1
    for i, r in enumerate(rows):
        r.append(int(i == best))
    header = ("d", "filter", "sigma_structure", "static", "loglik", "df", "caic", "diverged", "error", "selected")
    io.write_csv(out / "selection.csv", header, rows)
    for r in rows:
        mark = "*" if r[-1] else " "
        print(f"{mark} d={r[0]} filter={r[1]} sigma={r[2]} static={r[3]} caic={r[6]:.4f}")
    return EXIT_OK if best >= 0 else EXIT_DIVERGENCE


def cmd_evaluate(args) -> int:
    fit = io.read_fit(args.fit)
    out = io.ensure_writable(args.out)
    result = {}
    if args.panel:
        panel = _panel(args)
        res = io.compute_residuals(fit, panel)
        io.write_csv(out / "residuals.csv", io.RESIDUAL_HEADER,
                     zip(res.k, res.sender, res.receiver, res.y, res.mu, res.residual, res.distance, res.flagged))
        c = caic(fit, panel)
        result.update(caic=c.value, loglik=c.loglik, df=c.df)
    if args.truth:
        truth, tparams = io.read_truth(args.truth)
        manifest = io.read_manifest(args.truth)
        scenario = manifest.get("scenario", {})
        kl = kl_out_of_fold(fit.smoothed, fit.params, truth, tparams, scenario.get("family", "poisson"),
                            args.seed, bool(scenario.get("directed", False)))
        result.update(kl=kl.value, kl_se=kl.se)
    if not result:
        raise UsageError("evaluate needs --panel and/or --truth")
    io.write_json(out / "evaluation.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_study(args) -> int:
    data = _read_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SweepSpec.from_dict(data)
    out = io.ensure_writable(args.out)
    res = run_study(spec)
    (out / "results.csv").write_text(res.to_csv())
    (out / "aggregates.csv").write_text(res.aggregates_csv())
    (out / "timings.csv").write_text(res.timings_csv())
    io.write_manifest(out, "study", spec.to_dict(), spec.seed,
                      ["results.csv", "aggregates.csv", "timings.csv", "manifest.json"])
    print(res.aggregates_csv(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latentrem", description="Dynamic latent space relational event models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, panel=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if panel:
            p.add_argument("--panel", required=True, help="panel directory or events CSV")
            p.add_argument("--intervals", help="binning for events CSV: width[:start[:end]]")
            p.add_argument("--exposure", help="exposure table node,k,exposure")
            p.add_argument("--undirected", action="store_true", help="ingest events as undirected")

    p = sub.add_parser("simulate", help="simulate a panel and its true trajectory")
    common(p, panel=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a dynamic (or static) model by EM")
    common(p)
    p.add_argument("--filter", choices=("ekf", "ukf"))
    p.add_argument("--static", action="store_true")
    p.add_argument("--d", type=int)
    p.add_argument("--groups", help="optional node,group map copied next to the fit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="compare candidate models by cAIC")
    common(p)
    p.add_argument("--d", help="comma-separated latent dimensions, e.g. 1,2,3")
    p.add_argument("--filters", help="comma-separated filters, e.g. ekf,ukf")
    p.add_argument("--structures", help="comma-separated sigma structures")
    p.add_argument("--include-static", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="residuals, cAIC and out-of-fold KL for a saved fit")
    p.add_argument("--fit", required=True, help="fit directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--panel", help="panel to compute residuals and cAIC on")
    p.add_argument("--truth", help="simulate output directory with the true trajectory")
    p.add_argument("--intervals")
    p.add_argument("--exposure")
    p.add_argument("--undirected", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="run a simulation sweep")
    p.add_argument("--config", required=True, help="sweep JSON {base, grid, replicates, methods, seed, fit}")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_study)
    return parser


def _report(code: str, message: str):
    print(f"error[{code}]: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        _report("usage", str(exc))
        return EXIT_USAGE
    except DivergenceError as exc:
        _report(exc.code, str(exc))
        return EXIT_DIVERGENCE
    except (OSError, IngestError) as exc:
        if isinstance(exc, IngestError) and not isinstance(exc.__cause__, OSError):
            _report(exc.code, str(exc))
            return EXIT_USAGE
        _report("io", str(exc))
        return EXIT_IO
    except LatentREMError as exc:
        _report(exc.code, str(exc))
        return EXIT_USAGE
    except ValueError as exc:
        _report("invalid", str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
