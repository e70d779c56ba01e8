"""Command-line front end: ``smjls {fit,solve,simulate,reproduce}``.

Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 a check or
acceptance comparison failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .distributions import AnalyticLaw
from .errors import NumericError, UnsupportedOperation, ValidationError
from .fitting import FitOptions, fit_pipeline
from .scenario import (BUNDLED, build_models, load_scenario, markdown_table,
                       run_scenario)
from .simulate import empirical_cost

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


def _manifest(args, **extra) -> dict:
    keys = ("command", "scenario", "grid", "paths", "seed", "format")
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    out["version"] = __version__
    out.update(extra)
    return out


def _emit(args, name: str, text: str):
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_fit(args) -> int:
    if args.law:
        law = AnalyticLaw.from_dict(json.loads(args.law))
        if args.order is None:
            raise ValidationError("--law needs --order")
        opts = FitOptions.from_dict(json.loads(args.options)) if args.options else FitOptions()
        res = fit_pipeline(law, args.order, opts)
        results = {"law": res}
    else:
        if not args.scenario:
            raise ValidationError("fit needs --scenario or --law")
        sc = load_scenario(args.scenario)
        _, fits = build_models(sc)
        if args.mode:
            fits = {k: v for k, v in fits.items() if k[0] == args.mode
                    and (args.target is None or k[1] == args.target)}
        if not fits:
            raise ValidationError("no fit directives match the selection")
        results = {f"{k[0]}->{k[1]}": v for k, v in fits.items()}
    doc = {name: {"model": r.model.to_dict(), "report": r.report.to_dict()} for name, r in results.items()}
    doc["manifest"] = _manifest(args)
    _emit(args, "fit.json", _dump(doc))
    return EXIT_OK


def cmd_solve(args) -> int:
    sc = load_scenario(args.scenario)
    run = run_scenario(sc, args.grid)
    summary = run.summary()
    summary["manifest"] = _manifest(args)
    if args.out:
        _emit(args, "cost.json", _dump(summary))
        _emit(args, "gains.csv", run.gains.to_csv(list(run.chain.cluster_names)))
    elif args.format == "csv":
        _emit(args, "gains.csv", run.gains.to_csv(list(run.chain.cluster_names)))
    else:
        _emit(args, "cost.json", _dump(summary))
    return EXIT_OK if run.passed else EXIT_CHECK


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    run = run_scenario(sc, args.grid)
    sim = sc.data.get("simulation", {})
    n = args.paths or sim.get("paths", 100000)
    seed = args.seed if args.seed is not None else sim.get("seed", 0)
    rep = empirical_cost(sc.spec, run.gains, n, seed, sim.get("checkpoints", ()), sim.get("cells"),
                         keep_paths=args.format == "csv")
    ok = rep.agrees_with(run.cost.J)
    doc = rep.to_dict()
    doc.update({"J_analytic": run.cost.J, "within_3_stderr": bool(ok),
                "manifest": _manifest(args, paths=n, seed=seed)})
    if args.format == "csv":
        _emit(args, "paths.csv", rep.path_costs_csv())
        if args.out:
            _emit(args, "simulate.json", _dump(doc))
    else:
        _emit(args, "simulate.json", _dump(doc))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_reproduce(args) -> int:
    ids = list(BUNDLED) if args.example == "all" else [args.example.replace("-", "_")]
    blocks, ok = [], True
    for name in ids:
        sc = load_scenario(name)
        run = run_scenario(sc, args.grid)
        blocks.append(markdown_table(run.checks, f"{name} ({run.seconds:.1f} s, grid N={run.grid.N})"))
        ok &= run.passed
    _emit(args, "reproduce.md", "\n\n".join(blocks) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smjls", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario_required=True):
        sp.add_argument("--scenario", required=scenario_required,
                        help=f"scenario file or bundled name ({', '.join(BUNDLED)})")
        sp.add_argument("--grid", type=int, help="time-grid intervals N")
        sp.add_argument("--out", help="directory for artifacts (default: stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    f = sub.add_parser("fit", help="fit holding-time laws")
    common(f, scenario_required=False)
    f.add_argument("--mode")
    f.add_argument("--target")
    f.add_argument("--law", help='law as JSON, e.g. {"type": "weibull", "shape": 4, "scale": 1}')
    f.add_argument("--order", type=int)
    f.add_argument("--options", help="fit options as JSON")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("solve", help="gains and cost for a scenario")
    common(s)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="Monte Carlo cost on the semi-Markov law")
    common(m)
    m.add_argument("--paths", type=int)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reproduce", help="run bundled scenarios and compare with reference values")
    r.add_argument("example", choices=[b.replace("_", "-") for b in BUNDLED] + list(BUNDLED) + ["all"])
    r.add_argument("--grid", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, UnsupportedOperation, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
