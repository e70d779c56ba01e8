"""Scenario files: a semi-Markov system, model directives, a policy and checks.

A scenario is a JSON document validated against :data:`SCHEMA` (unknown
keys are rejected at every level).  :func:`run_scenario` builds the chain,
fits whatever needs fitting, computes the requested gains and costs, and
evaluates the listed checks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from .control import (CostReport, GainSchedule, TimeGrid, cost_only, default_grid,
                      evaluate_cost, mjlspom_gains_iterative, optimal_gains)
from .distributions import (AnalyticLaw, ModelDensityLaw, PhaseModel, coxian, pdf_at,
                            validate)
from .errors import ValidationError
from .fitting import (FitOptions, FitResult, RationalModel, fit_pipeline,
                      partial_fraction_impulse, to_me_realization)
from .markovianize import (ClusteredChain, Edge, Mode, ModeDynamics, SemiMarkovSpec,
                           assemble_chain, edge_keys, exact_model,
                           mean_matched_exponential)

BUNDLED = ("example1", "example2", "me_example", "weibull_fit", "shipengine")

_matrix = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_numbers = {"type": "array", "minItems": 1, "items": {"type": "number"}}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "definitions": {
        "law": {
            "type": "object",
            "required": ["type"],
            "oneOf": [
                {"properties": {"type": {"const": "exponential"}, "rate": {"type": "number"}},
                 "required": ["rate"], "additionalProperties": False},
                {"properties": {"type": {"const": "weibull"}, "shape": {"type": "number"},
                                "scale": {"type": "number"}},
                 "required": ["shape", "scale"], "additionalProperties": False},
                {"properties": {"type": {"const": "coxian"}, "diagonal": _numbers,
                                "superdiagonal": {"type": "array", "items": {"type": "number"}}},
                 "required": ["diagonal", "superdiagonal"], "additionalProperties": False},
                {"properties": {"type": {"enum": ["phase", "density"]}, "model": {"$ref": "#/definitions/model"}},
                 "required": ["model"], "additionalProperties": False},
                {"properties": {"type": {"const": "rational"}, "num": _numbers, "den": _numbers},
                 "required": ["num", "den"], "additionalProperties": False},
            ],
        },
        "model": {
            "type": "object",
            "properties": {"kind": {"enum": ["ph", "me"]}, "pi": _numbers, "dim": {"type": "integer", "minimum": 1}},
            "required": ["kind", "pi", "dim"], "additionalProperties": False,
        },
        "edge": {
            "type": "object",
            "properties": {"target": {"type": "string"}, "probability": {"type": "number"},
                           "law": {"$ref": "#/definitions/law"}},
            "required": ["target"], "additionalProperties": False,
        },
        "mode": {
            "type": "object",
            "properties": {
                "name": {"type": "string"}, "A": _matrix, "B": _matrix, "Q": _matrix,
                "R": _matrix, "S": _matrix, "transition": {"enum": ["given", "race"]},
                "holding": {"$ref": "#/definitions/law"},
                "edges": {"type": "array", "items": {"$ref": "#/definitions/edge"}},
                "note": {"type": "string"},
            },
            "required": ["name", "A", "B", "Q", "R", "S"], "additionalProperties": False,
        },
        "directive": {
            "type": "object",
            "properties": {
                "mode": {"type": "string"},
                "target": {"type": ["string", "null"]},
                "exact": {"type": "boolean"},
                "model": {"$ref": "#/definitions/model"},
                "fit": {"type": "object",
                        "properties": {"order": {"type": "integer", "minimum": 1},
                                       "options": {"type": "object"}},
                        "required": ["order"], "additionalProperties": False},
            },
            "required": ["mode"], "additionalProperties": False,
        },
        "check": {
            "type": "object",
            "properties": {
                "metric": {"type": "string"}, "label": {"type": "string"},
                "value": {"type": "number"}, "rel": {"type": "number"}, "abs": {"type": "number"},
                "min": {"type": "number"}, "strict": {"type": "boolean"},
                "mode": {"type": "string"}, "target": {"type": ["string", "null"]},
                "t": {"type": "number"}, "t_max": {"type": "number"}, "source": {"type": "string"},
            },
            "required": ["metric"], "additionalProperties": False,
        },
    },
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "provenance": {"type": "array", "items": {"type": "string"}},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "x0": _numbers,
        "initial": {"type": "object", "additionalProperties": {"type": "number"}},
        "modes": {"type": "array", "minItems": 1, "items": {"$ref": "#/definitions/mode"}},
        "models": {"type": "array", "items": {"$ref": "#/definitions/directive"}},
        "policy": {
            "type": "object",
            "properties": {"type": {"enum": ["fixed", "optimal", "iterative"]},
                           "gains": {"type": "object", "additionalProperties": _matrix},
                           "max_iters": {"type": "integer", "minimum": 1},
                           "tol": {"type": "number"}},
            "required": ["type"], "additionalProperties": False,
        },
        "compare_nominal": {"type": "boolean"},
        "solver": {"type": "object",
                   "properties": {"grid": {"type": ["integer", "null"], "minimum": 100}},
                   "additionalProperties": False},
        "simulation": {"type": "object",
                       "properties": {"paths": {"type": "integer", "minimum": 2},
                                      "seed": {"type": "integer", "minimum": 0},
                                      "checkpoints": {"type": "array", "items": {"type": "number"}},
                                      "cells": {"type": ["integer", "null"], "minimum": 1}},
                       "additionalProperties": False},
        "checks": {"type": "array", "items": {"$ref": "#/definitions/check"}},
    },
    "required": ["name", "horizon", "x0", "initial", "modes", "policy"],
    "additionalProperties": False,
}


# ------------------------------------------------------------- parsing ----

def law_from_json(d: dict):
    kind = d["type"]
    if kind in ("exponential", "weibull"):
        return AnalyticLaw.from_dict(d)
    if kind == "coxian":
        return coxian(d["diagonal"], d["superdiagonal"])
    if kind in ("phase", "density"):
        model = PhaseModel.from_dict(d["model"])
        return model if (model.is_ph and kind == "phase") else ModelDensityLaw(model)
    if kind == "rational":
        return ModelDensityLaw(to_me_realization(RationalModel.from_polys(d["num"], d["den"])))
    raise ValidationError(f"unknown law type {kind!r}")


@dataclass
class Scenario:
    data: dict
    spec: SemiMarkovSpec
    source: str = ""

    @property
    def name(self) -> str:
        return self.data["name"]

    def law_json(self, mode: str, target: Optional[str]) -> dict:
        m = next(x for x in self.data["modes"] if x["name"] == mode)
        if target is None or "holding" in m:
            if "holding" not in m:
                raise ValidationError(f"mode {mode} has no shared holding law")
            return m["holding"]
        e = next((e for e in m.get("edges", []) if e["target"] == target), None)
        if e is None or "law" not in e:
            raise ValidationError(f"no law on edge {mode}->{target}")
        return e["law"]


def parse_scenario(data: dict, source: str = "") -> Scenario:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ValidationError(f"scenario invalid at '{path}': {exc.message}") from None
    modes = []
    for m in data["modes"]:
        dyn = ModeDynamics(m["A"], m["B"], m["Q"], m["R"], m["S"])
        edges = tuple(Edge(e["target"], e.get("probability"),
                           law_from_json(e["law"]) if "law" in e else None)
                      for e in m.get("edges", []))
        holding = law_from_json(m["holding"]) if "holding" in m else None
        modes.append(Mode(m["name"], dyn, edges, m.get("transition", "given"), holding))
    names = [m.name for m in modes]
    unknown = set(data["initial"]) - set(names)
    if unknown:
        raise ValidationError(f"initial distribution names unknown modes {sorted(unknown)}")
    mu0 = [float(data["initial"].get(n, 0.0)) for n in names]
    spec = SemiMarkovSpec(tuple(modes), mu0, data["x0"], data["horizon"])
    pol = data["policy"]
    if pol["type"] == "fixed":
        missing = set(names) - set(pol.get("gains", {}))
        if missing:
            raise ValidationError(f"fixed policy lacks gains for {sorted(missing)}")
    keys = set(edge_keys(spec))
    for d in data.get("models", []):
        key = (d["mode"], d.get("target"))
        if key not in keys:
            raise ValidationError(f"model directive for unknown edge {key}")
        if sum(k in d for k in ("exact", "model", "fit")) != 1:
            raise ValidationError(f"directive {key} needs exactly one of exact/model/fit")
    return Scenario(data, spec, source)


def bundled_path(name: str) -> Path:
    name = name.replace("-", "_")
    if name not in BUNDLED:
        raise ValidationError(f"unknown bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
    return Path(str(resources.files("smjls") / "scenarios" / f"{name}.json"))


def load_scenario(path_or_name) -> Scenario:
    p = Path(path_or_name)
    if not p.exists():
        p = bundled_path(str(path_or_name))
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: not valid JSON ({exc})") from None
    return parse_scenario(data, str(p))


# ------------------------------------------------------------- running ----

_FIT_CACHE: Dict[str, FitResult] = {}


def _fit_cached(law_json: dict, order: int, options: dict) -> FitResult:
    key = json.dumps([law_json, order, options], sort_keys=True)
    if key not in _FIT_CACHE:
        target = law_from_json(law_json)
        if not isinstance(target, AnalyticLaw):
            raise ValidationError("fit targets must be analytic laws or densities")
        _FIT_CACHE[key] = fit_pipeline(target, order, FitOptions.from_dict(options))
    return _FIT_CACHE[key]


def build_models(sc: Scenario):
    """PhaseModel per edge key plus the fit results that produced them."""
    directives = {(d["mode"], d.get("target")): d for d in sc.data.get("models", [])}
    models, fits = {}, {}
    for key in edge_keys(sc.spec):
        d = directives.get(key, {"exact": True})
        if "model" in d:
            models[key] = PhaseModel.from_dict(d["model"])
        elif "fit" in d:
            res = _fit_cached(sc.law_json(*key), d["fit"]["order"], d["fit"].get("options", {}))
            models[key] = res.model
            fits[key] = res
        else:
            mode = sc.spec.mode(key[0])
            law = mode.holding if key[1] is None else next(e.law for e in mode.edges if e.target == key[1])
            models[key] = exact_model(law)
    return models, fits


@dataclass
class CheckRow:
    label: str
    value: float
    expected: str
    passed: bool
    source: str = ""


@dataclass
class ScenarioRun:
    scenario: Scenario
    chain: ClusteredChain
    grid: TimeGrid
    gains: GainSchedule
    cost: CostReport
    fits: dict
    metrics: Dict[str, float] = field(default_factory=dict)
    nominal_gains: Optional[GainSchedule] = None
    checks: List[CheckRow] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> dict:
        return {
            "scenario": self.scenario.name,
            "grid": self.grid.N,
            "policy": self.scenario.data["policy"]["type"],
            "metrics": self.metrics,
            "cost": self.cost.to_dict(),
            "fits": {f"{k[0]}->{k[1]}": v.report.to_dict() for k, v in self.fits.items()},
            "checks": [c.__dict__ for c in self.checks],
        }


def _policy_gains(sc: Scenario, chain: ClusteredChain, grid: TimeGrid) -> GainSchedule:
    pol = sc.data["policy"]
    if pol["type"] == "fixed":
        return GainSchedule.constant(chain, grid, pol["gains"], "fixed")
    if pol["type"] == "optimal":
        return optimal_gains(chain, grid)[0]
    init = optimal_gains(chain, grid)[0] if chain.homogeneous_clusters() else None
    res = mjlspom_gains_iterative(chain, grid, init, max_iters=pol.get("max_iters", 50),
                                  tol=pol.get("tol", 1e-6))
    return res.gains


def _metric(run: ScenarioRun, chk: dict) -> float:
    name = chk["metric"]
    if name in run.metrics:
        return run.metrics[name]
    key = (chk.get("mode"), chk.get("target"))
    if name in ("fit_percent", "cdf_fit_percent", "min_pdf", "bounds_hold"):
        if key not in run.fits:
            raise ValidationError(f"check {name} refers to an edge that was not fitted: {key}")
        rep = run.fits[key].report
        return float(getattr(rep, name))
    blocks = [b for b in run.chain.blocks if b.mode == key[0] and (b.target == key[1])]
    if not blocks:
        raise ValidationError(f"check {name}: no block for edge {key}")
    model = blocks[0].model
    if name == "pdf_value":
        return float(pdf_at(model, chk["t"]))
    if name == "realization_error":
        law = run.scenario.law_json(*key)
        if law["type"] != "rational":
            raise ValidationError("realization_error needs a rational law")
        rm = RationalModel.from_polys(law["num"], law["den"])
        t = np.linspace(0.0, chk.get("t_max", 20.0), 20001)
        return float(np.abs(pdf_at(model, t) - partial_fraction_impulse(rm, t)).max())
    if name == "ph_representable":
        return float(validate(model).ph_representable)
    raise ValidationError(f"unknown metric {name!r}")


def _judge(run: ScenarioRun, chk: dict) -> CheckRow:
    val = _metric(run, chk)
    label = chk.get("label", chk["metric"])
    if "min" in chk:
        lo = chk["min"]
        ok = val > lo if chk.get("strict") else val >= lo
        expected = f"{'>' if chk.get('strict') else '>='} {lo:g}"
    else:
        ref = chk["value"]
        tol = chk["rel"] * abs(ref) if "rel" in chk else chk.get("abs", 0.0)
        ok = abs(val - ref) <= tol
        expected = f"{ref:g} ± {100 * chk['rel']:g}%" if "rel" in chk else f"{ref:g} ± {tol:g}"
    return CheckRow(label, val, expected, bool(ok), chk.get("source", ""))


def run_scenario(sc: Scenario, grid_N: Optional[int] = None) -> ScenarioRun:
    t0 = time.perf_counter()
    models, fits = build_models(sc)
    chain = assemble_chain(sc.spec, models)
    N = grid_N or sc.data.get("solver", {}).get("grid")
    grid = TimeGrid(chain.t_f, int(N)) if N else default_grid(chain)
    gains = _policy_gains(sc, chain, grid)
    cost = evaluate_cost(chain, gains)
    metrics = {"J": cost.J, "cost_form_gap": cost.max_relative_gap}
    run = ScenarioRun(sc, chain, grid, gains, cost, fits, metrics)
    if sc.data.get("compare_nominal"):
        nominal = assemble_chain(mean_matched_exponential(sc.spec))
        if sc.data["policy"]["type"] == "fixed":
            metrics["J_nominal"] = cost_only(nominal, GainSchedule.constant(
                nominal, grid, sc.data["policy"]["gains"], "fixed"))
        else:
            g_nom, _ = optimal_gains(nominal, grid)
            run.nominal_gains = g_nom
            metrics["J_nominal"] = cost_only(nominal, g_nom)
            metrics["J_cross"] = cost_only(chain, g_nom)
            metrics["cost_ratio"] = metrics["J_cross"] / metrics["J"]
    run.checks = [_judge(run, c) for c in sc.data.get("checks", [])]
    run.seconds = time.perf_counter() - t0
    return run


def markdown_table(rows: List[CheckRow], title: str = "") -> str:
    out = [f"### {title}", ""] if title else []
    out += ["| check | value | expected | result |", "|---|---|---|---|"]
    for r in rows:
        out.append(f"| {r.label} | {r.value:.6g} | {r.expected} | {'PASS' if r.passed else 'FAIL'} |")
    return "\n".join(out)
