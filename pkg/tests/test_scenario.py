import copy
import json

import pytest

from smjls.distributions import Exponential, ModelDensityLaw, PhaseModel, Weibull
from smjls.errors import ValidationError
from smjls.scenario import (BUNDLED, CheckRow, bundled_path, law_from_json, load_scenario,
                            markdown_table, parse_scenario, run_scenario)


@pytest.fixture(scope="module")
def ex1_data():
    return json.loads(bundled_path("example1").read_text())


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_parse(name):
    sc = load_scenario(name)
    assert sc.name == name and sc.spec.t_f > 0


def test_hyphenated_names_resolve():
    assert load_scenario("me-example").name == "me_example"
    with pytest.raises(ValidationError):
        bundled_path("example9")


@pytest.mark.parametrize("where", ["top", "mode", "edge", "law", "policy"])
def test_unknown_keys_rejected(ex1_data, where):
    d = copy.deepcopy(ex1_data)
    target = {"top": d, "mode": d["modes"][0], "edge": d["modes"][0]["edges"][0],
              "law": d["modes"][0]["edges"][0]["law"], "policy": d["policy"]}[where]
    target["surprise"] = 1
    with pytest.raises(ValidationError, match="invalid"):
        parse_scenario(d)


def test_semantic_errors_rejected(ex1_data):
    d = copy.deepcopy(ex1_data)
    d["initial"] = {"zz": 1.0}
    with pytest.raises(ValidationError):
        parse_scenario(d)
    d = copy.deepcopy(ex1_data)
    del d["policy"]["gains"]["b"]
    with pytest.raises(ValidationError):
        parse_scenario(d)
    d = copy.deepcopy(ex1_data)
    d["models"] = [{"mode": "a", "target": "zz", "exact": True}]
    with pytest.raises(ValidationError):
        parse_scenario(d)


def test_law_from_json_variants():
    assert law_from_json({"type": "exponential", "rate": 0.5}) == Exponential(0.5)
    assert law_from_json({"type": "weibull", "shape": 1.4, "scale": 8.99}) == Weibull(1.4, 8.99)
    cox = law_from_json({"type": "coxian", "diagonal": [-2, -1], "superdiagonal": [1]})
    assert isinstance(cox, PhaseModel) and cox.dim == 2
    me = law_from_json({"type": "rational", "num": [1, 0, 1], "den": [1, 3, 3, 1]})
    assert isinstance(me, ModelDensityLaw)
    with pytest.raises(ValidationError):
        law_from_json({"type": "lognormal"})


def test_me_example_checks_pass():
    run = run_scenario(load_scenario("me_example"))
    assert run.passed and len(run.checks) == 3


def test_example1_run_summary():
    run = run_scenario(load_scenario("example1"))
    s = run.summary()
    assert s["metrics"]["J"] == pytest.approx(23.08, rel=0.01)
    assert s["metrics"]["J_nominal"] == pytest.approx(166.55, rel=0.01)
    assert run.passed


def test_markdown_table_layout():
    rows = [CheckRow("J", 23.0812, "23.08 ± 1%", True), CheckRow("x", 1.0, ">= 2", False)]
    lines = markdown_table(rows, "demo").splitlines()
    assert lines[0] == "### demo"
    assert lines[-2].endswith("| PASS |") and lines[-1].endswith("| FAIL |")
