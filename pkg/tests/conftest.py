import numpy as np
import pytest

from smjls.control import TimeGrid
from smjls.distributions import Exponential, coxian
from smjls.markovianize import Edge, Mode, ModeDynamics, SemiMarkovSpec, assemble_chain

EX1_DIAG = (-10.0, -5.0, -0.01)
EX1_SUPER = (1.0, 1.0)


def ex1_coxian():
    return coxian(EX1_DIAG, EX1_SUPER)


def two_mode_spec(law_a, law_b=None, t_f=30.0, b_returns=True):
    """Scalar two-mode system used throughout: a unstable, b stable and fast."""
    da = ModeDynamics([[1.0]], [[0.1]], [[1.0]], [[1.0]], [[0.0]])
    db = ModeDynamics([[-10.0]], [[10.0]], [[1.0]], [[1.0]], [[0.0]])
    law_b = law_b if law_b is not None else Exponential(0.1)
    edges_b = (Edge("a", 1.0, law_b),) if b_returns else ()
    return SemiMarkovSpec((Mode("a", da, (Edge("b", 1.0, law_a),)), Mode("b", db, edges_b)),
                          [1.0, 0.0], [1.0], t_f)


@pytest.fixture(scope="session")
def ex1_spec():
    return two_mode_spec(ex1_coxian())


@pytest.fixture(scope="session")
def ex1_chain(ex1_spec):
    return assemble_chain(ex1_spec)


@pytest.fixture(scope="session")
def ex1_grid(ex1_chain):
    return TimeGrid(ex1_chain.t_f, 6000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criterion -> (passed, detail); printed after the run
ACCEPTANCE = {}


def record(criterion, passed, detail):
    prev = ACCEPTANCE.get(criterion)
    ok = bool(passed) and (prev is None or prev[0])
    ACCEPTANCE[criterion] = (ok, detail if prev is None else f"{prev[1]}; {detail}")
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {k}: {detail}")
