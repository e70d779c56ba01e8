import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from smjls.control import TimeGrid, propagate_mu
from smjls.distributions import Exponential, Weibull, coxian, pdf_at, ccdf_at
from smjls.errors import DomainError, ValidationError
from smjls.markovianize import (ClusteredChain, Edge, Mode, ModeDynamics, SemiMarkovSpec,
                                assemble_chain, convention_preserving_transform,
                                embedded_probability, mean_matched_exponential,
                                pdf_equivalent_variant)

from conftest import ex1_coxian, two_mode_spec

SCALAR = ModeDynamics([[0.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]])


# -- racing ------------------------------------------------------------------

def test_single_successor_has_probability_one():
    assert embedded_probability({"b": Exponential(2.0)}) == {"b": 1.0}


def test_identical_racers_split_evenly():
    p = embedded_probability({"b": Exponential(1.3), "c": Exponential(1.3)})
    assert p["b"] == pytest.approx(0.5, abs=1e-9) and p["c"] == pytest.approx(0.5, abs=1e-9)


@given(st.floats(0.1, 10.0), st.floats(0.1, 10.0))
@settings(max_examples=25, deadline=None)
def test_exponential_race_closed_form(l1, l2):
    p = embedded_probability({"x": Exponential(l1), "y": Exponential(l2)})
    assert p["x"] == pytest.approx(l1 / (l1 + l2), abs=1e-7)
    assert p["x"] + p["y"] == pytest.approx(1.0, abs=1e-12)


def test_race_one_vs_three():
    assert embedded_probability({"x": Exponential(1.0), "y": Exponential(3.0)})["x"] == pytest.approx(0.25, abs=1e-9)


def test_weibull_race_against_quadrature():
    a, b = Weibull(2.0, 1.0), Weibull(1.0, 2.0)
    p = embedded_probability({"a": a, "b": b})
    q = integrate.quad(lambda t: a.pdf(t) * b.ccdf(t), 0, np.inf)[0]
    assert p["a"] == pytest.approx(q, abs=1e-8)


# -- assembly ----------------------------------------------------------------

def test_two_exponential_modes_give_two_state_generator():
    spec = two_mode_spec(Exponential(2.0), Exponential(0.5))
    ch = assemble_chain(spec)
    assert np.allclose(ch.Pi, [[-2.0, 2.0], [0.5, -0.5]])


def test_example1_chain_layout(ex1_chain):
    Pi = ex1_chain.Pi
    assert Pi.shape == (4, 4)
    assert np.allclose(Pi[:3, 3], [9.0, 4.0, 0.01])
    assert Pi[3, 0] == pytest.approx(0.1) and Pi[3, 3] == pytest.approx(-0.1)
    assert np.abs(Pi.sum(axis=1)).max() <= 1e-12
    assert list(ex1_chain.cluster_of) == [0, 0, 0, 1]
    assert ex1_chain.cluster_names == ("a", "b")
    assert np.array_equal(ex1_chain.mu0, [1, 0, 0, 0])
    assert not ex1_chain.pseudo


def race_topology():
    m3 = lambda r: coxian([-3 * r, -2 * r, -r], [r, r])
    modes = (
        Mode("a", SCALAR, (Edge("b", 1.0, Exponential(1.0)),)),
        Mode("b", SCALAR, (Edge("c", None, m3(1.0)), Edge("d", None, m3(2.0))), transition="race"),
        Mode("c", SCALAR, (Edge("a", 1.0, Exponential(0.5)),)),
        Mode("d", SCALAR, (Edge("a", 1.0, Exponential(0.7)),)),
    )
    return SemiMarkovSpec(modes, [0.0, 1.0, 0.0, 0.0], [1.0], 5.0)


def test_racing_mode_gets_one_block_per_edge():
    spec = race_topology()
    ch = assemble_chain(spec)
    b_phases = np.flatnonzero(ch.cluster_of == 1)
    assert b_phases.size == 6
    probs = spec.resolved_probabilities()["b"]
    assert probs["c"] + probs["d"] == pytest.approx(1.0)
    assert ch.mu0[b_phases[0]] == pytest.approx(probs["c"])
    assert ch.mu0[b_phases[3]] == pytest.approx(probs["d"])
    assert np.abs(ch.Pi.sum(axis=1)).max() <= 1e-9


def test_coalesced_mode_splits_exit_by_probabilities():
    law = coxian([-2.0, -1.0], [1.0])
    modes = (
        Mode("a", SCALAR, (Edge("b", 0.3), Edge("c", 0.7)), holding=law),
        Mode("b", SCALAR, (Edge("a", 1.0, Exponential(1.0)),)),
        Mode("c", SCALAR, (Edge("a", 1.0, Exponential(1.0)),)),
    )
    ch = assemble_chain(SemiMarkovSpec(modes, [1, 0, 0], [1.0], 5.0))
    assert ch.Pi.shape == (4, 4)
    assert np.allclose(ch.Pi[:2, 2], 0.3 * law.exit_vector)
    assert np.allclose(ch.Pi[:2, 3], 0.7 * law.exit_vector)


@given(st.lists(st.floats(0.1, 5.0), min_size=1, max_size=4), st.floats(0.05, 3.0))
@settings(max_examples=30, deadline=None)
def test_rows_sum_to_zero(rates, back):
    law = coxian([-r for r in rates], [0.5 * r for r in rates[:-1]])
    ch = assemble_chain(two_mode_spec(law, Exponential(back)))
    assert np.abs(ch.Pi.sum(axis=1)).max() <= 1e-9


def test_mean_matched_surrogate_keeps_means():
    nominal = mean_matched_exponential(two_mode_spec(ex1_coxian()))
    law = nominal.mode("a").edges[0].law
    assert isinstance(law, Exponential) and law.mean() == pytest.approx(2.12, rel=1e-12)


def test_chain_json_round_trip(ex1_chain):
    back = ClusteredChain.from_dict(json.loads(json.dumps(ex1_chain.to_dict())))
    assert np.array_equal(back.Pi, ex1_chain.Pi) and np.array_equal(back.mu0, ex1_chain.mu0)


def test_spec_validation():
    with pytest.raises(ValidationError):
        SemiMarkovSpec((Mode("a", SCALAR), Mode("a", SCALAR)), [1, 0], [1.0], 1.0)
    with pytest.raises(ValidationError):
        SemiMarkovSpec((Mode("a", SCALAR),), [0.5], [1.0], 1.0)
    with pytest.raises(ValidationError):
        SemiMarkovSpec((Mode("a", SCALAR),), [1.0], [1.0], 0.0)


# -- pdf-equivalent variants -------------------------------------------------

def test_identity_transform_returns_same_chain(ex1_chain):
    v = pdf_equivalent_variant(ex1_chain, "a", np.eye(3))
    assert np.array_equal(v.Pi, ex1_chain.Pi)


def test_random_transform_preserves_pdf_and_changes_block(ex1_chain):
    T = convention_preserving_transform(3, np.random.default_rng(3))
    assert np.allclose(T @ np.ones(3), 1) and np.allclose(T[0], [1, 0, 0])
    v = pdf_equivalent_variant(ex1_chain, "a", T)
    old, new = ex1_chain.blocks[0].model, v.blocks[0].model
    t = np.linspace(0, 40, 801)
    assert np.abs(pdf_at(new, t) - pdf_at(old, t)).max() <= 1e-10
    assert np.linalg.norm(new.sub_generator - old.sub_generator) > 1e-3
    assert np.abs(v.Pi.sum(axis=1)).max() <= 1e-9


def test_one_phase_block_only_admits_identity(ex1_chain):
    assert np.array_equal(convention_preserving_transform(1), np.eye(1))
    with pytest.raises(DomainError):
        pdf_equivalent_variant(ex1_chain, "b", [[2.0]])


def test_transform_breaking_convention_rejected(ex1_chain):
    with pytest.raises(DomainError):
        pdf_equivalent_variant(ex1_chain, "a", np.diag([1.0, 2.0, 1.0]))


# -- occupancy ---------------------------------------------------------------

def test_two_state_occupancy_closed_form():
    ch = assemble_chain(two_mode_spec(Exponential(1.0), Exponential(1.0), t_f=5.0))
    occ = propagate_mu(ch, TimeGrid(5.0, 500))
    t = TimeGrid(5.0, 500).t
    assert np.abs(occ.nodes[:, 0] - 0.5 * (1 + np.exp(-2 * t))).max() <= 1e-12


def _trap_conv(x, y, dt):
    n = x.size
    return dt * (np.convolve(x, y)[:n] - 0.5 * (x[0] * y + y[0] * x))


def renewal_occupancy(a, rate_b, t_end, dt):
    """P(in a at t) from the alternating-renewal equations with trapezoid convolutions."""
    n = int(round(t_end / dt)) + 1
    t = np.arange(n) * dt
    g = _trap_conv(pdf_at(a, t), rate_b * np.exp(-rate_b * t), dt)   # a then b
    m = np.zeros(n)                                                   # return density
    for k in range(1, n):
        m[k] = g[k] + dt * np.dot(g[k - 1:0:-1], m[1:k])
    sa = ccdf_at(a, t)
    return sa + _trap_conv(m, sa, dt)


def test_cluster_occupancy_matches_renewal_equation(ex1_chain):
    t_end, dt = 10.0, 1e-3
    coarse = renewal_occupancy(ex1_coxian(), 0.1, t_end, dt)
    fine = renewal_occupancy(ex1_coxian(), 0.1, t_end, dt / 2)[::2]
    oracle = (4 * fine - coarse) / 3
    grid = TimeGrid(t_end, coarse.size - 1)
    occ = propagate_mu(ex1_chain.with_horizon(t_end), grid).cluster_sums(ex1_chain)
    assert np.abs(occ[:, 0] - oracle).max() <= 1e-5
