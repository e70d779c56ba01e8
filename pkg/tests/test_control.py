import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from smjls.control import (GainSchedule, TimeGrid, cost_only, costate_convolution_oracle,
                           evaluate_cost, mjlspom_gains_iterative, optimal_gains, propagate_mu,
                           solve_costate, solve_covariance, stationarity_residual)
from smjls.distributions import Exponential
from smjls.errors import ValidationError
from smjls.fitting import RationalModel, to_me_realization
from smjls.markovianize import (Edge, Mode, ModeDynamics, SemiMarkovSpec, assemble_chain,
                                convention_preserving_transform, mean_matched_exponential,
                                pdf_equivalent_variant)

from conftest import ex1_coxian, two_mode_spec

FIXED = [[[-12.0]], [[-6.0]]]


def single_mode_chain(A, B, Q, R, S, x0, t_f):
    dyn = ModeDynamics(A, B, Q, R, S)
    return assemble_chain(SemiMarkovSpec((Mode("only", dyn),), [1.0], x0, t_f))


def absorbing_ex1_chain(t_f=10.0):
    return assemble_chain(two_mode_spec(ex1_coxian(), t_f=t_f, b_returns=False))


# -- co-state and covariance -------------------------------------------------

def test_terminal_costate_equals_terminal_weight(ex1_chain, ex1_grid):
    S = np.array([[[2.0]], [[2.0]], [[2.0]], [[0.5]]])
    ch = ex1_chain.with_dynamics(S=S)
    lam = solve_costate(ch, GainSchedule.constant(ch, ex1_grid, FIXED), ex1_grid)
    assert np.array_equal(lam.values[-1], S)


def test_lyapunov_limit():
    ch = single_mode_chain([[-1.0]], [[0.0]], [[1.0]], [[1.0]], [[0.0]], [1.0], 20.0)
    grid = TimeGrid(20.0, 2000)
    lam = solve_costate(ch, GainSchedule.zeros(ch, grid), grid)
    assert lam.values[0, 0, 0, 0] == pytest.approx(0.5 * (1 - np.exp(-40.0)), rel=1e-9)


@given(st.floats(-2.0, 1.0), st.floats(-2.0, 2.0))
@settings(max_examples=15, deadline=None)
def test_scalar_covariance_closed_form(a, x0):
    ch = single_mode_chain([[a]], [[0.0]], [[1.0]], [[1.0]], [[0.0]], [x0], 3.0)
    grid = TimeGrid(3.0, 600)
    X = solve_covariance(ch, GainSchedule.zeros(ch, grid), grid)
    assert X.values[0, 0, 0, 0] == x0 * x0
    expect = x0 * x0 * np.exp(2 * a * grid.t)
    assert np.abs(X.values[:, 0, 0, 0] - expect).max() <= 1e-8 * max(1.0, expect.max())


def test_initial_covariance(ex1_chain, ex1_grid):
    X = solve_covariance(ex1_chain, GainSchedule.constant(ex1_chain, ex1_grid, FIXED), ex1_grid)
    assert np.array_equal(X.values[0, :, 0, 0], ex1_chain.mu0)


def test_zero_weights_give_zero_cost(ex1_chain, ex1_grid):
    ch = ex1_chain.with_dynamics(Q=np.zeros_like(ex1_chain.Q))
    rep = evaluate_cost(ch, GainSchedule.zeros(ch, ex1_grid))
    assert rep.J == 0.0 and rep.J_trace == 0.0 and rep.J_integral == 0.0


def test_psd_structure_on_ph_chain(ex1_chain, ex1_grid):
    G = GainSchedule.constant(ex1_chain, ex1_grid, FIXED)
    lam = solve_costate(ex1_chain, G, ex1_grid)
    X = solve_covariance(ex1_chain, G, ex1_grid)
    assert lam.values.min() >= -1e-8 and X.values.min() >= -1e-8


def test_pseudo_chain_weighted_costate_is_psd():
    me = to_me_realization(RationalModel.from_polys([1, 0, 1], [1, 3, 3, 1]))
    dyn_a = ModeDynamics([[0.5]], [[1.0]], [[1.0]], [[1.0]], [[0.0]])
    dyn_b = ModeDynamics([[-1.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]])
    spec = SemiMarkovSpec((Mode("a", dyn_a, (Edge("b", 1.0, me),)),
                           Mode("b", dyn_b, (Edge("a", 1.0, Exponential(0.5)),))),
                          [1.0, 0.0], [1.0], 10.0)
    ch = assemble_chain(spec)
    assert ch.pseudo
    grid = TimeGrid(10.0, 3000)
    gains, lam = optimal_gains(ch, grid)
    mu = propagate_mu(ch, grid).nodes
    for k in range(ch.n_clusters):
        idx = ch.members(k)
        weighted = np.einsum("ji,jiab->jab", mu[:, idx], lam.values[:, idx])
        assert weighted.min() >= -1e-6


# -- costs -------------------------------------------------------------------

def test_example1_costs(ex1_spec, ex1_chain, ex1_grid):
    rep = evaluate_cost(ex1_chain, GainSchedule.constant(ex1_chain, ex1_grid, FIXED))
    assert rep.J == pytest.approx(23.08, rel=0.01)
    assert rep.max_relative_gap <= 1e-3
    nominal = assemble_chain(mean_matched_exponential(ex1_spec))
    assert cost_only(nominal, GainSchedule.constant(nominal, ex1_grid, FIXED)) == pytest.approx(166.55, rel=0.01)


def test_example1_grid_convergence(ex1_chain):
    coarse, fine = TimeGrid(30.0, 3000), TimeGrid(30.0, 6000)
    J1 = cost_only(ex1_chain, GainSchedule.constant(ex1_chain, coarse, FIXED))
    J2 = cost_only(ex1_chain, GainSchedule.constant(ex1_chain, fine, FIXED))
    assert abs(J1 - J2) / J2 < 5e-4


def test_example2_costs(ex1_spec, ex1_chain, ex1_grid):
    gains, lam = optimal_gains(ex1_chain, ex1_grid)
    rep = evaluate_cost(ex1_chain, gains)
    assert rep.J == pytest.approx(10.60, rel=0.02)
    # sweep co-state uses stage gains, evaluate_cost interpolates node gains
    assert rep.J == pytest.approx(float(ex1_chain.mu0 @ lam.values[0, :, 0, 0]), rel=1e-5)
    nominal = assemble_chain(mean_matched_exponential(ex1_spec))
    g_nom, _ = optimal_gains(nominal, ex1_grid)
    assert cost_only(ex1_chain, g_nom) == pytest.approx(28.32, rel=0.02)


def test_grid_mismatch_rejected(ex1_chain):
    G = GainSchedule.constant(ex1_chain, TimeGrid(30.0, 3000), FIXED)
    with pytest.raises(ValidationError):
        evaluate_cost(ex1_chain, G, TimeGrid(30.0, 6000))


def test_closed_form_needs_homogeneous_clusters(ex1_chain):
    A = ex1_chain.A.copy()
    A[1] = [[-0.5]]
    with pytest.raises(ValidationError):
        optimal_gains(ex1_chain.with_dynamics(A=A), TimeGrid(30.0, 3000))


# -- single-mode LQR oracle --------------------------------------------------

def riccati_gains(A, B, Q, R, S, t_f, t):
    A, B, Q, R, S = map(np.asarray, (A, B, Q, R, S))
    n = A.shape[0]
    Rinv = np.linalg.inv(R)

    def rhs(s, p):
        P = p.reshape(n, n)
        dP = A.T @ P + P @ A + Q - P @ B @ Rinv @ B.T @ P
        return dP.ravel()       # in reversed time s = t_f - t

    sol = integrate.solve_ivp(rhs, (0.0, t_f), S.ravel(), method="DOP853", rtol=1e-12, atol=1e-14,
                              dense_output=True)
    return np.array([-Rinv @ B.T @ sol.sol(t_f - tt).reshape(n, n) for tt in t])


def test_single_mode_gains_match_riccati():
    A = [[0.0, 1.0], [-2.0, 0.3]]
    B = [[0.0], [1.0]]
    Q = [[2.0, 0.0], [0.0, 1.0]]
    R = [[0.5]]
    S = [[1.0, 0.0], [0.0, 0.0]]
    ch = single_mode_chain(A, B, Q, R, S, [1.0, -0.5], 5.0)
    grid = TimeGrid(5.0, 1000)
    gains, _ = optimal_gains(ch, grid)
    ref = riccati_gains(A, B, Q, R, S, 5.0, grid.t)
    assert np.abs(gains.values[0] - ref).max() <= 1e-6


# -- realization invariance --------------------------------------------------

@given(st.integers(0, 10_000), st.floats(0.05, 0.6))
@settings(max_examples=5, deadline=None)
def test_gains_invariant_under_pdf_equivalent_transform(seed, scale):
    ch = assemble_chain(two_mode_spec(ex1_coxian(), t_f=10.0))
    grid = TimeGrid(10.0, 1500)
    T = convention_preserving_transform(3, np.random.default_rng(seed), scale)
    variant = pdf_equivalent_variant(ch, "a", T)
    g0, _ = optimal_gains(ch, grid)
    g1, _ = optimal_gains(variant, grid)
    assert g0.max_difference(g1) <= 1e-6
    assert cost_only(variant, g1) == pytest.approx(cost_only(ch, g0), rel=1e-6)


# -- optimality probes -------------------------------------------------------

def test_closed_form_gains_locally_optimal_without_reentry():
    ch = absorbing_ex1_chain()
    grid = TimeGrid(10.0, 1000)
    gains, _ = optimal_gains(ch, grid)
    J0 = cost_only(ch, gains)
    rng = np.random.default_rng(0)
    for _ in range(6):
        k = int(rng.integers(0, 2))
        j = int(rng.integers(0, 300))       # the state is negligible later on
        for sign in (1.0, -1.0):
            v = gains.values.copy()
            v[k, j] *= 1.0 + sign * 1e-3
            J = cost_only(ch, GainSchedule(grid, v))
            assert J >= J0 * (1 - 1e-6)


def test_reentered_cluster_admits_better_gains_than_closed_form(ex1_chain):
    """Regression pin: with re-entry the closed form is not stationary."""
    grid = TimeGrid(30.0, 3000)
    gains, _ = optimal_gains(ex1_chain, grid)
    it = mjlspom_gains_iterative(ex1_chain, grid, gains, max_iters=50, tol=1e-6)
    assert it.converged
    assert it.costs[0] == pytest.approx(10.599, abs=5e-3)
    assert it.costs[-1] == pytest.approx(10.040, abs=5e-3)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(it.costs, it.costs[1:]))


def test_stationarity_residual_zero_for_singletons():
    ch = assemble_chain(two_mode_spec(Exponential(1 / 2.12), t_f=10.0))
    grid = TimeGrid(10.0, 1000)
    gains, lam = optimal_gains(ch, grid)
    X = solve_covariance(ch, gains, grid)
    assert stationarity_residual(ch, gains, lam, X) < 1e-10


# -- convolution oracle ------------------------------------------------------

def test_oracle_matches_ode_for_exponential_modes():
    ch = assemble_chain(two_mode_spec(Exponential(0.8), Exponential(0.3), t_f=10.0))
    grid = TimeGrid(10.0, 2000)
    G = GainSchedule.constant(ch, grid, FIXED)
    lam = solve_costate(ch, G, grid)
    o = costate_convolution_oracle(ch, G, grid)
    ode_a = lam.values[:, 0, 0, 0]
    assert np.abs(o.entry_first[:, 0, 0] - ode_a).max() <= 1e-6 * ode_a.max()
    assert o.entry_second[0, 0, 0] == pytest.approx(lam.values[0, 1, 0, 0], rel=1e-6)


def test_oracle_terminal_values(ex1_chain):
    grid = TimeGrid(30.0, 600)
    o = costate_convolution_oracle(ex1_chain, GainSchedule.constant(ex1_chain, grid, FIXED), grid, levels=1)
    assert o.entry_first[-1, 0, 0] == pytest.approx(0.0, abs=1e-14)
    assert o.entry_second[-1, 0, 0] == pytest.approx(0.0, abs=1e-14)
