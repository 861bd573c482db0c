import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metacog.errors import RankDeficientError
from metacog.oracles import scalar_benchmark_log
from metacog.params import HyperParams
from metacog.rl import (
    DataLog,
    ExplorationNoise,
    NonConvergenceError,
    PolicyWeights,
    basis_sizes,
    bellman_residuals,
    build_regressors,
    collect_data,
    gain_to_w_bar,
    lift,
    lyapunov_vec,
    phi1,
    policy_iteration_step,
    quadrature_weights,
    required_intervals,
    riccati_oracle,
    solve_policy,
)
from metacog.sim import LtiPlant, ScenarioSchedule, VehicleParams, simulate, vehicle_matrices

SCALAR_THETA = HyperParams([1.0], [1.0], [0.0])


@pytest.fixture(scope="module")
def scalar():
    return scalar_benchmark_log()


def test_basis_sizes():
    assert basis_sizes(4, 1) == (15, 5, 20)
    assert required_intervals(1, 1) == 5


def test_phi1_and_P_consistent():
    rng = np.random.default_rng(0)
    w = PolicyWeights(rng.normal(size=6), np.zeros((3, 1)))
    z = rng.normal(size=3)
    assert z @ w.P @ z == pytest.approx(w.w_v @ phi1(z))
    np.testing.assert_array_equal(w.P, w.P.T)


def test_lift_setpoint_shift():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 4))
    r, r2 = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(lift(x, r2)[:, :4], lift(x, r)[:, :4] + (r - r2))
    assert np.all(lift(x, r)[:, 4] == 1.0)


def test_gain_round_trip():
    K = np.array([[0.3, 2.0, 0.0, 0.1]])
    w = PolicyWeights(np.zeros(15), gain_to_w_bar(K, [0.5]))
    np.testing.assert_array_equal(w.gain, K)
    np.testing.assert_array_equal(w.feedforward, [0.5])
    x, r = np.array([1.0, 0.2, 0.0, 0.0]), np.array([3.0, 0, 0, 0])
    np.testing.assert_allclose(w.control(x, r), -K @ (x - r) + 0.5)


# ------------------------------------------------------------------ logging


def test_exploration_noise_bounded_and_seeded():
    a = ExplorationNoise.seeded(1, 8, 0.1, 3)
    b = ExplorationNoise.seeded(1, 8, 0.1, 3)
    t = np.linspace(0, 10, 1001)
    va = np.array([a(s) for s in t])
    assert np.max(np.abs(va)) <= 0.1
    np.testing.assert_array_equal(va, [b(s) for s in t])
    assert np.all((a.freqs >= 0.1) & (a.freqs <= 5.0))


def test_collect_requires_count():
    plant = vehicle_matrices(VehicleParams())
    with pytest.raises(ValueError, match="20"):
        collect_data(plant, lambda x, t: np.zeros(1), None, 19, 0.1, 1e-3, 0.1)


def test_collect_shapes():
    plant = vehicle_matrices(VehicleParams())
    noise = ExplorationNoise.seeded(1, 8, 0.1, 0)
    K = np.array([[0.3, 2.0, 0.0, 0.0]])
    log = collect_data(plant, lambda x, t: -K @ x, noise, 120, 0.1, 1e-3, 0.1, x0=[1.0, 0, 0, 0])
    # 100 steps per interval, both endpoints stored
    assert log.xs.shape == (120, 101, 4) and log.us.shape == (120, 101, 1)
    np.testing.assert_allclose(log.t_starts, 0.1 * np.arange(120))
    np.testing.assert_array_equal(log.xs[1:, 0], log.xs[:-1, -1])


def test_no_excitation_rank_report():
    plant = vehicle_matrices(VehicleParams())
    log = collect_data(plant, lambda x, t: np.zeros(1), None, 20, 0.1, 1e-3, 0.1, x0=np.zeros(4))
    theta = HyperParams([10.0] * 4, [2.0], np.zeros(4))
    with pytest.raises(RankDeficientError) as info:
        solve_policy(log, theta)
    assert info.value.rank < 20 and info.value.n_rows == 20


def test_datalog_text_round_trip(scalar):
    _, log = scalar
    back = DataLog.from_text(log.to_text())
    assert np.array_equal(back.xs, log.xs) and np.array_equal(back.us, log.us)
    assert np.array_equal(back.t_starts, log.t_starts)
    assert (back.dt, back.T_int, back.gamma, back.exploration) == (log.dt, log.T_int, log.gamma, log.exploration)


# --------------------------------------------------------------- regressors


def test_quadrature_weights_integrate_exponential():
    s, dt, g = 100, 1e-3, 0.2
    w = quadrature_weights(s, dt, g)
    assert w.sum() == pytest.approx((1 - math.exp(-g * s * dt)) / g, rel=1e-12)


def constant_log(x, u, N=3, s=100, dt=1e-3, gamma=0.2):
    xs = np.broadcast_to(np.asarray(x, float), (N, s + 1, len(x))).copy()
    us = np.broadcast_to(np.asarray(u, float), (N, s + 1, len(u))).copy()
    return DataLog(xs, us, dt, s * dt, gamma, np.arange(N) * s * dt)


def test_constant_state_integral_closed_form():
    x = np.array([0.7, -0.4])
    log = constant_log(x, [0.0])
    theta = HyperParams([2.0, 3.0], [1.0], [0.1, 0.2])
    _, Xi = build_regressors(log, theta, np.zeros((3, 1)))
    e = x - theta.setpoint
    expected = -(2.0 * e[0] ** 2 + 3.0 * e[1] ** 2) * (1 - math.exp(-0.2 * 0.1)) / 0.2
    np.testing.assert_allclose(Xi, expected, rtol=0, atol=1e-8)


def test_zero_policy_cost_is_state_term(scalar):
    _, log = scalar
    th = HyperParams([1.0], [5.0], [0.0])
    _, Xi0 = build_regressors(log, th, np.zeros((2, 1)))
    _, Xi1 = build_regressors(log, HyperParams([1.0], [50.0], [0.0]), np.zeros((2, 1)))
    np.testing.assert_array_equal(Xi0, Xi1)


def test_regressors_reuse_raw_log(scalar):
    _, log = scalar
    xs = log.xs.copy()
    a, _ = build_regressors(log, HyperParams([1.0], [1.0], [0.0]), np.zeros((2, 1)))
    b, _ = build_regressors(log, HyperParams([1.0], [1.0], [0.5]), np.zeros((2, 1)))
    assert np.array_equal(log.xs, xs)
    assert not np.allclose(a, b)


def test_regressor_dimension_check(scalar):
    _, log = scalar
    with pytest.raises(ValueError):
        build_regressors(log, HyperParams([1.0, 1.0], [1.0], [0.0, 0.0]), np.zeros((2, 1)))


# ------------------------------------------------------------ least squares


def synthetic_system(seed, N):
    rng = np.random.default_rng(seed)
    p = 3 + 2  # n = 1, m = 1
    Theta = rng.normal(size=(N, p))
    w = rng.normal(size=p)
    return Theta, w, Theta @ w


def test_square_exact_solve():
    Theta, w, Xi = synthetic_system(0, 5)
    sol = policy_iteration_step(Theta, Xi, 1, 1)
    got = np.concatenate([sol.w_v, sol.w_bar.ravel()])
    assert np.linalg.norm(Theta @ got - Xi) <= 1e-10 * np.linalg.norm(Xi)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recovers_generating_weights(seed):
    Theta, w, Xi = synthetic_system(seed, 30)
    sol = policy_iteration_step(Theta, Xi, 1, 1)
    np.testing.assert_allclose(np.concatenate([sol.w_v, sol.w_bar.ravel()]), w, atol=1e-9)


def test_duplicated_rows_same_solution():
    rng = np.random.default_rng(3)
    Theta = rng.normal(size=(12, 5))
    Xi = rng.normal(size=12)
    a = policy_iteration_step(Theta, Xi, 1, 1)
    b = policy_iteration_step(np.vstack([Theta, Theta]), np.concatenate([Xi, Xi]), 1, 1)
    np.testing.assert_allclose(a.w_v, b.w_v, atol=1e-10)
    np.testing.assert_allclose(a.w_bar, b.w_bar, atol=1e-10)


def test_rank_error_carries_counts():
    Theta = np.ones((10, 5))
    with pytest.raises(RankDeficientError) as info:
        policy_iteration_step(Theta, np.ones(10), 1, 1)
    assert info.value.rank == 1 and info.value.n_rows == 10


def test_width_inferred():
    Theta, _, Xi = synthetic_system(0, 8)
    assert policy_iteration_step(Theta, Xi).w_bar.shape == (2, 1)


# ------------------------------------------------------------------- solver


def test_scalar_matches_riccati(scalar):
    plant, log = scalar
    w, it = solve_policy(log, SCALAR_THETA, 1e-9, 30, gain_to_w_bar([[2.0]]))
    _, K = riccati_oracle(plant.A, plant.B, [[1.0]], [[1.0]], 0.2)
    assert abs(w.gain[0, 0] - K[0, 0]) / abs(K[0, 0]) < 1e-3
    assert it <= 15


def test_huge_eps_stops_after_one(scalar):
    _, log = scalar
    _, it = solve_policy(log, SCALAR_THETA, 1e9, 30, gain_to_w_bar([[2.0]]))
    assert it == 1


def test_nonconvergence_reported(scalar):
    _, log = scalar
    with pytest.raises(NonConvergenceError) as info:
        solve_policy(log, SCALAR_THETA, 0.0, 2, gain_to_w_bar([[2.0]]))
    assert len(info.value.changes) == 2


def test_value_matrix_psd_on_error_block(scalar):
    _, log = scalar
    w, _ = solve_policy(log, SCALAR_THETA, 1e-9, 30, gain_to_w_bar([[2.0]]))
    assert np.linalg.eigvalsh(w.P[:1, :1]).min() >= -1e-6


def test_bellman_residual_held_out(scalar):
    _, log = scalar
    _, held = scalar_benchmark_log(seed=77)
    w, _ = solve_policy(log, SCALAR_THETA, 1e-9, 30, gain_to_w_bar([[2.0]]))
    res, sc = bellman_residuals(held, SCALAR_THETA, w)
    assert np.all(np.abs(res) <= 1e-6 * (1 + sc))


def discounted_cost(plant, K, gamma, x0, horizon=30.0, dt=1e-3):
    sched = ScenarioSchedule(horizon, dt, [(0.0, [0.0])])
    tr = simulate(plant, lambda x, t, r: -K @ x, sched, x0)
    c = tr.states[:, 0] ** 2 + tr.inputs[:, 0] ** 2
    w = np.exp(-gamma * tr.times)
    y = w * c
    return dt * (y.sum() - 0.5 * (y[0] + y[-1]))


def test_policy_improvement_monotone(scalar):
    plant, log = scalar
    gains = []
    solve_policy(log, SCALAR_THETA, 1e-9, 30, gain_to_w_bar([[2.0]]), callback=lambda k, w: gains.append(w.gain.copy()))
    costs = [discounted_cost(plant, np.array([[2.0]]), 0.2, [1.0])]
    costs += [discounted_cost(plant, K, 0.2, [1.0]) for K in gains]
    for a, b in zip(costs, costs[1:]):
        assert b <= a * (1 + 1e-4)


def test_two_thetas_one_log(scalar):
    plant, log = scalar
    for q, r in ((1.0, 1.0), (4.0, 0.5)):
        th = HyperParams([q], [r], [0.0])
        w, _ = solve_policy(log, th, 1e-9, 30, gain_to_w_bar([[2.0]]))
        _, K = riccati_oracle(plant.A, plant.B, [[q]], [[r]], 0.2)
        assert abs(w.gain[0, 0] - K[0, 0]) / K[0, 0] < 1e-3


# ------------------------------------------------------------------- oracle


def test_riccati_scalar_hand_algebra():
    P, K = riccati_oracle([[0.0]], [[1.0]], [[1.0]], [[1.0]], 0.0)
    assert P[0, 0] == pytest.approx(1.0, abs=1e-9) and K[0, 0] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("gamma", [0.1, 0.5, 1.0])
def test_riccati_discount_closed_form(gamma):
    P, _ = riccati_oracle([[0.0]], [[1.0]], [[1.0]], [[1.0]], gamma)
    expected = -gamma / 2 + math.sqrt(gamma**2 / 4 + 1)
    assert P[0, 0] == pytest.approx(expected, abs=1e-9)
    assert P[0, 0] < 1.0


@pytest.mark.parametrize("seed", range(5))
def test_riccati_residual_random_stable(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    A -= (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(3)
    B = rng.normal(size=(3, 1))
    Q, R = np.eye(3), np.array([[2.0]])
    P, _ = riccati_oracle(A, B, Q, R, 0.3)
    As = A - 0.15 * np.eye(3)
    res = As.T @ P + P @ As + Q - P @ B @ np.linalg.solve(R, B.T) @ P
    assert np.abs(res).max() <= 1e-8


def test_lyapunov_vec():
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    P = lyapunov_vec(A, np.eye(2))
    np.testing.assert_allclose(A.T @ P + P @ A + np.eye(2), 0, atol=1e-12)


def test_riccati_unstabilizable():
    from metacog.errors import NumericalError

    with pytest.raises(NumericalError):
        riccati_oracle([[1.0]], [[0.0]], [[1.0]], [[1.0]], 0.0)
