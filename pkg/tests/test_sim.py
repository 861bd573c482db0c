import math

import numpy as np
import pytest
from scipy.linalg import expm

from metacog.errors import SimulationDiverged
from metacog.sim import (
    LtiPlant,
    Rk4Zoh,
    ScenarioSchedule,
    Simulator,
    VehicleParams,
    perturbation,
    perturbed_matrices,
    rk4_step,
    simulate,
    vehicle_matrices,
)

P = VehicleParams()


def test_vehicle_matrix_entries():
    plant = vehicle_matrices(P)
    assert plant.A[0, 1] == 16.0 and plant.A[0, 2] == 16.0
    assert plant.A[2, 2] == pytest.approx(-182000 / 20800)
    assert plant.B[2, 0] == pytest.approx(91000 / 20800)
    assert plant.A[1].tolist() == [0.0, 0.0, 0.0, 1.0]


def test_perturbation_structure():
    dA, dB = perturbation(P, 8.0)
    assert dA[0, 1] == 8.0 and dA[0, 2] == 8.0
    assert np.all(dA[1] == 0)
    assert dB[3, 0] == 0.0
    assert dB[2, 0] == pytest.approx(P.k_f / (P.m_T * 8.0))
    plant = perturbed_matrices(P, 8.0)
    np.testing.assert_array_equal(plant.A, vehicle_matrices(P).A + dA)
    assert plant.label == "perturbed"


def test_perturbation_rejects_zero():
    with pytest.raises(ValueError):
        perturbation(P, 0.0)


def test_vehicle_params_positive():
    with pytest.raises(ValueError):
        VehicleParams(m_T=0.0)


def test_plant_dimension_checks():
    with pytest.raises(ValueError):
        LtiPlant([[1.0, 0.0]], [[1.0]], "bad")


# ----------------------------------------------------------------- simulate


def test_equilibrium_stays_zero():
    plant = vehicle_matrices(P)
    sched = ScenarioSchedule(1.0, 1e-3, [(0.0, np.zeros(4))])
    tr = simulate(plant, lambda x, t, r: np.zeros(1), sched, np.zeros(4))
    assert np.all(tr.states == 0)
    assert len(tr) == 1001


def test_scalar_decay_matches_exponential():
    plant = LtiPlant([[-1.0]], [[0.0]], "decay")
    sched = ScenarioSchedule(1.0, 1e-3, [(0.0, [0.0])])
    tr = simulate(plant, lambda x, t, r: np.zeros(1), sched, [1.0])
    assert abs(tr.states[-1, 0] - math.exp(-1.0)) <= 1e-9


def test_rk4_fourth_order_on_vehicle():
    plant = vehicle_matrices(P)
    x0 = np.array([0.5, 0.1, -0.05, 0.2])
    u = np.array([0.02])
    # exact zero-order-hold response
    M = np.zeros((5, 5))
    M[:4, :4] = plant.A
    M[:4, 4:] = plant.B
    exact = (expm(M) @ np.concatenate([x0, u]))[:4]
    errs = []
    for dt in (0.05, 0.025):
        stepper = Rk4Zoh(plant, dt)
        x = x0.copy()
        for _ in range(int(round(1.0 / dt))):
            x = stepper.step(x, u)
        errs.append(np.linalg.norm(x - exact))
    assert errs[0] / errs[1] >= 8.0


def test_stage_rk4_equals_zoh_for_constant_input():
    plant = vehicle_matrices(P)
    x = np.array([0.3, -0.1, 0.05, 0.0])
    u = np.array([0.01])
    a = rk4_step(plant, x, 0.0, 1e-3, lambda x_, t: u)
    b = Rk4Zoh(plant, 1e-3).step(x, u)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def feedback(x, t, r):
    return -np.array([[0.3, 2.0, 0.0, 0.0]]) @ (x - r)


def test_deterministic():
    plant = vehicle_matrices(P)
    sched = ScenarioSchedule(2.0, 1e-3, [(0.0, [1.0, 0, 0, 0]), (1.0, [3.0, 0, 0, 0])], seed=5)
    a = simulate(plant, feedback, sched, [1.0, 0, 0, 0])
    b = simulate(plant, feedback, sched, [1.0, 0, 0, 0])
    assert np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)


def test_plant_swap_and_setpoint_switch_on_grid():
    plant = vehicle_matrices(P)
    other = perturbed_matrices(P, 8.0)
    sched = ScenarioSchedule(
        1.0, 1e-3, [(0.0, [1.0, 0, 0, 0]), (0.4, [3.0, 0, 0, 0])], events=[(0.6, other)]
    )
    sim = Simulator(plant, sched, [1.0, 0, 0, 0])
    x_at_event = None
    while not sim.done:
        if sim.k == 600:
            x_at_event = sim.x.copy()
        sim.step(feedback(sim.x, sim.t, sim.setpoint))
    tr = sim.trajectory()
    assert tr.labels[599] == "nominal" and tr.labels[600] == "perturbed"
    assert np.array_equal(tr.states[600], x_at_event)
    assert tr.setpoints[399, 0] == 1.0 and tr.setpoints[400, 0] == 3.0


def test_divergence_reported():
    plant = LtiPlant([[50.0]], [[0.0]], "unstable")
    sched = ScenarioSchedule(1.0, 1e-3, [(0.0, [0.0])])
    with pytest.raises(SimulationDiverged) as info:
        simulate(plant, lambda x, t, r: np.zeros(1), sched, [1.0])
    assert 0 < info.value.t < 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScenarioSchedule(1.0, 1e-3, [(0.2, [0.0])])
    with pytest.raises(ValueError):
        ScenarioSchedule(1.0, 1e-3, [(0.0, [0.0]), (2.0, [1.0])])
    with pytest.raises(ValueError):
        ScenarioSchedule(1.0, 1e-3, [(0.0, [0.0]), (0.5, [1.0]), (0.5, [2.0])])
    with pytest.raises(ValueError):
        ScenarioSchedule(1.0, 0.0, [(0.0, [0.0])])
