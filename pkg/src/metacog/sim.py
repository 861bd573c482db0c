"""LTI plants, the lateral vehicle model and fixed-step RK4 simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import SimulationDiverged
from .trajectory import Trajectory

BLOWUP = 1e6


@dataclass(frozen=True, eq=False)
class LtiPlant:
    """``xdot = A x + B u``."""

    A: np.ndarray
    B: np.ndarray
    label: str = "plant"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent plant dimensions A{A.shape}, B{B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("plant matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class VehicleParams:
    """Lateral bicycle-model parameters (SI units)."""

    m_T: float = 1300.0
    I_T: float = 10000.0
    v_T: float = 16.0
    k_f: float = 91000.0
    k_r: float = 91000.0
    a: float = 1.6154
    b: float = 1.8846

    def __post_init__(self):
        for name in ("m_T", "I_T", "v_T", "k_f", "k_r", "a", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"vehicle.{name} must be positive")


def _lateral_rows(p: VehicleParams, v: float):
    """Slip-angle and yaw-rate rows evaluated at speed ``v``."""
    mv = p.m_T * v
    row3 = [0.0, 0.0, -(p.k_f + p.k_r) / mv, -(mv + (p.a * p.k_f - p.b * p.k_r) / v) / mv]
    yaw_damp = -(p.a**2 * p.k_f + p.b**2 * p.k_r) / (p.I_T * v)
    return row3, yaw_damp


def vehicle_matrices(p: VehicleParams) -> LtiPlant:
    """State ``[y, psi, alpha, psi_dot]``, input steering angle."""
    row3, yaw_damp = _lateral_rows(p, p.v_T)
    A = np.array(
        [
            [0.0, p.v_T, p.v_T, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            row3,
            [0.0, 0.0, -(p.a * p.k_f - p.b * p.k_r) / p.I_T, yaw_damp],
        ]
    )
    B = np.array([[0.0], [0.0], [p.k_f / (p.m_T * p.v_T)], [p.a * p.k_f / p.I_T]])
    return LtiPlant(A, B, "nominal")


def perturbation(p: VehicleParams, dv: float) -> Tuple[np.ndarray, np.ndarray]:
    """Additive changes ``(dA, dB)`` for a speed-change magnitude ``dv``."""
    if dv == 0:
        raise ValueError("delta_v must be non-zero")
    row3, yaw_damp = _lateral_rows(p, dv)
    dA = np.array(
        [
            [0.0, dv, dv, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            row3,
            [0.0, 0.0, 0.0, yaw_damp],
        ]
    )
    dB = np.array([[0.0], [0.0], [p.k_f / (p.m_T * dv)], [0.0]])
    return dA, dB


def perturbed_matrices(p: VehicleParams, dv: float) -> LtiPlant:
    base = vehicle_matrices(p)
    dA, dB = perturbation(p, dv)
    return LtiPlant(base.A + dA, base.B + dB, "perturbed")


# ----------------------------------------------------------------- integrators


class Rk4Zoh:
    """Classical RK4 step for an LTI plant with the input held over the step.

    For linear dynamics the four stages collapse to ``x' = M x + N u`` with
    ``M = sum_{k<=4} (hA)^k / k!`` and ``N = h sum_{k<=3} (hA)^k / (k+1)! B``.
    """

    def __init__(self, plant: LtiPlant, dt: float):
        h = float(dt)
        hA = h * plant.A
        I = np.eye(plant.n)
        hA2 = hA @ hA
        hA3 = hA2 @ hA
        self.M = I + hA + hA2 / 2.0 + hA3 / 6.0 + hA3 @ hA / 24.0
        self.N = h * (I + hA / 2.0 + hA2 / 6.0 + hA3 / 24.0) @ plant.B
        self.plant = plant

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.M @ x + self.N @ u


def rk4_step(plant: LtiPlant, x: np.ndarray, t: float, dt: float, u_fn: Callable) -> np.ndarray:
    """RK4 step with the input re-evaluated at every stage, ``u = u_fn(x, t)``."""
    A, B = plant.A, plant.B
    k1 = A @ x + B @ u_fn(x, t)
    x2 = x + 0.5 * dt * k1
    k2 = A @ x2 + B @ u_fn(x2, t + 0.5 * dt)
    x3 = x + 0.5 * dt * k2
    k3 = A @ x3 + B @ u_fn(x3, t + 0.5 * dt)
    x4 = x + dt * k3
    k4 = A @ x4 + B @ u_fn(x4, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# -------------------------------------------------------------------- schedule


def grid_index(t: float, dt: float) -> int:
    return int(round(t / dt))


@dataclass(frozen=True, eq=False)
class ScenarioSchedule:
    """Horizon, setpoint plan and plant-change events of one run.

    Attributes
    ----------
    setpoint_plan : list of (t_from, r)
        Piecewise-constant setpoint; the first entry must start at 0.
    events : list of (t, LtiPlant)
        Plant replacements.
    """

    horizon: float
    dt: float
    setpoint_plan: Sequence[Tuple[float, np.ndarray]]
    events: Sequence[Tuple[float, LtiPlant]] = ()
    stl_spec: str = "T"
    seed: int = 0
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon > 0):
            raise ValueError("horizon and dt must be positive")
        plan = [(float(t), np.asarray(r, dtype=float).ravel()) for t, r in self.setpoint_plan]
        if not plan or abs(plan[0][0]) > 1e-12:
            raise ValueError("setpoint plan must start at t = 0")
        for seq, what in ((plan, "setpoint plan"), (list(self.events), "events")):
            times = [t for t, _ in seq]
            if any(t < 0 or t > self.horizon for t in times):
                raise ValueError(f"{what} times must lie within [0, horizon]")
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"{what} times must be strictly increasing")
        object.__setattr__(self, "setpoint_plan", plan)
        object.__setattr__(self, "events", list(self.events))

    @property
    def n_steps(self) -> int:
        return grid_index(self.horizon, self.dt)

    def setpoint_index_table(self) -> List[Tuple[int, np.ndarray]]:
        return [(grid_index(t, self.dt), r) for t, r in self.setpoint_plan]

    def setpoint_at(self, k: int) -> np.ndarray:
        r = self.setpoint_plan[0][1]
        for ki, ri in self.setpoint_index_table():
            if k >= ki:
                r = ri
        return r

    def switch_indices(self) -> List[int]:
        return [grid_index(t, self.dt) for t, _ in self.setpoint_plan[1:]]

    def plant_at(self, k: int, base: LtiPlant) -> LtiPlant:
        plant = base
        for t, p in self.events:
            if k >= grid_index(t, self.dt):
                plant = p
        return plant


class Simulator:
    """Step-by-step RK4 simulation driven by a schedule.

    ``simulate`` and the episode runner both advance time through this
    class so that their trajectories agree bit for bit.
    """

    def __init__(self, plant: LtiPlant, schedule: ScenarioSchedule, x0=None):
        self.base = plant
        self.schedule = schedule
        self.dt = schedule.dt
        x = schedule.x0 if x0 is None else x0
        self.x = np.zeros(plant.n) if x is None else np.asarray(x, dtype=float).copy()
        self.k = 0
        self._steppers = {}
        self.states = [self.x.copy()]
        self.inputs: List[np.ndarray] = []
        self.setpoints = [schedule.setpoint_at(0)]
        self.labels: List[str] = []

    @property
    def t(self) -> float:
        return self.k * self.dt

    @property
    def setpoint(self) -> np.ndarray:
        return self.schedule.setpoint_at(self.k)

    @property
    def plant(self) -> LtiPlant:
        return self.schedule.plant_at(self.k, self.base)

    @property
    def done(self) -> bool:
        return self.k >= self.schedule.n_steps

    def _stepper(self, plant: LtiPlant) -> Rk4Zoh:
        key = id(plant)
        if key not in self._steppers:
            self._steppers[key] = Rk4Zoh(plant, self.dt)
        return self._steppers[key]

    def _record(self, x_next: np.ndarray, u: np.ndarray, label: str) -> None:
        norm = float(np.linalg.norm(x_next))
        if not np.isfinite(norm) or norm > BLOWUP:
            raise SimulationDiverged((self.k + 1) * self.dt, norm)
        self.inputs.append(np.asarray(u, dtype=float).copy())
        self.labels.append(label)
        self.x = x_next
        self.k += 1
        self.states.append(self.x.copy())
        self.setpoints.append(self.schedule.setpoint_at(self.k))

    def step(self, u) -> np.ndarray:
        """Advance one step holding ``u``."""
        plant = self.plant
        u = np.atleast_1d(np.asarray(u, dtype=float))
        self._record(self._stepper(plant).step(self.x, u), u, plant.label)
        return self.x

    def step_continuous(self, u_fn: Callable) -> np.ndarray:
        """Advance one step re-evaluating ``u_fn(x, t)`` at every RK4 stage."""
        plant = self.plant
        u0 = np.atleast_1d(u_fn(self.x, self.t))
        self._record(rk4_step(plant, self.x, self.t, self.dt, u_fn), u0, plant.label)
        return self.x

    def trajectory(self, final_input=None) -> Trajectory:
        if final_input is not None:
            last = np.atleast_1d(np.asarray(final_input, dtype=float))
        elif self.inputs:
            last = self.inputs[-1]
        else:
            last = np.zeros(self.base.m)
        inputs = list(self.inputs) + [last]
        labels = list(self.labels) + [self.plant.label]
        return Trajectory(0.0, self.dt, np.array(self.states), np.array(inputs), np.array(self.setpoints), labels)


def simulate(plant: LtiPlant, controller: Callable, schedule: ScenarioSchedule, x0=None) -> Trajectory:
    """Closed-loop RK4 run with zero-order-hold input.

    Parameters
    ----------
    plant : LtiPlant
        Plant active until the first scheduled event.
    controller : callable
        ``controller(x, t, r) -> u``, evaluated once per step.
    schedule : ScenarioSchedule

    Raises
    ------
    SimulationDiverged
        If the state norm exceeds 1e6.
    """
    sim = Simulator(plant, schedule, x0)
    while not sim.done:
        sim.step(controller(sim.x, sim.t, sim.setpoint))
    return sim.trajectory(controller(sim.x, sim.t, sim.setpoint))
