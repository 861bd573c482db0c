"""Two-layer episode runner.

The low layer deploys a tracking policy learned off-policy from one
exploration log. The upper layer watches the closed loop every ``T``
seconds: it integrates meta-rewards, compares them with the fitness GP
(surprise), and on a confirmed change collects a fresh log, searches the
reward hyperparameters safely and redeploys.

Fitness-GP inputs are ``[x - r, theta]`` with ``theta`` the kernel vector
of the active hyperparameters, so the same process can pool data from
several tested hyperparameters.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericalError
from .fitness import (
    Decision,
    FitnessConfig,
    SurpriseWindow,
    discounted_integral,
    kl_to_base,
    margin_series,
    meta_reward,
    trigger,
)
from .gp import GpPosterior, gptd_fit, shift_inducing, state_param_kernel
from .params import HyperParams
from .rl import (
    DataLog,
    ExplorationNoise,
    PolicyWeights,
    collect_data,
    gain_to_w_bar,
    lift,
    solve_policy,
    steps_per_interval,
)
from .sbo import DomainGrid, SboConfig, SboRecord, UnsafeSeedError, default_p_min, sbo_run, score_from_kl
from .sim import LtiPlant, grid_index, ScenarioSchedule, Simulator, VehicleParams, perturbed_matrices, simulate, vehicle_matrices
from .stl import PredicateStack, parse_predicate, parse_formula
from .trajectory import Trajectory

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------- config


@dataclass(frozen=True)
class ScenarioConfig:
    """Lane-change scenario.

    ``change_time = None`` runs without the dynamics change.
    """

    horizon: float = 14.0
    dt: float = 1e-3
    delta_v: float = -18.0
    switch_time: Optional[float] = 4.0
    change_time: Optional[float] = 4.0
    seed: int = 0
    r_before: float = 1.0
    r_after: float = 3.0
    x0: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0)
    x0_jitter: Tuple[float, ...] = (0.1, 0.01, 0.01, 0.01)


@dataclass(frozen=True)
class StlConfig:
    spec: str = "G[0,14](abs(x1 - r) < 1)"
    safety: Tuple[str, ...] = ("abs(x1 - r) < 1",)


@dataclass(frozen=True)
class GpSettings:
    """Fitness-GP hyperparameters and library settings."""

    state_lengthscales: Tuple[float, ...] = (2.0, 1.0, 1.0, 2.0)
    param_lengthscale_frac: float = 0.5
    signal_var: float = 100.0
    w2: float = 0.1
    prior_mean: float = 4.0
    kl_points: int = 8
    kl_min_distance: float = 0.25
    rho_min: float = 0.2
    ring_size: int = 4
    infer_window: float = 0.5


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.1
    N: int = 40
    T_int: float = 0.05
    eps: float = 1e-6
    max_iter: int = 40
    noise_amplitude: float = 0.1
    adapt_N: int = 30
    adapt_noise_amplitude: float = 0.05
    behavior_gain: Tuple[float, ...] = (0.3, 2.0, 0.0, 0.0)


@dataclass(frozen=True)
class SboSettings:
    lo: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 0.5)
    hi: Tuple[float, ...] = (100.0, 20.0, 20.0, 20.0, 4.0)
    resolution: Tuple[int, ...] = (5, 4, 4, 4, 4)
    budget: int = 20
    beta: float = 3.0
    p_min: Optional[float] = None
    lengthscale_frac: float = 0.4
    signal_var: float = 0.04
    prior_mean: float = -0.5
    eval_horizon: float = 2.0
    radius_margin: Optional[float] = 0.1
    settle_time: Optional[float] = None
    rollout_start: str = "maneuver"
    grid_cap: int = 100_000


@dataclass(frozen=True)
class MonitorConfig:
    enabled: bool = True
    adapt: bool = True
    rearm_delay: Optional[float] = None


@dataclass(frozen=True)
class EpisodeConfig:
    vehicle: VehicleParams = VehicleParams()
    scenario: ScenarioConfig = ScenarioConfig()
    stl: StlConfig = StlConfig()
    fitness: FitnessConfig = FitnessConfig(eps=2.0, rm_cap=20.0, beta=0.3, varpi=12.5)
    gp: GpSettings = GpSettings()
    rl: RlConfig = RlConfig()
    sbo: SboSettings = SboSettings()
    monitor: MonitorConfig = MonitorConfig()
    q0: Tuple[float, ...] = (10.0, 10.0, 10.0, 10.0)
    r0: Tuple[float, ...] = (2.0,)

    def theta0(self) -> HyperParams:
        n = len(self.q0)
        r = np.zeros(n)
        r[0] = self.scenario.r_before
        return HyperParams(np.array(self.q0), np.array(self.r0), r)

    @property
    def rearm_delay(self) -> float:
        d = self.monitor.rearm_delay
        return 2.0 * self.fitness.delta if d is None else d

    def validate(self) -> None:
        """Cross-module dimension and timing checks."""
        n = len(self.q0)
        if len(self.scenario.x0) != n or len(self.scenario.x0_jitter) != n:
            raise ValueError("scenario.x0 and x0_jitter must match the state dimension")
        if len(self.gp.state_lengthscales) != n:
            raise ValueError("gp.state_lengthscales must match the state dimension")
        if len(self.rl.behavior_gain) != n:
            raise ValueError("rl.behavior_gain must match the state dimension")
        dims = n + len(self.r0)
        for name in ("lo", "hi", "resolution"):
            if len(getattr(self.sbo, name)) != dims:
                raise ValueError(f"sbo.{name} must have {dims} entries")
        self.fitness.steps(self.scenario.dt)
        steps_per_interval(self.rl.T_int, self.scenario.dt)
        theta = self.theta0().decision_vector()
        if np.any(theta < np.array(self.sbo.lo)) or np.any(theta > np.array(self.sbo.hi)):
            raise ValueError("theta0 lies outside the sbo box")


# ---------------------------------------------------------------------- report


class EpisodeError(RuntimeError):
    """Failure inside an episode, annotated with the stage and time."""

    def __init__(self, stage: str, t: float, cause: BaseException):
        super().__init__(f"episode failed during {stage} at t = {t:.4f}: {cause}")
        self.stage = stage
        self.t = t
        self.cause = cause


@dataclass
class AdaptationRecord:
    t_trigger: float
    t_deploy: float
    old_theta: HyperParams
    new_theta: HyperParams
    history: List[SboRecord]
    status: str


@dataclass
class EpisodeReport:
    trajectory: Trajectory
    monitor_rows: List[dict]
    adaptations: List[AdaptationRecord]
    final_policy: PolicyWeights
    final_theta: HyperParams
    decisions: List[Tuple[float, str]] = field(default_factory=list)
    nominal_gp: Optional[GpPosterior] = None
    library: List[GpPosterior] = field(default_factory=list)

    def adapt_times(self) -> List[float]:
        return [t for t, d in self.decisions if d == Decision.ADAPT.value]


# ---------------------------------------------------------------------- pieces


def build_plants(cfg: EpisodeConfig) -> Tuple[LtiPlant, LtiPlant]:
    return vehicle_matrices(cfg.vehicle), perturbed_matrices(cfg.vehicle, cfg.scenario.delta_v)


def _setpoint(value: float, n: int) -> np.ndarray:
    r = np.zeros(n)
    r[0] = value
    return r


def make_schedule(cfg: EpisodeConfig, with_change: Optional[bool] = None, x0=None) -> ScenarioSchedule:
    sc = cfg.scenario
    n = len(cfg.q0)
    plan = [(0.0, _setpoint(sc.r_before, n))]
    if sc.switch_time is not None:
        plan.append((sc.switch_time, _setpoint(sc.r_after, n)))
    change = sc.change_time is not None if with_change is None else with_change
    events = []
    if change and sc.change_time is not None:
        events.append((sc.change_time, build_plants(cfg)[1]))
    return ScenarioSchedule(sc.horizon, sc.dt, plan, events, cfg.stl.spec, sc.seed, x0)


def episode_x0(cfg: EpisodeConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.scenario.seed, 1])
    jitter = np.asarray(cfg.scenario.x0_jitter) * rng.standard_normal(len(cfg.scenario.x0))
    return np.asarray(cfg.scenario.x0, dtype=float) + jitter


def build_stack(cfg: EpisodeConfig) -> PredicateStack:
    n = len(cfg.q0)
    schema = [f"x{i + 1}" for i in range(n)] + [f"r{i + 1}" for i in range(n)] + ["r"]
    preds = [parse_predicate(s, schema) for s in cfg.stl.safety]
    return PredicateStack(preds, cfg.fitness.eps, _setpoint(cfg.scenario.r_before, n))


def fitness_kernel(cfg: EpisodeConfig):
    widths = np.asarray(cfg.sbo.hi, float) - np.asarray(cfg.sbo.lo, float)
    return state_param_kernel(cfg.gp.state_lengthscales, cfg.gp.param_lengthscale_frac * widths, cfg.gp.signal_var)


@dataclass
class TdData:
    """TD samples: joint inputs, index pairs and integrated rewards."""

    Z: np.ndarray
    pairs: List[Tuple[int, int]]
    R: np.ndarray

    @staticmethod
    def concat(parts: Sequence["TdData"]) -> "TdData":
        Zs, pairs, Rs = [], [], []
        off = 0
        for p in parts:
            Zs.append(p.Z)
            pairs += [(i + off, j + off) for i, j in p.pairs]
            Rs.append(p.R)
            off += len(p.Z)
        return TdData(np.vstack(Zs), pairs, np.concatenate(Rs))


def td_data(states, setpoints, theta_vec, stack: PredicateStack, fcfg: FitnessConfig, dt: float) -> TdData:
    """TD samples every ``T`` seconds; intervals spanning a setpoint switch are dropped."""
    states = np.asarray(states, float)
    setpoints = np.asarray(setpoints, float)
    s = fcfg.steps(dt)
    idx = np.arange(0, len(states), s)
    rm = meta_reward(margin_series(states, stack, setpoints), fcfg)
    Z = np.hstack([states[idx] - setpoints[idx], np.tile(theta_vec, (len(idx), 1))])
    pairs, R = [], []
    for a in range(len(idx) - 1):
        lo, hi = idx[a], idx[a + 1]
        if not np.all(setpoints[lo : hi + 1] == setpoints[lo]):
            continue
        pairs.append((a, a + 1))
        R.append(discounted_integral(rm[lo : hi + 1], dt, fcfg.a))
    return TdData(Z, pairs, np.array(R))


def fit_fitness(data: TdData, cfg: EpisodeConfig, kernel=None) -> GpPosterior:
    kernel = fitness_kernel(cfg) if kernel is None else kernel
    used = sorted({i for p in data.pairs for i in p})
    remap = {old: new for new, old in enumerate(used)}
    pairs = [(remap[i], remap[j]) for i, j in data.pairs]
    return gptd_fit(
        data.Z[used],
        data.R,
        kernel,
        cfg.gp.w2,
        cfg.fitness.a,
        cfg.fitness.T,
        cfg.gp.prior_mean,
        cfg.fitness.td_discount,
        pairs,
    )


def thin_inducing(gp: GpPosterior, cfg: EpisodeConfig) -> GpPosterior:
    """Projection onto a well-separated subset of the inducing states."""
    n = len(cfg.q0)
    ls = np.asarray(cfg.gp.state_lengthscales)
    X = gp.inducing[:, :n] / ls
    chosen = [0]
    for i in range(1, len(X)):
        if len(chosen) >= cfg.gp.kl_points:
            break
        if np.min(np.linalg.norm(X[chosen] - X[i], axis=1)) >= cfg.gp.kl_min_distance:
            chosen.append(i)
    return shift_inducing(gp, gp.inducing[chosen])


def library_kl(gp: GpPosterior, library: Sequence[GpPosterior], cfg: EpisodeConfig) -> float:
    thin = thin_inducing(gp, cfg)
    dims = list(range(len(cfg.q0)))
    return min(kl_to_base(thin, b, dims) for b in library)


def build_base_library(stack: PredicateStack, cfg: EpisodeConfig, theta: HyperParams, kernel=None) -> List[GpPosterior]:
    """Plant-independent template GPs at margins rho_min, 2 rho_min, 4 rho_min.

    Each template holds the smooth margin at a fixed value along a sweep of
    lateral errors across the lane, so its meta-reward is constant and its
    fitness equals the bound ``(2/a) log(1 + 1/rho)``.
    """
    fc = cfg.fitness
    n = len(cfg.q0)
    kernel = fitness_kernel(cfg) if kernel is None else kernel
    sweep = np.linspace(-1.0, 1.0, 11)
    tv = theta.kernel_vector()
    out = []
    for k in (1, 2, 4):
        rho = k * cfg.gp.rho_min
        rm = np.full(fc.steps(cfg.scenario.dt) + 1, meta_reward(rho, fc))
        R = discounted_integral(rm, cfg.scenario.dt, fc.a)
        E = np.zeros((len(sweep), n))
        E[:, 0] = sweep
        Z = np.hstack([E, np.tile(tv, (len(sweep), 1))])
        out.append(gptd_fit(Z, np.full(len(sweep) - 1, R), kernel, cfg.gp.w2, fc.a, fc.T, cfg.gp.prior_mean, fc.td_discount))
    return out


class TrackingPolicy:
    """Policies for one hyperparameter set, solved per setpoint on demand."""

    def __init__(self, log_: DataLog, theta: HyperParams, cfg: EpisodeConfig, w_bar0=None, first: Optional[PolicyWeights] = None):
        self.log = log_
        self.theta = theta
        self.cfg = cfg
        self.w_bar0 = w_bar0
        self._cache: Dict[tuple, PolicyWeights] = {}
        if first is not None:
            self._cache[tuple(theta.setpoint)] = first

    def weights(self, r) -> PolicyWeights:
        key = tuple(np.asarray(r, float))
        if key not in self._cache:
            th = self.theta.with_setpoint(np.asarray(r, float))
            w, _ = solve_policy(self.log, th, self.cfg.rl.eps, self.cfg.rl.max_iter, self.w_bar0)
            self._cache[key] = w
        return self._cache[key]

    def __call__(self, x, t, r):
        return self.weights(r).control(x, r)


def learn_initial_policy(cfg: EpisodeConfig, plant: LtiPlant) -> Tuple[DataLog, TrackingPolicy]:
    rl = cfg.rl
    theta = cfg.theta0()
    Kb = np.atleast_2d(np.asarray(rl.behavior_gain, float))
    r0 = theta.setpoint
    noise = ExplorationNoise.seeded(plant.m, 2 * plant.n, rl.noise_amplitude, [cfg.scenario.seed, 2])
    log0 = collect_data(
        plant,
        lambda x, t: -Kb @ (x - r0),
        noise,
        rl.N,
        rl.T_int,
        cfg.scenario.dt,
        rl.gamma,
        x0=np.asarray(cfg.scenario.x0, float),
    )
    return log0, TrackingPolicy(log0, theta, cfg, gain_to_w_bar(Kb))


def rollout(plant: LtiPlant, policy, x0, r, horizon: float, dt: float) -> Trajectory:
    sched = ScenarioSchedule(horizon, dt, [(0.0, r)])
    return simulate(plant, policy, sched, x0)


# ---------------------------------------------------------------------- episode


class _Monitor:
    """Per-interval bookkeeping of the upper layer."""

    def __init__(self, cfg: EpisodeConfig, stack: PredicateStack):
        self.cfg = cfg
        self.stack = stack
        self.window = SurpriseWindow(cfg.fitness.T)
        self.recent: deque = deque(maxlen=256)
        self.armed_at = 0.0


def run_episode(cfg: EpisodeConfig) -> EpisodeReport:
    """Run one scenario through both layers.

    Raises
    ------
    EpisodeError
        Annotated with the failing stage and time; the original exception
        is kept as ``cause``.
    """
    cfg.validate()
    stage = "setup"
    t_now = 0.0
    try:
        nominal, _ = build_plants(cfg)
        stack = build_stack(cfg)
        fc = cfg.fitness
        dt = cfg.scenario.dt
        s = fc.steps(dt)
        n = nominal.n
        kernel = fitness_kernel(cfg)
        theta = cfg.theta0()

        stage = "initial policy"
        log0, policy = learn_initial_policy(cfg, nominal)

        stage = "offline fitness"
        nominal_gp = None
        library: List[GpPosterior] = []
        if cfg.monitor.enabled:
            nom_traj = simulate(nominal, policy, make_schedule(cfg, with_change=False, x0=np.asarray(cfg.scenario.x0, float)))
            train = td_data(nom_traj.states, nom_traj.setpoints, theta.kernel_vector(), stack, fc, dt)
            nominal_gp = fit_fitness(train, cfg, kernel)
            library = [nominal_gp] + build_base_library(stack, cfg, theta, kernel)
            training = [train]
        current_gp = nominal_gp

        schedule = make_schedule(cfg, x0=episode_x0(cfg))
        sim = Simulator(nominal, schedule)
        monitor = _Monitor(cfg, stack)
        rows: List[dict] = []
        decisions: List[Tuple[float, str]] = []
        adaptations: List[AdaptationRecord] = []
        explore = None
        tv = theta.kernel_vector()
        ring: deque = deque(maxlen=cfg.gp.ring_size)

        while not sim.done:
            t_now = sim.t
            stage = "deploy"
            if explore is None:
                sim.step(policy(sim.x, sim.t, sim.setpoint))
            else:
                sim.step_continuous(explore["u_fn"])
                explore["steps"] += 1
                if explore["steps"] == explore["total"]:
                    stage = "adaptation"
                    policy, theta, current_gp, record = _finish_adaptation(
                        cfg, sim, explore, policy, theta, library, ring, stack, kernel
                    )
                    tv = theta.kernel_vector()
                    adaptations.append(record)
                    monitor.window.reset()
                    monitor.recent.clear()
                    monitor.armed_at = sim.t + cfg.rearm_delay
                    explore = None
            if not cfg.monitor.enabled or sim.k % s:
                continue
            stage = "monitor"
            row, decision = _monitor_step(cfg, sim, monitor, current_gp, library, tv, s, explore is None)
            rows.append(row)
            if decision is None:
                continue
            decisions.append((sim.t, decision.value))
            if decision is Decision.INFER_ONLY:
                stage = "infer"
                recent = _recent_data(monitor, cfg)
                if recent is not None:
                    current_gp = fit_fitness(TdData.concat(training + [recent]), cfg, kernel)
                monitor.armed_at = sim.t + cfg.rearm_delay
            elif decision is Decision.ADAPT and cfg.monitor.adapt:
                explore = _start_exploration(cfg, sim, policy, theta, len(adaptations))
                monitor.armed_at = math.inf
            elif decision is Decision.ADAPT:
                monitor.armed_at = sim.t + cfg.rearm_delay
        traj = sim.trajectory(policy(sim.x, sim.t, sim.setpoint))
        return EpisodeReport(
            traj,
            rows,
            adaptations,
            policy.weights(sim.setpoint),
            theta,
            decisions,
            nominal_gp,
            library,
        )
    except Exception as exc:
        raise EpisodeError(stage, t_now, exc) from exc


def _monitor_step(cfg, sim: Simulator, monitor: _Monitor, gp, library, tv, s: int, may_trigger: bool):
    fc = cfg.fitness
    k = sim.k
    states = np.array(sim.states[k - s : k + 1])
    sps = np.array(sim.setpoints[k - s : k + 1])
    xi = margin_series(states, monitor.stack, sps)
    rm = meta_reward(xi, fc)
    R = discounted_integral(rm, sim.dt, fc.a)
    z_prev = np.concatenate([states[0] - sps[0], tv])
    z_cur = np.concatenate([states[-1] - sps[-1], tv])
    mean, var = gp.predict(np.vstack([z_prev, z_cur]))
    row = {
        "t": sim.t,
        "xi_a": float(xi[-1]),
        "r_m": float(rm[-1]),
        "R_interval": R,
        "fitness_pred_mean": float(mean[1]),
        "fitness_pred_var": float(var[1]),
        "surprise": float("nan"),
        "integral_sp": float("nan"),
        "min_kl": float("nan"),
        "decision": Decision.NO_ACTION.value,
    }
    if not np.all(sps == sps[0]):
        monitor.window.reset()
        monitor.recent.clear()
        return row, None
    sp = float(mean[0] - fc.gamma_T * mean[1] - R)
    row["surprise"] = sp
    monitor.window.push(sim.t - fc.T, sp)
    monitor.recent.append((sim.t - fc.T, z_prev, z_cur, R))
    if not may_trigger or sim.t < monitor.armed_at - 1e-9 or not monitor.window.spans(fc.delta):
        return row, None

    def kl_fn():
        recent = _recent_data(monitor, cfg)
        return library_kl(fit_fitness(recent, cfg), list(library) + [gp], cfg)

    decision, integral, kl = trigger(monitor.window, gp, library, fc, kl_fn=kl_fn)
    row["integral_sp"] = integral
    row["min_kl"] = kl
    row["decision"] = decision.value
    return row, (decision if decision is not Decision.NO_ACTION else None)


def _recent_data(monitor: _Monitor, cfg) -> Optional[TdData]:
    items = [it for it in monitor.recent if it[0] >= monitor.recent[-1][0] - cfg.gp.infer_window + 1e-9]
    if not items:
        return None
    Z = np.vstack([items[0][1]] + [it[2] for it in items])
    pairs = [(i, i + 1) for i in range(len(items))]
    return TdData(Z, pairs, np.array([it[3] for it in items]))


def _start_exploration(cfg, sim: Simulator, policy, theta, count: int) -> dict:
    rl = cfg.rl
    r = sim.setpoint.copy()
    w = policy.weights(r)
    noise = ExplorationNoise.seeded(sim.base.m, 2 * sim.base.n, rl.adapt_noise_amplitude, [cfg.scenario.seed, 3, count])

    def u_fn(x, t):
        return w.control(x, r) + noise(t)

    s_int = steps_per_interval(rl.T_int, sim.dt)
    return {
        "u_fn": u_fn,
        "k0": sim.k,
        "t_trigger": sim.t,
        "steps": 0,
        "total": rl.adapt_N * s_int,
        "s_int": s_int,
        "w_prev": w,
        "setpoint": r,
    }


def rollout_start(cfg, sim: Simulator) -> np.ndarray:
    """Initial state of candidate rollouts.

    ``"maneuver"`` replays the most recent setpoint step from rest, the
    task the nominal fitness GP was trained on; ``"current"`` starts from
    the live state.
    """
    if cfg.sbo.rollout_start == "current":
        return sim.x.copy()
    plan = sim.schedule.setpoint_index_table()
    past = [r for k, r in plan if k <= sim.k]
    return (past[-2] if len(past) > 1 else past[-1]).copy()


def candidate_data(cfg, plant: LtiPlant, w: PolicyWeights, theta: HyperParams, x0, r, stack, dt) -> TdData:
    """TD samples of a simulated rollout, kept only after the settling time."""
    settle = cfg.fitness.t_s if cfg.sbo.settle_time is None else cfg.sbo.settle_time
    traj = rollout(plant, lambda x, t, r_: w.control(x, r_), x0, r, settle + cfg.sbo.eval_horizon, dt)
    k = grid_index(settle, dt)
    return td_data(traj.states[k:], traj.setpoints[k:], theta.kernel_vector(), stack, cfg.fitness, dt)


def _finish_adaptation(cfg, sim: Simulator, explore, policy, theta, library, ring, stack, kernel):
    rl = cfg.rl
    k0, s_int = explore["k0"], explore["s_int"]
    X = np.array(sim.states[k0:])
    U = np.array(sim.inputs[k0:] + [np.atleast_1d(explore["u_fn"](sim.x, sim.t))])
    idx = np.arange(rl.adapt_N)[:, None] * s_int + np.arange(s_int + 1)[None, :]
    fresh = DataLog(X[idx], U[idx], sim.dt, rl.T_int, rl.gamma, (k0 + np.arange(rl.adapt_N) * s_int) * sim.dt, "adapt")
    r_now = sim.setpoint.copy()
    plant_model = sim.plant
    x_now = rollout_start(cfg, sim)
    star = theta.with_setpoint(r_now)
    w_seed = None
    status = "adapted"
    try:
        w_seed, _ = solve_policy(fresh, star, rl.eps, rl.max_iter)
    except NumericalError:
        w_seed, _ = solve_policy(fresh, star, rl.eps, rl.max_iter, explore["w_prev"].w_bar)
    widths = np.asarray(cfg.sbo.hi, float) - np.asarray(cfg.sbo.lo, float)
    fc = cfg.fitness
    probes: Dict[tuple, Tuple[float, Optional[PolicyWeights], Optional[TdData]]] = {}

    def probe(th: HyperParams):
        """Divergence from the library of the rollout under ``th``'s policy."""
        key = tuple(th.decision_vector())
        if key not in probes:
            try:
                w, _ = solve_policy(fresh, th, rl.eps, rl.max_iter, w_seed.w_bar)
                data = candidate_data(cfg, plant_model, w, th, x_now, r_now, stack, sim.dt)
                kl = library_kl(fit_fitness(data, cfg, kernel), library, cfg)
                ring.append(data)
            except (NumericalError, ArithmeticError) as exc:
                log.info("candidate %s rejected: %s", key, exc)
                w, data, kl = None, None, math.inf
            probes[key] = (kl, w, data)
        return probes[key]

    varpi = fc.varpi
    if cfg.sbo.radius_margin is not None:
        varpi = max(varpi, (1.0 + cfg.sbo.radius_margin) * probe(star)[0])
    p_min = default_p_min(varpi) if cfg.sbo.p_min is None else cfg.sbo.p_min

    def evaluate(th: HyperParams) -> float:
        kl = probe(th)[0]
        dist = float(np.linalg.norm((th.decision_vector() - star.decision_vector()) / widths))
        score = score_from_kl(dist, kl, varpi, p_min) if math.isfinite(kl) else p_min - 1.0
        log.debug("candidate %s: kl %.4g, distance %.4g, score %.4g", tuple(th.decision_vector()), kl, dist, score)
        return score

    grid = DomainGrid.build(cfg.sbo.lo, cfg.sbo.hi, cfg.sbo.resolution, cfg.sbo.grid_cap, extra=[star.decision_vector()])
    scfg = SboConfig(
        beta=cfg.sbo.beta,
        p_min=p_min,
        lengthscale_frac=cfg.sbo.lengthscale_frac,
        signal_var=cfg.sbo.signal_var,
        prior_mean=cfg.sbo.prior_mean,
    )
    try:
        best, history = sbo_run(star, evaluate, cfg.sbo.budget, scfg, grid, star)
    except UnsafeSeedError as exc:
        log.warning("adaptation aborted, keeping current hyperparameters: %s", exc)
        best, status = star, "aborted"
        history = [SboRecord(0, star.decision_vector(), evaluate(star), float("nan"), float("nan"), "safe")]
    kl_best, w_best, data_best = probe(best)
    if w_best is None:
        w_best = w_seed
    new_policy = TrackingPolicy(fresh, best, cfg, w_seed.w_bar, first=w_best)
    settle = fc.t_s if cfg.sbo.settle_time is None else cfg.sbo.settle_time
    live = rollout(plant_model, lambda x, t, r: w_best.control(x, r), sim.x, r_now, settle + cfg.sbo.eval_horizon, sim.dt)
    live_data = td_data(live.states, live.setpoints, best.kernel_vector(), stack, fc, sim.dt)
    new_gp = fit_fitness(TdData.concat(list(ring) + [live_data]), cfg, kernel)
    record = AdaptationRecord(explore["t_trigger"], sim.t, theta, best, history, status)
    log.info("adaptation at t=%.3f: %s -> %s (%s)", sim.t, theta, best, status)
    return new_policy, best, new_gp, record
