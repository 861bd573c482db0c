"""Meta-rewards, fitness, surprise and the adaptation trigger."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .gp import GpPosterior, gp_kl, shift_inducing
from .stl import PredicateStack, robustness_matrix, smooth_conjunction
from .trajectory import Trajectory


@dataclass(frozen=True)
class FitnessConfig:
    """Monitor constants.

    Attributes
    ----------
    a : float
        Fitness discount rate (1/s).
    T : float
        TD sampling interval (s).
    beta : float
        Threshold on the integrated surprise.
    delta : float
        Surprise integration window (s).
    varpi : float
        KL threshold.
    eps : float
        Tracking envelope of the liveness predicate.
    t_s : float
        Expected settling time (s).
    rm_cap : float
        Meta-reward substituted when the smooth margin is not positive.
    td_discount : {"discounted", "literal"}
    """

    a: float = 0.5
    T: float = 0.1
    beta: float = 0.1
    delta: float = 0.5
    varpi: float = 1.0
    eps: float = 0.3
    t_s: float = 3.0
    rm_cap: float = 1e6
    td_discount: str = "discounted"

    def __post_init__(self):
        for name in ("a", "T", "beta", "delta", "varpi", "eps", "t_s", "rm_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"fitness.{name} must be positive")
        if self.td_discount not in ("discounted", "literal"):
            raise ValueError("td_discount must be 'discounted' or 'literal'")

    @property
    def gamma_T(self) -> float:
        """Successor weight of the TD relation."""
        return math.exp(-self.a * self.T) if self.td_discount == "discounted" else 1.0

    def steps(self, dt: float) -> int:
        """Number of simulation steps per TD interval."""
        s = self.T / dt
        k = int(round(s))
        if k < 1 or abs(s - k) > 1e-9 * s:
            raise ValueError(f"T = {self.T} is not an integer multiple of dt = {dt}")
        return k


def meta_reward(xi_a, cfg: FitnessConfig):
    """``2 log(1 + 1/xi)`` for positive margins, ``rm_cap`` otherwise.

    Positive-margin values are also limited to ``rm_cap`` so that a
    violation never scores below a near-violation.
    """
    xi = np.asarray(xi_a, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("xi_a must be finite")
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = 2.0 * np.log1p(1.0 / np.where(xi > 0, xi, 1.0))
    out = np.where(xi > 0, np.minimum(pos, cfg.rm_cap), cfg.rm_cap)
    return float(out) if out.ndim == 0 else out


def margin_series(states, stack: PredicateStack, setpoints=None) -> np.ndarray:
    """Smooth conjunction of all predicate margins along a state sequence."""
    return smooth_conjunction(robustness_matrix(stack, states, setpoints))


def reward_series(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig) -> np.ndarray:
    """Meta-reward at every sample; per-sample setpoints take precedence."""
    return meta_reward(margin_series(traj.states, stack, traj.setpoints), cfg)


def _trapezoid(y: np.ndarray, dt: float) -> float:
    return float(dt * (np.sum(y) - 0.5 * (y[0] + y[-1])))


def discounted_integral(rm: np.ndarray, dt: float, a: float) -> float:
    """Trapezoid of ``exp(-a (tau - tau_0)) rm(tau)`` over the samples."""
    w = np.exp(-a * dt * np.arange(len(rm)))
    return _trapezoid(w * rm, dt)


def integrated_reward(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig, i: int) -> float:
    """Discounted meta-reward over interval ``[t_{i-1}, t_i]`` (``i >= 1``)."""
    s = cfg.steps(traj.dt)
    lo, hi = (i - 1) * s, i * s
    if i < 1 or hi >= len(traj):
        raise ValueError(f"interval {i} is not fully sampled")
    rm = meta_reward(margin_series(traj.states[lo : hi + 1], stack, None if traj.setpoints is None else traj.setpoints[lo : hi + 1]), cfg)
    return discounted_integral(rm, traj.dt, cfg.a)


class FitnessValue(NamedTuple):
    value: float
    truncated: bool


def fitness_direct(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig, t: float) -> FitnessValue:
    """Discounted meta-reward from ``t`` to the end of the trajectory.

    ``truncated`` is set when the remaining horizon is shorter than
    ``10 / a``, where the neglected tail may matter.
    """
    i = traj.index_of(t)
    rm = reward_series(traj.slice(i, len(traj)), stack, cfg)
    value = discounted_integral(rm, traj.dt, cfg.a) if len(rm) > 1 else 0.0
    horizon = (len(traj) - 1 - i) * traj.dt
    return FitnessValue(value, horizon < 10.0 / cfg.a)


def surprise(gp: GpPosterior, z_t, z_tT, R: float, cfg: FitnessConfig) -> float:
    """TD residual ``nu(z_t) - g nu(z_{t+T}) - R`` under the current GP."""
    m, _ = gp.predict(np.vstack([np.ravel(z_t), np.ravel(z_tT)]))
    return float(m[0] - cfg.gamma_T * m[1] - R)


class SurpriseWindow:
    """Ring buffer of surprise samples spaced exactly ``T`` apart."""

    def __init__(self, T: float, maxlen: int = 64):
        self.T = float(T)
        self._buf = deque(maxlen=maxlen)

    def push(self, t: float, sp: float) -> None:
        if self._buf:
            gap = t - self._buf[-1][0]
            if abs(gap - self.T) > 1e-9 * max(1.0, abs(t)):
                raise ValueError(f"surprise samples must be {self.T} s apart, got {gap}")
        self._buf.append((float(t), float(sp)))

    def reset(self) -> None:
        self._buf.clear()

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def span(self) -> float:
        return self._buf[-1][0] - self._buf[0][0] if self._buf else 0.0

    def spans(self, delta: float) -> bool:
        return self.span >= delta - 1e-9

    def integral(self, delta: float, absolute: bool = True) -> float:
        """Trapezoid of (|SP| by default) over the most recent ``delta`` seconds."""
        if not self.spans(delta):
            raise ValueError("surprise window spans less than delta")
        k = int(round(delta / self.T)) + 1
        vals = np.array([sp for _, sp in list(self._buf)[-k:]])
        if absolute:
            vals = np.abs(vals)
        return _trapezoid(vals, self.T)


class Decision(enum.Enum):
    NO_ACTION = "NoAction"
    INFER_ONLY = "InferOnly"
    ADAPT = "Adapt"


def kl_to_base(current: GpPosterior, base: GpPosterior, state_dims: Optional[Sequence[int]] = None) -> float:
    """Divergence of ``current`` from ``base`` on ``current``'s inducing states.

    The base is projected onto the inducing inputs of ``current`` with its
    own hyperparameter coordinates kept, so both sides are compared on the
    same states. For a stationary hyperparameter kernel factor the two
    Gram matrices coincide, and the projected base is relabelled onto the
    inputs of ``current``.
    """
    targets = current.inducing.copy()
    if state_dims is not None and base.size:
        extra = [d for d in range(targets.shape[1]) if d not in set(state_dims)]
        targets[:, extra] = base.inducing[0, extra]
    shifted = shift_inducing(base, targets)
    relabelled = GpPosterior(
        current.inducing, shifted.alpha, shifted.C, shifted.kernel, shifted.noise_w2, shifted.prior_mean
    )
    return gp_kl(current, relabelled)


def min_kl(current: GpPosterior, bases: Iterable[GpPosterior], state_dims=None) -> float:
    return min(kl_to_base(current, b, state_dims) for b in bases)


def trigger(
    window: SurpriseWindow,
    current_gp: Optional[GpPosterior],
    bases: Sequence[GpPosterior],
    cfg: FitnessConfig,
    kl_fn: Optional[Callable[[], float]] = None,
    state_dims=None,
):
    """Two-condition adaptation trigger.

    Adapt when the integrated absolute surprise over the last ``delta``
    seconds reaches ``beta`` and every base GP is farther than ``varpi``;
    InferOnly when only the surprise condition holds.

    Parameters
    ----------
    kl_fn : callable, optional
        Returns the minimum divergence; overrides the computation from
        ``current_gp`` and ``bases``. Called only when surprise is high.

    Returns
    -------
    decision : Decision
    integral : float
    kl : float
        NaN when the divergence was not needed.
    """
    if not window.spans(cfg.delta):
        raise ValueError("surprise window underfilled")
    integral = window.integral(cfg.delta)
    if integral < cfg.beta:
        return Decision.NO_ACTION, integral, float("nan")
    kl = kl_fn() if kl_fn is not None else min_kl(current_gp, bases, state_dims)
    if kl > cfg.varpi:
        return Decision.ADAPT, integral, kl
    return Decision.INFER_ONLY, integral, kl
