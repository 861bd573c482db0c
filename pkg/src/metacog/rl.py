"""Off-policy policy iteration for discounted quadratic tracking.

One exploration log recorded under a behaviour policy is reused to learn
the optimal tracking policy for any reward hyperparameters. For a setpoint
``r`` the learner works in the coordinates ``z = [x - r; 1]``: the value
function is ``z' P z`` and the policy is ``u = W' z``, so the last row of
``W`` is the feedforward term. Along each recorded interval
``[t, t + T]`` the Bellman identity of the current policy ``u_k = W_k' z``
reads::

    e^{-gT} V(z(t+T)) - V(z(t)) + 2 int e^{-g(s-t)} (u - u_k)' R W_{k+1}' z ds
        = -int e^{-g(s-t)} (z' Qbar z + u_k' R u_k) ds

which is linear in the unknowns ``(P, W_{k+1})``. Stacking intervals and
solving by least squares gives one policy-iteration step.

The constant coordinate replaces the raw setpoint block of the augmented
state ``[x - r; r]``: with ``r`` fixed over a log, the raw block only ever
appears through this constant, and its quadratic monomials would be
collinear columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericalError, RankDeficientError
from .params import HyperParams
from .sim import LtiPlant, ScenarioSchedule, Simulator


# ----------------------------------------------------------------- exploration


@dataclass(frozen=True, eq=False)
class ExplorationNoise:
    """Per-input sum of sinusoids, peak magnitude at most ``amplitude``."""

    amplitude: float
    freqs: np.ndarray
    phases: np.ndarray

    @classmethod
    def seeded(cls, m: int, n_sines: int, amplitude: float, seed, fmin: float = 0.1, fmax: float = 5.0):
        rng = np.random.default_rng(seed)
        freqs = rng.uniform(fmin, fmax, size=(m, n_sines))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(m, n_sines))
        return cls(float(amplitude), freqs, phases)

    def __call__(self, t: float) -> np.ndarray:
        s = np.sin(2.0 * np.pi * self.freqs * t + self.phases)
        return self.amplitude * s.mean(axis=1)

    def describe(self) -> str:
        return f"sines amplitude={self.amplitude!r} count={self.freqs.shape[1]}"


# ------------------------------------------------------------------------ basis


def basis_sizes(n: int, m: int) -> Tuple[int, int, int]:
    """``(l1, l2, l1 + m l2)`` for a state of dimension ``n``."""
    d = n + 1
    l1 = d * (d + 1) // 2
    return l1, d, l1 + m * d


def required_intervals(n: int, m: int) -> int:
    return basis_sizes(n, m)[2]


def _triu(d: int):
    return np.triu_indices(d)


def phi1(Z: np.ndarray) -> np.ndarray:
    """Quadratic monomials ``z_i z_j`` (``i <= j``) along the last axis."""
    iu = _triu(Z.shape[-1])
    return Z[..., iu[0]] * Z[..., iu[1]]


def lift(x: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``[x - r; 1]`` along the last axis."""
    e = np.asarray(x, dtype=float) - np.asarray(r, dtype=float)
    return np.concatenate([e, np.ones(e.shape[:-1] + (1,))], axis=-1)


@dataclass(frozen=True, eq=False)
class PolicyWeights:
    """Value weights ``w_v`` (length l1) and policy matrix ``w_bar`` (l2 x m)."""

    w_v: np.ndarray
    w_bar: np.ndarray

    @property
    def d(self) -> int:
        return self.w_bar.shape[0]

    @property
    def n(self) -> int:
        return self.d - 1

    @property
    def P(self) -> np.ndarray:
        """Symmetric matrix with ``z' P z = w_v . phi1(z)``."""
        d = self.d
        iu = _triu(d)
        P = np.zeros((d, d))
        P[iu] = self.w_v
        off = P - np.diag(np.diag(P))
        return np.diag(np.diag(P)) + 0.5 * (off + off.T)

    @property
    def gain(self) -> np.ndarray:
        """Feedback gain ``K`` on the tracking error, ``u = -K e + ff``."""
        return -self.w_bar[: self.n].T

    @property
    def feedforward(self) -> np.ndarray:
        return self.w_bar[self.n]

    def control(self, x, r) -> np.ndarray:
        return self.w_bar.T @ lift(x, r)


# --------------------------------------------------------------------- data log


@dataclass(frozen=True, eq=False)
class DataLog:
    """Raw samples of ``N`` consecutive intervals.

    Attributes
    ----------
    xs : ndarray, shape (N, s + 1, n)
    us : ndarray, shape (N, s + 1, m)
        Input at each sample (behaviour plus exploration).
    dt, T_int, gamma : float
    t_starts : ndarray, shape (N,)
    exploration : str
    """

    xs: np.ndarray
    us: np.ndarray
    dt: float
    T_int: float
    gamma: float
    t_starts: np.ndarray
    exploration: str = ""

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        us = np.asarray(self.us, dtype=float)
        if xs.ndim != 3 or us.ndim != 3 or xs.shape[:2] != us.shape[:2]:
            raise ValueError("xs and us must be (N, samples, dim) arrays of matching length")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "us", us)
        object.__setattr__(self, "t_starts", np.asarray(self.t_starts, dtype=float))

    @property
    def N(self) -> int:
        return self.xs.shape[0]

    @property
    def n(self) -> int:
        return self.xs.shape[2]

    @property
    def m(self) -> int:
        return self.us.shape[2]

    @property
    def samples(self) -> int:
        return self.xs.shape[1]

    def subset(self, idx) -> "DataLog":
        idx = np.asarray(idx, dtype=int)
        return DataLog(self.xs[idx], self.us[idx], self.dt, self.T_int, self.gamma, self.t_starts[idx], self.exploration)

    def head(self, k: int) -> "DataLog":
        return self.subset(np.arange(k))

    def to_text(self) -> str:
        """Structured text with a header line and one row per sample."""
        lines = [
            "metacog-datalog 1",
            f"n {self.n}",
            f"m {self.m}",
            f"dt {self.dt!r}",
            f"gamma {self.gamma!r}",
            f"N {self.N}",
            f"T_int {self.T_int!r}",
            f"samples {self.samples}",
            f"exploration {self.exploration}",
        ]
        for i in range(self.N):
            lines.append(f"interval {i} {float(self.t_starts[i])!r}")
            for x, u in zip(self.xs[i], self.us[i]):
                lines.append(" ".join(repr(float(v)) for v in np.concatenate([x, u])))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DataLog":
        lines = text.splitlines()
        head = {}
        for ln in lines[:9]:
            key, _, val = ln.partition(" ")
            head[key] = val
        if head.get("metacog-datalog") != "1":
            raise ValueError("not a version-1 data log")
        n, m, N, S = (int(head[k]) for k in ("n", "m", "N", "samples"))
        xs = np.empty((N, S, n))
        us = np.empty((N, S, m))
        t0 = np.empty(N)
        pos = 9
        for i in range(N):
            t0[i] = float(lines[pos].split()[2])
            pos += 1
            block = np.array([[float(v) for v in lines[pos + k].split()] for k in range(S)])
            xs[i], us[i] = block[:, :n], block[:, n:]
            pos += S
        return cls(xs, us, float(head["dt"]), float(head["T_int"]), float(head["gamma"]), t0, head["exploration"])


def steps_per_interval(T_int: float, dt: float) -> int:
    s = T_int / dt
    k = int(round(s))
    if k < 1 or abs(s - k) > 1e-9 * s:
        raise ValueError(f"T_int = {T_int} is not an integer multiple of dt = {dt}")
    return k


def record_intervals(sim: Simulator, u_fn: Callable, N: int, T_int: float, gamma: float, exploration: str = "") -> DataLog:
    """Advance ``sim`` over ``N`` intervals with a smooth input ``u_fn(x, t)``.

    The input is evaluated at every RK4 stage, so recorded samples are
    exact values of a smooth signal and high-order quadrature applies.
    """
    s = steps_per_interval(T_int, sim.dt)
    k0 = sim.k
    xs = [sim.x.copy()]
    us = []
    for _ in range(N * s):
        us.append(np.atleast_1d(u_fn(sim.x, sim.t)))
        sim.step_continuous(u_fn)
        xs.append(sim.x.copy())
    us.append(np.atleast_1d(u_fn(sim.x, sim.t)))
    X = np.array(xs)
    U = np.array(us)
    idx = np.arange(N)[:, None] * s + np.arange(s + 1)[None, :]
    t_starts = (k0 + np.arange(N) * s) * sim.dt
    return DataLog(X[idx], U[idx], sim.dt, T_int, gamma, t_starts, exploration)


def collect_data(
    plant: LtiPlant,
    behavior: Callable,
    noise: Optional[Callable],
    N: int,
    T_int: float,
    dt: float,
    gamma: float,
    x0=None,
    t0: float = 0.0,
    check_count: bool = True,
) -> DataLog:
    """Record an exploration log on ``plant``.

    Parameters
    ----------
    behavior : callable
        Stabilizing feedback ``behavior(x, t) -> u``.
    noise : callable or None
        Exploration signal ``noise(t) -> u`` added to the behaviour input.
    N : int
        Number of intervals; must reach ``l1 + m l2`` unless
        ``check_count`` is False.

    Raises
    ------
    ValueError
        If ``N`` is below the required count.
    SimulationDiverged
        If the state norm exceeds 1e6.
    """
    need = required_intervals(plant.n, plant.m)
    if check_count and N < need:
        raise ValueError(f"N = {N} intervals is below the required count l1 + m*l2 = {need}")
    horizon = N * T_int
    sched = ScenarioSchedule(horizon + t0, dt, [(0.0, np.zeros(plant.n))], x0=x0)
    sim = Simulator(plant, sched, x0)
    sim.k = int(round(t0 / dt))

    def u_fn(x, t):
        u = np.atleast_1d(behavior(x, t))
        return u + noise(t) if noise is not None else u

    desc = noise.describe() if hasattr(noise, "describe") else ("none" if noise is None else "custom")
    return record_intervals(sim, u_fn, N, T_int, gamma, desc)


# ------------------------------------------------------------------- regressors


def quadrature_weights(s: int, dt: float, gamma: float) -> np.ndarray:
    """Composite Simpson weights (trapezoid for odd ``s``) times the discount."""
    if s % 2 == 0:
        w = np.ones(s + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= dt / 3.0
    else:
        w = np.full(s + 1, dt)
        w[[0, -1]] = 0.5 * dt
    return w * np.exp(-gamma * dt * np.arange(s + 1))


def build_regressors(log: DataLog, theta: HyperParams, w_bar_k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares system of one policy-iteration step.

    Returns
    -------
    Theta : ndarray, shape (N, l1 + m l2)
        ``[delta_phi | policy block]`` per interval.
    Xi : ndarray, shape (N,)
        Negative discounted running cost of the current policy.
    """
    n, m = log.n, log.m
    if len(theta.q_diag) != n or len(theta.r_diag) != m:
        raise ValueError("hyperparameters do not match the log dimensions")
    d = n + 1
    W = np.asarray(w_bar_k, dtype=float).reshape(d, m)
    Z = lift(log.xs, theta.setpoint)
    s = log.samples - 1
    w = quadrature_weights(s, log.dt, log.gamma)
    decay = math.exp(-log.gamma * s * log.dt)
    delta = decay * phi1(Z[:, -1]) - phi1(Z[:, 0])
    Uk = Z @ W
    R = theta.R
    Qbar = np.zeros((d, d))
    Qbar[:n, :n] = theta.Q
    pol = 2.0 * np.einsum("k,nkj,nki->nji", w, Z, (log.us - Uk) @ R).reshape(log.N, d * m)
    cost = np.einsum("k,nki,ij,nkj->n", w, Z, Qbar, Z) + np.einsum("k,nki,ij,nkj->n", w, Uk, R, Uk)
    return np.hstack([delta, pol]), -cost


def policy_iteration_step(Theta: np.ndarray, Xi: np.ndarray, n: Optional[int] = None, m: Optional[int] = None, max_cond: float = 1e10) -> PolicyWeights:
    """Solve the stacked Bellman equations by orthogonal least squares.

    Columns are scaled to unit norm before the SVD; the condition number
    of the scaled matrix must stay below ``max_cond``.

    Raises
    ------
    RankDeficientError
        With the numerical rank and the number of rows.
    """
    N, p = Theta.shape
    if n is None or m is None:
        # p = (n+1)(n+2)/2 + m (n+1); infer with m = 1 unless given
        m = 1 if m is None else m
        d = next(dd for dd in range(1, 64) if dd * (dd + 1) // 2 + m * dd == p)
        n = d - 1
    d = n + 1
    l1 = d * (d + 1) // 2
    if l1 + m * d != p:
        raise ValueError("regressor width does not match the basis")
    norms = np.linalg.norm(Theta, axis=0)
    norms[norms == 0] = 1.0
    S = Theta / norms
    sv = np.linalg.svd(S, compute_uv=False)
    tol = sv[0] * max(N, p) * np.finfo(float).eps if sv.size else 0.0
    rank = int(np.sum(sv > tol))
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else float("inf")
    if N < p or rank < p or cond > max_cond:
        raise RankDeficientError(rank, N, p, cond)
    sol, *_ = np.linalg.lstsq(S, Xi, rcond=None)
    sol = sol / norms
    return PolicyWeights(sol[:l1].copy(), sol[l1:].reshape(d, m).copy())


class NonConvergenceError(NumericalError):
    def __init__(self, changes: Sequence[float]):
        super().__init__(
            "policy iteration did not converge; value-weight changes: "
            + ", ".join(f"{c:.3g}" for c in changes)
        )
        self.changes = list(changes)


def solve_policy(
    log: DataLog,
    theta: HyperParams,
    eps: float = 1e-6,
    max_iter: int = 30,
    w_bar0: Optional[np.ndarray] = None,
    callback: Optional[Callable[[int, PolicyWeights], None]] = None,
) -> Tuple[PolicyWeights, int]:
    """Iterate evaluation and improvement on a frozen log.

    Parameters
    ----------
    eps : float
        Stop when the value weights change by at most ``eps`` (2-norm).
    w_bar0 : ndarray, optional
        Initial evaluated policy; zero by default. Must be stabilizing
        under the discount when the open loop is not.

    Returns
    -------
    weights : PolicyWeights
    iterations : int
    """
    n, m = log.n, log.m
    d = n + 1
    W = np.zeros((d, m)) if w_bar0 is None else np.asarray(w_bar0, dtype=float).reshape(d, m)
    prev = np.zeros(d * (d + 1) // 2)
    changes = []
    for it in range(1, max_iter + 1):
        Theta, Xi = build_regressors(log, theta, W)
        weights = policy_iteration_step(Theta, Xi, n, m)
        if callback is not None:
            callback(it, weights)
        change = float(np.linalg.norm(weights.w_v - prev))
        changes.append(change)
        prev = weights.w_v
        W = weights.w_bar
        if change <= eps:
            return weights, it
    raise NonConvergenceError(changes)


def bellman_residuals(log: DataLog, theta: HyperParams, weights: PolicyWeights):
    """Per-interval residual of the Bellman identity at a fixed point.

    Returns
    -------
    residual : ndarray, shape (N,)
    scale : ndarray, shape (N,)
        Sum of absolute values of the identity's terms.
    """
    Theta, Xi = build_regressors(log, theta, weights.w_bar)
    sol = np.concatenate([weights.w_v, weights.w_bar.ravel()])
    terms = Theta * sol
    return terms.sum(axis=1) - Xi, np.abs(terms).sum(axis=1) + np.abs(Xi)


def gain_to_w_bar(K: np.ndarray, ff=None) -> np.ndarray:
    """Policy matrix for ``u = -K e + ff``."""
    K = np.atleast_2d(K)
    m, n = K.shape
    W = np.zeros((n + 1, m))
    W[:n] = -K.T
    if ff is not None:
        W[n] = ff
    return W


# ----------------------------------------------------------------------- oracle


def lyapunov_vec(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A' P + P A + Q = 0`` through the Kronecker (vectorised) form."""
    n = A.shape[0]
    I = np.eye(n)
    L = np.kron(I, A.T) + np.kron(A.T, I)
    P = np.linalg.solve(L, -Q.reshape(-1, order="F")).reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def _stabilizing_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Bass-type gain ``K = B' Z^-1`` with ``(A + bI) Z + Z (A + bI)' = 2 B B'``."""
    b = np.linalg.norm(A, 2) + 1.0
    Ab = A + b * np.eye(A.shape[0])
    Z = lyapunov_vec(-Ab.T, 2.0 * B @ B.T)
    try:
        return np.linalg.solve(Z, B).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("no stabilizing initial gain; supply K0") from exc


def riccati_oracle(
    A,
    B,
    Q,
    R,
    gamma: float = 0.0,
    K0=None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> Tuple[np.ndarray, np.ndarray]:
    """Discounted LQR by Kleinman iteration on ``A - (gamma/2) I``.

    Returns
    -------
    P : ndarray
        Stabilizing solution of the shifted Riccati equation.
    K : ndarray
        ``R^-1 B' P``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    As = A - 0.5 * gamma * np.eye(n)
    if K0 is None:
        K = np.zeros((B.shape[1], n)) if np.all(np.linalg.eigvals(As).real < 0) else _stabilizing_gain(As, B)
    else:
        K = np.atleast_2d(np.asarray(K0, dtype=float)).reshape(B.shape[1], n)
    Rinv_Bt = np.linalg.solve(R, B.T)
    P_prev = None
    for _ in range(max_iter):
        Acl = As - B @ K
        if np.any(np.linalg.eigvals(Acl).real >= 0):
            raise NumericalError("Kleinman iterate is not stabilizing; pair may not be stabilizable")
        P = lyapunov_vec(Acl, Q + K.T @ R @ K)
        if np.min(np.linalg.eigvalsh(P)) < -1e-9 * max(1.0, np.abs(P).max()):
            raise NumericalError("Lyapunov solution is not positive semidefinite")
        K = Rinv_Bt @ P
        if P_prev is not None and np.linalg.norm(P - P_prev) <= tol:
            return P, K
        P_prev = P
    raise NumericalError("Kleinman iteration did not converge")
