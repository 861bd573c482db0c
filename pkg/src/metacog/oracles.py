"""Independent reference computations used by ``metacog oracle`` and the tests.

Each oracle takes a different route from the production code: window
scans instead of sliding-extremum passes, dense inverses instead of
Cholesky coefficient forms, and a model-based Riccati iteration instead of
learning from data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Mapping, Sequence, Tuple

import numpy as np

from .params import HyperParams
from .rl import ExplorationNoise, bellman_residuals, collect_data, gain_to_w_bar, riccati_oracle, solve_policy
from .sim import LtiPlant, VehicleParams, vehicle_matrices
from .stl import (
    Always,
    And,
    Eventually,
    Formula,
    Not,
    Or,
    Pred,
    TrueF,
    Until,
    parse_formula,
)

# ------------------------------------------------------------------ STL


def _bound(x: float, dt: float, lower: bool) -> int:
    s = x / dt
    r = round(s)
    if abs(s - r) < 1e-9 * max(1.0, abs(s)):
        return int(r)
    return math.ceil(s) if lower else math.floor(s)


def brute_robustness(f: Formula, env: Mapping[str, np.ndarray], L: int, dt: float) -> np.ndarray:
    """Robustness by explicit window scans, one index at a time."""

    @lru_cache(maxsize=None)
    def length(g) -> int:
        if isinstance(g, (TrueF, Pred)):
            return L
        if isinstance(g, Not):
            return length(g.arg)
        if isinstance(g, (And, Or)):
            return min(length(g.left), length(g.right))
        k = length(g.arg) if isinstance(g, (Always, Eventually)) else min(length(g.left), length(g.right))
        a, b = _bound(g.a, dt, True), _bound(g.b, dt, False)
        return 0 if (a >= k or b < a) else k - a

    @lru_cache(maxsize=None)
    def rho(g, i: int) -> float:
        if isinstance(g, TrueF):
            return math.inf
        if isinstance(g, Pred):
            v = np.broadcast_to(np.asarray(g.value(env), dtype=float), (L,))
            return float(v[i])
        if isinstance(g, Not):
            return -rho(g.arg, i)
        if isinstance(g, And):
            return min(rho(g.left, i), rho(g.right, i))
        if isinstance(g, Or):
            return max(rho(g.left, i), rho(g.right, i))
        a, b = _bound(g.a, dt, True), _bound(g.b, dt, False)
        if isinstance(g, (Always, Eventually)):
            k = length(g.arg)
            vals = [rho(g.arg, j) for j in range(i + a, min(i + b, k - 1) + 1)]
            return min(vals) if isinstance(g, Always) else max(vals)
        k = min(length(g.left), length(g.right))
        best = -math.inf
        for j in range(i + a, min(i + b, k - 1) + 1):
            guard = min(rho(g.left, l) for l in range(i, j + 1))
            best = max(best, min(rho(g.right, j), guard))
        return best

    return np.array([rho(f, i) for i in range(length(f))])


def random_formula_text(rng: np.random.Generator, depth: int, names: Sequence[str] = ("x1", "x2"), max_bound: int = 8) -> str:
    """Random formula text of nesting depth at most ``depth`` (unit sample time)."""
    if depth <= 1 or rng.random() < 0.2:
        a = names[rng.integers(len(names))]
        c = round(float(rng.uniform(-1.0, 1.0)), 3)
        op = ["<", ">", "<=", ">="][rng.integers(4)]
        if rng.random() < 0.3:
            b = names[rng.integers(len(names))]
            return f"{a} - {b} {op} {c}"
        return f"{a} {op} {c}"
    kind = rng.integers(6)
    sub = lambda: random_formula_text(rng, depth - 1, names, max_bound)
    lo = int(rng.integers(0, max_bound))
    hi = lo + int(rng.integers(0, max_bound))
    if kind == 0:
        return f"!({sub()})"
    if kind == 1:
        return f"({sub()}) & ({sub()})"
    if kind == 2:
        return f"({sub()}) | ({sub()})"
    if kind == 3:
        return f"G[{lo},{hi}]({sub()})"
    if kind == 4:
        return f"F[{lo},{hi}]({sub()})"
    return f"(({sub()}) U[{lo},{hi}] ({sub()}))"


@dataclass
class RobustnessCase:
    text: str
    signals: dict
    max_error: float


def robustness_cases(n_cases: int = 100, L: int = 50, depth: int = 4, seed: int = 0) -> List[RobustnessCase]:
    """Production robustness against the brute-force scan on random inputs."""
    from .stl import robustness_signal
    from .trajectory import Trajectory

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cases):
        text = random_formula_text(rng, depth)
        f = parse_formula(text)
        states = rng.uniform(-1.5, 1.5, size=(L, 2))
        traj = Trajectory(0.0, 1.0, states)
        fast = robustness_signal(f, traj)
        slow = brute_robustness(f, traj.channels(), L, 1.0)
        if fast.shape != slow.shape:
            err = math.inf
        elif fast.size == 0:
            err = 0.0
        else:
            same = (fast == slow) | (np.isinf(fast) & np.isinf(slow) & (np.sign(fast) == np.sign(slow)))
            err = 0.0 if same.all() else float(np.max(np.abs(fast[~same] - slow[~same])))
        out.append(RobustnessCase(text, {"x1": states[:, 0], "x2": states[:, 1]}, err))
    return out


# ------------------------------------------------------------------- GP


def dense_gp_posterior(X, y, kernel: Callable, w2: float, prior_mean: float, Q) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance through an explicit matrix inverse."""
    X = np.atleast_2d(X)
    Q = np.atleast_2d(Q)
    Kinv = np.linalg.inv(kernel(X, X) + w2 * np.eye(len(X)))
    Kq = kernel(Q, X)
    mean = prior_mean + Kq @ Kinv @ (np.asarray(y, float) - prior_mean)
    var = np.diag(kernel(Q, Q)) - np.einsum("ij,jk,ik->i", Kq, Kinv, Kq)
    return mean, var


def dense_gptd_posterior(X, R, pairs, g: float, kernel: Callable, w2: float, prior_mean: float, Q):
    """Posterior of values observed through ``f(z_i) - g f(z_j) = R``."""
    X = np.atleast_2d(X)
    H = np.zeros((len(pairs), len(X)))
    for row, (i, j) in enumerate(pairs):
        H[row, i] += 1.0
        H[row, j] -= g
    K = kernel(X, X)
    S = H @ K @ H.T + w2 * np.eye(len(pairs))
    resid = np.asarray(R, float) - H @ np.full(len(X), prior_mean)
    Kq = kernel(np.atleast_2d(Q), X) @ H.T
    Sinv = np.linalg.inv(S)
    mean = prior_mean + Kq @ Sinv @ resid
    var = np.diag(kernel(np.atleast_2d(Q), np.atleast_2d(Q))) - np.einsum("ij,jk,ik->i", Kq, Sinv, Kq)
    return mean, var


def gaussian_kl(m0, S0, m1, S1) -> float:
    """``KL(N(m0, S0) || N(m1, S1))`` by the textbook formula."""
    m0, m1 = np.asarray(m0, float), np.asarray(m1, float)
    S1inv = np.linalg.inv(S1)
    d = m1 - m0
    k = len(m0)
    _, ld0 = np.linalg.slogdet(S0)
    _, ld1 = np.linalg.slogdet(S1)
    return 0.5 * (np.trace(S1inv @ S0) + d @ S1inv @ d - k + ld1 - ld0)


def gp_cases(n_cases: int = 5, n_points: int = 50, seed: int = 0) -> List[float]:
    """Max posterior-mean error of ``gp_predict`` against the dense solve."""
    from .gp import SquaredExponential, gp_regression

    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        X = rng.uniform(-2, 2, size=(n_points, 2))
        y = np.sin(X[:, 0]) + 0.3 * X[:, 1] + 0.05 * rng.standard_normal(n_points)
        kern = SquaredExponential([0.7, 1.1], 1.3)
        Q = rng.uniform(-2.5, 2.5, size=(40, 2))
        gp = gp_regression(X, y, kern, 0.01, 0.2)
        m, v = gp.predict(Q)
        md, vd = dense_gp_posterior(X, y, kern, 0.01, 0.2, Q)
        errs.append(float(max(np.max(np.abs(m - md)), np.max(np.abs(v - vd)))))
    return errs


# -------------------------------------------------------------- Riccati


@dataclass
class RiccatiCase:
    name: str
    rel_error: float
    iterations: int
    residual: float


def scalar_benchmark_log(seed: int = 1, N: int = 12):
    """``xdot = x + u`` explored around the stabilizing feedback ``u = -2x``."""
    plant = LtiPlant([[1.0]], [[1.0]], "scalar")
    noise = ExplorationNoise.seeded(1, 4, 0.5, seed)
    log = collect_data(plant, lambda x, t: -2.0 * x, noise, N, 0.1, 1e-3, 0.2, x0=[0.5])
    return plant, log


def riccati_cases(q0=(10.0, 10.0, 10.0, 10.0), r0=(2.0,), gamma: float = 0.1, seed: int = 2) -> List[RiccatiCase]:
    """Learned gains against the model-based iteration."""
    out = []
    plant, log = scalar_benchmark_log()
    _, held = scalar_benchmark_log(seed=seed + 100)
    th = HyperParams([1.0], [1.0], [0.0])
    w, it = solve_policy(log, th, 1e-9, 30, gain_to_w_bar([[2.0]]))
    _, K = riccati_oracle(plant.A, plant.B, th.Q, th.R, 0.2)
    res, sc = bellman_residuals(held, th, w)
    out.append(RiccatiCase("scalar", float(np.linalg.norm(w.gain - K) / np.linalg.norm(K)), it, float(np.max(np.abs(res) / (1 + sc)))))

    veh = vehicle_matrices(VehicleParams())
    Kb = np.array([[0.3, 2.0, 0.0, 0.0]])
    r = np.array([1.0, 0.0, 0.0, 0.0])

    def vehicle_log(s):
        noise = ExplorationNoise.seeded(1, 8, 0.1, s)
        return collect_data(veh, lambda x, t: -Kb @ (x - r), noise, 40, 0.05, 1e-3, gamma, x0=[1.0, 0.0, 0.0, 0.0])

    vlog, held = vehicle_log(seed), vehicle_log(seed + 100)
    th = HyperParams(q0, r0, r)
    w, it = solve_policy(vlog, th, 1e-8, 30, gain_to_w_bar(Kb))
    _, K = riccati_oracle(veh.A, veh.B, th.Q, th.R, gamma)
    res, sc = bellman_residuals(held, th, w)
    out.append(RiccatiCase("vehicle", float(np.linalg.norm(w.gain - K) / np.linalg.norm(K)), it, float(np.max(np.abs(res) / (1 + sc)))))
    return out
