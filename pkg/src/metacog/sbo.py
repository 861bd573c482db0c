"""Survival score and safe Bayesian optimization over a finite grid.

The optimizer maximizes the survival score ``P(theta)`` while only
evaluating points whose GP lower confidence bound clears ``p_min``.
Candidates are drawn from the potential maximizers and the expanders of
the current safe set, picking the one with the widest confidence interval.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .fitness import min_kl
from .gp import GpPosterior, SquaredExponential, gp_regression
from .params import HyperParams

log = logging.getLogger(__name__)

__all__ = [
    "HyperParams",
    "DomainGrid",
    "SboConfig",
    "SboState",
    "SboRecord",
    "UnsafeSeedError",
    "default_p_min",
    "score_from_kl",
    "survival_score",
    "fit_score_gp",
    "confidence_bounds",
    "update_sets",
    "select_candidate",
    "sbo_run",
]


class UnsafeSeedError(RuntimeError):
    """The seed (or every grid point) fails the safety threshold."""


def default_p_min(varpi: float) -> float:
    return -math.log1p(1.0 / varpi) - 1.0


@dataclass(frozen=True, eq=False)
class DomainGrid:
    """Cartesian grid over a box, optionally with extra points appended.

    Attributes
    ----------
    lo, hi : ndarray
        Box corners, ``lo < hi`` per coordinate.
    resolution : ndarray of int
        Points per coordinate.
    points : ndarray, shape (P, D)
    """

    lo: np.ndarray
    hi: np.ndarray
    resolution: np.ndarray
    points: np.ndarray

    @classmethod
    def build(cls, lo, hi, resolution, cap: int = 100_000, extra=()) -> "DomainGrid":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        res = np.broadcast_to(np.asarray(resolution, dtype=int), lo.shape).copy()
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("grid box needs lo < hi in every coordinate")
        if np.any(res < 1):
            raise ValueError("grid resolution must be at least 1")
        total = int(np.prod(res)) + len(extra)
        if total > cap:
            raise ValueError(f"grid has {total} points, above the cap of {cap}")
        axes = [np.linspace(a, b, r) if r > 1 else np.array([0.5 * (a + b)]) for a, b, r in zip(lo, hi, res)]
        pts = np.array(list(itertools.product(*axes)), dtype=float)
        for e in extra:
            e = np.asarray(e, dtype=float).ravel()
            if np.any(e < lo - 1e-12) or np.any(e > hi + 1e-12):
                raise ValueError("extra grid point lies outside the box")
            if not np.any(np.all(np.isclose(pts, e, rtol=0, atol=1e-12), axis=1)):
                pts = np.vstack([pts, e])
        return cls(lo, hi, res, pts)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def __len__(self) -> int:
        return self.points.shape[0]

    def index_of(self, theta) -> int:
        theta = np.asarray(theta, dtype=float).ravel()
        hits = np.flatnonzero(np.all(np.isclose(self.points, theta, rtol=0, atol=1e-9), axis=1))
        if hits.size == 0:
            raise KeyError("point is not on the grid")
        return int(hits[0])


@dataclass(frozen=True)
class SboConfig:
    """Settings of the safe optimizer.

    Attributes
    ----------
    beta : float
        Confidence multiplier, constant over iterations.
    p_min : float
        Safety threshold on the score.
    lengthscale_frac : float
        Score-GP lengthscale as a fraction of each box width.
    signal_var : float
        Prior variance of the score GP.
    prior_mean : float
    noise_frac : float
        Observation noise as a fraction of the score range estimate.
    width_tol : float
        Stop when no candidate has a wider interval than this.
    """

    beta: float = 3.0
    p_min: float = default_p_min(1.0)
    lengthscale_frac: float = 0.2
    signal_var: float = 1.0
    prior_mean: float = 0.0
    noise_frac: float = 1e-4
    width_tol: float = 1e-4


@dataclass(eq=False)
class SboState:
    grid: DomainGrid
    score_gp: GpPosterior
    observed: List[Tuple[np.ndarray, float]]
    beta: float
    p_min: float
    theta_star: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None
    safe: np.ndarray = None
    maximizers: np.ndarray = None
    expanders: np.ndarray = None


@dataclass(frozen=True)
class SboRecord:
    k: int
    theta: np.ndarray
    score: float
    lower: float
    upper: float
    membership: str


# ------------------------------------------------------------------ scoring


def score_from_kl(distance: float, kl: float, varpi: float, p_min: float) -> float:
    """Survival score ``-H``; past the KL threshold a finite unsafe sentinel."""
    if kl < varpi:
        return -(distance + math.log1p(1.0 / (varpi - kl)))
    return p_min - 1.0 - (kl - varpi)


def survival_score(
    theta,
    fitness_gp: GpPosterior,
    bases: Sequence[GpPosterior],
    theta_star,
    varpi: float,
    p_min: float,
    scale=None,
    state_dims=None,
) -> float:
    """Score of ``theta`` from its fitness GP and the base library.

    Parameters
    ----------
    theta, theta_star : HyperParams or array_like
        Decision coordinates are compared; ``scale`` divides the difference.
    """
    a = theta.decision_vector() if isinstance(theta, HyperParams) else np.asarray(theta, float)
    b = theta_star.decision_vector() if isinstance(theta_star, HyperParams) else np.asarray(theta_star, float)
    diff = a - b if scale is None else (a - b) / np.asarray(scale, float)
    kl = min_kl(fitness_gp, bases, state_dims)
    return score_from_kl(float(np.linalg.norm(diff)), kl, varpi, p_min)


# ------------------------------------------------------------------- GP + sets


def fit_score_gp(grid: DomainGrid, observed, cfg: SboConfig) -> GpPosterior:
    X = np.array([o[0] for o in observed], dtype=float)
    y = np.array([o[1] for o in observed], dtype=float)
    spread = float(np.ptp(y)) if len(y) > 1 else 0.0
    w2 = cfg.noise_frac * max(spread, math.sqrt(cfg.signal_var))
    kernel = SquaredExponential(cfg.lengthscale_frac * grid.widths, cfg.signal_var)
    return gp_regression(X, y, kernel, w2, cfg.prior_mean)


def confidence_bounds(state: SboState, theta) -> Tuple[float, float]:
    """Lower and upper confidence bound at ``theta``."""
    m, v = state.score_gp.predict(np.atleast_2d(np.asarray(theta, dtype=float)))
    s = math.sqrt(float(v[0]))
    return float(m[0]) - state.beta * s, float(m[0]) + state.beta * s


def _posterior_cov(gp: GpPosterior, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    KA = gp.kernel(A, gp.inducing)
    KB = gp.kernel(B, gp.inducing)
    return gp.kernel(A, B) - KA @ gp.C @ KB.T


def update_sets(state: SboState) -> SboState:
    """Recompute bounds, safe set, maximizers and expanders on the grid."""
    pts = state.grid.points
    mean, var = state.score_gp.predict(pts)
    sd = np.sqrt(var)
    lower = mean - state.beta * sd
    upper = mean + state.beta * sd
    safe = np.flatnonzero(lower >= state.p_min)
    if safe.size == 0:
        raise UnsafeSeedError("safe set is empty")
    best_lower = lower[safe].max()
    maximizers = safe[upper[safe] >= best_lower]
    unsafe = np.setdiff1d(np.arange(len(pts)), safe)
    expanders = []
    if unsafe.size:
        cand = safe[var[safe] > 1e-12]
        for chunk in np.array_split(cand, max(1, int(np.ceil(cand.size * unsafe.size / 2e6)))):
            if chunk.size == 0:
                continue
            cov = _posterior_cov(state.score_gp, pts[chunk], pts[unsafe])
            s_c = sd[chunk][:, None]
            new_mean = mean[unsafe][None, :] + state.beta * cov / s_c
            new_var = np.maximum(var[unsafe][None, :] - cov**2 / (s_c**2), 0.0)
            gains = np.sum(new_mean - state.beta * np.sqrt(new_var) >= state.p_min, axis=1)
            expanders.extend(chunk[gains > 0].tolist())
    return replace(
        state,
        lower=lower,
        upper=upper,
        safe=safe,
        maximizers=maximizers,
        expanders=np.array(sorted(expanders), dtype=int),
    )


def select_candidate(state: SboState) -> Optional[int]:
    """Grid index of the widest interval among maximizers and expanders.

    Ties go to the point nearest ``theta_star`` (box-scaled), then to the
    lowest grid index. Returns ``None`` when both sets are empty.
    """
    union = np.union1d(state.maximizers, state.expanders).astype(int)
    if union.size == 0:
        return None
    width = state.upper[union] - state.lower[union]
    top = width.max()
    tied = union[width >= top - 1e-12 * max(1.0, abs(top))]
    dist = np.linalg.norm((state.grid.points[tied] - state.theta_star) / state.grid.widths, axis=1)
    order = np.lexsort((tied, dist))
    return int(tied[order[0]])


def _membership(state: SboState, idx: int) -> str:
    if idx in set(state.maximizers.tolist()):
        return "maximizer"
    if idx in set(state.expanders.tolist()):
        return "expander"
    return "safe"


def sbo_run(
    seed: Union[HyperParams, np.ndarray],
    evaluator: Callable,
    budget: int,
    cfg: SboConfig,
    grid: DomainGrid,
    theta_star=None,
):
    """Safe Bayesian optimization from a safe seed.

    Parameters
    ----------
    seed : HyperParams or array_like
        Starting point; must lie on ``grid``.
    evaluator : callable
        Score of a decision vector (or of ``HyperParams`` when the seed is
        one).
    budget : int
        Evaluations after the seed.

    Returns
    -------
    best : same type as ``seed``
        Safe point with the highest lower bound.
    history : list of SboRecord

    Raises
    ------
    UnsafeSeedError
        If the seed scores below ``p_min`` or the safe set empties.
    """
    as_params = isinstance(seed, HyperParams)
    x0 = seed.decision_vector() if as_params else np.asarray(seed, dtype=float).ravel()
    wrap = (lambda v: seed.with_decision(v)) if as_params else (lambda v: np.asarray(v, dtype=float))
    star = x0 if theta_star is None else (
        theta_star.decision_vector() if isinstance(theta_star, HyperParams) else np.asarray(theta_star, float)
    )
    grid.index_of(x0)
    y0 = float(evaluator(wrap(x0)))
    if y0 < cfg.p_min:
        raise UnsafeSeedError(f"seed score {y0:.6g} is below p_min = {cfg.p_min:.6g}")
    observed = [(x0.copy(), y0)]

    def fresh_state():
        gp = fit_score_gp(grid, observed, cfg)
        st = SboState(grid, gp, observed, cfg.beta, cfg.p_min, star)
        return update_sets(st)

    state = fresh_state()
    lo0, up0 = confidence_bounds(state, x0)
    history = [SboRecord(0, x0.copy(), y0, lo0, up0, "safe")]
    if budget <= 0:
        log.warning("optimizer budget is 0; returning the seed")
        return wrap(x0), history
    for k in range(1, budget + 1):
        idx = select_candidate(state)
        if idx is None:
            break
        if state.upper[idx] - state.lower[idx] <= cfg.width_tol:
            break
        if any(np.array_equal(grid.points[idx], o[0]) for o in observed):
            # the most informative candidate is already known: converged
            break
        theta = grid.points[idx].copy()
        member = _membership(state, idx)
        lo, up = float(state.lower[idx]), float(state.upper[idx])
        y = float(evaluator(wrap(theta)))
        observed.append((theta, y))
        history.append(SboRecord(k, theta, y, lo, up, member))
        state = fresh_state()
    best = state.safe[np.argmax(state.lower[state.safe])]
    return wrap(grid.points[best].copy()), history
