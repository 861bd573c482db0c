"""Gaussian-process regression in coefficient form.

A fitted process is stored as inducing inputs ``X`` with a coefficient
vector ``alpha`` and matrix ``C`` so that, for a query ``q``::

    mean(q) = m0 + k(q, X) @ alpha
    var(q)  = k(q, q) - k(q, X) @ C @ k(X, q)

Ordinary regression and the temporal-difference fitness model share this
form, which also makes the KL divergence and the inducing-set projection
independent of how the process was fitted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .errors import NumericalError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


# -------------------------------------------------------------------- kernels


class SquaredExponential:
    """ARD squared-exponential kernel on a subset of input coordinates.

    Parameters
    ----------
    lengthscales : array_like
        One positive lengthscale per consumed coordinate.
    variance : float
        Signal variance ``k(u, u)``.
    dims : sequence of int, optional
        Coordinates of the joint input this factor reads. Defaults to the
        first ``len(lengthscales)`` coordinates.
    """

    def __init__(self, lengthscales, variance: float = 1.0, dims: Optional[Sequence[int]] = None):
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if np.any(ls <= 0) or not variance > 0:
            raise ValueError("lengthscales and variance must be positive")
        self.lengthscales = ls
        self.variance = float(variance)
        self.dims = np.arange(len(ls)) if dims is None else np.asarray(dims, dtype=int)
        if len(self.dims) != len(ls):
            raise ValueError("one lengthscale per dimension is required")

    @property
    def input_dim(self) -> int:
        return int(self.dims.max()) + 1

    def __call__(self, X, Y) -> np.ndarray:
        A = np.atleast_2d(X)[:, self.dims] / self.lengthscales
        B = np.atleast_2d(Y)[:, self.dims] / self.lengthscales
        d2 = (
            np.sum(A * A, axis=1)[:, None]
            + np.sum(B * B, axis=1)[None, :]
            - 2.0 * A @ B.T
        )
        return self.variance * np.exp(-0.5 * np.maximum(d2, 0.0))

    def diag(self, X) -> np.ndarray:
        return np.full(np.atleast_2d(X).shape[0], self.variance)

    def factors(self) -> List["SquaredExponential"]:
        return [self]

    def __eq__(self, other):
        return (
            isinstance(other, SquaredExponential)
            and np.array_equal(self.lengthscales, other.lengthscales)
            and self.variance == other.variance
            and np.array_equal(self.dims, other.dims)
        )

    def __repr__(self):
        return (
            f"SquaredExponential(lengthscales={self.lengthscales.tolist()}, "
            f"variance={self.variance}, dims={self.dims.tolist()})"
        )


class ProductKernel:
    """Product of kernels acting on (usually disjoint) coordinate blocks."""

    def __init__(self, *factors):
        flat = []
        for f in factors:
            flat.extend(f.factors())
        if not flat:
            raise ValueError("product kernel needs at least one factor")
        self._factors = flat

    @property
    def input_dim(self) -> int:
        return max(f.input_dim for f in self._factors)

    def factors(self):
        return list(self._factors)

    def __call__(self, X, Y) -> np.ndarray:
        out = self._factors[0](X, Y)
        for f in self._factors[1:]:
            out = out * f(X, Y)
        return out

    def diag(self, X) -> np.ndarray:
        out = self._factors[0].diag(X)
        for f in self._factors[1:]:
            out = out * f.diag(X)
        return out

    def __eq__(self, other):
        return isinstance(other, ProductKernel) and self._factors == other._factors

    def __repr__(self):
        return "ProductKernel(" + ", ".join(map(repr, self._factors)) + ")"


def state_param_kernel(state_ls, param_ls, variance: float = 1.0) -> ProductKernel:
    """``k_x * k_theta`` over inputs ``[x, theta]``; the variance sits on ``k_x``."""
    nx = len(np.atleast_1d(state_ls))
    nt = len(np.atleast_1d(param_ls))
    kx = SquaredExponential(state_ls, variance, dims=range(nx))
    kt = SquaredExponential(param_ls, 1.0, dims=range(nx, nx + nt))
    return ProductKernel(kx, kt)


# ---------------------------------------------------------------- factorizing


def chol_jitter(M: np.ndarray, what: str = "matrix"):
    """Cholesky factor with jitter escalation 1e-10 .. 1e-6 of the mean diagonal.

    Returns
    -------
    (c, lower), float
        Factor usable with ``scipy.linalg.cho_solve`` and the jitter added.
    """
    M = 0.5 * (M + M.T)
    scale = float(np.mean(np.diag(M))) if M.size else 1.0
    scale = scale if scale > 0 else 1.0
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            A = M + jitter * scale * np.eye(M.shape[0]) if jitter else M
            return linalg.cho_factor(A, lower=True, check_finite=True), jitter * scale
        except (linalg.LinAlgError, ValueError):
            continue
    raise NumericalError(f"{what} is not positive definite even with jitter")


# ------------------------------------------------------------------ posterior


@dataclass(frozen=True, eq=False)
class GpPosterior:
    """Fitted GP in coefficient form.

    Attributes
    ----------
    inducing : ndarray, shape (L, D)
    alpha : ndarray, shape (L,)
    C : ndarray, shape (L, L)
    kernel : SquaredExponential or ProductKernel
    noise_w2 : float
    prior_mean : float
    """

    inducing: np.ndarray
    alpha: np.ndarray
    C: np.ndarray
    kernel: object
    noise_w2: float
    prior_mean: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.inducing, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.kernel.input_dim) if X.size else X.reshape(0, self.kernel.input_dim)
        a = np.asarray(self.alpha, dtype=float).ravel()
        C = np.asarray(self.C, dtype=float).reshape(len(a), len(a))
        if len(a) != X.shape[0]:
            raise ValueError("alpha length must equal the number of inducing inputs")
        object.__setattr__(self, "inducing", X)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "C", C)

    @property
    def size(self) -> int:
        return len(self.alpha)

    def predict(self, queries) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorised mean and variance at the rows of ``queries``."""
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        if self.size and Q.shape[1] != self.inducing.shape[1]:
            raise ValueError(
                f"query dimension {Q.shape[1]} does not match inducing dimension {self.inducing.shape[1]}"
            )
        prior = self.kernel.diag(Q)
        if self.size == 0:
            return np.full(Q.shape[0], float(self.prior_mean)), prior
        Kq = self.kernel(Q, self.inducing)
        mean = self.prior_mean + Kq @ self.alpha
        var = prior - np.einsum("ij,jk,ik->i", Kq, self.C, Kq)
        low = var < 0
        if np.any(low):
            worst = float(-var[low].min())
            if worst > 1e-8 * max(1.0, float(prior.max())):
                log.warning("predictive variance clamped by %.3g", worst)
            else:
                log.debug("predictive variance clamped by %.3g", worst)
            var = np.maximum(var, 0.0)
        return mean, var


def gp_predict(gp: GpPosterior, query) -> Tuple[float, float]:
    """Posterior mean and variance at a single joint input."""
    q = np.asarray(query, dtype=float).ravel()
    if gp.size and q.size != gp.inducing.shape[1]:
        raise ValueError(f"query dimension {q.size} does not match {gp.inducing.shape[1]}")
    m, v = gp.predict(q[None, :])
    return float(m[0]), float(v[0])


def gp_regression(X, y, kernel, w2: float, prior_mean: float = 0.0) -> GpPosterior:
    """Exact posterior from direct noisy observations ``y = f(X) + noise``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    K = kernel(X, X)
    fac, _ = chol_jitter(K + w2 * np.eye(len(y)), "regression system")
    alpha = linalg.cho_solve(fac, y - prior_mean)
    C = linalg.cho_solve(fac, np.eye(len(y)))
    return GpPosterior(X, alpha, 0.5 * (C + C.T), kernel, float(w2), float(prior_mean))


def td_matrix(n_points: int, pairs, g: float) -> np.ndarray:
    """Rows ``e_i - g * e_j`` for each pair ``(i, j)``."""
    H = np.zeros((len(pairs), n_points))
    for row, (i, j) in enumerate(pairs):
        H[row, i] += 1.0
        H[row, j] -= g
    return H


def gptd_fit(
    inputs,
    rewards,
    kernel,
    w2: float,
    a: float,
    T: float,
    prior_mean: float = 0.0,
    td_discount: str = "discounted",
    pairs=None,
) -> GpPosterior:
    """Fit the fitness GP from integrated rewards over TD intervals.

    Each observation relates two inducing points through
    ``f(x_i) - g * f(x_j) = R + noise`` with ``g = exp(-a T)`` (or 1 in
    ``literal`` mode).

    Parameters
    ----------
    inputs : ndarray, shape (L, D)
        Joint inputs sampled every ``T`` seconds.
    rewards : array_like
        One integrated reward per pair.
    kernel, w2
        Prior covariance and observation noise variance.
    pairs : sequence of (int, int), optional
        Index pairs ``(i, j)``; defaults to consecutive samples.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    R = np.asarray(rewards, dtype=float).ravel()
    L = X.shape[0]
    if pairs is None:
        if L < 2:
            raise ValueError("at least two inducing samples are needed")
        pairs = [(i, i + 1) for i in range(L - 1)]
    if len(R) != len(pairs):
        raise ValueError(f"expected {len(pairs)} rewards, got {len(R)}")
    if not w2 > 0:
        raise ValueError("w2 must be positive")
    if td_discount == "discounted":
        g = float(np.exp(-a * T))
    elif td_discount == "literal":
        g = 1.0
    else:
        raise ValueError(f"unknown td_discount {td_discount!r}")
    H = td_matrix(L, pairs, g)
    K = kernel(X, X)
    S = H @ K @ H.T + w2 * np.eye(len(R))
    fac, _ = chol_jitter(S, "TD system matrix")
    resid = R - H @ np.full(L, prior_mean)
    alpha = H.T @ linalg.cho_solve(fac, resid)
    C = H.T @ linalg.cho_solve(fac, H)
    return GpPosterior(X, alpha, 0.5 * (C + C.T), kernel, float(w2), float(prior_mean))


# ---------------------------------------------------------------- comparisons


def _same_inducing(g1: GpPosterior, g2: GpPosterior) -> bool:
    return g1.inducing.shape == g2.inducing.shape and np.allclose(
        g1.inducing, g2.inducing, rtol=0, atol=1e-12
    )


def gp_kl(g1: GpPosterior, g2: GpPosterior) -> float:
    """KL divergence between two GPs on shared inducing inputs.

    With ``Q = K^-1`` for the shared Gram matrix ``K`` and ``V = (Q - C1)^-1``::

        D = (a1 - a2)' V (a1 - a2) + tr[(Q - C2) V - I] - logdet[(Q - C2) V]

    The minus signs reflect the convention ``var = k - k'Ck`` used here.
    ``D`` is twice the Gaussian KL divergence from the inducing-point
    marginal of ``g2`` to that of ``g1``; the KL itself, ``D / 2``, is
    returned.
    """
    if not _same_inducing(g1, g2):
        raise ValueError("GPs must share inducing inputs (use shift_inducing)")
    X = g1.inducing
    L = X.shape[0]
    if L == 0:
        return 0.0
    K = g1.kernel(X, X)
    kfac, _ = chol_jitter(K, "inducing Gram matrix")
    Q = linalg.cho_solve(kfac, np.eye(L))
    Q = 0.5 * (Q + Q.T)
    A1 = Q - g1.C
    A2 = Q - g2.C
    try:
        f1 = linalg.cho_factor(0.5 * (A1 + A1.T), lower=True)
        f2 = linalg.cho_factor(0.5 * (A2 + A2.T), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("KL system matrix is not invertible") from exc
    d = g1.alpha - g2.alpha + (g1.prior_mean - g2.prior_mean) * linalg.cho_solve(kfac, np.ones(L))
    quad = float(d @ linalg.cho_solve(f1, d))
    M = linalg.cho_solve(f1, A2)
    logdet = 2.0 * (np.sum(np.log(np.diag(f2[0]))) - np.sum(np.log(np.diag(f1[0]))))
    return 0.5 * (quad + float(np.trace(M)) - L - float(logdet))


def shift_inducing(base: GpPosterior, targets, max_cond: float = 1e12) -> GpPosterior:
    """Re-express ``base`` on a new inducing set.

    The returned process reproduces the mean and variance of ``base`` at
    every target input.
    """
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    if T.size == 0 or T.shape[0] == 0:
        raise ValueError("targets must be non-empty")
    Ktt = base.kernel(T, T)
    cond = np.linalg.cond(Ktt)
    if not np.isfinite(cond) or cond > max_cond:
        raise NumericalError(f"projection Gram matrix ill-conditioned (cond = {cond:.3g})")
    if base.size == 0:
        return GpPosterior(T, np.zeros(len(T)), np.zeros((len(T), len(T))), base.kernel, base.noise_w2, base.prior_mean)
    KtX = base.kernel(T, base.inducing)
    fac = linalg.cho_factor(Ktt, lower=True)
    P = linalg.cho_solve(fac, KtX)
    alpha = P @ base.alpha
    C = P @ base.C @ P.T
    return GpPosterior(T, alpha, 0.5 * (C + C.T), base.kernel, base.noise_w2, base.prior_mean)


# -------------------------------------------------------------- serialization


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=float).ravel())


def _kernel_lines(kernel) -> List[str]:
    lines = [f"kernel_factors {len(kernel.factors())}"]
    for f in kernel.factors():
        lines.append("factor se")
        lines.append("dims " + " ".join(str(int(d)) for d in f.dims))
        lines.append("lengthscales " + _fmt(f.lengthscales))
        lines.append("variance " + repr(f.variance))
    return lines


def gp_to_text(gp: GpPosterior) -> str:
    """Flat text record; ``gp_from_text`` reproduces every bit."""
    L, D = gp.inducing.shape
    lines = [f"metacog-gp {FORMAT_VERSION}"]
    lines += _kernel_lines(gp.kernel)
    lines.append("noise_w2 " + repr(float(gp.noise_w2)))
    lines.append("prior_mean " + repr(float(gp.prior_mean)))
    lines.append(f"inducing {L} {D}")
    lines += [_fmt(row) for row in gp.inducing]
    lines.append("alpha " + _fmt(gp.alpha))
    lines.append(f"C {L}")
    lines += [_fmt(row) for row in gp.C]
    return "\n".join(lines) + "\n"


def gp_from_text(text: str) -> GpPosterior:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    it = iter(lines)

    def field(name):
        head, _, rest = next(it).partition(" ")
        if head != name:
            raise ValueError(f"expected field {name!r}, found {head!r}")
        return rest

    version = int(field("metacog-gp"))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported GP format version {version}")
    factors = []
    for _ in range(int(field("kernel_factors"))):
        if field("factor") != "se":
            raise ValueError("unknown kernel factor")
        dims = [int(v) for v in field("dims").split()]
        ls = [float(v) for v in field("lengthscales").split()]
        var = float(field("variance"))
        factors.append(SquaredExponential(ls, var, dims))
    kernel = factors[0] if len(factors) == 1 else ProductKernel(*factors)
    w2 = float(field("noise_w2"))
    m0 = float(field("prior_mean"))
    L, D = (int(v) for v in field("inducing").split())
    X = np.array([[float(v) for v in next(it).split()] for _ in range(L)]).reshape(L, D)
    rest = field("alpha")
    alpha = np.array([float(v) for v in rest.split()])
    n = int(field("C"))
    C = np.array([[float(v) for v in next(it).split()] for _ in range(n)]).reshape(n, n)
    return GpPosterior(X, alpha, C, kernel, w2, m0)
