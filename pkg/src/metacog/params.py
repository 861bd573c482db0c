"""Reward hyperparameters shared by the low-level learner and the optimizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Diagonal reward weights and setpoint.

    Attributes
    ----------
    q_diag : ndarray, shape (n,)
        Diagonal of the state weight Q.
    r_diag : ndarray, shape (m,)
        Diagonal of the input weight R.
    setpoint : ndarray, shape (n,)
    preview : ndarray, optional
        Context coordinates that enter kernels but are never optimized.
    """

    q_diag: np.ndarray
    r_diag: np.ndarray
    setpoint: np.ndarray
    preview: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q_diag, dtype=float))
        r = np.atleast_1d(np.asarray(self.r_diag, dtype=float))
        s = np.atleast_1d(np.asarray(self.setpoint, dtype=float))
        if np.any(q < 0) or np.any(r <= 0):
            raise ValueError("Q must be non-negative and R positive definite")
        if len(s) != len(q):
            raise ValueError("setpoint and q_diag must have the same length")
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "r_diag", r)
        object.__setattr__(self, "setpoint", s)
        if self.preview is not None:
            object.__setattr__(self, "preview", np.atleast_1d(np.asarray(self.preview, dtype=float)))

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.r_diag)

    def decision_vector(self) -> np.ndarray:
        """Coordinates searched by the optimizer: ``[q_diag, r_diag]``."""
        return np.concatenate([self.q_diag, self.r_diag])

    def kernel_vector(self) -> np.ndarray:
        """Coordinates fed to the hyperparameter kernel factor."""
        parts = [self.q_diag, self.r_diag]
        if self.preview is not None:
            parts.append(self.preview)
        return np.concatenate(parts)

    def with_decision(self, vec) -> "HyperParams":
        vec = np.asarray(vec, dtype=float)
        n = len(self.q_diag)
        return HyperParams(vec[:n], vec[n:], self.setpoint, self.preview)

    def with_setpoint(self, r) -> "HyperParams":
        return HyperParams(self.q_diag, self.r_diag, r, self.preview)

    def __eq__(self, other):
        if not isinstance(other, HyperParams):
            return NotImplemented
        return (
            np.array_equal(self.q_diag, other.q_diag)
            and np.array_equal(self.r_diag, other.r_diag)
            and np.array_equal(self.setpoint, other.setpoint)
        )

    def __repr__(self):
        return (
            f"HyperParams(q_diag={self.q_diag.tolist()}, r_diag={self.r_diag.tolist()}, "
            f"setpoint={self.setpoint.tolist()})"
        )
