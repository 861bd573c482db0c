"""Uniformly sampled closed-loop records."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    """State/input record on a uniform time grid.

    Sample ``i`` is taken at ``t0 + i * dt``.

    Parameters
    ----------
    t0 : float
        Time of the first sample.
    dt : float
        Sampling step, strictly positive.
    states : ndarray, shape (L, n)
    inputs : ndarray, shape (L, m), optional
        Input applied from sample ``i`` onwards.
    setpoints : ndarray, shape (L, n), optional
        Active setpoint at each sample.
    labels : sequence of str, optional
        Per-sample plant label.
    """

    t0: float
    dt: float
    states: np.ndarray
    inputs: Optional[np.ndarray] = None
    setpoints: Optional[np.ndarray] = None
    labels: Optional[Sequence[str]] = field(default=None, compare=False)

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if states.shape[0] < 1:
            raise ValueError("trajectory needs at least one sample")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory states must be finite")
        object.__setattr__(self, "states", states)
        L = states.shape[0]
        for name in ("inputs", "setpoints"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape[0] != L:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {L}")
            object.__setattr__(self, name, arr)
        if self.setpoints is not None and self.setpoints.shape[1] != states.shape[1]:
            raise ValueError("setpoints must match the state dimension")
        if self.labels is not None and len(self.labels) != L:
            raise ValueError("one label per sample is required")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must lie on the grid."""
        s = (t - self.t0) / self.dt
        i = int(round(s))
        if abs(s - i) > 1e-6:
            raise ValueError(f"time {t} is not on the sampling grid")
        if i < 0 or i >= len(self):
            raise IndexError(f"time {t} outside the trajectory")
        return i

    def channel_names(self) -> List[str]:
        names = [f"x{j + 1}" for j in range(self.n)]
        if self.inputs is not None:
            names += [f"u{j + 1}" for j in range(self.inputs.shape[1])]
        if self.setpoints is not None:
            names += [f"r{j + 1}" for j in range(self.n)] + ["r"]
        return names

    def channels(self) -> Dict[str, np.ndarray]:
        """Named signal columns; ``r`` aliases the first setpoint component."""
        out = {f"x{j + 1}": self.states[:, j] for j in range(self.n)}
        if self.inputs is not None:
            for j in range(self.inputs.shape[1]):
                out[f"u{j + 1}"] = self.inputs[:, j]
        if self.setpoints is not None:
            for j in range(self.n):
                out[f"r{j + 1}"] = self.setpoints[:, j]
            out["r"] = self.setpoints[:, 0]
        return out

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Samples ``start`` (inclusive) to ``stop`` (exclusive)."""
        sl = slice(start, stop)
        return Trajectory(
            t0=self.t0 + start * self.dt,
            dt=self.dt,
            states=self.states[sl],
            inputs=None if self.inputs is None else self.inputs[sl],
            setpoints=None if self.setpoints is None else self.setpoints[sl],
            labels=None if self.labels is None else list(self.labels[sl]),
        )
