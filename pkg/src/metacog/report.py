"""Byte-stable CSV output and the episode bundle layout."""

from __future__ import annotations

import hashlib
import json
import os
import platform
from typing import Iterable, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .fitness import margin_series
from .stl import Formula, PredicateStack, robustness_matrix, robustness_signal
from .trajectory import Trajectory

TRAJECTORY = "trajectory.csv"
MONITOR = "monitor.csv"
SBO_HISTORY = "sbo_history.csv"
ADAPTATIONS = "adaptations.csv"
CONFIG_ECHO = "config_echo.toml"
MANIFEST = "manifest.json"
PLOTSCRIPT = "plot_results.py"

MONITOR_COLUMNS = [
    "t",
    "xi_a",
    "r_m",
    "R_interval",
    "fitness_pred_mean",
    "fitness_pred_var",
    "surprise",
    "integral_sp",
    "min_kl",
    "decision",
]


def fmt(value) -> str:
    """Fixed text form: 17 significant digits for reals."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path: str) -> List[dict]:
    """Rows as dicts of strings; companion of ``write_csv`` for tests and tools."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def sha256_of(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def trajectory_rows(traj: Trajectory, stack: Optional[PredicateStack] = None, spec: Optional[Formula] = None):
    """Header and rows of ``trajectory.csv``.

    Robustness columns: ``xi_a`` (smooth margin of the predicate stack),
    ``rho_safety`` (worst safety predicate) and ``rho_spec`` (robustness of
    the run specification where its windows fit, ``nan`` afterwards).
    """
    n = traj.n
    m = traj.inputs.shape[1]
    header = ["t"] + [f"x{j + 1}" for j in range(n)] + [f"u{j + 1}" for j in range(m)]
    header += [f"r{j + 1}" for j in range(n)] + ["plant"]
    L = len(traj)
    extra = []
    if stack is not None:
        mat = robustness_matrix(stack, traj.states, traj.setpoints)
        extra.append(margin_series(traj.states, stack, traj.setpoints))
        extra.append(mat[:, : len(stack.safety)].min(axis=1) if stack.safety else np.full(L, np.inf))
        header += ["xi_a", "rho_safety"]
    if spec is not None:
        sig = robustness_signal(spec, traj)
        col = np.full(L, np.nan)
        col[: len(sig)] = sig
        extra.append(col)
        header.append("rho_spec")
    times = traj.times
    labels = traj.labels if traj.labels is not None else ["plant"] * L
    rows = []
    for i in range(L):
        row = [times[i], *traj.states[i], *traj.inputs[i], *traj.setpoints[i], labels[i]]
        row += [c[i] for c in extra]
        rows.append(row)
    return header, rows


def write_trajectory(path: str, traj: Trajectory, stack=None, spec=None) -> None:
    header, rows = trajectory_rows(traj, stack, spec)
    write_csv(path, header, rows)


def write_monitor(path: str, rows: Sequence[dict]) -> None:
    write_csv(path, MONITOR_COLUMNS, ([r[c] for c in MONITOR_COLUMNS] for r in rows))


def _theta_header(prefix: str, n: int, m: int) -> List[str]:
    return [f"{prefix}q{j + 1}" for j in range(n)] + [f"{prefix}r{j + 1}" for j in range(m)]


def write_adaptations(path: str, adaptations, n: int, m: int) -> None:
    header = ["index", "t_trigger", "t_deploy", "status"] + _theta_header("old_", n, m) + _theta_header("new_", n, m)
    rows = []
    for i, a in enumerate(adaptations):
        rows.append([i, a.t_trigger, a.t_deploy, a.status, *a.old_theta.decision_vector(), *a.new_theta.decision_vector()])
    write_csv(path, header, rows)


def write_sbo_history(path: str, adaptations, n: int, m: int) -> None:
    header = ["adaptation", "k"] + _theta_header("", n, m) + ["score", "lower", "upper", "membership"]
    rows = []
    for i, a in enumerate(adaptations):
        for rec in a.history:
            rows.append([i, rec.k, *rec.theta, rec.score, rec.lower, rec.upper, rec.membership])
    write_csv(path, header, rows)


def manifest(command: str, seed: int, files: Sequence[str], out_dir: str) -> dict:
    """Run description with seeds, versions and file digests (no timestamps)."""
    return {
        "command": command,
        "seed": seed,
        "versions": {
            "metacog": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "files": {f: sha256_of(os.path.join(out_dir, f)) for f in sorted(files)},
    }


def write_manifest(path: str, data: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_bundle(report, out_dir: str, stack, spec, config_text: str, seed: int, command: str = "end2end") -> List[str]:
    """Write every file of an episode bundle; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    traj = report.trajectory
    n, m = traj.n, traj.inputs.shape[1]
    write_trajectory(os.path.join(out_dir, TRAJECTORY), traj, stack, spec)
    write_monitor(os.path.join(out_dir, MONITOR), report.monitor_rows)
    write_adaptations(os.path.join(out_dir, ADAPTATIONS), report.adaptations, n, m)
    write_sbo_history(os.path.join(out_dir, SBO_HISTORY), report.adaptations, n, m)
    with open(os.path.join(out_dir, CONFIG_ECHO), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config_text)
    files = [TRAJECTORY, MONITOR, ADAPTATIONS, SBO_HISTORY, CONFIG_ECHO]
    write_manifest(os.path.join(out_dir, MANIFEST), manifest(command, seed, files, out_dir))
    return files + [MANIFEST]


PLOT_SCRIPT = '''"""Plot the CSV files found next to this script (needs matplotlib)."""

import csv
import os
import sys

import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def load(name):
    path = os.path.join(HERE, name)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows or None


def column(rows, key):
    return [float(r[key]) for r in rows]


def main():
    traj = load("trajectory.csv")
    mon = load("monitor.csv")
    panels = [p for p in (traj, mon) if p is not None]
    fig, axes = plt.subplots(2 if mon else 1, 1, figsize=(8, 6 if mon else 3.5), squeeze=False)
    if traj:
        t = column(traj, "t")
        ax = axes[0][0]
        ax.plot(t, column(traj, "x1"), label="y")
        ax.plot(t, column(traj, "r1"), "--", label="r")
        ax.set_ylabel("lateral position")
        ax.legend()
    if mon:
        ax = axes[1][0]
        ax.plot(column(mon, "t"), column(mon, "fitness_pred_mean"), label="predicted fitness")
        ax.set_xlabel("t")
        ax.legend()
    fig.tight_layout()
    out = os.path.join(HERE, "figure.png")
    fig.savefig(out, dpi=120)
    print(out)
    return 0 if panels else 1


if __name__ == "__main__":
    sys.exit(main())
'''


def write_plotscript(out_dir: str) -> str:
    path = os.path.join(out_dir, PLOTSCRIPT)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PLOT_SCRIPT)
    return path
