"""Command-line entry point: ``metacog simulate|end2end|learn-fitness|oracle``.

Exit codes: 0 success, 1 oracle tolerance breach, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, NumericalError
from .gp import gp_to_text
from .orchestrator import (
    EpisodeError,
    build_base_library,
    build_plants,
    build_stack,
    episode_x0,
    fit_fitness,
    learn_initial_policy,
    make_schedule,
    run_episode,
    td_data,
)
from .report import manifest, write_bundle, write_csv, write_manifest, write_plotscript, write_trajectory
from .sim import simulate
from .stl import parse_formula

EXIT_OK, EXIT_ORACLE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ROBUSTNESS_TOL = 0.0
GP_TOL = 1e-8
RICCATI_TOL = 1e-3
RICCATI_MAX_ITER = 15
RESIDUAL_TOL = 1e-6

log = logging.getLogger("metacog")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("METACOG_LOG", "warn").lower()
    level = _LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if name not in _LEVELS:
        log.warning("METACOG_LOG=%s not recognised; using warn", name)


def _spec(rc: RunConfig):
    cfg = rc.episode
    n = len(cfg.q0)
    schema = [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(len(cfg.r0))]
    schema += [f"r{i + 1}" for i in range(n)] + ["r"]
    return parse_formula(cfg.stl.spec, schema)


def _out_dir(rc: RunConfig, arg: Optional[str], default: str) -> str:
    out = arg or rc.output_dir or default
    os.makedirs(out, exist_ok=True)
    return out


def _finish(out: str, rc: RunConfig, emit_plot: bool) -> None:
    if emit_plot or rc.emit_plotscript:
        write_plotscript(out)


def cmd_simulate(rc: RunConfig, out: str, emit_plot: bool = False) -> int:
    """Fixed-policy run of the configured scenario (no monitoring)."""
    cfg = rc.episode
    nominal, _ = build_plants(cfg)
    _, policy = learn_initial_policy(cfg, nominal)
    traj = simulate(nominal, policy, make_schedule(cfg, x0=episode_x0(cfg)))
    write_trajectory(os.path.join(out, "trajectory.csv"), traj, build_stack(cfg), _spec(rc))
    with open(os.path.join(out, "config_echo.toml"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rc.text)
    files = ["trajectory.csv", "config_echo.toml"]
    write_manifest(os.path.join(out, "manifest.json"), manifest("simulate", rc.seed, files, out))
    _finish(out, rc, emit_plot)
    return EXIT_OK


def cmd_end2end(rc: RunConfig, out: str, emit_plot: bool = False) -> int:
    """Full two-layer episode; writes the report bundle."""
    report = run_episode(rc.episode)
    write_bundle(report, out, build_stack(rc.episode), _spec(rc), rc.text, rc.seed)
    _finish(out, rc, emit_plot)
    return EXIT_OK


def cmd_learn_fitness(rc: RunConfig, out: str, emit_plot: bool = False) -> int:
    """Offline fitness GP on the nominal closed loop plus the base templates."""
    cfg = rc.episode
    nominal, _ = build_plants(cfg)
    stack = build_stack(cfg)
    _, policy = learn_initial_policy(cfg, nominal)
    traj = simulate(nominal, policy, make_schedule(cfg, with_change=False, x0=np.asarray(cfg.scenario.x0, float)))
    theta = cfg.theta0()
    data = td_data(traj.states, traj.setpoints, theta.kernel_vector(), stack, cfg.fitness, cfg.scenario.dt)
    gp = fit_fitness(data, cfg)
    files = ["fitness_gp.txt"]
    with open(os.path.join(out, "fitness_gp.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(gp_to_text(gp))
    for i, base in enumerate(build_base_library(stack, cfg, theta)):
        name = f"base_gp_{i}.txt"
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(gp_to_text(base))
        files.append(name)
    mean, var = gp.predict(data.Z)
    n = len(cfg.q0)
    header = [f"e{j + 1}" for j in range(n)] + [f"theta{j + 1}" for j in range(data.Z.shape[1] - n)]
    header += ["fitness_mean", "fitness_var"]
    write_csv(os.path.join(out, "fitness_samples.csv"), header, ([*z, m, v] for z, m, v in zip(data.Z, mean, var)))
    files.append("fitness_samples.csv")
    write_manifest(os.path.join(out, "manifest.json"), manifest("learn-fitness", rc.seed, files, out))
    _finish(out, rc, emit_plot)
    return EXIT_OK


def cmd_oracle(rc: RunConfig, subject: str) -> int:
    """Compare implementations with their oracles; exit 1 on any breach."""
    from . import oracles

    ok = True
    if subject in ("robustness", "all"):
        cases = oracles.robustness_cases(100, 50, 4, rc.seed)
        worst = max(cases, key=lambda c: c.max_error)
        print(f"robustness: {len(cases)} cases, max error {worst.max_error:.3g}")
        if worst.max_error > ROBUSTNESS_TOL:
            ok = False
            print(f"  offending formula: {worst.text}")
    if subject in ("gp", "all"):
        errs = oracles.gp_cases(5, 50, rc.seed)
        print(f"gp: max posterior error {max(errs):.3g}")
        ok &= max(errs) < GP_TOL
    if subject in ("riccati", "all"):
        cfg = rc.episode
        for case in oracles.riccati_cases(cfg.q0, cfg.r0, cfg.rl.gamma):
            print(
                f"riccati {case.name}: relative gain error {case.rel_error:.3g}, "
                f"{case.iterations} iterations, residual {case.residual:.3g}"
            )
            if case.rel_error >= RICCATI_TOL or case.iterations > RICCATI_MAX_ITER or case.residual > RESIDUAL_TOL:
                ok = False
                print(f"  case {case.name} outside tolerance")
    return EXIT_OK if ok else EXIT_ORACLE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metacog", description="Two-layer metacognitive controller runs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "fixed-policy scenario run"),
        ("end2end", "full episode with monitoring and adaptation"),
        ("learn-fitness", "offline fitness GP and base library"),
        ("oracle", "implementation vs oracle comparison"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override [scenario].seed")
        sp.add_argument("--emit-plotscript", action="store_true", help="write a plotting script next to the CSVs")
        if name == "oracle":
            sp.add_argument("--subject", choices=["riccati", "robustness", "gp", "all"], default="all")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "oracle":
            return cmd_oracle(rc, args.subject)
        default = os.path.join("runs", args.command)
        out = _out_dir(rc, args.out, default)
        handler = {"simulate": cmd_simulate, "end2end": cmd_end2end, "learn-fitness": cmd_learn_fitness}[args.command]
        return handler(rc, out, args.emit_plotscript)
    except EpisodeError as exc:
        if isinstance(exc.cause, (ArithmeticError, np.linalg.LinAlgError)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
