"""Command-line front end.

    rsmcert verify --config run.cfg [--seed N] [--out DIR] [--timeout S] [--refinement MODE]
    rsmcert bound-experiment --config run.cfg
    rsmcert simulate --config run.cfg
    rsmcert simulate-trajectories --config run.cfg

Exit status: 0 success, 1 error, 2 timeout or no certificate found.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from . import io, rng as rngmod
from .analysis import (
    bounded_difference_c, contour_export, horizon_for, markov_tail_bound, azuma_tail_bound,
    expected_time_bound, rollout, simulate_hitting_times,
)
from .errors import ConfigError, RsmError
from .expectation import build_partition, expected_upper_bound, mc_expectation
from .learner import LearnerConfig
from .nn import init_mlp
from .system import NetworkPolicy, TriangularNoise, make_benchmark
from .verifier import CertifyConfig, certify

EXIT_OK, EXIT_ERROR, EXIT_TIMEOUT = 0, 1, 2

log = logging.getLogger("rsmcert")


def build_system(cfg: io.RunConfig):
    spec, pol = make_benchmark(cfg.benchmark, cfg.gain)
    if cfg.policy != "analytic":
        pol = NetworkPolicy(io.load_weights(cfg.policy))
    if cfg.noise_scale != 1.0:
        spec = dataclasses.replace(spec, noise=TriangularNoise(spec.noise.scale * cfg.noise_scale))
    return spec, pol


def certify_config(cfg: io.RunConfig) -> CertifyConfig:
    learner = LearnerConfig(
        lam=cfg.lam, delta=cfg.delta, learning_rate=cfg.learning_rate, n_samples=cfg.n_samples,
        epochs=cfg.epochs, tau=cfg.learner_tau, batch_size=io.optional_int(cfg.batch_size),
    )
    return CertifyConfig(
        learner=learner, verifier_tau=cfg.verifier_tau, k=cfg.k, refinement=cfg.refinement,
        slack=cfg.slack, hidden=cfg.hidden_sizes, max_iterations=io.optional_int(cfg.max_iterations),
    )


def _name(cfg: io.RunConfig, stem: str, ext: str) -> str:
    return os.path.join(cfg.out, f"{stem}_{cfg.benchmark}_seed{cfg.seed}.{ext}")


def _load_cert(cfg: io.RunConfig):
    path = cfg.certificate or _name(cfg, "certificate", "txt")
    if not os.path.exists(path):
        raise ConfigError(f"certificate file not found: {path}")
    return io.load_certificate(path)


def cmd_verify(cfg: io.RunConfig) -> int:
    spec, pol = build_system(cfg)
    log_path = _name(cfg, "verdict", "log")
    lines = []

    def sink(rec):
        rec = {k: v for k, v in rec.items() if k != "elapsed"}
        lines.append(" ".join(f"{k}={io.fmt(v)}" for k, v in rec.items()))
        # rewritten after every record so a timeout leaves the partial log behind
        io.atomic_write(log_path, "\n".join(lines) + "\n")

    io.atomic_write(log_path, "")
    t0 = time.monotonic()
    timeout = None if cfg.timeout < 0 else cfg.timeout
    rep = certify(spec, pol, certify_config(cfg), timeout, cfg.seed, sink=sink)
    wall = time.monotonic() - t0
    outcome = rep.outcome if rep.outcome != "counterexamples" else "unknown"
    lines.append(f"outcome={outcome} iterations={rep.iterations}")
    io.atomic_write(log_path, "\n".join(lines) + "\n")
    header = ["benchmark", "outcome", "iterations", "mesh", "min_mesh", "grid_size", "eps", "m", "K", "L_V",
              "runtime"]
    c = rep.certificate
    row = [cfg.benchmark, outcome, rep.iterations, rep.tau,
           c.min_mesh if c else "", c.grid_size if c else "", c.eps if c else "", c.m if c else "",
           c.K if c else "", c.L_V if c else "", round(wall, 3)]
    io.write_csv(_name(cfg, "summary", "csv"), header, [row])
    if c is not None:
        io.save_certificate(c, _name(cfg, "certificate", "txt"))
        print(f"verified: iterations={rep.iterations} mesh={rep.tau} eps={c.eps:.6g} runtime={wall:.1f}s")
        return EXIT_OK
    print(f"{outcome}: iterations={rep.iterations} mesh={rep.tau} runtime={wall:.1f}s")
    return EXIT_TIMEOUT


def bound_rows(V, spec, pol, states, ks, n_mc, seed):
    rows = []
    for i, x in enumerate(states):
        mean, std = mc_expectation(V, spec, pol, x, n_mc, rngmod.stream(seed, "bound-mc", i), return_std=True)
        for k in ks:
            b = expected_upper_bound(V, spec, pol, x, build_partition(spec.noise, k))
            rows.append([i, x[0], x[1], k, b, mean, std])
    return rows


def cmd_bound_experiment(cfg: io.RunConfig) -> int:
    spec, pol = build_system(cfg)
    if cfg.random_v:
        V = init_mlp([spec.state_dim, *cfg.hidden_sizes, 1], rngmod.stream(cfg.seed, "random-v"))
    else:
        V = _load_cert(cfg).network
    X = spec.state_space
    states = X.sample(rngmod.stream(cfg.seed, "bound-states"), cfg.bound_states)
    rows = bound_rows(V, spec, pol, states, cfg.ks, cfg.mc_samples, cfg.seed)
    header = ["state_index", "x1", "x2", "k", "bound", "mc_estimate", "mc_std"]
    path = _name(cfg, "bounds", "csv")
    io.write_csv(path, header, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_simulate(cfg: io.RunConfig) -> int:
    spec, pol = build_system(cfg)
    x0 = cfg.x0_vec
    cert = _load_cert(cfg) if (cfg.certificate or os.path.exists(_name(cfg, "certificate", "txt"))) else None
    traj = rollout(spec, pol, x0, cfg.steps, cfg.seed, noise=cfg.noise_scale > 0)
    io.write_csv(_name(cfg, "trajectory", "csv"), ["t", "x1", "x2"],
                 [[t, *row] for t, row in enumerate(traj)])
    horizon = horizon_for(cert, x0) if cert is not None else max(cfg.steps, max(cfg.ts))
    stats = simulate_hitting_times(spec, pol, x0, cfg.runs, horizon, cfg.seed)
    io.write_csv(_name(cfg, "hitting_times", "csv"), ["run", "t_hit"],
                 [[r, int(t) if np.isfinite(t) else "inf"] for r, t in enumerate(stats.times)])
    if cert is not None:
        c = bounded_difference_c(spec, pol)
        surv = stats.survival(cfg.ts)
        rows = [[t, s, markov_tail_bound(cert, x0, t), azuma_tail_bound(cert, x0, t, c)]
                for t, s in zip(cfg.ts, surv)]
        io.write_csv(_name(cfg, "tail", "csv"), ["t", "empirical", "markov", "azuma"], rows)
        n = cfg.contour_resolution
        io.write_csv(_name(cfg, "contour", "csv"), ["x1", "x2", "time_bound"],
                     contour_export(cert, n, spec.state_space))
        fin = stats.times[stats.finished]
        mean = float(fin.mean()) if fin.size else float("inf")
        print(f"mean hitting time {mean:.3f} (bound {expected_time_bound(cert, x0):.3f}), c={c:.6g}")
    else:
        print(f"finished {int(stats.finished.sum())}/{stats.runs} runs within {horizon} steps")
    return EXIT_OK


def cmd_simulate_trajectories(cfg: io.RunConfig) -> int:
    spec, pol = build_system(cfg)
    starts = spec.state_space.sample(rngmod.stream(cfg.seed, "trajectory-starts"), cfg.trajectories)
    rows = []
    for r, x0 in enumerate(starts):
        traj = rollout(spec, pol, x0, cfg.steps, rngmod.stream(cfg.seed, "trajectory", r),
                       noise=cfg.noise_scale > 0)
        rows += [[r, t, *row] for t, row in enumerate(traj)]
    path = _name(cfg, "trajectories", "csv")
    io.write_csv(path, ["run", "t", "x1", "x2"], rows)
    print(f"wrote {cfg.trajectories} trajectories of {cfg.steps} steps to {path}")
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "bound-experiment": cmd_bound_experiment,
    "simulate": cmd_simulate,
    "simulate-trajectories": cmd_simulate_trajectories,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsmcert", description="Learn and certify neural ranking supermartingales.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key=value run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--timeout", type=float, help="wall-clock limit in seconds for verify")
    p.add_argument("--refinement", choices=["scheduled", "on-demand", "both"])
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = io.load_config(args.config)
        for key in ("seed", "out", "timeout", "refinement"):
            if getattr(args, key) is not None:
                setattr(cfg, key, getattr(args, key))
        cfg.validate()
        return COMMANDS[args.command](cfg)
    except RsmError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
