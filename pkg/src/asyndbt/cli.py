"""``asyndbt`` command line: run, oracle, replay.

Exit codes: 0 success, 1 replay mismatch, 2 configuration error,
3 evaluator error, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .config import ConfigError, RunConfig, load_config
from .oracle import EnumerationTooLarge, EvaluatorError, EvaluatorSpec, evaluator_from_spec
from .simnet import InvariantViolation, Simulation
from .simplex import uniform
from .trace import Trace, TraceFormatError, check_invariants, first_divergence, read_lines

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_EVALUATOR = 3
EXIT_INVARIANT = 4


def apply_overrides(cfg: RunConfig, seed=None, out=None, iters=None, evaluator=None):
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if out is not None:
        cfg = cfg.replace(output_dir=str(out))
    if iters is not None:
        cfg = cfg.replace(sim=dataclasses.replace(cfg.sim, iterations=iters))
    if evaluator is not None:
        payload = dict(cfg.evaluator.payload) if cfg.evaluator.kind == "remote" else {}
        payload["endpoint"] = evaluator
        cfg = cfg.replace(evaluator=EvaluatorSpec("remote", payload))
    return cfg


def execute(cfg: RunConfig):
    """Run the simulation and check trace invariants; returns the trace."""
    sim = Simulation(cfg)
    try:
        trace = sim.run()
    finally:
        for e in {id(e): e for e in sim.worker_evaluators}.values():
            close = getattr(e, "close", None)
            if close is not None:
                close()
    try:
        check_invariants(trace)
    except AssertionError as exc:
        raise InvariantViolation(str(exc)) from exc
    return trace


def cmd_run(args):
    cfg = apply_overrides(load_config(args.config), args.seed, args.out, args.iters, args.evaluator)
    trace = execute(cfg)
    jsonl, table = trace.write(cfg.output_dir, args.name)
    summary = trace.summary
    print(f"trace: {jsonl}")
    print(f"summary: {table}")
    print(f"iterations: {summary['iterations']}  clock: {summary['clock']!r}  "
          f"early stop: {summary['stopped_early']}")
    print(f"final loss: {summary['final_loss']!r}")
    print(f"consensus tokens: {summary['consensus_tokens']}")
    for d in summary["decoded"]:
        print(f"worker {d['worker']}: tokens {d['tokens']} demos {d['demos']}")
    return EXIT_OK


def oracle_report(cfg: RunConfig):
    evaluator = evaluator_from_spec(cfg.evaluator, cfg.shape)
    shape = cfg.shape
    best, loss = evaluator.optimum()
    p, q = uniform(shape.N, shape.M), uniform(shape.V, shape.U)
    gp, gq = evaluator.expected_gradients(p, q)
    return {
        "shape": shape.to_dict(),
        "optimum": {"tokens": [int(t) for t in best.tokens], "demos": [int(d) for d in best.demos]},
        "loss": float(loss),
        "uniform": {
            "expected_loss": float(evaluator.expected_loss(p, q)),
            "grad_p": np.asarray(gp).tolist(),
            "grad_q": np.asarray(gq).tolist(),
        },
    }


def cmd_oracle(args):
    cfg = apply_overrides(load_config(args.config), args.seed)
    try:
        report = oracle_report(cfg)
    except EnumerationTooLarge as exc:
        raise ConfigError(f"shape too large for the oracle: {exc}") from exc
    print(json.dumps(report, indent=2))
    return EXIT_OK


def replay_trace(path, seed=None):
    """Re-execute a trace's embedded config; returns ``(index_or_None, expected, actual)``.

    Record 0 is the header; its config hash is checked, then the run is
    repeated and every following record compared byte for byte.
    """
    lines = read_lines(path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("type") != "header" or "config" not in header:
        raise TraceFormatError(f"{path}: first record is not a trace header")
    cfg = RunConfig.from_dict(header["config"])
    if cfg.config_hash() != header.get("config_hash"):
        return 0, lines[0], "config hash does not match the embedded config"
    if header.get("backend") not in (None, _kernels.BACKEND):
        logging.getLogger(__name__).warning(
            "trace was produced with the %s backend, replaying with %s", header["backend"], _kernels.BACKEND)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    fresh = list(execute(cfg).lines())
    idx = first_divergence(lines[1:], fresh[1:])
    if idx is None:
        return None, None, None
    idx += 1
    expected = lines[idx] if idx < len(lines) else "<end of trace>"
    actual = fresh[idx] if idx < len(fresh) else "<end of trace>"
    return idx, expected, actual


def cmd_replay(args):
    idx, expected, actual = replay_trace(args.trace, args.seed)
    if idx is None:
        print(f"identical: {args.trace}")
        return EXIT_OK
    print(f"divergence at record {idx}")
    print(f"  trace:  {expected[:200]}")
    print(f"  replay: {actual[:200]}")
    return EXIT_MISMATCH


def build_parser():
    ap = argparse.ArgumentParser(prog="asyndbt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a configured run and write trace files")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--iters", type=int)
    run.add_argument("--evaluator", help="remote endpoint tcp:HOST:PORT or stdio:CMD")
    run.add_argument("--name", default="trace", help="trace file stem (default: trace)")
    run.set_defaults(func=cmd_run)

    orc = sub.add_parser("oracle", help="enumerated optimum and exact gradients at uniform")
    orc.add_argument("--config", required=True, type=Path)
    orc.add_argument("--seed", type=int)
    orc.set_defaults(func=cmd_oracle)

    rep = sub.add_parser("replay", help="re-execute a trace and compare byte for byte")
    rep.add_argument("trace", type=Path)
    rep.add_argument("--seed", type=int, help="replay under a different seed")
    rep.set_defaults(func=cmd_replay)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EvaluatorError, OSError) as exc:
        print(f"evaluator error: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
