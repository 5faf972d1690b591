"""Deterministic event-driven simulation of the asynchronous federated optimizer.

One call to :func:`run` plays the whole timeline: every round the server
forms the reachable worker set, waits (in simulated time) for their
messages, takes its step and hands the reachable workers a fresh snapshot.
Every ``delta`` rounds it re-estimates the lower-level solution and refreshes
the cutting-plane polyhedra.  All randomness comes from named streams
derived from the run seed, so a (config, seed) pair fixes the trace byte
for byte.
"""
from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np

from . import _kernels
from .config import RunConfig, SimConfig
from .federated import ServerState, WorkerState, decode_solution, server_step, worker_step
from .lower import LowerState, estimate_phi
from .oracle import (
    EnumerationTooLarge,
    EvaluatorError,
    PooledEvaluator,
    evaluator_from_spec,
    monte_carlo_loss,
    reinforce_gradients,
)
from .planes import Polyhedron, enforce_cap, generate_plane, h_stacked, prune
from .simplex import is_prob_vector, uniform
from .trace import Trace

log = logging.getLogger(__name__)

TRACE_FORMAT = "asyndbt-trace/1"

# random stream identifiers, combined with the run seed (and a worker index)
STREAM_UPPER = 1
STREAM_INNER = 2
STREAM_REACH = 3
STREAM_LATENCY = 4
STREAM_BYZANTINE = 5
STREAM_TRACE = 6
STREAM_DATA = 7


class InvariantViolation(RuntimeError):
    """Internal consistency check failed (a bug, not a user error)."""


def stream(seed, kind, index=0):
    return np.random.default_rng([int(seed), kind, index])


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

def form_reachable_set(cfg: SimConfig, iteration, staleness, rng):
    """Workers the server hears from this round.

    ``staleness[v]`` counts rounds since worker ``v`` was last included
    (``iteration + 1`` before its first inclusion).  Available workers are
    drawn independently (or read from ``cfg.schedule``); every worker whose
    staleness reached ``tau`` is added; an empty result gets the stalest
    worker (lowest index on ties).
    """
    n = len(staleness)
    if cfg.schedule is not None:
        avail = {int(v) for v in cfg.schedule[iteration % len(cfg.schedule)]}
    else:
        u = rng.random(n)  # always n draws so the stream position is config-independent
        avail = {v for v in range(n) if u[v] < cfg.availability_of(v)}
    forced = {v for v in range(n) if staleness[v] >= cfg.tau}
    out = avail | forced
    if not out:
        out = {int(np.argmax(staleness))}
    return sorted(out)


def advance_clock(clock, ready_at, candidates, waited, synchronous=False, min_step=0.0):
    """Time at which the server commits this round, and who made it.

    In synchronous mode the server waits for every candidate.  Otherwise it
    waits for the ``waited`` workers (those it must include) or, if there
    are none, for the first candidate message; every candidate whose message
    has arrived by then is included.  A round never takes less than
    ``min_step`` (one step of the fastest candidate), so messages that sat
    idle while their sender was unreachable cannot make rounds free.
    """
    candidates = list(candidates)
    floor = clock + min_step
    if synchronous:
        t = max([floor] + [ready_at[v] for v in candidates])
        return t, candidates
    if waited:
        t = max([floor] + [ready_at[v] for v in waited])
    else:
        t = max(floor, min(ready_at[v] for v in candidates))
    included = [v for v in candidates if ready_at[v] <= t or v in waited]
    return t, included


# ---------------------------------------------------------------------------
# Byzantine behaviour
# ---------------------------------------------------------------------------

class ByzantineMode:
    """What a malicious worker puts on the wire instead of its honest vector."""

    def __init__(self, kind, rng):
        self.kind = kind
        self.rng = rng
        self._first = None

    def corrupt(self, p_honest, z):
        p_honest = np.asarray(p_honest, dtype=np.float64)
        if self.kind == "sign_flip":
            ref = np.full_like(p_honest, 1.0 / p_honest.shape[-1]) if z is None else z
            return np.clip(2.0 * ref - p_honest, 0.0, 1.0)
        if self.kind == "random_simplex":
            lead = p_honest.shape[:-1]
            return self.rng.dirichlet(np.ones(p_honest.shape[-1]), size=lead or None)
        if self.kind == "fixed_corner":
            out = np.zeros_like(p_honest)
            out[..., -1] = 1.0
            return out
        if self.kind == "stale_replay":
            if self._first is None:
                self._first = p_honest.copy()
            return self._first.copy()
        raise ValueError(f"unknown Byzantine mode {self.kind!r}")


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------

def build_evaluators(cfg: RunConfig):
    """One evaluator per worker; ``worker_noise`` gives each its own data."""
    base = evaluator_from_spec(cfg.evaluator, cfg.shape)
    out = []
    for v in range(cfg.sim.n_workers):
        if cfg.worker_noise > 0 and hasattr(base, "perturbed"):
            out.append(base.perturbed(stream(cfg.seed, STREAM_DATA, v), cfg.worker_noise))
        else:
            out.append(base)
    return out


class Simulation:
    """State of one run; :meth:`run` drives it to completion."""

    def __init__(self, cfg: RunConfig, evaluators=None):
        self.cfg = cfg
        sim, shape = cfg.sim, cfg.shape
        self.central = cfg.mode == "cen"
        if evaluators is None:
            evaluators = build_evaluators(cfg)
        if len(evaluators) < sim.n_benign:
            raise ValueError("need an evaluator for every benign worker")
        self.benign_evaluators = list(evaluators[: sim.n_benign])
        if self.central:
            pooled = PooledEvaluator(self.benign_evaluators)
            self.worker_evaluators = [pooled]
            self.n_benign = 1
            self.latency = [max(sim.latency_of(v) for v in range(sim.n_benign))]
            self.byzantine = {}
        else:
            if len(evaluators) < sim.n_workers:
                evaluators = list(evaluators) + [evaluators[0]] * (sim.n_workers - len(evaluators))
            self.worker_evaluators = list(evaluators[: sim.n_workers])
            self.n_benign = sim.n_benign
            self.latency = [sim.latency_of(v) for v in range(sim.n_workers)]
            self.byzantine = {
                sim.n_benign + b: ByzantineMode(mode, stream(cfg.seed, STREAM_BYZANTINE, sim.n_benign + b))
                for b, mode in enumerate(sim.modes())
            }
        self.R = len(self.worker_evaluators)
        seed = cfg.seed
        self.workers = [
            WorkerState.uniform(v, shape, self.worker_evaluators[v], stream(seed, STREAM_UPPER, v))
            for v in range(self.R)
        ]
        self.inner_rngs = [stream(seed, STREAM_INNER, v) for v in range(self.R)]
        self.reach_rng = stream(seed, STREAM_REACH)
        self.latency_rng = stream(seed, STREAM_LATENCY)
        self.trace_rng = stream(seed, STREAM_TRACE)
        z = None if self.central else uniform(shape.N, shape.M)
        self.server = ServerState(
            z=z,
            polyhedra=[Polyhedron(i, sim.epsilon) for i in range(shape.M)],
            latest_p=np.stack([w.p for w in self.workers]),
        )
        snap = self.server.snapshot()
        self.snapshots = [snap] * self.R
        self.last_round = [-1] * self.R
        self.ready_at = [self._latency(v) for v in range(self.R)]
        self.clock = 0.0
        self.phi = None
        self.prev_group_duals: dict = {}
        self.polyhedra_history = []
        self.records = []
        self.failures = 0
        self._exact_loss = self._probe_exact_loss()
        self.optima = self._optima()

    # -- helpers -----------------------------------------------------------
    def _latency(self, v):
        base = self.latency[v]
        jitter = self.cfg.sim.latency_jitter
        if jitter > 0:
            base *= 1.0 + jitter * self.latency_rng.uniform(-1.0, 1.0)
        return base

    def _probe_exact_loss(self):
        shape = self.cfg.shape
        p, q = uniform(shape.N, shape.M), uniform(shape.V, shape.U)
        try:
            for e in self.benign_evaluators:
                e.expected_loss(p, q)
        except (EvaluatorError, EnumerationTooLarge):
            return False
        return True

    def _optima(self):
        evals = self.worker_evaluators[:1] if self.central else self.benign_evaluators
        out = []
        for e in evals:
            try:
                a, _ = e.optimum()
            except (EvaluatorError, EnumerationTooLarge):
                return None
            out.append(np.concatenate([a.tokens, a.demos]))
        return out

    def _loss_of(self, p, q):
        if self._exact_loss:
            return float(np.mean([e.expected_loss(p, q) for e in self.benign_evaluators]))
        n = self.cfg.trace_mc_samples
        return float(np.mean([monte_carlo_loss(p, q, e, n, self.trace_rng) for e in self.benign_evaluators]))

    def global_loss(self):
        if self.central:
            w = self.workers[0]
            return self._loss_of(w.p, w.q)
        vals = []
        for v in range(self.n_benign):
            w = self.workers[v]
            e = self.benign_evaluators[v]
            if self._exact_loss:
                vals.append(e.expected_loss(w.p, w.q))
            else:
                vals.append(monte_carlo_loss(w.p, w.q, e, self.cfg.trace_mc_samples, self.trace_rng))
        return float(np.mean(vals))

    def residual(self):
        z = self.server.z
        diffs = [np.abs(self.workers[v].p - z).sum(axis=1) for v in range(self.n_benign)]
        return np.sum(diffs, axis=0)

    def accuracy(self):
        if self.optima is None:
            return None
        fracs = []
        for v, opt in enumerate(self.optima):
            a = decode_solution(self.workers[v])
            got = np.concatenate([a.tokens, a.demos])
            fracs.append(float(np.mean(got == opt)) if got.size else 1.0)
        return float(np.mean(fracs))

    # -- one round -----------------------------------------------------------
    def _round(self, k):
        sim = self.cfg.sim
        staleness = [k - self.snapshots[v].iteration for v in range(self.R)]
        if max(staleness) > sim.tau:
            raise InvariantViolation(f"staleness bound exceeded at iteration {k}: {staleness}")
        if sim.synchronous or self.central:
            t, included = advance_clock(self.clock, self.ready_at, range(self.R), (), synchronous=True)
        else:
            intervals = [k - self.last_round[v] for v in range(self.R)]
            cand = form_reachable_set(sim, k, intervals, self.reach_rng)
            waited = [v for v in cand if intervals[v] >= sim.tau]
            if not waited and len(cand) == 1:
                waited = cand  # the fallback worker is waited for
            min_step = min(self.latency[v] for v in cand)
            t, included = advance_clock(self.clock, self.ready_at, cand, waited, min_step=min_step)
        msgs, failed = [], []
        for v in included:
            w, snap = self.workers[v], self.snapshots[v]
            try:
                new_w, msg = worker_step(w, snap, self.cfg.upper, self.cfg.gradient, iteration=k)
            except EvaluatorError as exc:
                log.warning("worker %d step failed at iteration %d: %s", v, k, exc)
                failed.append(v)
                continue
            self.workers[v] = new_w
            if v in self.byzantine:
                msg = dataclasses.replace(msg, p=self.byzantine[v].corrupt(new_w.p, snap.z))
            msgs.append(msg)
        self.failures += len(failed)
        server_step(self.server, msgs, self.cfg.upper)
        snap = self.server.snapshot()
        for v in included:
            self.snapshots[v] = snap
            self.last_round[v] = k
            self.ready_at[v] = t + self._latency(v)
        self.clock = t
        return included, failed, staleness

    # -- polyhedron refresh --------------------------------------------------
    def _demo_realization(self):
        shape = self.cfg.shape
        demos = np.zeros((self.R, shape.U), dtype=np.int64)
        for v, w in enumerate(self.workers):
            if shape.U == 0:
                continue
            if self.cfg.inner.demo_choice == "mode":
                demos[v] = np.argmax(w.q, axis=1)
            else:
                cdf = np.cumsum(w.q, axis=1)
                u = self.inner_rngs[v].random(shape.U) * cdf[:, -1]
                demos[v] = np.minimum([np.searchsorted(cdf[i], u[i], side="right") for i in range(shape.U)],
                                      shape.V - 1)
        return demos

    def _grad_source(self, demos):
        shape, gcfg = self.cfg.shape, self.cfg.gradient

        def grad(v, p_v):
            e = self.worker_evaluators[v]
            q = np.zeros((shape.U, shape.V))
            q[np.arange(shape.U), demos[v]] = 1.0
            try:
                if gcfg.estimator == "exact":
                    return e.expected_gradients(p_v, q)[0]
                est = reinforce_gradients(p_v, q, e, gcfg.samples, self.inner_rngs[v], gcfg.baseline,
                                          gcfg.p_min, fixed_demos=demos[v])
                return est.grad_p
            except EvaluatorError as exc:
                log.warning("worker %d inner gradient failed: %s", v, exc)
                self.failures += 1
                return np.zeros_like(p_v)

        return grad

    def _checkpoint(self, k):
        cfg, sim, srv = self.cfg, self.cfg.sim, self.server
        demos = self._demo_realization()
        if self.phi is None:
            p0 = np.transpose(srv.latest_p, (1, 0, 2))
            z0 = srv.z if srv.z is not None else srv.latest_p[0]
            init = LowerState.start(p0, z0)
        else:
            init = LowerState.start(self.phi.p, self.phi.z)  # duals restart at zero
        corrupt = None
        if self.byzantine:
            def corrupt(v, p_local, z):
                mode = self.byzantine.get(v)
                return None if mode is None else mode.corrupt(p_local, z)
        self.phi = estimate_phi(demos, init, cfg.inner, self._grad_source(demos), corrupt)

        # prune on the two-checkpoint window of checkpoint-summed duals
        groups: dict = {}
        for poly in srv.polyhedra:
            for pl in poly.planes:
                groups[pl.created_at] = groups.get(pl.created_at, 0.0) + pl.dual
        removed = []
        if sim.prune:
            window = {}
            for poly in srv.polyhedra:
                for pl in poly.planes:
                    if pl.created_at in self.prev_group_duals:
                        window[pl.id] = (self.prev_group_duals[pl.created_at], groups[pl.created_at])
            for poly in srv.polyhedra:
                removed += prune(poly, sim.gamma, window)

        added, h_vals = [], []
        for i, poly in enumerate(srv.polyhedra):
            p_list = srv.latest_p[:, i, :]
            z_i = None if srv.z is None else srv.z[i]
            phi_z = None if srv.z is None else self.phi.z[i]
            h = h_stacked(self.phi.p[i], phi_z, p_list, z_i)
            h_vals.append(h)
            if h > sim.epsilon:
                pl = generate_plane(self.phi.p[i], phi_z, p_list, z_i, sim.epsilon, srv.next_plane_id, i, k)
                srv.next_plane_id += 1
                poly.add(pl)
                added.append(pl)
            if sim.max_planes > 0:
                removed += enforce_cap(poly, sim.max_planes)
        self.prev_group_duals = dict(groups)
        if added:
            self.prev_group_duals[k] = 0.0
        if sim.record_polyhedra:
            self.polyhedra_history.append([poly.snapshot() for poly in srv.polyhedra])

        # planes go to every worker; each keeps the consensus it last saw
        fresh = srv.snapshot()
        self.snapshots = [
            dataclasses.replace(s, plane_a=fresh.plane_a, plane_dual=fresh.plane_dual) for s in self.snapshots
        ]
        if sim.charge_inner_loop and cfg.inner.K:
            cost = cfg.inner.K * max(self.latency)
            self.ready_at = [r + cost if r > self.clock else r for r in self.ready_at]
            self.clock += cost
        recs = [pl.to_record() for pl in added]
        recs.append({
            "type": "checkpoint",
            "iteration": k,
            "h": [float(x) for x in h_vals],
            "added": [pl.id for pl in added],
            "removed": sorted(removed),
        })
        return recs

    # -- invariants ----------------------------------------------------------
    def _check(self, k):
        for w in self.workers:
            if not (is_prob_vector(w.p) and (w.q.size == 0 or is_prob_vector(w.q))):
                raise InvariantViolation(f"worker {w.worker_id} left the simplex at iteration {k}")
        if self.server.z is not None and not is_prob_vector(self.server.z):
            raise InvariantViolation(f"consensus left the simplex at iteration {k}")
        for poly in self.server.polyhedra:
            if any(pl.dual < 0 for pl in poly.planes):
                raise InvariantViolation(f"negative dual at iteration {k}")

    # -- driver --------------------------------------------------------------
    def header(self):
        return {
            "type": "header",
            "format": TRACE_FORMAT,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "backend": _kernels.BACKEND,
        }

    def step(self, k):
        """Play round ``k`` (and the checkpoint it closes, if any).

        Returns the iteration record and the plane/checkpoint records that
        follow it in the trace.
        """
        included, failed, staleness = self._round(k)
        extra = self._checkpoint(k) if (k + 1) % self.cfg.sim.delta == 0 else []
        self._check(k)
        rec = {
            "type": "iter",
            "iteration": k,
            "clock": float(self.clock),
            "reachable": [int(v) for v in included],
            "loss": self.global_loss(),
        }
        if not self.central:
            rec["residual"] = [float(x) for x in self.residual()]
        rec["planes"] = self.server.active_planes()
        rec["staleness"] = staleness
        rec["accuracy"] = self.accuracy()
        if failed:
            rec["failed"] = failed
        return rec, extra

    def run(self, iterations=None):
        sim = self.cfg.sim
        n_iter = sim.iterations if iterations is None else iterations
        best, stall, stopped = math.inf, 0, False
        done = 0
        for k in range(n_iter):
            rec, extra = self.step(k)
            self.records.append(rec)
            self.records.extend(extra)
            done = k + 1
            if extra and sim.early_stop_patience > 0:
                if rec["loss"] < best - sim.early_stop_tol:
                    best, stall = rec["loss"], 0
                else:
                    stall += 1
                    if stall >= sim.early_stop_patience:
                        stopped = True
                        break
        self.records.append(self.summary(done, stopped))
        return Trace(self.header(), self.records)

    def consensus_tokens(self):
        if self.server.z is None:
            return [int(j) for j in np.argmax(self.workers[0].p, axis=1)]
        return [int(j) for j in np.argmax(self.server.z, axis=1)]

    def summary(self, done, stopped):
        decoded = []
        for v in range(self.n_benign):
            a = decode_solution(self.workers[v])
            decoded.append({"worker": v, "tokens": [int(t) for t in a.tokens], "demos": [int(d) for d in a.demos]})
        return {
            "type": "summary",
            "iterations": done,
            "stopped_early": stopped,
            "clock": float(self.clock),
            "final_loss": self._last_loss(),
            "consensus_tokens": self.consensus_tokens(),
            "decoded": decoded,
            "failures": self.failures,
        }

    def _last_loss(self):
        for rec in reversed(self.records):
            if rec.get("type") == "iter":
                return rec["loss"]
        return self.global_loss()


def run(cfg: RunConfig, evaluators=None, iterations=None):
    """Execute one run and return ``(trace, simulation)``."""
    simulation = Simulation(cfg, evaluators)
    trace = simulation.run(iterations)
    return trace, simulation
