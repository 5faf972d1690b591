"""Upper-level worker and server updates over the regularized Lagrangian.

Workers take projected steps on their fragment distributions ``p`` (pulled by
the active cutting planes and the consensus) and on their local
demonstration distributions ``q``.  The server moves the consensus ``z`` and
performs regularized projected dual ascent on every plane multiplier.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .oracle import DiscreteAssignment, EvaluatorError, reinforce_gradients
from .planes import Polyhedron
from .simplex import project_dual, project_to_simplex, sanitize, uniform


@dataclass
class UpperConfig:
    eta_p: float = 1e-2
    eta_q: float = 1e-2
    eta_z: float = 1e-2
    eta_lambda: float = 1e-1
    c1: float = 1e-2
    psi: float = 0.01
    lambda_max: float = 1e3
    optimizer: str = "sgd"  # or "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.eta_p, self.eta_q, self.eta_z, self.eta_lambda) <= 0:
            raise ValueError("learning rates must be positive")
        if self.c1 < 0 or self.psi < 0 or self.lambda_max <= 0:
            raise ValueError("need c1 >= 0, psi >= 0, lambda_max > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class GradientConfig:
    estimator: str = "reinforce"  # or "exact"
    samples: int = 8
    baseline: bool = True
    p_min: float = 1e-6

    def __post_init__(self):
        if self.estimator not in ("reinforce", "exact"):
            raise ValueError("estimator must be 'reinforce' or 'exact'")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0 < self.p_min <= 1:
            raise ValueError("p_min must be in (0, 1]")


@dataclass(frozen=True)
class Snapshot:
    """Immutable server state a worker computes against."""

    iteration: int
    z: np.ndarray | None              # (M, N), None when there is no consensus
    plane_a: tuple = ()               # per slot: (L_i, R, N)
    plane_dual: tuple = ()            # per slot: (L_i,)

    def plane_pull(self, worker_id, shape_p):
        pull = np.zeros(shape_p)
        for i, (a, lam) in enumerate(zip(self.plane_a, self.plane_dual)):
            if len(lam):
                pull[i] = lam @ a[:, worker_id, :]
        return pull


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def direction(self, grad, cfg: UpperConfig):
        t = self.t + 1
        m = cfg.adam_beta1 * self.m + (1 - cfg.adam_beta1) * grad
        v = cfg.adam_beta2 * self.v + (1 - cfg.adam_beta2) * grad * grad
        mhat = m / (1 - cfg.adam_beta1**t)
        vhat = v / (1 - cfg.adam_beta2**t)
        return mhat / (np.sqrt(vhat) + cfg.adam_eps), AdamState(m, v, t)


@dataclass
class WorkerState:
    worker_id: int
    p: np.ndarray   # (M, N)
    q: np.ndarray   # (U, V)
    evaluator: Any
    rng: np.random.Generator
    last_sync: int = 0
    adam_p: AdamState | None = None
    adam_q: AdamState | None = None

    @classmethod
    def uniform(cls, worker_id, shape, evaluator, rng):
        return cls(worker_id, uniform(shape.N, shape.M), uniform(shape.V, shape.U), evaluator, rng)


@dataclass(frozen=True)
class WorkerUpdateMsg:
    worker_id: int
    iteration: int
    p: np.ndarray
    q: np.ndarray
    loss: float = float("nan")


@dataclass
class ServerState:
    z: np.ndarray | None               # (M, N)
    polyhedra: list[Polyhedron]
    latest_p: np.ndarray               # (R, M, N) last vector received from every worker
    rho: np.ndarray | None = None      # (M, R, N) inner-solver duals
    iteration: int = 0
    next_plane_id: int = 1
    latest_q: dict = field(default_factory=dict)

    def snapshot(self):
        z = None if self.z is None else self.z.copy()
        a = tuple(
            np.array([pl.a for pl in poly.planes]).reshape(len(poly.planes), *self.latest_p.shape[::2])
            for poly in self.polyhedra
        )
        lam = tuple(np.array([pl.dual for pl in poly.planes], dtype=np.float64) for poly in self.polyhedra)
        return Snapshot(self.iteration, z, a, lam)

    def active_planes(self):
        return sum(len(poly) for poly in self.polyhedra)


def local_gradients(w: WorkerState, gcfg: GradientConfig):
    if gcfg.estimator == "exact":
        gp, gq = w.evaluator.expected_gradients(w.p, w.q)
        return gp, gq, float("nan")
    est = reinforce_gradients(w.p, w.q, w.evaluator, gcfg.samples, w.rng, gcfg.baseline, gcfg.p_min)
    return est.grad_p, est.grad_q, est.mean_loss


def worker_step(w: WorkerState, snap: Snapshot, ucfg: UpperConfig, gcfg: GradientConfig, iteration=None):
    """One projected step on ``p`` and ``q`` against a (possibly stale) snapshot.

    Returns the new state and the message for the server.  An evaluator
    failure propagates with the worker's state, random stream included,
    untouched.
    """
    rng_state = w.rng.bit_generator.state
    try:
        gp, gq, loss = local_gradients(w, gcfg)
    except EvaluatorError:
        w.rng.bit_generator.state = rng_state
        raise
    dir_p = gp + snap.plane_pull(w.worker_id, w.p.shape)
    if snap.z is not None and ucfg.psi:
        dir_p = dir_p + ucfg.psi * np.sign(w.p - snap.z)
    dir_q = gq
    adam_p, adam_q = w.adam_p, w.adam_q
    if ucfg.optimizer == "adam":
        adam_p = adam_p or AdamState(np.zeros_like(w.p), np.zeros_like(w.p))
        adam_q = adam_q or AdamState(np.zeros_like(w.q), np.zeros_like(w.q))
        dir_p, adam_p = adam_p.direction(dir_p, ucfg)
        dir_q, adam_q = adam_q.direction(dir_q, ucfg)
    p = project_to_simplex(w.p - ucfg.eta_p * dir_p)
    q = project_to_simplex(w.q - ucfg.eta_q * dir_q) if w.q.size else w.q.copy()
    it = snap.iteration if iteration is None else iteration
    new = dataclasses.replace(w, p=p, q=q, last_sync=snap.iteration, adam_p=adam_p, adam_q=adam_q)
    return new, WorkerUpdateMsg(w.worker_id, it, p.copy(), q.copy(), loss)


def receive(s: ServerState, updates):
    """Store the latest vectors; anything a sender put on the wire is clamped into [0, 1]."""
    for msg in updates:
        s.latest_p[msg.worker_id] = sanitize(msg.p)
        s.latest_q[msg.worker_id] = np.asarray(msg.q)


def server_step(s: ServerState, updates, ucfg: UpperConfig):
    """Consensus step then regularized dual ascent at the new consensus."""
    receive(s, updates)
    if s.z is not None:
        new_z = np.empty_like(s.z)
        for i, poly in enumerate(s.polyhedra):
            pull = np.zeros(s.z.shape[1])
            for pl in poly.planes:
                pull += pl.dual * pl.b
            sign_sum = np.sum(np.sign(s.z[i][None, :] - s.latest_p[:, i, :]), axis=0)
            new_z[i] = s.z[i] - ucfg.eta_z * (pull + ucfg.psi * sign_sum)
        s.z = project_to_simplex(new_z)
    for i, poly in enumerate(s.polyhedra):
        z_i = None if s.z is None else s.z[i]
        for pl in poly.planes:
            val = pl.value(s.latest_p[:, i, :], z_i)
            pl.dual = float(project_dual(pl.dual + ucfg.eta_lambda * (val - ucfg.c1 * pl.dual), ucfg.lambda_max))
    s.iteration += 1
    return s


def decode_solution(w: WorkerState):
    """Per-slot argmax of ``p`` and ``q`` (lowest index wins ties)."""
    tokens = np.argmax(w.p, axis=1)
    demos = np.argmax(w.q, axis=1) if w.q.size else np.zeros(0, dtype=int)
    return DiscreteAssignment(tokens, demos)
