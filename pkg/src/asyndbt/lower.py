"""K-step consensus solver for the lower-level fragment distributions.

For one token slot the workers minimise ``sum_v g_v(p_v)`` subject to
``p_v = z`` through the augmented Lagrangian

    G(p, z, rho) = sum_v g_v(p_v) + rho_v . (p_v - z) + mu/2 ||p_v - z||^2

with projected primal descent on ``p_v`` (workers) and ``z`` (server) and dual
ascent on ``rho_v``.  All arrays carry the worker axis second to last, so the
same functions run one slot (``(R, N)``) or every slot at once
(``(M, R, N)``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simplex import l1_distance, project_to_simplex


@dataclass
class InnerConfig:
    K: int = 20
    mu: float = 1.0
    psi: float = 0.01
    eta_p: float = 0.05
    eta_z: float = 0.05
    eta_rho: float = 0.1
    demo_choice: str = "sample"  # or "mode"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.mu <= 0 or self.psi < 0:
            raise ValueError("need mu > 0 and psi >= 0")
        if min(self.eta_p, self.eta_z, self.eta_rho) <= 0:
            raise ValueError("step sizes must be positive")
        if self.demo_choice not in ("sample", "mode"):
            raise ValueError("demo_choice must be 'sample' or 'mode'")


@dataclass
class LowerState:
    p: np.ndarray    # (..., R, N) per-worker iterates as seen by the server
    z: np.ndarray    # (..., N) consensus
    rho: np.ndarray  # (..., R, N) duals

    @classmethod
    def start(cls, p, z, rho=None):
        p = np.array(p, dtype=np.float64)
        z = np.array(z, dtype=np.float64)
        rho = np.zeros_like(p) if rho is None else np.array(rho, dtype=np.float64)
        return cls(p, z, rho)

    def copy(self):
        return LowerState(self.p.copy(), self.z.copy(), self.rho.copy())

    @property
    def n_workers(self):
        return self.p.shape[-2]


@dataclass
class PhiEstimate:
    p: np.ndarray           # (..., R, N)
    z: np.ndarray           # (..., N)
    demos_used: np.ndarray  # (R, U) demonstration realization per worker
    step_count: int
    rho: np.ndarray | None = None
    history: list = field(default_factory=list)

    def stacked(self):
        return np.concatenate([self.p, self.z[..., None, :]], axis=-2)


def grad_gp(state: LowerState, v, g_grad, mu):
    """Gradients of G w.r.t. ``p_v``, ``z`` (summed over workers) and ``rho_v``."""
    p_v = state.p[..., v, :]
    diff = p_v - state.z
    d_p = np.asarray(g_grad, dtype=np.float64) + state.rho[..., v, :] + mu * diff
    d_z = np.sum(-state.rho + mu * (state.z[..., None, :] - state.p), axis=-2)
    return d_p, d_z, diff


def gp_value(state: LowerState, g_values, mu):
    """G evaluated at ``state``; ``g_values`` has one entry per worker (per slot)."""
    diff = state.p - state.z[..., None, :]
    coupling = np.sum(state.rho * diff, axis=-1) + 0.5 * mu * np.sum(diff * diff, axis=-1)
    return np.sum(np.asarray(g_values) + coupling, axis=-1)


def inner_worker_step(state: LowerState, v, g_grad, cfg: InnerConfig, p_local=None):
    """One projected descent step for worker ``v``.

    The robustness term pulls the iterate toward the consensus: the descent
    direction gets ``+psi * sign(p - z)``.  ``p_local`` overrides the
    iterate the worker steps from (a Byzantine worker's honest shadow differs
    from what the server received).
    """
    d_p, _, _ = grad_gp(state, v, g_grad, cfg.mu)
    p_v = state.p[..., v, :] if p_local is None else p_local
    step = d_p + cfg.psi * np.sign(p_v - state.z)
    return project_to_simplex(p_v - cfg.eta_p * step)


def inner_server_step(state: LowerState, received_p, cfg: InnerConfig):
    """Consensus descent then dual ascent at the new consensus; returns ``(z, rho)``."""
    received_p = np.asarray(received_p, dtype=np.float64)
    probe = LowerState(received_p, state.z, state.rho)
    _, d_z, _ = grad_gp(probe, 0, 0.0, cfg.mu)
    pull = cfg.psi * np.sum(np.sign(state.z[..., None, :] - received_p), axis=-2)
    z = project_to_simplex(state.z - cfg.eta_z * (d_z + pull))
    rho = state.rho + cfg.eta_rho * (received_p - z[..., None, :])
    return z, rho


def estimate_phi(demos, init: LowerState, cfg: InnerConfig, grad_source, corrupt=None, value_source=None):
    """Run ``cfg.K`` bulk-synchronous rounds from ``init``.

    Parameters
    ----------
    demos : array_like
        Demonstration realization ``(R, U)`` the gradients are conditioned on;
        stored on the estimate for later ``h_value`` checks.
    grad_source : callable
        ``grad_source(v, p_v) -> gradient of g_v`` at ``p_v`` (shape ``(..., N)``).
    corrupt : callable, optional
        ``corrupt(v, p_local, z) -> vector`` the server receives from worker
        ``v``, or ``None`` for an honest message.
    value_source : callable, optional
        ``value_source(v, p_v) -> g_v`` values; when given, G after every
        round is appended to ``history``.
    """
    state = init.copy()
    local = state.p.copy()
    n_workers = state.n_workers
    history = []
    for _ in range(cfg.K):
        received = np.empty_like(state.p)
        for v in range(n_workers):
            g = grad_source(v, local[..., v, :])
            local[..., v, :] = inner_worker_step(state, v, g, cfg, p_local=local[..., v, :])
            msg = None if corrupt is None else corrupt(v, local[..., v, :], state.z)
            received[..., v, :] = local[..., v, :] if msg is None else msg
        state.z, state.rho = inner_server_step(state, received, cfg)
        state.p = received
        if value_source is not None:
            g_vals = np.stack([np.asarray(value_source(v, state.p[..., v, :])) for v in range(n_workers)], axis=-1)
            history.append(gp_value(state, g_vals, cfg.mu))
    return PhiEstimate(state.p, state.z, np.asarray(demos), cfg.K, state.rho, history)


def h_value(demos, p_list, z, phi: PhiEstimate):
    """L1 distance of the stacked point ``(p_1..p_R, z)`` to the estimate (one slot)."""
    if not np.array_equal(np.asarray(demos), phi.demos_used):
        raise ValueError("phi was estimated for a different demonstration realization")
    p_list = np.asarray(p_list, dtype=np.float64)
    return l1_distance(p_list, phi.p) + l1_distance(z, phi.z)
