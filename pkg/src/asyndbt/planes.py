"""Cutting-plane polyhedra approximating ``{x : h(x) <= epsilon}`` per token slot.

A point is the stacked ``(p_1, ..., p_R, z)`` for one slot.  Each plane is
``sum_v a_v . p_v + b . z + c <= 0``, built from an L1 subgradient of ``h`` at
an infeasible point, so it separates that point while keeping every point
with ``h <= epsilon``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .lower import PhiEstimate
from .simplex import sign_subgradient

FEASIBILITY_TOL = 1e-12
MAX_PLANES = 64


@dataclass
class CuttingPlane:
    id: int
    slot: int
    a: np.ndarray   # (R, N)
    b: np.ndarray   # (N,)
    c: float
    dual: float = 0.0
    created_at: int = 0

    def value(self, p_list, z):
        val = float(np.sum(self.a * p_list)) + self.c
        if z is not None:
            val += float(self.b @ z)
        return val

    def to_record(self):
        return {
            "type": "plane",
            "id": self.id,
            "slot": self.slot,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c,
            "dual": self.dual,
            "created_at": self.created_at,
        }


@dataclass
class Polyhedron:
    slot: int
    epsilon: float
    planes: list[CuttingPlane] = field(default_factory=list)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    def __len__(self):
        return len(self.planes)

    def add(self, plane: CuttingPlane):
        if plane.slot != self.slot:
            raise ValueError(f"plane for slot {plane.slot} added to polyhedron of slot {self.slot}")
        self.planes.append(plane)

    def values(self, p_list, z):
        return np.array([pl.value(p_list, z) for pl in self.planes])

    def duals(self):
        return np.array([pl.dual for pl in self.planes])

    def remove(self, ids):
        ids = set(ids)
        self.planes = [pl for pl in self.planes if pl.id not in ids]

    def snapshot(self):
        return copy.deepcopy(self)


def plane_value(pl: CuttingPlane, p_list, z):
    p_list = np.asarray(p_list, dtype=np.float64)
    if p_list.shape != pl.a.shape:
        raise ValueError(f"point has shape {p_list.shape}, plane expects {pl.a.shape}")
    if z is not None and np.shape(z) != pl.b.shape:
        raise ValueError("consensus dimension mismatch")
    return pl.value(p_list, z)


def h_stacked(phi_p, phi_z, p_list, z):
    val = float(np.abs(np.asarray(p_list) - phi_p).sum())
    if z is not None and phi_z is not None:
        val += float(np.abs(np.asarray(z) - phi_z).sum())
    return val


def generate_plane(phi_p, phi_z, p_list, z, epsilon, plane_id=0, slot=0, created_at=0):
    """Linearize ``h`` at the violating point and shift by ``epsilon``.

    ``phi_p`` / ``phi_z`` are the slot's estimate blocks (``phi_z`` is None in
    the centralized variant, which has no consensus block).
    """
    p_list = np.asarray(p_list, dtype=np.float64)
    h = h_stacked(phi_p, phi_z, p_list, z)
    if not h > epsilon:
        raise ValueError(f"point is feasible (h = {h:.3g} <= epsilon = {epsilon:.3g}); no plane needed")
    a = sign_subgradient(p_list - phi_p)
    if z is None:
        b = np.zeros(p_list.shape[-1])
        lin = float(np.sum(a * p_list))
    else:
        b = sign_subgradient(np.asarray(z) - phi_z)
        lin = float(np.sum(a * p_list) + b @ z)
    c = h - lin - epsilon
    return CuttingPlane(plane_id, slot, a, b, c, 0.0, created_at)


def generate_plane_from_phi(phi: PhiEstimate, slot, p_list, z, epsilon, plane_id=0, created_at=0):
    phi_p = phi.p[slot] if phi.p.ndim == 3 else phi.p
    phi_z = None if phi.z is None else (phi.z[slot] if phi.z.ndim == 2 else phi.z)
    return generate_plane(phi_p, phi_z, p_list, z, epsilon, plane_id, slot, created_at)


def is_feasible(poly: Polyhedron, p_list, z, tol=FEASIBILITY_TOL):
    return all(pl.value(p_list, z) <= tol for pl in poly.planes)


def prune(poly: Polyhedron, gamma, window_duals):
    """Drop planes whose (slot-summed) dual was below ``gamma`` at both checkpoints.

    ``window_duals`` maps plane id to ``(dual_previous, dual_current)``;
    planes without a two-checkpoint history are kept.
    """
    removed = []
    for pl in poly.planes:
        window = window_duals.get(pl.id)
        if window is None or len(window) < 2:
            continue
        if window[0] < gamma and window[1] < gamma:
            removed.append(pl.id)
    poly.remove(removed)
    return removed


def enforce_cap(poly: Polyhedron, max_planes=MAX_PLANES):
    """Remove lowest-dual planes (oldest first on ties) until at most ``max_planes`` remain."""
    removed = []
    while len(poly.planes) > max_planes:
        worst = min(poly.planes, key=lambda pl: (pl.dual, pl.id))
        removed.append(worst.id)
        poly.remove([worst.id])
    return removed


def sample_points(rng, n_workers, n, count, center=None, radius=None, consensus=True):
    """Random stacked points ``(p_list, z)``.

    Half are Dirichlet draws on the simplex; with a ``center`` the rest are
    L1-perturbations of it of size up to ``radius`` so the region near the
    lower-level estimate is covered too.
    """
    pts = []
    for s in range(count):
        if center is None or s % 2 == 0:
            p_list = rng.dirichlet(np.ones(n), n_workers)
            z = rng.dirichlet(np.ones(n)) if consensus else None
        else:
            cp, cz = center
            blocks = n_workers + (1 if consensus else 0)
            d = rng.standard_normal((blocks, n))
            d *= rng.uniform(0, radius) / np.abs(d).sum()
            p_list = cp + d[:n_workers]
            z = cz + d[n_workers] if consensus else None
        pts.append((p_list, z))
    return pts


def audit_nestedness(history, sample_count, rng, center=None, radius=0.5):
    """Count sampled points feasible at checkpoint ``n+1`` but not at ``n``.

    ``history`` is a list of polyhedron snapshots for one slot, oldest first,
    taken with pruning disabled.
    """
    report = {"checkpoints": len(history), "samples": sample_count, "violations": 0}
    if len(history) < 2:
        return report
    ref = next((pl for poly in history for pl in poly.planes), None)
    if ref is None:
        return report
    n_workers, n = ref.a.shape
    consensus = bool(np.any(ref.b)) or center is None or center[1] is not None
    pts = sample_points(rng, n_workers, n, sample_count, center, radius, consensus)
    violations = 0
    for p_list, z in pts:
        feas = [is_feasible(poly, p_list, z) for poly in history]
        violations += sum(1 for before, after in zip(feas, feas[1:]) if after and not before)
    report["violations"] = violations
    return report
