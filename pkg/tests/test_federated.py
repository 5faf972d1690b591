import dataclasses

import numpy as np
import pytest

from asyndbt.federated import (
    GradientConfig,
    ServerState,
    Snapshot,
    UpperConfig,
    WorkerState,
    WorkerUpdateMsg,
    decode_solution,
    server_step,
    worker_step,
)
from asyndbt.oracle import (
    ConstantEvaluator,
    EvaluatorError,
    ProblemShape,
    SeparableEvaluator,
    TableEvaluator,
    brute_force_optimum,
    exact_expected_loss,
)
from asyndbt.planes import CuttingPlane, Polyhedron
from conftest import bisection_projection

SHAPE = ProblemShape(2, 3, 1, 2)
EXACT = GradientConfig(estimator="exact")


def worker(evaluator, shape=SHAPE, seed=0, worker_id=0):
    return WorkerState.uniform(worker_id, shape, evaluator, np.random.default_rng(seed))


def server(z, latest_p, planes_per_slot=None, eps=0.05):
    m = z.shape[0]
    polys = [Polyhedron(i, eps) for i in range(m)]
    for i, planes in (planes_per_slot or {}).items():
        for pl in planes:
            polys[i].add(pl)
    return ServerState(z=z, polyhedra=polys, latest_p=np.array(latest_p, dtype=np.float64))


class Failing:
    shape = SHAPE

    def expected_gradients(self, p, q):
        raise EvaluatorError("backend down")

    def evaluate_batch(self, tokens, demos):
        raise EvaluatorError("backend down")


# ---------------------------------------------------------------- worker_step

def test_constant_loss_without_planes_leaves_state_unchanged():
    w = worker(ConstantEvaluator(SHAPE, 0.7))
    w = dataclasses.replace(w, p=np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]))
    snap = Snapshot(0, w.p.copy())
    new, msg = worker_step(w, snap, UpperConfig(psi=0.0), EXACT)
    np.testing.assert_allclose(new.p, w.p, atol=1e-15)
    np.testing.assert_allclose(new.q, w.q, atol=1e-15)
    assert msg.worker_id == 0 and msg.iteration == 0


def test_plane_pull_shifts_first_coordinate():
    ev = SeparableEvaluator.random(SHAPE, np.random.default_rng(1))
    w = worker(ev, worker_id=1)
    lam, cfg = 0.8, UpperConfig(psi=0.0, eta_p=0.05)
    a = np.zeros((1, 2, 3))     # one plane, two workers
    a[0, 1, 0] = 1.0
    snap = Snapshot(0, None, (a, np.zeros((0, 2, 3))), (np.array([lam]), np.zeros(0)))
    new, _ = worker_step(w, snap, cfg, EXACT)
    gp, _ = ev.expected_gradients(w.p, w.q)
    before = w.p - cfg.eta_p * gp
    before[0, 0] -= cfg.eta_p * lam
    for i in range(2):
        np.testing.assert_allclose(new.p[i], bisection_projection(before[i])[0], atol=1e-12)


def test_sign_term_moves_toward_consensus():
    w = worker(ConstantEvaluator(SHAPE, 0.0))
    z = np.array([[0.6, 0.2, 0.2], [0.1, 0.1, 0.8]])
    new, _ = worker_step(w, Snapshot(0, z), UpperConfig(psi=1.0, eta_p=0.05), EXACT)
    assert np.abs(new.p - z).sum() < np.abs(w.p - z).sum()


def test_failed_evaluator_leaves_worker_untouched():
    w = worker(Failing())
    before = w.rng.bit_generator.state
    for gcfg in (EXACT, GradientConfig()):
        with pytest.raises(EvaluatorError):
            worker_step(w, Snapshot(0, None), UpperConfig(), gcfg)
        assert w.rng.bit_generator.state == before
        np.testing.assert_array_equal(w.p, np.full((2, 3), 1 / 3))


def test_replayed_snapshot_reproduces_message_bit_exactly():
    ev = TableEvaluator.random(SHAPE, np.random.default_rng(7))
    snap = Snapshot(4, np.full((2, 3), 1 / 3))
    msgs = []
    for _ in range(2):
        w = worker(ev, seed=11)
        for _ in range(3):
            w, msg = worker_step(w, snap, UpperConfig(), GradientConfig(samples=4))
        msgs.append(msg)
    assert msgs[0].p.tobytes() == msgs[1].p.tobytes()
    assert msgs[0].q.tobytes() == msgs[1].q.tobytes()
    assert msgs[0].loss == msgs[1].loss
    assert msgs[0].iteration == 4


def test_single_worker_exact_descent_is_monotone():
    shape = ProblemShape(3, 4, 1, 3)
    ev = SeparableEvaluator.random(shape, np.random.default_rng(5))
    w = worker(ev, shape)
    cfg = UpperConfig(psi=0.0, eta_p=0.01, eta_q=0.01)
    snap = Snapshot(0, None)
    losses = []
    for _ in range(500):
        w, _ = worker_step(w, snap, cfg, EXACT)
        losses.append(exact_expected_loss(w.p, w.q, ev))
    assert np.all(np.diff(losses) <= 1e-9)


def test_mass_on_best_token_nondecreasing():
    shape = ProblemShape(2, 5, 1, 2)
    scores = np.array([[0.9, 0.2, 0.5, 0.25, 0.7], [0.3, 0.8, 0.1, 0.4, 0.6]])
    ev = SeparableEvaluator(shape, scores, np.array([[0.2, 0.4]]))
    w = worker(ev, shape)
    cfg = UpperConfig(psi=0.0, eta_p=0.01)
    best = np.argmin(scores, axis=1)
    mass = []
    for _ in range(500):
        w, _ = worker_step(w, Snapshot(0, None), cfg, EXACT)
        mass.append(w.p[np.arange(2), best])
    mass = np.array(mass)
    assert np.all(np.diff(mass[50:], axis=0) >= -1e-12)
    assert np.all(mass[-1] > mass[0])


def test_adam_option_keeps_distributions_valid():
    ev = SeparableEvaluator.random(SHAPE, np.random.default_rng(2))
    w = worker(ev)
    cfg = UpperConfig(optimizer="adam", psi=0.0)
    for _ in range(200):
        w, _ = worker_step(w, Snapshot(0, None), cfg, EXACT)
        assert np.allclose(w.p.sum(axis=1), 1) and np.all(w.p >= 0)
    assert w.adam_p.t == 200
    best, _ = brute_force_optimum(ev)
    np.testing.assert_array_equal(decode_solution(w).tokens, best.tokens)


# ---------------------------------------------------------------- server_step

def test_server_unchanged_at_consensus_without_planes():
    z = np.array([[0.2, 0.3, 0.5], [0.1, 0.8, 0.1]])
    s = server(z.copy(), [z, z, z])
    server_step(s, [], UpperConfig(psi=5.0))
    np.testing.assert_allclose(s.z, z, atol=1e-15)
    assert s.iteration == 1


def _flat_plane(c, dual, n_workers=2):
    return CuttingPlane(1, 0, np.zeros((n_workers, 3)), np.zeros(3), c, dual=dual)


def test_violated_plane_dual_rises_by_value():
    z = np.array([[0.2, 0.3, 0.5]])
    s = server(z.copy(), np.tile(z, (2, 1, 1)), {0: [_flat_plane(0.3, 0.0)]})
    cfg = UpperConfig(c1=0.0, eta_lambda=0.1)
    server_step(s, [], cfg)
    assert s.polyhedra[0].planes[0].dual == pytest.approx(0.1 * 0.3, abs=1e-15)


def test_satisfied_plane_dual_decays():
    z = np.array([[0.2, 0.3, 0.5]])
    s = server(z.copy(), np.tile(z, (2, 1, 1)), {0: [_flat_plane(0.0, 2.0)]})
    cfg = UpperConfig(c1=1e-2, eta_lambda=0.1)
    server_step(s, [], cfg)
    assert s.polyhedra[0].planes[0].dual == pytest.approx(2.0 - 0.1 * 1e-2 * 2.0, abs=1e-15)


def test_duals_clamped_at_zero_and_cap():
    z = np.array([[0.2, 0.3, 0.5]])
    s = server(z.copy(), np.tile(z, (2, 1, 1)), {0: [_flat_plane(-5.0, 0.1)]})
    server_step(s, [], UpperConfig())
    assert s.polyhedra[0].planes[0].dual == 0.0
    s = server(z.copy(), np.tile(z, (2, 1, 1)), {0: [_flat_plane(1e6, 0.0)]})
    server_step(s, [], UpperConfig(lambda_max=10.0))
    assert s.polyhedra[0].planes[0].dual == 10.0


def test_plane_pulls_consensus_along_b():
    z = np.array([[0.3, 0.3, 0.4]])
    pl = CuttingPlane(1, 0, np.zeros((2, 3)), np.array([1.0, 0.0, 0.0]), 0.0, dual=1.0)
    s = server(z.copy(), np.tile(z, (2, 1, 1)), {0: [pl]})
    cfg = UpperConfig(psi=0.0, eta_z=0.05)
    server_step(s, [], cfg)
    expected, _ = bisection_projection(z[0] - 0.05 * np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(s.z[0], expected, atol=1e-12)


def test_malformed_message_is_clamped_not_rejected():
    z = np.array([[0.2, 0.3, 0.5]])
    s = server(z.copy(), np.tile(z, (2, 1, 1)))
    bad = np.array([[np.nan, np.inf, -7.0]])
    server_step(s, [WorkerUpdateMsg(1, 0, bad, np.zeros((1, 2)))], UpperConfig())
    np.testing.assert_array_equal(s.latest_p[1], [[0.0, 1.0, 0.0]])
    assert np.all(np.isfinite(s.z)) and np.isclose(s.z.sum(), 1.0)


def test_snapshot_is_immutable_copy():
    z = np.array([[0.2, 0.3, 0.5]])
    s = server(z.copy(), np.tile(z, (2, 1, 1)), {0: [_flat_plane(0.0, 0.5)]})
    snap = s.snapshot()
    s.z[0, 0] = 0.9
    s.polyhedra[0].planes[0].dual = 3.0
    assert snap.z[0, 0] == 0.2
    assert snap.plane_dual[0][0] == 0.5
    assert snap.plane_a[0].shape == (1, 2, 3)


# ---------------------------------------------------------------- decoding

def test_decode_one_hot_and_ties():
    w = worker(ConstantEvaluator(SHAPE, 0.0))
    w = dataclasses.replace(w, p=np.array([[0.0, 0.0, 1.0], [1 / 3, 1 / 3, 1 / 3]]), q=np.array([[0.0, 1.0]]))
    a = decode_solution(w)
    assert list(a.tokens) == [2, 0] and list(a.demos) == [1]


def test_trained_tiny_instance_decodes_brute_force_optimum():
    hits = 0
    for seed in range(5):
        ev = TableEvaluator.random(SHAPE, np.random.default_rng(100 + seed))
        w = worker(ev, seed=seed)
        cfg = UpperConfig(psi=0.0, eta_p=0.1, eta_q=0.1)
        for _ in range(1000):
            w, _ = worker_step(w, Snapshot(0, None), cfg, EXACT)
        best, _ = brute_force_optimum(ev)
        a = decode_solution(w)
        hits += int(np.array_equal(a.tokens, best.tokens) and np.array_equal(a.demos, best.demos))
    assert hits >= 4
