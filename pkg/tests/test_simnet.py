import csv
import json

import numpy as np
import pytest

from asyndbt.config import ConfigError, SimConfig
from asyndbt.oracle import EvaluatorError, ProblemShape, TableEvaluator
from asyndbt.simnet import (
    ByzantineMode,
    InvariantViolation,
    Simulation,
    advance_clock,
    form_reachable_set,
    run,
)
from asyndbt.trace import CSV_FIELDS, Trace, check_invariants
from conftest import tiny_config


def reach_sequence(cfg, rounds, seed=0):
    """Drive form_reachable_set the way the simulator does."""
    rng = np.random.default_rng(seed)
    last = [-1] * cfg.n_workers
    out = []
    for k in range(rounds):
        sel = form_reachable_set(cfg, k, [k - last[v] for v in range(cfg.n_workers)], rng)
        for v in sel:
            last[v] = k
        out.append(sel)
    return out


def reachable(trace):
    return [r["reachable"] for r in trace.iterations()]


# ---------------------------------------------------------------- reachability

def test_full_availability_reaches_everyone():
    cfg = SimConfig(n_benign=4, availability=1.0)
    assert reach_sequence(cfg, 20) == [[0, 1, 2, 3]] * 20


def test_zero_availability_is_round_robin_at_tau():
    cfg = SimConfig(n_benign=3, availability=0.0, tau=3)
    seq = reach_sequence(cfg, 30)
    assert all(len(s) == 1 for s in seq)
    for v in range(3):
        rounds = [k for k, s in enumerate(seq) if v in s]
        assert np.all(np.diff(rounds) == 3)


def test_explicit_schedule_is_reproduced():
    schedule = [[1], [2], [1, 2]]
    cfg = SimConfig(n_benign=3, schedule=schedule, tau=100)
    assert reach_sequence(cfg, 9) == schedule * 3


def test_explicit_schedule_through_the_simulator():
    schedule = [[1], [2], [1, 2]]
    cfg = tiny_config(sim={"n_benign": 3, "schedule": schedule, "tau": 100, "iterations": 12})
    trace, _ = run(cfg)
    assert reachable(trace) == schedule * 4


def test_reachable_set_never_empty_and_forces_stale_workers():
    cfg = SimConfig(n_benign=5, availability=0.1, tau=4)
    seq = reach_sequence(cfg, 200, seed=3)
    assert all(seq)
    for v in range(5):
        rounds = [-1] + [k for k, s in enumerate(seq) if v in s]
        assert max(np.diff(rounds)) <= 4


def test_reachability_draws_do_not_depend_on_availability():
    rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
    form_reachable_set(SimConfig(n_benign=3, availability=0.2), 0, [1, 1, 1], rng_a)
    form_reachable_set(SimConfig(n_benign=3, availability=0.9), 0, [1, 1, 1], rng_b)
    assert rng_a.random() == rng_b.random()


# ---------------------------------------------------------------- clock

def test_advance_clock_sync_waits_for_slowest():
    t, inc = advance_clock(5.0, [6.0, 6.0, 15.0], [0, 1, 2], (), synchronous=True)
    assert t == 15.0 and inc == [0, 1, 2]


def test_advance_clock_async_takes_arrived_messages():
    t, inc = advance_clock(5.0, [6.0, 6.5, 15.0], [0, 1, 2], (), min_step=1.0)
    assert t == 6.0 and inc == [0]
    t, inc = advance_clock(5.0, [6.0, 6.5, 15.0], [0, 1, 2], [1], min_step=1.0)
    assert t == 6.5 and inc == [0, 1]
    t, inc = advance_clock(5.0, [2.0, 2.0, 3.0], [0, 1, 2], (), min_step=1.0)
    assert t == 6.0 and inc == [0, 1, 2]


@pytest.mark.parametrize("synchronous", [False, True])
def test_unit_latencies_count_iterations(synchronous):
    cfg = tiny_config(sim={"n_benign": 3, "latency": 1.0, "synchronous": synchronous, "iterations": 25})
    trace, _ = run(cfg)
    assert [r["clock"] for r in trace.iterations()] == [float(k + 1) for k in range(25)]


def test_sync_straggler_sets_the_pace():
    cfg = tiny_config(sim={"n_benign": 3, "latency": [1.0, 1.0, 10.0], "synchronous": True, "iterations": 20})
    trace, _ = run(cfg)
    clocks = [0.0] + [r["clock"] for r in trace.iterations()]
    np.testing.assert_allclose(np.diff(clocks), 10.0)


def test_async_straggler_bounds():
    cfg = tiny_config(sim={"n_benign": 3, "latency": [1.0, 1.0, 10.0], "tau": 5, "iterations": 120})
    trace, _ = run(cfg)
    recs = trace.iterations()
    steps = np.diff([0.0] + [r["clock"] for r in recs])
    assert np.all(steps >= 1.0 - 1e-12) and np.all(steps <= 10.0 + 1e-12)
    slow = [-1] + [r["iteration"] for r in recs if 2 in r["reachable"]]
    assert max(np.diff(slow)) <= 5
    assert recs[-1]["clock"] < 10.0 * len(recs)


# ---------------------------------------------------------------- run-level properties

@pytest.mark.parametrize("avail,tau", [(0.3, 2), (0.6, 4), (0.0, 3)])
def test_staleness_never_exceeds_tau(avail, tau):
    cfg = tiny_config(sim={"n_benign": 3, "availability": avail, "tau": tau, "latency": [1.0, 2.0, 7.0],
                           "iterations": 60})
    trace, _ = run(cfg)
    assert max(max(r["staleness"]) for r in trace.iterations()) <= tau


def test_same_seed_same_bytes():
    cfg = tiny_config(sim={"latency_jitter": 0.3, "n_byzantine": 1, "byzantine_modes": ["random_simplex"]})
    a, _ = run(cfg)
    b, _ = run(cfg)
    assert a.text() == b.text()
    c, _ = run(cfg.replace(seed=cfg.seed + 1))
    assert c.text() != a.text()


def test_degenerate_async_equals_sync():
    base = {"availability": 1.0, "tau": 1, "latency": [1.0, 3.0, 2.0], "n_benign": 3}
    a, _ = run(tiny_config(sim=base))
    s, _ = run(tiny_config(sim={**base, "synchronous": True}))
    assert list(a.lines())[1:] == list(s.lines())[1:]


def test_centralized_mode_has_one_worker_and_no_residual():
    trace, sim = run(tiny_config(mode="cen"))
    recs = trace.iterations()
    assert all(r["reachable"] == [0] for r in recs)
    assert all("residual" not in r for r in recs)
    assert sim.server.z is None
    assert len(trace.summary["decoded"]) == 1


def test_trace_records_and_files(tmp_path):
    trace, _ = run(tiny_config())
    check_invariants(trace)
    kinds = [r["type"] for r in trace.records]
    assert kinds.count("iter") == 30 and kinds.count("checkpoint") == 3 and kinds[-1] == "summary"
    rec = trace.iterations()[0]
    for key in ("iteration", "clock", "reachable", "loss", "residual", "planes", "staleness", "accuracy"):
        assert key in rec
    assert len(rec["residual"]) == 2
    jsonl, table = trace.write(tmp_path, "t")
    again = Trace.read(jsonl)
    assert again.text() == trace.text()
    with table.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 31
    header = json.loads(jsonl.read_text().splitlines()[0])
    assert header["format"] == "asyndbt-trace/1" and header["config_hash"] == tiny_config().config_hash()


def test_checkpoint_records_follow_their_iteration():
    trace, _ = run(tiny_config(sim={"epsilon": 1e-6}))
    recs = trace.records
    for i, r in enumerate(recs):
        if r["type"] == "checkpoint":
            j = i - 1
            while recs[j]["type"] == "plane":
                assert recs[j]["created_at"] == r["iteration"]
                j -= 1
            assert recs[j]["type"] == "iter" and recs[j]["iteration"] == r["iteration"]
            assert (r["iteration"] + 1) % 10 == 0
            assert r["added"]


def test_invariant_check_catches_backwards_clock():
    trace, _ = run(tiny_config(sim={"iterations": 3}))
    trace.iterations()[2]["clock"] = -1.0
    with pytest.raises(AssertionError):
        check_invariants(trace)


def test_early_stopping_on_flat_loss():
    cfg = tiny_config(evaluator={"kind": "table", "value": 0.5},
                      sim={"delta": 5, "early_stop_patience": 3, "iterations": 200})
    trace, _ = run(cfg)
    assert trace.summary["stopped_early"] is True
    assert trace.summary["iterations"] == 20


# ---------------------------------------------------------------- Byzantine behaviour

def test_byzantine_modes():
    z = np.array([[0.5, 0.3, 0.2]])
    p = np.array([[0.1, 0.1, 0.8]])
    flip = ByzantineMode("sign_flip", np.random.default_rng(0)).corrupt(p, z)
    np.testing.assert_allclose(flip, [[0.9, 0.5, 0.0]])
    corner = ByzantineMode("fixed_corner", np.random.default_rng(0)).corrupt(p, z)
    np.testing.assert_array_equal(corner, [[0.0, 0.0, 1.0]])
    rnd = ByzantineMode("random_simplex", np.random.default_rng(0)).corrupt(p, z)
    assert rnd.shape == p.shape and np.isclose(rnd.sum(), 1.0)
    replay = ByzantineMode("stale_replay", np.random.default_rng(0))
    first = replay.corrupt(p, z)
    np.testing.assert_array_equal(replay.corrupt(np.full((1, 3), 1 / 3), z), first)
    with pytest.raises(ValueError):
        ByzantineMode("nope", np.random.default_rng(0)).corrupt(p, z)


def test_unknown_byzantine_mode_is_a_config_error():
    with pytest.raises(ConfigError):
        SimConfig(n_byzantine=1, byzantine_modes=["nope"])


@pytest.mark.parametrize("mode", ["sign_flip", "random_simplex", "fixed_corner", "stale_replay"])
def test_byzantine_runs_complete_with_valid_state(mode):
    cfg = tiny_config(sim={"n_byzantine": 1, "byzantine_modes": [mode], "epsilon": 0.01})
    trace, sim = run(cfg)
    assert trace.summary["iterations"] == 30
    assert np.allclose(sim.server.z.sum(axis=1), 1.0)
    assert len(trace.summary["decoded"]) == 3


def test_byzantine_messages_only_reach_the_server_through_documented_terms():
    # no sign term and no planes: nothing a Byzantine worker sends can move
    # the consensus, so honest trajectories do not depend on the attack
    finals = []
    for mode in ("fixed_corner", "random_simplex"):
        cfg = tiny_config(sim={"n_byzantine": 1, "byzantine_modes": [mode], "epsilon": 1e9},
                          upper={"psi": 0.0})
        _, sim = run(cfg)
        np.testing.assert_allclose(sim.server.z, 1 / 3)
        finals.append(np.stack([w.p for w in sim.workers[:3]]))
    np.testing.assert_array_equal(finals[0], finals[1])


# ---------------------------------------------------------------- failures

class Flaky:
    """Fails every third gradient request."""

    def __init__(self, inner):
        self.inner = inner
        self.shape = inner.shape
        self.calls = 0

    def expected_loss(self, p, q):
        return self.inner.expected_loss(p, q)

    def optimum(self):
        return self.inner.optimum()

    def expected_gradients(self, p, q):
        self.calls += 1
        if self.calls % 3 == 0:
            raise EvaluatorError("transient backend failure")
        return self.inner.expected_gradients(p, q)


def test_failed_worker_step_is_skipped_not_fatal():
    cfg = tiny_config(gradient={"estimator": "exact"})
    base = TableEvaluator.random(ProblemShape(2, 3, 1, 2), np.random.default_rng(7))
    evaluators = [base, Flaky(base), base]
    trace, _ = run(cfg, evaluators)
    failed = [r for r in trace.iterations() if "failed" in r]
    assert failed and all(r["failed"] == [1] for r in failed)
    assert trace.summary["failures"] >= len(failed)
    assert trace.summary["iterations"] == 30


def test_staleness_violation_is_detected():
    sim = Simulation(tiny_config(sim={"tau": 2}))
    sim.snapshots[0] = sim.snapshots[0].__class__(-5, sim.snapshots[0].z)
    with pytest.raises(InvariantViolation):
        sim._round(0)
