"""Black-box loss evaluators, enumeration oracles and REINFORCE gradients.

A loss evaluator maps a discrete assignment (one vocabulary index per prompt
token slot, one demonstration index per class slot) to a nonnegative loss.
Token ``i`` is drawn from ``Cat(p[i])`` and demonstration ``i'`` from
``Cat(q[i'])``; everything here is about the expectation of that loss under
those categoricals and its gradient with respect to the raw probability
vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import _kernels
from .simplex import sample_rows

MAX_ENUMERATION = 10**6
DEFAULT_P_MIN = 1e-6


class EvaluatorError(RuntimeError):
    """Base class for evaluator failures."""


class RetryableEvaluatorError(EvaluatorError):
    """Transient failure (timeout, broken peer, protocol violation)."""


class EvaluatorTimeout(RetryableEvaluatorError):
    pass


class ProtocolError(RetryableEvaluatorError):
    pass


class InvalidAssignmentError(EvaluatorError, ValueError):
    """The assignment is out of bounds for the problem shape."""


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class ProblemShape:
    M: int  # prompt-token slots
    N: int  # vocabulary size
    U: int  # demonstration slots (classes); 0 disables demonstrations
    V: int  # candidate demonstrations per class

    def __post_init__(self):
        for name in ("M", "N", "V"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if int(self.U) < 0:
            raise ValueError("U must be >= 0")

    @property
    def n_assignments(self):
        return self.N**self.M * self.V**self.U

    @property
    def enumerable(self):
        return self.n_assignments <= MAX_ENUMERATION

    def table_shape(self):
        return (self.N,) * self.M + (self.V,) * self.U

    def to_dict(self):
        return {"M": self.M, "N": self.N, "U": self.U, "V": self.V}


@dataclass(frozen=True)
class DiscreteAssignment:
    tokens: tuple[int, ...]
    demos: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "demos", tuple(int(k) for k in self.demos))

    def validate(self, shape: ProblemShape):
        if len(self.tokens) != shape.M or len(self.demos) != shape.U:
            raise InvalidAssignmentError(
                f"assignment has {len(self.tokens)} tokens / {len(self.demos)} demos, "
                f"expected {shape.M} / {shape.U}"
            )
        if any(not 0 <= t < shape.N for t in self.tokens):
            raise InvalidAssignmentError(f"token index out of range [0, {shape.N})")
        if any(not 0 <= k < shape.V for k in self.demos):
            raise InvalidAssignmentError(f"demo index out of range [0, {shape.V})")
        return self


@dataclass(frozen=True)
class LossSample:
    assignment: DiscreteAssignment
    loss: float

    def __post_init__(self):
        if not (math.isfinite(self.loss) and self.loss >= 0):
            raise ValueError(f"loss must be finite and >= 0, got {self.loss}")


@dataclass
class EvaluatorSpec:
    """Serializable description of an evaluator: ``kind`` plus kind-specific payload."""

    kind: str
    payload: dict[str, Any] = field(default_factory=dict)

    KINDS = ("table", "separable", "remote")

    def __post_init__(self):
        if self.kind == "separable-synthetic":
            self.kind = "separable"
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown evaluator kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, **self.payload}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, d)


def _check_batch(shape, tokens, demos):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, shape.M)
    demos = np.asarray(demos, dtype=np.int64).reshape(tokens.shape[0], shape.U)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= shape.N):
        raise InvalidAssignmentError(f"token index out of range [0, {shape.N})")
    if demos.size and (demos.min() < 0 or demos.max() >= shape.V):
        raise InvalidAssignmentError(f"demo index out of range [0, {shape.V})")
    return tokens, demos


class Evaluator:
    """Interface for loss evaluators; subclasses implement ``_batch``."""

    shape: ProblemShape
    deterministic = True

    def evaluate(self, a: DiscreteAssignment) -> float:
        a.validate(self.shape)
        return float(self.evaluate_batch(np.array([a.tokens]), np.array([a.demos]).reshape(1, -1))[0])

    def evaluate_batch(self, tokens, demos):
        tokens, demos = _check_batch(self.shape, tokens, demos)
        return self._batch(tokens, demos)

    def _batch(self, tokens, demos):
        raise NotImplementedError

    def full_table(self):
        """Loss for every assignment, shape ``(N,)*M + (V,)*U``."""
        shape = self.shape
        if not shape.enumerable:
            raise EnumerationTooLarge(f"{shape.n_assignments} assignments exceed {MAX_ENUMERATION}")
        grids = np.indices(shape.table_shape()).reshape(shape.M + shape.U, -1).T
        losses = self.evaluate_batch(grids[:, : shape.M], grids[:, shape.M :])
        return losses.reshape(shape.table_shape())

    def expected_loss(self, p, q):
        """Exact E[loss]; subclasses may override with a closed form."""
        return exact_expected_loss(p, q, self)

    def expected_gradients(self, p, q):
        return exact_gradients(p, q, self)

    def optimum(self):
        """Return ``(DiscreteAssignment, loss)`` minimizing the loss, lowest index on ties."""
        table = self.full_table()
        flat = int(np.argmin(table))
        idx = np.unravel_index(flat, table.shape)
        m = self.shape.M
        return DiscreteAssignment(idx[:m], idx[m:]), float(table.flat[flat])


class TableEvaluator(Evaluator):
    def __init__(self, shape: ProblemShape, table):
        table = np.asarray(table, dtype=np.float64)
        if not shape.enumerable:
            raise EnumerationTooLarge("table evaluator requires N^M * V^U <= 1e6")
        if table.shape != shape.table_shape():
            table = table.reshape(shape.table_shape())
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise ValueError("table losses must be finite and >= 0")
        self.shape = shape
        self.table = table

    @classmethod
    def constant(cls, shape, value):
        return cls(shape, np.full(shape.table_shape(), float(value)))

    @classmethod
    def random(cls, shape, rng, low=0.0, high=1.0):
        return cls(shape, rng.uniform(low, high, shape.table_shape()))

    def _batch(self, tokens, demos):
        if self.shape.M + self.shape.U == 0:
            return np.full(tokens.shape[0], float(self.table))
        idx = tuple(tokens.T) + tuple(demos.T)
        return self.table[idx].astype(np.float64)

    def full_table(self):
        return self.table

    def perturbed(self, rng, scale):
        """Copy with independent multiplicative noise, for heterogeneous workers."""
        if scale == 0:
            return TableEvaluator(self.shape, self.table.copy())
        return TableEvaluator(self.shape, self.table * (1.0 + scale * rng.uniform(-1.0, 1.0, self.table.shape)))

    def to_payload(self):
        return {"table": self.table.ravel().tolist()}


class ConstantEvaluator(Evaluator):
    """Same loss for every assignment; works at any shape (no table is built)."""

    def __init__(self, shape: ProblemShape, value):
        value = float(value)
        if not (math.isfinite(value) and value >= 0):
            raise ValueError("constant loss must be finite and >= 0")
        self.shape = shape
        self.value = value

    def _batch(self, tokens, demos):
        return np.full(tokens.shape[0], self.value)

    def expected_loss(self, p, q):
        return self.value

    def expected_gradients(self, p, q):
        return np.full((self.shape.M, self.shape.N), self.value), np.full((self.shape.U, self.shape.V), self.value)

    def optimum(self):
        a = DiscreteAssignment(np.zeros(self.shape.M, dtype=int), np.zeros(self.shape.U, dtype=int))
        return a, self.value

    def perturbed(self, rng, scale):
        return ConstantEvaluator(self.shape, self.value)


class SeparableEvaluator(Evaluator):
    """loss = sum_i s_i(j_i) + sum_i' t_i'(k_i') + sum over pairs W[j_i, k_i'].

    ``interactions`` is a list of ``(token_slot, demo_slot, weights)`` with
    ``weights`` of shape ``(N, V)``; it couples a token choice to a
    demonstration choice, which is what makes the lower-level problem depend
    on the sampled demonstrations.
    """

    def __init__(self, shape, token_scores, demo_scores=None, interactions=()):
        self.shape = shape
        self.token_scores = np.asarray(token_scores, dtype=np.float64).reshape(shape.M, shape.N)
        if demo_scores is None:
            demo_scores = np.zeros((shape.U, shape.V))
        self.demo_scores = np.asarray(demo_scores, dtype=np.float64).reshape(shape.U, shape.V)
        self.interactions = []
        for i, ip, w in interactions:
            w = np.asarray(w, dtype=np.float64).reshape(shape.N, shape.V)
            if not (0 <= i < shape.M and 0 <= ip < shape.U):
                raise ValueError("interaction slot out of range")
            self.interactions.append((int(i), int(ip), w))
        parts = [self.token_scores, self.demo_scores] + [w for _, _, w in self.interactions]
        for arr in parts:
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError("separable scores must be finite and >= 0")

    @classmethod
    def random(cls, shape, rng, n_interactions=0, interaction_scale=0.5):
        token_scores = rng.uniform(0.0, 1.0, (shape.M, shape.N))
        demo_scores = rng.uniform(0.0, 1.0, (shape.U, shape.V))
        inter = []
        for _ in range(n_interactions if shape.U else 0):
            i = int(rng.integers(shape.M))
            ip = int(rng.integers(shape.U))
            inter.append((i, ip, interaction_scale * rng.uniform(0.0, 1.0, (shape.N, shape.V))))
        return cls(shape, token_scores, demo_scores, inter)

    def perturbed(self, rng, scale):
        """Copy with independent multiplicative noise, for heterogeneous workers."""
        if scale == 0:
            return SeparableEvaluator(self.shape, self.token_scores, self.demo_scores,
                                      [(i, ip, w.copy()) for i, ip, w in self.interactions])
        noise = lambda a: a * (1.0 + scale * rng.uniform(-1.0, 1.0, a.shape))
        return SeparableEvaluator(self.shape, noise(self.token_scores), noise(self.demo_scores),
                                  [(i, ip, noise(w)) for i, ip, w in self.interactions])

    def _batch(self, tokens, demos):
        m, u = self.shape.M, self.shape.U
        loss = self.token_scores[np.arange(m), tokens].sum(axis=1)
        if u:
            loss = loss + self.demo_scores[np.arange(u), demos].sum(axis=1)
        for i, ip, w in self.interactions:
            loss = loss + w[tokens[:, i], demos[:, ip]]
        return loss

    def expected_loss(self, p, q):
        p = np.asarray(p, dtype=np.float64).reshape(self.shape.M, self.shape.N)
        q = np.asarray(q, dtype=np.float64).reshape(self.shape.U, self.shape.V)
        val = float(np.sum(p * self.token_scores) + np.sum(q * self.demo_scores))
        for i, ip, w in self.interactions:
            val += float(p[i] @ w @ q[ip])
        return val

    def expected_gradients(self, p, q):
        """Partials of the multilinear expectation (rows of ``p``, ``q`` on the simplex).

        ``d/dp[i, j]`` is the expected loss with slot ``i`` pinned to ``j``:
        that slot's own terms at ``j`` plus the expectation of every other term.
        """
        p = np.asarray(p, dtype=np.float64).reshape(self.shape.M, self.shape.N)
        q = np.asarray(q, dtype=np.float64).reshape(self.shape.U, self.shape.V)
        own_p = self.token_scores.copy()
        own_q = self.demo_scores.copy()
        for i, ip, w in self.interactions:
            own_p[i] += w @ q[ip]
            own_q[ip] += p[i] @ w
        total = self.expected_loss(p, q)
        gp = own_p + (total - np.sum(p * own_p, axis=1))[:, None]
        gq = own_q + (total - np.sum(q * own_q, axis=1))[:, None]
        return gp, gq

    def optimum(self):
        if not self.interactions:
            tokens = np.argmin(self.token_scores, axis=1)
            demos = np.argmin(self.demo_scores, axis=1) if self.shape.U else np.zeros(0, dtype=int)
            a = DiscreteAssignment(tokens, demos)
            return a, self.evaluate(a)
        return super().optimum()

    def to_payload(self):
        return {
            "token_scores": self.token_scores.tolist(),
            "demo_scores": self.demo_scores.tolist(),
            "interactions": [
                {"token_slot": i, "demo_slot": ip, "weights": w.tolist()} for i, ip, w in self.interactions
            ],
        }


class PooledEvaluator(Evaluator):
    """Mean loss over several evaluators sharing one shape (pooled training data)."""

    def __init__(self, evaluators):
        if not evaluators:
            raise ValueError("need at least one evaluator")
        self.shape = evaluators[0].shape
        self.members = list(evaluators)
        self.deterministic = all(e.deterministic for e in evaluators)

    def _batch(self, tokens, demos):
        return np.mean([e._batch(tokens, demos) for e in self.members], axis=0)

    def expected_loss(self, p, q):
        return float(np.mean([e.expected_loss(p, q) for e in self.members]))

    def expected_gradients(self, p, q):
        grads = [e.expected_gradients(p, q) for e in self.members]
        return np.mean([g[0] for g in grads], axis=0), np.mean([g[1] for g in grads], axis=0)

    def optimum(self):
        if all(isinstance(e, SeparableEvaluator) and not e.interactions for e in self.members):
            ts = np.mean([e.token_scores for e in self.members], axis=0)
            ds = np.mean([e.demo_scores for e in self.members], axis=0)
            a = DiscreteAssignment(np.argmin(ts, axis=1), np.argmin(ds, axis=1) if self.shape.U else [])
            return a, self.evaluate(a)
        return super().optimum()


def evaluator_from_spec(spec: EvaluatorSpec, shape: ProblemShape, rng=None):
    """Build a local evaluator from its spec.

    ``payload`` either carries explicit arrays or ``{"random": {"seed": s, ...}}``.
    Remote specs are handled by :func:`asyndbt.remote.remote_evaluator_from_spec`.
    """
    payload = spec.payload
    if spec.kind == "remote":
        from .remote import remote_evaluator_from_spec

        return remote_evaluator_from_spec(spec, shape)
    rand = payload.get("random")
    if rand is not None:
        rng = np.random.default_rng(rand.get("seed", 0))
    if spec.kind == "table":
        if "value" in payload:
            return ConstantEvaluator(shape, payload["value"])
        if rand is not None:
            return TableEvaluator.random(shape, rng, rand.get("low", 0.0), rand.get("high", 1.0))
        return TableEvaluator(shape, payload["table"])
    if spec.kind == "separable":
        if rand is not None:
            return SeparableEvaluator.random(
                shape, rng, rand.get("interactions", 0), rand.get("interaction_scale", 0.5)
            )
        inter = [(d["token_slot"], d["demo_slot"], d["weights"]) for d in payload.get("interactions", [])]
        return SeparableEvaluator(shape, payload["token_scores"], payload.get("demo_scores"), inter)
    raise ValueError(f"unsupported evaluator kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# enumeration oracles
# ---------------------------------------------------------------------------

def _factors(p, q, shape):
    p = np.asarray(p, dtype=np.float64).reshape(shape.M, shape.N)
    q = np.asarray(q, dtype=np.float64).reshape(shape.U, shape.V)
    return list(p) + list(q)


def _contract(table, factors, keep=None):
    """Contract every axis of ``table`` with its factor vector except axis ``keep``."""
    out = table
    # contract from the last axis so earlier axis numbers stay valid
    for ax in range(len(factors) - 1, -1, -1):
        if ax == keep:
            continue
        out = np.tensordot(out, factors[ax], axes=([ax], [0]))
    return out


def exact_expected_loss(p, q, evaluator):
    """sum over all assignments of prod(p) * prod(q) * loss."""
    shape = evaluator.shape
    if not shape.enumerable:
        raise EnumerationTooLarge(f"{shape.n_assignments} assignments exceed {MAX_ENUMERATION}")
    return float(_contract(evaluator.full_table(), _factors(p, q, shape)))


def exact_gradients(p, q, evaluator):
    """Partial derivatives of the enumerated expectation w.r.t. every p[i, j] and q[i', k]."""
    shape = evaluator.shape
    if not shape.enumerable:
        raise EnumerationTooLarge(f"{shape.n_assignments} assignments exceed {MAX_ENUMERATION}")
    table = evaluator.full_table()
    factors = _factors(p, q, shape)
    grads = [_contract(table, factors, keep=ax) for ax in range(len(factors))]
    gp = np.array(grads[: shape.M]).reshape(shape.M, shape.N)
    gq = np.array(grads[shape.M :]).reshape(shape.U, shape.V)
    return gp, gq


def brute_force_optimum(evaluator):
    """Enumerate every assignment; ties resolve to the lowest flat index."""
    return Evaluator.optimum(evaluator)


# ---------------------------------------------------------------------------
# score-function (REINFORCE) estimator
# ---------------------------------------------------------------------------

class GradientEstimate(NamedTuple):
    grad_p: np.ndarray
    grad_q: np.ndarray
    mean_loss: float
    stderr_p: np.ndarray
    stderr_q: np.ndarray


def _baseline_weights(losses, baseline):
    n = losses.shape[0]
    if not baseline or n < 2:
        return losses
    # leave-one-out mean: independent of sample s, so the estimator stays unbiased
    total = losses.sum()
    return losses - (total - losses) / (n - 1)


def reinforce_gradients(p, q, evaluator, n_samples, rng, baseline=True, p_min=DEFAULT_P_MIN, fixed_demos=None):
    """Monte-Carlo score-function gradient of E[loss] w.r.t. ``p`` and ``q``.

    Each sample contributes ``w_s * e_j / max(p[i, j], p_min)`` to slot ``i``
    at its sampled index ``j`` (and likewise for ``q``), where ``w_s`` is the
    loss, minus the leave-one-out batch mean when ``baseline`` is set.

    With ``fixed_demos`` the demonstrations are held at that realization and
    only token gradients are estimated (``grad_q`` is then all zeros).
    """
    shape = evaluator.shape
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p = np.asarray(p, dtype=np.float64).reshape(shape.M, shape.N)
    q = np.asarray(q, dtype=np.float64).reshape(shape.U, shape.V)
    tokens = sample_rows(p, n_samples, rng)
    if fixed_demos is None:
        demos = sample_rows(q, n_samples, rng)
    else:
        demos = np.tile(np.asarray(fixed_demos, dtype=np.int64).reshape(1, shape.U), (n_samples, 1))
    losses = np.asarray(evaluator.evaluate_batch(tokens, demos), dtype=np.float64)
    w = _baseline_weights(losses, baseline)

    gp, sqp = _kernels.score_accumulate(tokens, w, p, p_min)
    gp /= n_samples
    se_p = np.sqrt(np.maximum(sqp / n_samples - gp * gp, 0.0) / n_samples)
    if shape.U and fixed_demos is None:
        gq, sqq = _kernels.score_accumulate(demos, w, q, p_min)
        gq /= n_samples
        se_q = np.sqrt(np.maximum(sqq / n_samples - gq * gq, 0.0) / n_samples)
    else:
        gq = np.zeros((shape.U, shape.V))
        se_q = np.zeros((shape.U, shape.V))
    return GradientEstimate(gp, gq, float(losses.mean()), se_p, se_q)


def monte_carlo_loss(p, q, evaluator, n_samples, rng):
    shape = evaluator.shape
    tokens = sample_rows(np.asarray(p).reshape(shape.M, shape.N), n_samples, rng)
    demos = sample_rows(np.asarray(q).reshape(shape.U, shape.V), n_samples, rng)
    return float(np.mean(evaluator.evaluate_batch(tokens, demos)))
