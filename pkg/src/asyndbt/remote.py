"""Remote evaluator speaking newline-delimited JSON over a byte stream.

Request:  ``{"id": u64, "tokens": [u32], "demos": [u32], "prompt": str}``
(``prompt`` optional).  Response: ``{"id": u64, "loss": f64}``.  Responses
may arrive in any order and are matched to requests by ``id``.

The transport is either a child process (``stdio:CMD``) or a TCP socket
(``tcp:HOST:PORT``).  :func:`serve` answers requests from a local evaluator
and is what ``python -m asyndbt.remote`` runs, which makes a convenient stub
peer for testing.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
import queue
import shlex
import socket
import subprocess
import sys
import threading
import time

import numpy as np

from .oracle import (
    DiscreteAssignment,
    Evaluator,
    EvaluatorSpec,
    EvaluatorTimeout,
    ProblemShape,
    ProtocolError,
    RetryableEvaluatorError,
    evaluator_from_spec,
)
from .prompts import render_prompt

DEFAULT_TIMEOUT = 30.0
_EOF = object()


class _Channel:
    """Line-oriented duplex channel with a background reader thread."""

    def __init__(self, rfile, wfile, closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        try:
            for raw in self._rfile:
                self._lines.put(raw)
        except (OSError, ValueError):
            pass
        self._lines.put(_EOF)

    def send(self, obj):
        data = (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")
        try:
            self._wfile.write(data)
            self._wfile.flush()
        except (OSError, ValueError) as exc:
            raise ProtocolError(f"peer closed the stream: {exc}") from exc

    def recv(self, timeout):
        try:
            line = self._lines.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            raise EvaluatorTimeout(f"no response within {timeout:.3g} s") from None
        if line is _EOF:
            self._lines.put(_EOF)
            raise ProtocolError("peer closed the stream")
        return line

    def close(self):
        if self._closer is not None:
            self._closer()


def connect(endpoint):
    """Open ``tcp:HOST:PORT`` or ``stdio:CMD`` and return a channel."""
    kind, _, rest = endpoint.partition(":")
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        sock = socket.create_connection((host or "127.0.0.1", int(port)))
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")

        def close():
            try:
                sock.shutdown(socket.SHUT_RDWR)  # wakes the reader thread
            except OSError:
                pass
            for f in (rfile, wfile):
                try:
                    f.close()
                except OSError:
                    pass
            sock.close()

        return _Channel(rfile, wfile, close)
    if kind == "stdio":
        proc = subprocess.Popen(shlex.split(rest), stdin=subprocess.PIPE, stdout=subprocess.PIPE)

        def close():
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=1)
            except subprocess.TimeoutExpired:
                proc.kill()

        return _Channel(proc.stdout, proc.stdin, close)
    raise ValueError(f"endpoint must be tcp:HOST:PORT or stdio:CMD, got {endpoint!r}")


class RemoteEvaluator(Evaluator):
    """Evaluator whose losses come from a peer process."""

    deterministic = False

    def __init__(self, shape: ProblemShape, channel, timeout=DEFAULT_TIMEOUT, template=None, vocab=None,
                 demo_texts=(), query=None):
        self.shape = shape
        self.channel = channel
        self.timeout = float(timeout)
        self.template = template
        self.vocab = vocab
        self.demo_texts = demo_texts
        self.query = query
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def _request(self, rid, tokens, demos):
        msg = {"id": rid, "tokens": [int(t) for t in tokens], "demos": [int(k) for k in demos]}
        if self.template is not None and self.vocab is not None:
            a = DiscreteAssignment(tokens, demos)
            msg["prompt"] = render_prompt(self.template, self.vocab, a, self.demo_texts, self.query)
        return msg

    def _batch(self, tokens, demos):
        with self._lock:
            pending = {}
            for row, (t, d) in enumerate(zip(tokens, demos)):
                rid = next(self._ids)
                pending[rid] = row
                self.channel.send(self._request(rid, t, d))
            out = np.empty(len(pending))
            deadline = time.monotonic() + self.timeout
            while pending:
                line = self.channel.recv(deadline - time.monotonic())
                try:
                    msg = json.loads(line)
                    rid = int(msg["id"])
                    loss = float(msg["loss"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ProtocolError(f"malformed response {line[:80]!r}") from exc
                if rid not in pending:
                    raise ProtocolError(f"response for unknown request id {rid}")
                if not math.isfinite(loss) or loss < 0:
                    raise ProtocolError(f"peer reported invalid loss {loss}")
                out[pending.pop(rid)] = loss
            return out

    def expected_loss(self, p, q):
        raise RetryableEvaluatorError("remote evaluators have no closed-form expectation")

    def close(self):
        self.channel.close()


def remote_evaluator_from_spec(spec: EvaluatorSpec, shape: ProblemShape):
    payload = spec.payload
    demo_texts, query = payload.get("demos", ()), payload.get("query")
    if payload.get("corpus"):
        from .prompts import load_demo_corpus

        demo_texts, query = load_demo_corpus(payload["corpus"])
    return RemoteEvaluator(
        shape,
        connect(payload["endpoint"]),
        timeout=payload.get("timeout", DEFAULT_TIMEOUT),
        template=payload.get("template"),
        vocab=payload.get("vocab"),
        demo_texts=demo_texts,
        query=query,
    )


def serve(evaluator, rfile, wfile, reverse_every=0, idle=0.05):
    """Answer NDJSON requests from ``rfile`` using ``evaluator``.

    ``reverse_every > 1`` buffers that many requests and answers them in
    reverse order, exercising out-of-order correlation on the client; a
    partial group is flushed once no request has arrived for ``idle`` s.
    """
    lines: queue.Queue = queue.Queue()

    def pump():
        for raw in rfile:
            lines.put(raw)
        lines.put(_EOF)

    threading.Thread(target=pump, daemon=True).start()
    held = []

    def flush():
        for resp in reversed(held):
            wfile.write((json.dumps(resp) + "\n").encode("utf-8"))
        wfile.flush()
        held.clear()

    while True:
        try:
            raw = lines.get(timeout=idle) if held else lines.get()
        except queue.Empty:
            flush()
            continue
        if raw is _EOF:
            break
        if not raw.strip():
            continue
        msg = json.loads(raw)
        a = DiscreteAssignment(msg["tokens"], msg.get("demos", []))
        held.append({"id": msg["id"], "loss": evaluator.evaluate(a)})
        if reverse_every <= 1 or len(held) >= reverse_every:
            flush()
    if held:
        flush()


def main(argv=None):
    ap = argparse.ArgumentParser(description="NDJSON stub evaluator peer (reads stdin, writes stdout)")
    ap.add_argument("--shape", required=True, help="M,N,U,V")
    ap.add_argument("--constant", type=float, help="answer every request with this loss")
    ap.add_argument("--spec", help="JSON evaluator spec (table or separable)")
    ap.add_argument("--reverse-every", type=int, default=0)
    args = ap.parse_args(argv)
    m, n, u, v = (int(x) for x in args.shape.split(","))
    shape = ProblemShape(m, n, u, v)
    if args.constant is not None:
        spec = EvaluatorSpec("table", {"value": args.constant})
    else:
        spec = EvaluatorSpec.from_dict(json.loads(args.spec))
    evaluator = evaluator_from_spec(spec, shape)
    serve(evaluator, sys.stdin.buffer, sys.stdout.buffer, args.reverse_every)


if __name__ == "__main__":
    main()
