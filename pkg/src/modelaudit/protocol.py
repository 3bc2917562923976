"""Line-delimited JSON scoring protocol, client side.

One JSON object per line (stdio) or per request body (HTTP)::

    request   {"v": "1", "id": 7, "op": "predict_proba", "rows": [[...], ...]}
    response  {"v": "1", "id": 7, "proba": [[...], ...]}
              {"v": "1", "id": 7, "logits": [[...], ...]}     (op predict_logits)
              {"v": "1", "id": 7, "error": "message"}

Transport failures (timeouts, dead process, refused connection) are retried
exactly once; protocol violations never are.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import subprocess
import threading
import urllib.error
import urllib.request
from typing import Optional, Sequence

import numpy as np

from .errors import (
    NonFiniteProbability,
    ProtocolViolation,
    RemoteScorerError,
    ScorerTimeout,
    TransportError,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"
RESULT_KEYS = {"predict_proba": "proba", "predict_logits": "logits"}


def encode_request(request_id: int, op: str, rows) -> str:
    rows = [[float(v) for v in row] for row in rows]
    return json.dumps({"v": PROTOCOL_VERSION, "id": request_id, "op": op, "rows": rows}, allow_nan=False)


def check_response(msg, request_id: int, op: str, n_rows: int, n_cols: Optional[int]) -> np.ndarray:
    """Validate one decoded response object against its request."""
    if not isinstance(msg, dict):
        raise ProtocolViolation(f"request {request_id}: response is not a JSON object")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolViolation(f"request {request_id}: protocol version {msg.get('v')!r}, expected '1'")
    if msg.get("id") != request_id:
        raise ProtocolViolation(f"request {request_id}: response echoed id {msg.get('id')!r}")
    if "error" in msg:
        raise RemoteScorerError(f"request {request_id}: scorer error: {msg['error']}")
    key = RESULT_KEYS[op]
    if key not in msg:
        raise ProtocolViolation(f"request {request_id}: response lacks {key!r}")
    values = msg[key]
    if not isinstance(values, list) or len(values) != n_rows:
        got = len(values) if isinstance(values, list) else type(values).__name__
        raise ProtocolViolation(f"request {request_id}: expected {n_rows} result rows, got {got}")
    width = n_cols
    for row in values:
        if not isinstance(row, list) or (width is not None and len(row) != width):
            raise ProtocolViolation(f"request {request_id}: result row has wrong arity")
        width = len(row)
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ProtocolViolation(f"request {request_id}: non-numeric value {v!r}")
            if not math.isfinite(v):
                raise NonFiniteProbability(f"request {request_id}: non-finite value in {key}")
    arr = np.asarray(values, dtype=float).reshape(n_rows, width or 0)
    if op == "predict_proba":
        if np.any(arr < -1e-9) or np.any(arr > 1 + 1e-9):
            raise NonFiniteProbability(f"request {request_id}: probability outside [0, 1]")
        if n_rows and np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-6):
            raise NonFiniteProbability(f"request {request_id}: probability rows do not sum to 1")
    return arr


class StdioTransport:
    """Keeps one scorer subprocess alive and exchanges lines with it."""

    def __init__(self, command, timeout_ms: int):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout_ms / 1000.0
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()

    def _start(self):
        self._lines = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot start scorer {self.argv!r}: {exc}") from exc
        lines = self._lines
        stdout = self._proc.stdout

        def pump():
            for line in stdout:
                lines.put(line)
            lines.put(None)

        threading.Thread(target=pump, daemon=True).start()

    def exchange(self, payload: str) -> str:
        if self._proc is None or self._proc.poll() is not None:
            self._start()
        try:
            self._proc.stdin.write(payload + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise TransportError(f"scorer stdin closed: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.close()
            raise ScorerTimeout(f"no reply within {self.timeout * 1000:.0f} ms") from None
        if line is None:
            self.close()
            raise TransportError("scorer exited before replying")
        return line

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=1)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


class HttpTransport:
    def __init__(self, url: str, timeout_ms: int):
        self.url = url
        self.timeout = timeout_ms / 1000.0

    def exchange(self, payload: str) -> str:
        req = urllib.request.Request(
            self.url, data=payload.encode("utf-8"), headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            # A scorer may answer an error object with a non-200 status.
            body = exc.read().decode("utf-8", "replace")
            if body.strip().startswith("{"):
                return body
            raise TransportError(f"HTTP {exc.code} from {self.url}") from exc
        except TimeoutError as exc:
            raise ScorerTimeout(f"no reply within {self.timeout * 1000:.0f} ms") from exc
        except (urllib.error.URLError, OSError) as exc:
            if "timed out" in str(exc):
                raise ScorerTimeout(f"no reply within {self.timeout * 1000:.0f} ms") from exc
            raise TransportError(f"cannot reach {self.url}: {exc}") from exc

    def close(self):
        pass


class ScorerClient:
    """Batches rows into protocol requests and reassembles the replies in order.

    Safe to call from several threads; requests are serialized.
    """

    def __init__(self, transport: str, target, batch_size: int = 1000, timeout_ms: int = 30000):
        if batch_size < 1 or timeout_ms < 1:
            raise ValueError("batch_size and timeout_ms must be >= 1")
        self.batch_size = batch_size
        if transport == "subprocess-stdio":
            self._transport = StdioTransport(target, timeout_ms)
        elif transport == "http":
            self._transport = HttpTransport(target, timeout_ms)
        else:
            raise ValueError(f"unknown transport {transport!r}")
        self._lock = threading.Lock()
        self._next_id = 1
        self.requests_sent = 0

    def _request(self, op: str, rows, n_cols: Optional[int]) -> np.ndarray:
        request_id = self._next_id
        self._next_id += 1
        payload = encode_request(request_id, op, rows)
        for attempt in (1, 2):
            self.requests_sent += 1
            try:
                raw = self._transport.exchange(payload)
                break
            except TransportError as exc:
                if attempt == 2:
                    raise
                logger.warning("request %d: %s; retrying once", request_id, exc)
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProtocolViolation(f"request {request_id}: reply is not JSON: {exc.msg}") from None
        return check_response(msg, request_id, op, len(rows), n_cols)

    def score(self, rows, op: str = "predict_proba", n_cols: Optional[int] = None) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-d array")
        out = []
        with self._lock:
            for start in range(0, len(rows), self.batch_size):
                chunk = rows[start : start + self.batch_size]
                try:
                    out.append(self._request(op, chunk.tolist(), n_cols))
                except Exception as exc:
                    exc.args = (f"rows {start}-{start + len(chunk) - 1}: {exc}",)
                    raise
        if not out:
            return np.zeros((0, n_cols or 0))
        return np.vstack(out)

    def close(self):
        with self._lock:
            self._transport.close()


def raw_exchange(client: ScorerClient, message: dict) -> dict:
    """Send an arbitrary protocol object and return the decoded reply (self-test use)."""
    with client._lock:
        client.requests_sent += 1
        return json.loads(client._transport.exchange(json.dumps(message)))


def stub_command(extra: Sequence[str] = ()) -> list:
    import sys

    return [sys.executable, "-m", "modelaudit.stub_scorer", *extra]


def transport_for(target: str) -> str:
    return "http" if target.startswith(("http://", "https://")) else "subprocess-stdio"


def selftest(target, n_rows: int = 23, batch_size: int = 5, n_features: int = 4, seed: int = 0,
             timeout_ms: int = 10000) -> list:
    """Protocol conformance checks against a live scorer; returns (check, passed, detail) triples.

    Checks: row order survives batching and reversal, the number of requests
    equals ceil(rows / batch), a reply echoes the request id, and a scorer-side
    error reaches the caller as RemoteScorerError.
    """
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, 3.0, size=(n_rows, n_features))
    kind = transport_for(target) if isinstance(target, str) else "subprocess-stdio"
    results = []

    def record(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # a broken scorer is a failed check, not a crash
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))

    whole = ScorerClient(kind, target, batch_size=max(n_rows, 1), timeout_ms=timeout_ms)
    batched = ScorerClient(kind, target, batch_size=batch_size, timeout_ms=timeout_ms)
    try:
        state: dict = {}

        def ordering():
            reference = whole.score(rows)
            state["reference"] = reference
            chunked = batched.score(rows)
            reversed_out = whole.score(rows[::-1])
            same = np.array_equal(reference, chunked) and np.array_equal(reference[::-1], reversed_out)
            distinct = len({tuple(r) for r in np.round(reference, 12)}) > 1
            detail = "batched and reversed replies line up with single-request replies"
            if not distinct:
                detail += " (scorer output is constant, so order is unobservable)"
            return same, detail

        def batching():
            before = batched.requests_sent
            batched.score(rows)
            sent = batched.requests_sent - before
            expected = math.ceil(n_rows / batch_size)
            return sent == expected, f"{sent} requests for {n_rows} rows at batch {batch_size}, expected {expected}"

        def id_echo():
            request_id = 424242
            reply = raw_exchange(whole, {"v": PROTOCOL_VERSION, "id": request_id, "op": "predict_proba",
                                         "rows": rows[:2].tolist()})
            return reply.get("id") == request_id, f"sent id {request_id}, got {reply.get('id')!r}"

        def error_propagation():
            reply = raw_exchange(whole, {"v": PROTOCOL_VERSION, "id": 7, "op": "no_such_op", "rows": []})
            if "error" not in reply:
                return False, "unknown op did not produce an error reply"
            try:
                check_response(reply, 7, "predict_proba", 0, None)
            except RemoteScorerError as exc:
                return True, f"scorer error surfaced: {exc}"
            return False, "error reply was not raised"

        record("ordering", ordering)
        record("batching", batching)
        record("id_echo", id_echo)
        record("error_propagation", error_propagation)
    finally:
        whole.close()
        batched.close()
    return results
