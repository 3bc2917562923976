"""Reference scorer speaking the line protocol, for self-tests and as a template.

Run ``python -m modelaudit.stub_scorer`` and write requests to its stdin, or pass
``--http PORT`` to serve the same protocol over HTTP POST.

By default each row is scored as a two-class logistic of ``0.1 * sum(row)``, so
outputs depend on the row and reordering is observable. ``--spec`` hosts a real
model spec instead.
"""

import argparse
import json
import math
import os
import sys
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

PROTOCOL_VERSION = "1"


def _sum_logistic(row):
    z = 0.1 * sum(row)
    p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return [1.0 - p, p], [0.0, z]


class StubScorer:
    def __init__(self, constant=False, arity=None, bad_id=False, sleep_ms=0, logits=False, spec=None, crash_once=None):
        self.constant = constant
        self.arity = arity
        self.bad_id = bad_id
        self.sleep_ms = sleep_ms
        self.logits = logits
        self.crash_once = crash_once
        self.requests = 0
        self.oracle = None
        if spec:
            from .oracle import ScoringOracle, load_model_spec

            self.oracle = ScoringOracle(load_model_spec(spec))
            self.arity = len(self.oracle.feature_order)

    def handle(self, msg):
        """Return the reply object for one request, or None to drop the connection."""
        self.requests += 1
        if self.crash_once and not os.path.exists(self.crash_once):
            open(self.crash_once, "w").close()
            return None
        if self.sleep_ms:
            time.sleep(self.sleep_ms / 1000.0)
        req_id = msg.get("id") if isinstance(msg, dict) else None
        reply_id = req_id + 1 if (self.bad_id and isinstance(req_id, int)) else req_id
        base = {"v": PROTOCOL_VERSION, "id": reply_id}
        if not isinstance(msg, dict) or msg.get("v") != PROTOCOL_VERSION:
            return {**base, "error": "unsupported protocol version"}
        op = msg.get("op")
        if op not in ("predict_proba", "predict_logits"):
            return {**base, "error": f"unknown op {op!r}"}
        if op == "predict_logits" and not self.logits:
            return {**base, "error": "capability 'logits' not offered"}
        rows = msg.get("rows")
        if not isinstance(rows, list):
            return {**base, "error": "rows must be a list"}
        for row in rows:
            if not isinstance(row, list) or (self.arity is not None and len(row) != self.arity):
                return {**base, "error": f"row arity must be {self.arity}"}
        if self.oracle is not None:
            import numpy as np

            X = np.asarray(rows, dtype=float).reshape(len(rows), self.arity)
            if op == "predict_proba":
                return {**base, "proba": self.oracle.predict_proba(X).tolist()}
            return {**base, "logits": self.oracle.predict_logits(X).tolist()}
        proba, logit = [], []
        for row in rows:
            if self.constant:
                p, z = [0.5, 0.5], [0.0, 0.0]
            else:
                p, z = _sum_logistic(row)
            proba.append(p)
            logit.append(z)
        if op == "predict_proba":
            return {**base, "proba": proba}
        return {**base, "logits": logit}


def serve_stdio(scorer, stdin=sys.stdin, stdout=sys.stdout):
    for line in stdin:
        if not line.strip():
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            msg = None
        reply = scorer.handle(msg) if msg is not None else {"v": PROTOCOL_VERSION, "id": None, "error": "invalid JSON"}
        if reply is None:
            return 1
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
    return 0


def make_http_server(scorer, host="127.0.0.1", port=0):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                msg = json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                msg = None
            reply = scorer.handle(msg) if msg is not None else {"v": PROTOCOL_VERSION, "id": None, "error": "invalid JSON"}
            if reply is None:
                self.close_connection = True
                return
            body = json.dumps(reply).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="modelaudit.stub_scorer", description=__doc__.splitlines()[0])
    parser.add_argument("--constant", action="store_true", help="answer [0.5, 0.5] for every row")
    parser.add_argument("--arity", type=int, help="reject rows whose length differs")
    parser.add_argument("--bad-id", action="store_true", help="echo the wrong request id")
    parser.add_argument("--sleep-ms", type=int, default=0)
    parser.add_argument("--logits", action="store_true", help="offer predict_logits")
    parser.add_argument("--spec", help="host this model spec file")
    parser.add_argument("--crash-once", metavar="MARKER", help="exit without replying if MARKER does not exist yet")
    parser.add_argument("--http", type=int, metavar="PORT", help="serve over HTTP instead of stdio")
    args = parser.parse_args(argv)
    scorer = StubScorer(
        constant=args.constant,
        arity=args.arity,
        bad_id=args.bad_id,
        sleep_ms=args.sleep_ms,
        logits=args.logits,
        spec=args.spec,
        crash_once=args.crash_once,
    )
    if args.http is not None:
        server = make_http_server(scorer, port=args.http)
        print(f"listening on http://127.0.0.1:{server.server_address[1]}/", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        return 0
    return serve_stdio(scorer)


if __name__ == "__main__":
    sys.exit(main())
