"""In-process HTTP server for exercising the network clients offline."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse


class MockServer:
    """Serves scripted responses and records what it saw.

    ``respond`` is a callable (method, path, query, body) -> (status, obj).
    ``hold`` adds a delay inside the handler so concurrent requests overlap,
    which makes the max-inflight probe meaningful.
    """

    def __init__(self, respond, hold=0.0):
        self.respond = respond
        self.hold = hold
        self.requests = []
        self._lock = threading.Lock()
        self._inflight = 0
        self.max_inflight = 0

        outer = self

        class Handler(BaseHTTPRequestHandler):
            def _serve(self):
                with outer._lock:
                    outer._inflight += 1
                    outer.max_inflight = max(outer.max_inflight, outer._inflight)
                try:
                    if outer.hold:
                        time.sleep(outer.hold)
                    parsed = urlparse(self.path)
                    query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                    length = int(self.headers.get("Content-Length", 0))
                    raw = self.rfile.read(length) if length else b""
                    body = json.loads(raw) if raw else None
                    with outer._lock:
                        outer.requests.append(
                            {
                                "method": self.command,
                                "path": parsed.path,
                                "query": query,
                                "body": body,
                                "headers": dict(self.headers),
                            }
                        )
                    status, obj = outer.respond(self.command, parsed.path, query, body)
                    payload = json.dumps(obj).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                finally:
                    with outer._lock:
                        outer._inflight -= 1

            do_GET = _serve
            do_POST = _serve

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


def sequence_responder(responses):
    """Responder that plays a fixed list of (status, obj) in order."""
    lock = threading.Lock()
    remaining = list(responses)

    def respond(method, path, query, body):
        with lock:
            if not remaining:
                raise AssertionError("mock script exhausted")
            return remaining.pop(0)

    return respond
