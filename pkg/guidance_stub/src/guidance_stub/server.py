"""HTTP server speaking the ayg-score/1 wire protocol.

Built on the stdlib threading server: each request is handled on its own
thread, and the scorers are stateless apart from read-only tables, so no
locking is needed.  Responses are deterministic functions of the request
body and the configured seed.

Run it from the command line::

    guidance-stub --bind 127.0.0.1:8731 --mode analytic --manifest grey.json
    guidance-stub --bind 127.0.0.1:8731 --mode echo-zeros
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import scoring

MODES = ("analytic", "echo-zeros")

# Requests are small renders, not media uploads; refuse anything bigger.
_MAX_BODY_BYTES = 512 * 1024 * 1024


@dataclass
class StubConfig:
    host: str = "127.0.0.1"
    port: int = 8731
    mode: str = "analytic"
    manifest: str | Path | None = None
    seed: int | None = None

    @classmethod
    def from_bind(cls, bind: str, **kwargs) -> "StubConfig":
        host, _, port = bind.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bind address must look like host:port, got {bind!r}")
        return cls(host=host, port=int(port), **kwargs)


def _build_scorer(config: StubConfig):
    if config.mode == "echo-zeros":
        return scoring.ZerosScorer()
    if config.mode != "analytic":
        raise ValueError(f"mode must be one of {MODES}, got {config.mode!r}")
    if config.manifest is None:
        raise ValueError("analytic mode needs a target manifest")
    target, manifest_seed = scoring.load_manifest(config.manifest)
    seed = manifest_seed if config.seed is None else config.seed
    return scoring.AnalyticScorer(target, seed)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):  # noqa: N802 (stdlib naming)
        if self.path == "/healthz":
            self._send_json(200, {"status": "ok", "protocol": scoring.PROTOCOL})
        else:
            self._send_json(404, {"error": f"no such path: {self.path}"})

    def do_POST(self):  # noqa: N802 (stdlib naming)
        if self.path != "/v1/score":
            self._send_json(404, {"error": f"no such path: {self.path}"})
            return
        length = int(self.headers.get("Content-Length", 0))
        if length <= 0 or length > _MAX_BODY_BYTES:
            self._send_json(400, {"error": "missing or oversized request body"})
            return
        body = self.rfile.read(length)
        try:
            request = scoring.parse_request(body)
            response = self.server.scorer.score(request)
        except scoring.ProtocolMismatch as exc:
            self._send_json(426, {"error": str(exc), "protocol": scoring.PROTOCOL})
            return
        except scoring.RequestError as exc:
            self._send_json(400, {"error": str(exc)})
            return
        self._send_json(200, response)

    def log_message(self, format, *args):  # noqa: A002 (stdlib signature)
        pass


class StubServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: StubConfig):
        self.scorer = _build_scorer(config)
        super().__init__((config.host, config.port), _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def create_server(config: StubConfig) -> StubServer:
    """Bind a server without starting it; caller drives serve_forever."""
    return StubServer(config)


def serve_score(config: StubConfig) -> None:
    """Serve until interrupted."""
    with create_server(config) as server:
        print(f"guidance-stub: {config.mode} mode on {server.endpoint}",
              flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="guidance-stub",
        description="Reference scoring service for the ayg-score/1 protocol.",
    )
    parser.add_argument("--bind", default="127.0.0.1:8731", help="host:port to listen on")
    parser.add_argument("--mode", choices=MODES, default="analytic")
    parser.add_argument("--manifest", help="target manifest for analytic mode")
    parser.add_argument("--seed", type=int, help="override the manifest seed")
    args = parser.parse_args(argv)
    try:
        config = StubConfig.from_bind(
            args.bind, mode=args.mode, manifest=args.manifest, seed=args.seed
        )
        serve_score(config)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", flush=True)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
