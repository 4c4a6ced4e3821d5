"""JSON-over-HTTP completion protocol, its client and the scripted stub server.

Request body::

    {"model": str, "prompt": str, "images": [base64 PNG, ...],
     "seed": int (optional), "max_tokens": int (optional)}

Response body: ``{"text": str}`` on success, ``{"error": str}`` otherwise.
"""
from __future__ import annotations

import base64
import errno
import json
import logging
import os
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import yaml

from .errors import PortInUse, ScriptError, WireError
from .prompts import PromptKind, classify_prompt

log = logging.getLogger(__name__)

ENDPOINT_ENV = "EGONAV_ENDPOINT"
TOKEN_ENV = "EGONAV_API_TOKEN"


def encode_images(images) -> list[str]:
    return [img if isinstance(img, str) else base64.b64encode(img).decode("ascii") for img in images]


class WireClient:
    """Blocking client for a completion endpoint; one request per call."""

    def __init__(self, endpoint: str | None = None, model: str = "default", *, timeout: float = 60.0, seed: int | None = None, max_tokens: int | None = None, token_env: str = TOKEN_ENV):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise WireError(f"no endpoint given and {ENDPOINT_ENV} is unset")
        self.model = model
        self.timeout = timeout
        self.seed = seed
        self.max_tokens = max_tokens
        self.token_env = token_env
        self.calls = 0

    def complete(self, prompt: str, images=()) -> str:
        body = {"model": self.model, "prompt": prompt, "images": encode_images(images)}
        if self.seed is not None:
            body["seed"] = self.seed
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(body).encode(), headers=headers, method="POST")
        self.calls += 1
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode(errors="replace")[:200]
            raise WireError(f"HTTP {exc.code}: {detail}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise WireError(f"transport failure: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise WireError("response is not JSON") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise WireError(f"response lacks a text field: {payload!r:.120}")
        return payload["text"]


# --------------------------------------------------------------------------
# canned replies


class Script:
    """Canned replies keyed by prompt kind.

    Each value is a reply string, a list of replies consumed in order (the
    last one repeats), or ``{"error": msg}`` to answer with a protocol error.
    """

    def __init__(self, replies: dict):
        self._replies = {}
        for key, value in replies.items():
            try:
                kind = PromptKind(key)
            except ValueError:
                raise ScriptError(f"unknown prompt kind {key!r}") from None
            if isinstance(value, (str, dict)):
                value = [value]
            if not isinstance(value, list) or not value:
                raise ScriptError(f"script entry for {key} must be a string, list or error mapping")
            for v in value:
                if isinstance(v, dict) and not isinstance(v.get("error"), str):
                    raise ScriptError(f"error entries need an 'error' string: {v!r}")
                if not isinstance(v, (str, dict)):
                    raise ScriptError(f"bad reply {v!r}")
            self._replies[kind] = value
        self._cursor = {k: 0 for k in self._replies}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path) -> "Script":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ScriptError(f"cannot read script {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ScriptError("script must be a mapping of prompt kind to replies")
        return cls(data)

    def reply(self, prompt: str):
        """Return ``(ok, text)`` for a prompt."""
        kind = classify_prompt(prompt)
        if kind is None or kind not in self._replies:
            return False, f"no scripted reply for prompt kind {kind.value if kind else 'UNKNOWN'}"
        with self._lock:
            seq = self._replies[kind]
            i = self._cursor[kind]
            self._cursor[kind] = min(i + 1, len(seq) - 1)
        item = seq[i]
        if isinstance(item, dict):
            return False, item["error"]
        return True, item


class ScriptedClient:
    """In-process stand-in for :class:`WireClient` driven by a :class:`Script`."""

    def __init__(self, script: Script | dict):
        self.script = script if isinstance(script, Script) else Script(script)
        self.calls = 0
        self.prompts: list[str] = []

    def complete(self, prompt: str, images=()) -> str:
        self.calls += 1
        self.prompts.append(prompt)
        ok, text = self.script.reply(prompt)
        if not ok:
            raise WireError(text)
        return text


# --------------------------------------------------------------------------
# stub server


def _handler(script: Script, request_log: list, token: str | None):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("stub: " + fmt, *args)

        def _send(self, code: int, body: dict):
            data = json.dumps(body).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            if token and self.headers.get("Authorization") != f"Bearer {token}":
                request_log.append({"status": 401})
                return self._send(401, {"error": "unauthorized"})
            try:
                body = json.loads(raw.decode())
                if not isinstance(body, dict):
                    raise ValueError("body must be an object")
                if not isinstance(body.get("model"), str) or not isinstance(body.get("prompt"), str):
                    raise ValueError("model and prompt must be strings")
                images = body.get("images", [])
                if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
                    raise ValueError("images must be a list of base64 strings")
                for i in images:
                    base64.b64decode(i, validate=True)
            except (ValueError, UnicodeDecodeError) as exc:
                request_log.append({"status": 400, "error": str(exc)})
                return self._send(400, {"error": f"malformed request: {exc}"})
            kind = classify_prompt(body["prompt"])
            ok, text = script.reply(body["prompt"])
            entry = {"status": 200 if ok else 422, "kind": kind.value if kind else None, "images": len(images)}
            request_log.append(entry)
            log.info("stub request kind=%s images=%d status=%d", entry["kind"], len(images), entry["status"])
            if ok:
                self._send(200, {"text": text})
            else:
                self._send(422, {"error": text})

        def do_GET(self):
            self._send(405, {"error": "use POST"})

    return Handler


class StubServer:
    """Threaded stub endpoint; use as a context manager or call start/stop."""

    def __init__(self, script: Script, host: str = "127.0.0.1", port: int = 0, token: str | None = None):
        self.script = script
        self.requests: list[dict] = []
        try:
            self.httpd = ThreadingHTTPServer((host, port), _handler(script, self.requests, token))
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} is already in use") from exc
            raise
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/v1/complete"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
