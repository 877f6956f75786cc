"""Scripted, deterministic LLM stand-in and a local chat-completions stub server."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, HTTPServer
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .llm import BackendError, Message, TranscriptLog

logger = logging.getLogger(__name__)

EXHAUSTION_POLICIES = ("repeat_last", "error")


class ScriptExhausted(BackendError):
    """No scripted response is available for a prompt."""

    def __init__(self, template_id: str, detail: str):
        super().__init__(f"script has no response for template {template_id!r}: {detail}")
        self.template_id = template_id


@dataclass(frozen=True)
class ScriptEntry:
    """One canned reply. Matches by template id, by substring, or ``"*"`` for anything."""

    response: str
    template: str | None = None
    contains: str | None = None

    def matches(self, template_id: str, text: str) -> bool:
        if self.template == "*":
            return True
        if self.template is not None and self.template != template_id:
            return False
        if self.contains is not None and self.contains not in text:
            return False
        return self.template is not None or self.contains is not None

    def to_dict(self) -> dict:
        match = {k: v for k, v in (("template", self.template), ("contains", self.contains)) if v is not None}
        return {"match": match, "response": self.response}


@dataclass(frozen=True)
class Script:
    entries: tuple[ScriptEntry, ...]
    exhaustion: str = "repeat_last"

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("a script needs at least one entry")
        if self.exhaustion not in EXHAUSTION_POLICIES:
            raise ValueError(f"unknown exhaustion policy {self.exhaustion!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Script":
        entries = []
        for e in d["entries"]:
            match = e.get("match", {})
            response = e["response"]
            if not isinstance(response, str):
                # allow structured responses in fixture files
                response = json.dumps(response, indent=2, ensure_ascii=False)
            entries.append(ScriptEntry(response, match.get("template"), match.get("contains")))
        return cls(tuple(entries), d.get("exhaustion", "repeat_last"))

    def to_dict(self) -> dict:
        return {"exhaustion": self.exhaustion, "entries": [e.to_dict() for e in self.entries]}

    def __add__(self, other: "Script") -> "Script":
        return Script(self.entries + other.entries, self.exhaustion)


def load_script(path: str | Path) -> Script:
    return Script.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def builtin_script(name: str) -> Script:
    """Load one of the fixture scripts shipped with the package (without ``.json``)."""
    ref = resources.files("teforge") / "fixtures" / "scripts" / f"{name}.json"
    return Script.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def builtin_script_names() -> list[str]:
    folder = resources.files("teforge") / "fixtures" / "scripts"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def _flatten(messages: Sequence[Message]) -> str:
    return "\n".join(m.get("content", "") for m in messages)


class ScriptedBackend:
    """Replays a ``Script``. Consumption is serialized so concurrent callers stay safe."""

    def __init__(self, script: Script, backend_id: str = "mock", transcript: TranscriptLog | None = None):
        self.script = script
        self.backend_id = backend_id
        self.transcript = transcript
        self._consumed: set[int] = set()
        self._lock = threading.Lock()

    def get_state(self) -> dict:
        return {"consumed": sorted(self._consumed)}

    def set_state(self, state: dict) -> None:
        self._consumed = set(state.get("consumed", []))

    def _select(self, template_id: str, text: str) -> str:
        hits = [i for i, e in enumerate(self.script.entries) if e.matches(template_id, text)]
        if not hits:
            raise ScriptExhausted(template_id, "no entry matches")
        for i in hits:
            if i not in self._consumed:
                self._consumed.add(i)
                return self.script.entries[i].response
        if self.script.exhaustion == "repeat_last":
            return self.script.entries[hits[-1]].response
        raise ScriptExhausted(template_id, f"all {len(hits)} matching entries consumed")

    def generate(self, messages, template_id="", temperature=None, max_tokens=None) -> str:
        started = time.time()
        with self._lock:
            try:
                text = self._select(template_id, _flatten(messages))
            except ScriptExhausted as exc:
                if self.transcript is not None:
                    self.transcript.record(self.backend_id, template_id, _request(messages, template_id),
                                           None, started, time.time(), str(exc))
                raise
        if self.transcript is not None:
            self.transcript.record(self.backend_id, template_id, _request(messages, template_id),
                                   text, started, time.time())
        return text


def scripted_generate(script: Script, messages: Sequence[Message], template_id: str = "") -> str:
    """One-shot helper: the first matching response of a fresh replay of ``script``."""
    return ScriptedBackend(script).generate(messages, template_id)


def _request(messages, template_id) -> dict:
    return {"messages": [dict(m) for m in messages], "metadata": {"template_id": template_id}}


_BEARER = re.compile(r"^Bearer [^\s]+$")


class StubServer:
    """Serves a script over the chat-completions wire format on localhost.

    Handles one request at a time. Every request body that passes auth is
    appended to ``requests``. Use as a context manager or call
    ``start``/``stop``.
    """

    def __init__(self, script: Script, port: int = 0, token: str | None = None, model: str = "stub"):
        self.backend = ScriptedBackend(script, backend_id="stub")
        self.token = token
        self.model = model
        self.requests: list[dict[str, Any]] = []
        self._server = HTTPServer(("127.0.0.1", port), self._handler())
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1/chat/completions"

    def _handler(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep test output quiet
                logger.debug("stub: " + fmt, *args)

            def _reply(self, status: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                auth = self.headers.get("Authorization", "")
                if not _BEARER.match(auth) or (stub.token is not None and auth != f"Bearer {stub.token}"):
                    self._reply(401, {"error": {"type": "auth", "message": "missing or malformed bearer token"}})
                    return
                try:
                    body = json.loads(raw)
                    messages = body["messages"]
                except (ValueError, KeyError, TypeError):
                    self._reply(400, {"error": {"type": "invalid_request", "message": "body must be JSON with messages"}})
                    return
                stub.requests.append(body)
                template_id = (body.get("metadata") or {}).get("template_id", "")
                try:
                    text = stub.backend.generate(messages, template_id)
                except ScriptExhausted as exc:
                    self._reply(409, {"error": {"type": "script_exhausted", "message": str(exc)}})
                    return
                n = len(stub.requests)
                self._reply(200, {
                    "id": f"stub-{n}",
                    "object": "chat.completion",
                    "model": body.get("model", stub.model),
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                                 "finish_reason": "stop"}],
                    "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
                })

        return Handler

    def start(self) -> "StubServer":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def stub_server(script: Script, port: int = 0, token: str | None = None) -> StubServer:
    """Start a stub server in a background thread and return its handle."""
    return StubServer(script, port, token).start()
