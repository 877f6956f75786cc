"""LLM backend interface, the chat-completions client and transcript logging."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import httpx

logger = logging.getLogger(__name__)

Message = dict[str, str]


class BackendError(RuntimeError):
    """The backend could not produce a completion."""


@runtime_checkable
class LlmBackend(Protocol):
    backend_id: str

    def generate(
        self,
        messages: Sequence[Message],
        template_id: str = "",
        temperature: float | None = None,
        max_tokens: int | None = None,
    ) -> str: ...


class TranscriptLog:
    """Serialized writer for one-JSON-file-per-call transcripts.

    With ``directory=None`` entries are only kept in memory.
    """

    def __init__(self, directory: str | Path | None = None, start_index: int = 0):
        self.directory = Path(directory) if directory is not None else None
        self.index = start_index
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def record(
        self,
        backend_id: str,
        template_id: str,
        request: dict[str, Any],
        response: str | None,
        started: float,
        finished: float,
        error: str | None = None,
    ) -> int:
        with self._lock:
            idx = self.index
            self.index += 1
            entry = {
                "index": idx,
                "backend": backend_id,
                "template_id": template_id,
                "request": request,
                "response": response,
                "error": error,
                "started_at": started,
                "finished_at": finished,
            }
            self.entries.append(entry)
            if self.directory is not None:
                name = f"{idx:05d}_{template_id or 'call'}.json"
                (self.directory / name).write_text(json.dumps(entry, indent=2, ensure_ascii=False) + "\n",
                                                   encoding="utf-8")
        return idx


class RemoteBackend:
    """Chat-completions client (JSON over HTTPS, bearer-token auth).

    The API key is read from the environment variable named by
    ``api_key_env`` on every call and is never written to transcripts.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "TEFORGE_API_KEY",
        temperature: float = 1.0,
        max_tokens: int = 4096,
        timeout: float = 120.0,
        transcript: TranscriptLog | None = None,
        client: httpx.Client | None = None,
        backend_id: str | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.transcript = transcript
        self.backend_id = backend_id or f"remote:{model}"
        self._client = client or httpx.Client(timeout=timeout)

    def request_body(self, messages, template_id, temperature, max_tokens) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [dict(m) for m in messages],
            "temperature": self.temperature if temperature is None else temperature,
            "max_tokens": self.max_tokens if max_tokens is None else max_tokens,
            "metadata": {"template_id": template_id},
        }

    def generate(self, messages, template_id="", temperature=None, max_tokens=None) -> str:
        body = self.request_body(messages, template_id, temperature, max_tokens)
        key = os.environ.get(self.api_key_env)
        started = time.time()
        text, error = None, None
        try:
            if not key:
                raise BackendError(f"environment variable {self.api_key_env} is not set")
            try:
                resp = self._client.post(self.endpoint, json=body, headers={"Authorization": f"Bearer {key}"})
            except httpx.HTTPError as exc:
                raise BackendError(f"request to {self.endpoint} failed: {exc}") from exc
            if resp.status_code != 200:
                raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text[:500]}")
            try:
                text = resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"unexpected response shape: {resp.text[:500]}") from exc
            return text
        except BackendError as exc:
            error = str(exc)
            raise
        finally:
            if self.transcript is not None:
                self.transcript.record(self.backend_id, template_id, body, text, started, time.time(), error)

    def close(self) -> None:
        self._client.close()


_FENCE = re.compile(r"^\s*```[A-Za-z0-9_+-]*\s*\n(.*?)\n?\s*```\s*$", re.S)


def strip_fences(text: str) -> str:
    """Remove one surrounding Markdown code fence, if present."""
    m = _FENCE.match(text)
    return m.group(1) if m else text.strip()


def extract_json(text: str, opener: str = "[") -> Any:
    """Decode the JSON value in an LLM reply.

    Tries the whole (fence-stripped) reply first, then the span between the
    first ``opener`` and its matching last closer. Raises ``ValueError``.
    """
    body = strip_fences(text)
    try:
        return json.loads(body)
    except json.JSONDecodeError:
        pass
    for block in re.findall(r"```[A-Za-z0-9_+-]*\s*\n(.*?)```", text, re.S):
        try:
            return json.loads(block)
        except json.JSONDecodeError:
            continue
    closer = {"[": "]", "{": "}"}[opener]
    start, end = body.find(opener), body.rfind(closer)
    if start != -1 and end > start:
        try:
            return json.loads(body[start : end + 1])
        except json.JSONDecodeError as exc:
            raise ValueError(f"no parseable JSON: {exc}") from exc
    raise ValueError("no JSON value found in response")
