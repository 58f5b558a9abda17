"""Chat-completion clients: an HTTP client for messages-array endpoints and a scripted mock."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

log = logging.getLogger(__name__)

DEFAULT_TOKEN_ENV = "SEMREL_CHAT_TOKEN"


class ChatError(RuntimeError):
    """The endpoint could not produce a response (after retries)."""


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple
    step: str = ""
    sample_id: str = ""
    attempt: int = 0


class Client(Protocol):
    model: str

    def complete(self, request: ChatRequest) -> str: ...


@dataclass
class ChatClient:
    """Minimal client for an OpenAI-style ``/chat/completions`` endpoint.

    The bearer token is read from ``token_env`` at request time and is never
    logged or returned. Transport errors, 429 and 5xx responses are retried
    up to ``max_retries`` times with exponential backoff starting at
    ``backoff`` seconds.
    """

    endpoint: str
    model: str
    token_env: str = DEFAULT_TOKEN_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    temperature: float = 0.0
    max_tokens: int = 512
    session: object = None
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.session is None:
            import requests

            self.session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def body(self, request: ChatRequest) -> dict:
        return {
            "model": self.model,
            "messages": list(request.messages),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def complete(self, request: ChatRequest) -> str:
        import requests

        body = self.body(request)
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff * 2 ** (attempt - 1)
                log.warning("retrying %s/%s in %.1fs after: %s", request.step, request.sample_id, delay, last)
                self.sleep(delay)
            try:
                resp = self.session.post(self.endpoint, json=body, headers=self._headers(), timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"{type(exc).__name__}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ChatError(f"{request.step}/{request.sample_id}: HTTP {resp.status_code} from {self.endpoint}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ChatError(f"{request.step}/{request.sample_id}: malformed response body ({exc})") from None
        raise ChatError(f"{request.step}/{request.sample_id}: gave up after {self.max_retries} retries ({last})")


@dataclass
class MockClient:
    """Replays scripted responses from ``<fixture_dir>/responses.json``.

    The file maps step -> sample id -> response text, or a list of texts
    indexed by attempt (the last entry repeats). A ``"*"`` entry is the
    fallback for unlisted samples. Every request is recorded in
    ``requests`` so prompts can be inspected.
    """

    responses: dict
    model: str = "mock"
    requests: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_dir(cls, fixture_dir, model: str = "mock") -> "MockClient":
        path = Path(fixture_dir) / "responses.json"
        return cls(json.loads(path.read_text(encoding="utf-8")), model)

    @property
    def n_requests(self) -> int:
        return len(self.requests)

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.requests.append(request)
        by_sample = self.responses.get(request.step, {})
        scripted = by_sample.get(request.sample_id, by_sample.get("*"))
        if scripted is None:
            raise ChatError(f"mock has no response for {request.step}/{request.sample_id}")
        if isinstance(scripted, list):
            return scripted[min(request.attempt, len(scripted) - 1)]
        return scripted
