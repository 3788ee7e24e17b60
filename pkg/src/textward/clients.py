"""Thin retrying clients for the chat LLM, VLM judge, embedding, and OCR
endpoints, plus deterministic in-process mocks.

All endpoints are assumed to speak the OpenAI-style chat-completion /
embedding wire protocol behind a gateway. Clients fail only on transport
problems; they never inspect or reject the model's text output, which is
the downstream parsers' job. Every real client has a mock twin here that
satisfies the identical interface so the rest of the test suites run with
zero network access.
"""

from __future__ import annotations

import hashlib
import os
import random
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import requests

from .kernels import unit_normalize

BACKOFF_BASE_SECS = 0.5  # doubled per retry, full jitter


class ClientError(Exception):
    pass


class TransportError(ClientError):
    """Retryable endpoint failure (timeout, HTTP error, bad body)."""


class RequestTimeoutError(TransportError):
    pass


class HttpStatusError(TransportError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"HTTP {status}: {message}" if message else f"HTTP {status}")
        self.status = status


class MissingApiKeyError(ClientError):
    pass


class ImageUnreadableError(ClientError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = ""
    model_name: str = ""
    api_key_env: str = ""
    temperature: float = 0.0
    top_p: float = 1.0
    max_retries: int = 2
    timeout_secs: float = 60.0
    rpm: float | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.timeout_secs <= 0:
            raise ValueError(f"timeout_secs must be > 0, got {self.timeout_secs}")


def load_endpoint_configs(path: str) -> dict[str, EndpointConfig]:
    """Parse a TOML config file with one section per endpoint."""
    try:
        import tomllib  # type: ignore[import-not-found]
    except ImportError:
        import tomli as tomllib  # type: ignore[no-redef]
    with open(path, "rb") as fp:
        raw = tomllib.load(fp)
    configs = {}
    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ValueError(f"config section [{section}] must be a table")
        configs[section] = EndpointConfig(**values)
    return configs


@dataclass(frozen=True)
class ChatResponse:
    text: str  # verbatim payload; no trimming
    finish_reason: str | None = None


class RateLimiter:
    """Token bucket capped at `rpm` requests per minute. Thread-safe."""

    def __init__(self, rpm: float | None, sleeper: Callable[[float], None] = time.sleep):
        self._rate = (rpm / 60.0) if rpm else None
        self._capacity = rpm or 0.0
        self._tokens = self._capacity
        self._last = time.monotonic()
        self._sleeper = sleeper
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self._rate is None:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            self._sleeper(wait)


class _BaseClient:
    """Shared retry loop: max_retries re-attempts with exponential backoff
    (base 0.5 s, doubled each retry, full jitter) on transport errors."""

    def __init__(
        self,
        cfg: EndpointConfig,
        *,
        sleeper: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.cfg = cfg
        self._sleeper = sleeper
        self._rng = rng or random.Random()
        self._limiter = RateLimiter(cfg.rpm, sleeper=sleeper)

    def _call(self, attempt: Callable[[], Any]) -> Any:
        last: TransportError | None = None
        for i in range(self.cfg.max_retries + 1):
            self._limiter.acquire()
            try:
                return attempt()
            except TransportError as exc:
                last = exc
                if i < self.cfg.max_retries:
                    self._sleeper(self._rng.uniform(0.0, BACKOFF_BASE_SECS * 2**i))
        assert last is not None
        raise last

    def _api_key(self) -> str | None:
        if not self.cfg.api_key_env:
            return None
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise MissingApiKeyError(f"environment variable {self.cfg.api_key_env} is not set")
        return key

    def _post(self, route: str, body: Mapping[str, Any]) -> dict[str, Any]:
        headers = {"Content-Type": "application/json"}
        key = self._api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = self.cfg.base_url.rstrip("/") + route
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=self.cfg.timeout_secs)
        except requests.Timeout as exc:
            raise RequestTimeoutError(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise HttpStatusError(resp.status_code, resp.text[:200])
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"malformed response body: {exc}") from exc

    def _sampling(self, temperature: float | None, top_p: float | None) -> dict[str, float]:
        return {
            "temperature": self.cfg.temperature if temperature is None else temperature,
            "top_p": self.cfg.top_p if top_p is None else top_p,
        }


def _first_choice(payload: Mapping[str, Any]) -> ChatResponse:
    try:
        choice = payload["choices"][0]
        return ChatResponse(text=choice["message"]["content"], finish_reason=choice.get("finish_reason"))
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"unexpected completion payload: {exc}") from exc


class ChatClient(_BaseClient):
    def chat(
        self,
        system: str,
        user: str,
        *,
        temperature: float | None = None,
        top_p: float | None = None,
        max_tokens: int | None = None,
    ) -> ChatResponse:
        def attempt() -> ChatResponse:
            body: dict[str, Any] = {
                "model": self.cfg.model_name,
                "messages": [
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                ],
                **self._sampling(temperature, top_p),
            }
            if max_tokens is not None:
                body["max_tokens"] = max_tokens
            return _first_choice(self._post("/chat/completions", body))

        return self._call(attempt)


class VlmClient(_BaseClient):
    """Chat client variant that attaches one image reference per call."""

    def chat_with_image(
        self,
        system: str,
        user: str,
        image_ref: str,
        *,
        temperature: float | None = None,
        top_p: float | None = None,
        max_tokens: int | None = None,
    ) -> ChatResponse:
        def attempt() -> ChatResponse:
            body: dict[str, Any] = {
                "model": self.cfg.model_name,
                "messages": [
                    {"role": "system", "content": system},
                    {
                        "role": "user",
                        "content": [
                            {"type": "text", "text": user},
                            {"type": "image_url", "image_url": {"url": image_ref}},
                        ],
                    },
                ],
                **self._sampling(temperature, top_p),
            }
            if max_tokens is not None:
                body["max_tokens"] = max_tokens
            return _first_choice(self._post("/chat/completions", body))

        return self._call(attempt)


class EmbedClient(_BaseClient):
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """One unit vector per input text, shape (n, d)."""
        if not texts:
            raise ValueError("embed requires at least one text")

        def attempt() -> np.ndarray:
            payload = self._post("/embeddings", {"model": self.cfg.model_name, "input": list(texts)})
            try:
                vectors = [item["embedding"] for item in payload["data"]]
            except (KeyError, TypeError) as exc:
                raise TransportError(f"unexpected embedding payload: {exc}") from exc
            if len(vectors) != len(texts):
                raise TransportError(f"expected {len(texts)} embeddings, got {len(vectors)}")
            return unit_normalize(np.asarray(vectors, dtype=np.float64))

        return self._call(attempt)


def join_ocr_lines(text: str) -> str:
    """Recognized text as a single string; each line break becomes one space."""
    return " ".join(text.splitlines())


_OCR_SYSTEM = "You are a precise OCR engine."
_OCR_USER = (
    "Transcribe all text visible in the image exactly as rendered, in reading "
    "order. Output only the transcription, one line per text block. If the "
    "image contains no text, output nothing."
)


class OcrClient(VlmClient):
    def ocr(self, image_ref: str) -> str:
        resp = self.chat_with_image(_OCR_SYSTEM, _OCR_USER, image_ref, temperature=0.0)
        return join_ocr_lines(resp.text)


# --- deterministic mocks ---------------------------------------------------


class _FailureScript:
    """Raises HTTP 503 for the first `fail_times` attempts (-1 = always)."""

    def __init__(self, fail_times: int):
        self.fail_times = fail_times
        self.attempts = 0
        self._lock = threading.Lock()

    def check(self) -> None:
        with self._lock:
            self.attempts += 1
            if self.fail_times < 0 or self.attempts <= self.fail_times:
                raise HttpStatusError(503, "injected failure")


class MockChatClient(ChatClient):
    """Scripted chat endpoint.

    `responder` maps (system, user) to the reply text; when a list of
    strings is given they are consumed in order (the last one repeats);
    by default the mock echoes the user message. `fail_times` injects
    that many HTTP 503 failures before the first success (-1: always
    fail). Calls are recorded on `.calls`.
    """

    def __init__(
        self,
        responder: Callable[[str, str], str] | Sequence[str] | str | None = None,
        *,
        fail_times: int = 0,
        cfg: EndpointConfig | None = None,
        sleeper: Callable[[float], None] = lambda _s: None,
        rng: random.Random | None = None,
    ):
        super().__init__(cfg or EndpointConfig(), sleeper=sleeper, rng=rng)
        self._responder = responder
        self._failures = _FailureScript(fail_times)
        self._consumed = 0
        self.calls: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def _respond(self, system: str, user: str) -> str:
        if self._responder is None:
            return user
        if isinstance(self._responder, str):
            return self._responder
        if callable(self._responder):
            return self._responder(system, user)
        idx = min(self._consumed, len(self._responder) - 1)
        self._consumed += 1
        return self._responder[idx]

    def chat(
        self,
        system: str,
        user: str,
        *,
        temperature: float | None = None,
        top_p: float | None = None,
        max_tokens: int | None = None,
    ) -> ChatResponse:
        def attempt() -> ChatResponse:
            self._failures.check()
            with self._lock:
                self.calls.append(
                    {"system": system, "user": user, **self._sampling(temperature, top_p)}
                )
                return ChatResponse(text=self._respond(system, user), finish_reason="stop")

        return self._call(attempt)


class MockVlmClient(VlmClient):
    """Scripted VLM endpoint; `responder` maps (system, user, image_ref) to
    the raw reply text. `fail_refs` lists image refs that always raise a
    transport error (e.g. to simulate an unreachable image host)."""

    def __init__(
        self,
        responder: Callable[[str, str, str], str],
        *,
        fail_times: int = 0,
        fail_refs: Sequence[str] = (),
        cfg: EndpointConfig | None = None,
        sleeper: Callable[[float], None] = lambda _s: None,
    ):
        super().__init__(cfg or EndpointConfig(), sleeper=sleeper)
        self._responder = responder
        self._failures = _FailureScript(fail_times)
        self._fail_refs = set(fail_refs)
        self.calls: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def chat_with_image(
        self,
        system: str,
        user: str,
        image_ref: str,
        *,
        temperature: float | None = None,
        top_p: float | None = None,
        max_tokens: int | None = None,
    ) -> ChatResponse:
        def attempt() -> ChatResponse:
            self._failures.check()
            if image_ref in self._fail_refs:
                raise HttpStatusError(502, f"injected failure for {image_ref}")
            with self._lock:
                self.calls.append({"system": system, "user": user, "image_ref": image_ref})
            return ChatResponse(text=self._responder(system, user, image_ref), finish_reason="stop")

        return self._call(attempt)


def hash_embedding(text: str, dim: int = 32) -> np.ndarray:
    """The mock embedder's documented hash projection.

    Component k is derived from sha256(text + US + str(k)): the first 8
    digest bytes, read big-endian, are mapped linearly from [0, 2^64) onto
    [-1, 1). The vector is then L2-normalized. Identical inputs therefore
    embed identically, and distinct inputs land in near-random directions.
    """
    vec = np.empty(dim, dtype=np.float64)
    for k in range(dim):
        digest = hashlib.sha256(f"{text}\x1f{k}".encode("utf-8")).digest()
        vec[k] = int.from_bytes(digest[:8], "big") / 2**63 - 1.0
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm else vec


class MockEmbedClient(EmbedClient):
    """Deterministic embedder: fixed vectors for listed texts, the
    documented hash projection for everything else."""

    def __init__(
        self,
        fixed: Mapping[str, Sequence[float]] | None = None,
        *,
        dim: int = 32,
        fail_times: int = 0,
        cfg: EndpointConfig | None = None,
        sleeper: Callable[[float], None] = lambda _s: None,
    ):
        super().__init__(cfg or EndpointConfig(), sleeper=sleeper)
        self._fixed = {k: np.asarray(v, dtype=np.float64) for k, v in (fixed or {}).items()}
        self.dim = dim
        self._failures = _FailureScript(fail_times)
        self.calls: list[list[str]] = []
        self._lock = threading.Lock()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("embed requires at least one text")

        def attempt() -> np.ndarray:
            self._failures.check()
            with self._lock:
                self.calls.append(list(texts))
            rows = [
                self._fixed[t] if t in self._fixed else hash_embedding(t, self.dim)
                for t in texts
            ]
            width = max(r.shape[0] for r in rows)
            mat = np.zeros((len(rows), width), dtype=np.float64)
            for i, r in enumerate(rows):
                mat[i, : r.shape[0]] = r
            return unit_normalize(mat)

        return self._call(attempt)


class MockOcrClient(OcrClient):
    """Fixture-backed OCR: a map from image ref to recognized text.
    Unknown refs raise ImageUnreadableError."""

    def __init__(
        self,
        fixtures: Mapping[str, str],
        *,
        fail_times: int = 0,
        cfg: EndpointConfig | None = None,
        sleeper: Callable[[float], None] = lambda _s: None,
    ):
        super().__init__(cfg or EndpointConfig(), sleeper=sleeper)
        self._fixtures = dict(fixtures)
        self._failures = _FailureScript(fail_times)
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def ocr(self, image_ref: str) -> str:
        def attempt() -> str:
            self._failures.check()
            with self._lock:
                self.calls.append(image_ref)
            if image_ref not in self._fixtures:
                raise ImageUnreadableError(f"unknown image ref: {image_ref}")
            return join_ocr_lines(self._fixtures[image_ref])

        return self._call(attempt)
