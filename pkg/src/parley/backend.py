"""Language-model and embedding backends.

Two implementations share one small surface (``chat`` and ``embed``):

* :class:`HttpBackend` talks to any OpenAI-compatible server.
* :class:`ScriptedBackend` replays canned responses from a JSON script and is
  used for tests, golden traces and offline dry runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)


class Purpose(str, Enum):
    THINK = "Think"
    SPEAK = "Speak"
    DETECT = "Detect"
    NORMALIZE = "Normalize"
    JUDGE_BREAKDOWN = "JudgeBreakdown"
    JUDGE_SCORES = "JudgeScores"


class BackendError(RuntimeError):
    """A backend call failed after all retries."""


class AuthenticationError(BackendError):
    """Credentials were rejected. Never retried."""


class ScriptExhaustedError(BackendError):
    """A scripted queue ran out of responses."""


class ConfigurationError(RuntimeError):
    """Inconsistent backend configuration (routing, embedding dimension, ...)."""


# Speak gets some sampling variety; structured tasks are decoded greedily.
DEFAULT_TEMPERATURES: dict[Purpose, float] = {
    Purpose.THINK: 0.7,
    Purpose.SPEAK: 0.7,
    Purpose.DETECT: 0.0,
    Purpose.NORMALIZE: 0.0,
    Purpose.JUDGE_BREAKDOWN: 0.0,
    Purpose.JUDGE_SCORES: 0.0,
}

DEFAULT_TIERS: dict[Purpose, str] = {
    Purpose.THINK: "economy",
    Purpose.SPEAK: "capable",
    Purpose.DETECT: "capable",
    Purpose.NORMALIZE: "economy",
    Purpose.JUDGE_BREAKDOWN: "capable",
    Purpose.JUDGE_SCORES: "capable",
}


@dataclass(frozen=True)
class RoutingTable:
    """Maps each purpose to a model tier, and each tier to a model id."""

    capable: str = "gpt-4o"
    economy: str = "gpt-3.5-turbo"
    tiers: dict[Purpose, str] = field(default_factory=lambda: dict(DEFAULT_TIERS))
    temperatures: dict[Purpose, float] = field(
        default_factory=lambda: dict(DEFAULT_TEMPERATURES)
    )

    def model_for(self, purpose: Purpose) -> str:
        try:
            tier = self.tiers[purpose]
        except KeyError:
            raise ConfigurationError(f"no route for purpose {purpose.value}") from None
        if tier == "capable":
            return self.capable
        if tier == "economy":
            return self.economy
        raise ConfigurationError(f"unknown model tier {tier!r} for {purpose.value}")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> RoutingTable:
        data = data or {}
        tiers = dict(DEFAULT_TIERS)
        for key, tier in (data.get("purposes") or {}).items():
            tiers[Purpose(key)] = tier
        temps = dict(DEFAULT_TEMPERATURES)
        for key, value in (data.get("temperatures") or {}).items():
            temps[Purpose(key)] = float(value)
        return cls(
            capable=data.get("capable", cls.capable),
            economy=data.get("economy", cls.economy),
            tiers=tiers,
            temperatures=temps,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "capable": self.capable,
            "economy": self.economy,
            "purposes": {p.value: t for p, t in self.tiers.items()},
            "temperatures": {p.value: t for p, t in self.temperatures.items()},
        }


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float
    max_tokens: int
    purpose: Purpose
    agent: str | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def digest(self) -> str:
        payload = json.dumps(
            {"model": self.model_id, "messages": self.messages}, ensure_ascii=False
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def make_request(
    routing: RoutingTable,
    purpose: Purpose,
    messages: Sequence[tuple[str, str]],
    *,
    agent: str | None = None,
    max_tokens: int = 512,
) -> ChatRequest:
    return ChatRequest(
        model_id=routing.model_for(purpose),
        messages=tuple((role, content) for role, content in messages),
        temperature=routing.temperatures.get(purpose, 0.0),
        max_tokens=max_tokens,
        purpose=purpose,
        agent=agent,
    )


class CallLog:
    """Append-only, thread-safe record of backend invocations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: list[dict[str, Any]] = []

    def append(self, record: dict[str, Any]) -> None:
        with self._lock:
            record = {"seq": len(self._records), **record}
            self._records.append(record)

    def records(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def write_jsonl(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


class Backend(Protocol):
    call_log: CallLog

    def chat(self, request: ChatRequest) -> str: ...

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


def _check_dim(vectors: list[list[float]], expected: int | None) -> int:
    dims = {len(v) for v in vectors}
    if len(dims) > 1 or (expected is not None and dims and dims != {expected}):
        raise ConfigurationError(
            f"embedding dimension mismatch: got {sorted(dims)}, expected {expected}"
        )
    return dims.pop() if dims else (expected or 0)


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

WILDCARD = "*"


def hash_unit_vector(text: str, dim: int) -> list[float]:
    """Deterministic pseudo-embedding: a unit vector seeded by sha256(text)."""
    values: list[float] = []
    counter = 0
    while len(values) < dim:
        block = hashlib.sha256(f"{counter}:{text}".encode("utf-8")).digest()
        for i in range(0, len(block), 4):
            if len(values) == dim:
                break
            raw = int.from_bytes(block[i : i + 4], "big")
            values.append(raw / 0xFFFFFFFF * 2.0 - 1.0)
        counter += 1
    norm = math.sqrt(sum(v * v for v in values))
    return [v / norm for v in values]


class ScriptedBackend:
    """Replays canned responses keyed by ``(purpose, agent)``.

    Script layout::

        {
          "chat": {"Think": {"Alice": ["...", "..."], "*": [...]}, ...},
          "embeddings": {"some text": [1.0, 0.0, 0.0]},
          "embedding_dim": 3
        }

    Each ``(purpose, agent)`` pair is an independent queue; an agent without
    its own queue falls back to the ``"*"`` queue of that purpose.  Unknown
    embedding texts get :func:`hash_unit_vector`.
    """

    def __init__(
        self,
        chat: dict[str, dict[str, list[str]]] | None = None,
        embeddings: dict[str, list[float]] | None = None,
        embedding_dim: int | None = None,
    ) -> None:
        self._queues: dict[tuple[Purpose, str], list[str]] = {}
        for purpose_key, per_agent in (chat or {}).items():
            purpose = Purpose(purpose_key)
            for agent, responses in per_agent.items():
                self._queues[(purpose, agent)] = list(responses)
        self._cursor: dict[tuple[Purpose, str], int] = {}
        self._table = {k: [float(x) for x in v] for k, v in (embeddings or {}).items()}
        if embedding_dim is None:
            dims = {len(v) for v in self._table.values()}
            if len(dims) > 1:
                raise ConfigurationError(f"embedding table mixes dimensions {sorted(dims)}")
            embedding_dim = dims.pop() if dims else 8
        self.embedding_dim = embedding_dim
        _check_dim(list(self._table.values()), embedding_dim)
        self._lock = threading.Lock()
        self.call_log = CallLog()

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScriptedBackend:
        return cls(
            chat=data.get("chat"),
            embeddings=data.get("embeddings"),
            embedding_dim=data.get("embedding_dim"),
        )

    def _queue_key(self, purpose: Purpose, agent: str | None) -> tuple[Purpose, str]:
        if agent is not None and (purpose, agent) in self._queues:
            return (purpose, agent)
        return (purpose, WILDCARD)

    def chat(self, request: ChatRequest) -> str:
        with self._lock:
            key = self._queue_key(request.purpose, request.agent)
            queue = self._queues.get(key, [])
            index = self._cursor.get(key, 0)
            if index >= len(queue):
                raise ScriptExhaustedError(
                    f"script exhausted for ({request.purpose.value}, "
                    f"{request.agent or WILDCARD}) at index {index}"
                )
            self._cursor[key] = index + 1
            response = queue[index]
        self.call_log.append(
            {
                "purpose": request.purpose.value,
                "agent": request.agent,
                "model": request.model_id,
                "request_digest": request.digest(),
                "response": response,
                "latency_ms": 0.0,
            }
        )
        return response

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        vectors = [
            list(self._table[t]) if t in self._table else hash_unit_vector(t, self.embedding_dim)
            for t in texts
        ]
        self.call_log.append(
            {
                "purpose": "Embed",
                "agent": None,
                "model": "scripted-embedding",
                "request_digest": hashlib.sha256(
                    json.dumps(list(texts), ensure_ascii=False).encode("utf-8")
                ).hexdigest()[:16],
                "response": f"{len(vectors)}x{self.embedding_dim}",
                "latency_ms": 0.0,
            }
        )
        return vectors


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------

RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


def resolve_api_key(api_key_env: str | None = "OPENAI_API_KEY", api_key_file: str | None = None) -> str:
    if api_key_file:
        return Path(api_key_file).read_text(encoding="utf-8").strip()
    if api_key_env:
        return os.environ.get(api_key_env, "").strip()
    return ""


class HttpBackend:
    """Client for ``/chat/completions`` and ``/embeddings`` on an OpenAI-compatible server."""

    def __init__(
        self,
        base_url: str,
        api_key: str,
        *,
        embedding_model: str = "text-embedding-3-small",
        max_attempts: int = 4,
        backoff_base: float = 0.5,
        backoff_cap: float = 20.0,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.embedding_model = embedding_model
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._embedding_dim: int | None = None
        self._dim_lock = threading.Lock()
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )
        self.call_log = CallLog()

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        last_error: str = ""
        for attempt in range(self.max_attempts):
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc!r}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthenticationError(
                        f"{path}: authentication failed ({resp.status_code})"
                    )
                if resp.status_code < 400:
                    return resp.json()
                if resp.status_code not in RETRYABLE_STATUS:
                    raise BackendError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
                last_error = f"HTTP {resp.status_code}"
            if attempt + 1 < self.max_attempts:
                delay = min(self.backoff_cap, self.backoff_base * 2**attempt)
                log.warning("%s failed (%s); retry %d in %.1fs", path, last_error, attempt + 1, delay)
                self._sleep(delay)
        raise BackendError(f"{path}: gave up after {self.max_attempts} attempts ({last_error})")

    def verify(self) -> None:
        """Cheap authenticated request; raises AuthenticationError on bad credentials."""
        try:
            resp = self._client.get("/models")
        except httpx.TransportError as exc:
            log.warning("backend unreachable during credential check: %r", exc)
            return
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"/models: authentication failed ({resp.status_code})")

    def chat(self, request: ChatRequest) -> str:
        payload = {
            "model": request.model_id,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        start = time.perf_counter()
        data = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion payload: {exc!r}") from exc
        self.call_log.append(
            {
                "purpose": request.purpose.value,
                "agent": request.agent,
                "model": request.model_id,
                "request_digest": request.digest(),
                "response": text,
                "latency_ms": round((time.perf_counter() - start) * 1000.0, 3),
            }
        )
        return text

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        start = time.perf_counter()
        data = self._post("/embeddings", {"model": self.embedding_model, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            vectors = [[float(x) for x in item["embedding"]] for item in items]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed embeddings payload: {exc!r}") from exc
        if len(vectors) != len(texts):
            raise BackendError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        with self._dim_lock:
            self._embedding_dim = _check_dim(vectors, self._embedding_dim)
        self.call_log.append(
            {
                "purpose": "Embed",
                "agent": None,
                "model": self.embedding_model,
                "request_digest": hashlib.sha256(
                    json.dumps(list(texts), ensure_ascii=False).encode("utf-8")
                ).hexdigest()[:16],
                "response": f"{len(vectors)}x{self._embedding_dim}",
                "latency_ms": round((time.perf_counter() - start) * 1000.0, 3),
            }
        )
        return vectors


def backend_from_config(config: dict[str, Any]) -> Backend:
    """Build a backend from the ``backend`` block of a plan or session config."""
    kind = config.get("kind", "scripted")
    if kind == "scripted":
        return ScriptedBackend.from_file(config["script_path"])
    if kind == "live":
        key = resolve_api_key(config.get("api_key_env", "OPENAI_API_KEY"), config.get("api_key_file"))
        return HttpBackend(
            base_url=config.get("base_url", "https://api.openai.com/v1"),
            api_key=key,
            embedding_model=config.get("embedding_model", "text-embedding-3-small"),
            max_attempts=int(config.get("max_attempts", 4)),
            timeout=float(config.get("timeout", 60.0)),
        )
    raise ConfigurationError(f"unknown backend kind {kind!r}")
