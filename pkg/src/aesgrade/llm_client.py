"""Backends that turn a PromptBundle into response text.

``HttpBackend`` speaks the chat-completions wire format, ``ReplayBackend``
serves responses from a recorded cassette, and ``CachingBackend`` /
``RecordingBackend`` wrap either one.
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

import httpx

from .prompts import PromptBundle

logger = logging.getLogger(__name__)

CASSETTE_SCHEMA_VERSION = 1
RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    pass


class HttpStatusError(BackendError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"HTTP {status}: {body[:200]}")


class ReplayMiss(BackendError):
    def __init__(self, fingerprint: str, role: str = ""):
        self.fingerprint = fingerprint
        super().__init__(f"no cassette entry for {role + ' ' if role else ''}request {fingerprint[:16]}")


class AuthMissing(BackendError):
    pass


class CassetteError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class ConfigError(ValueError):
    pass


def fingerprint(bundle: PromptBundle, params: Mapping | None = None) -> str:
    """Stable SHA-256 over role, both prompt texts and decoding parameters."""
    payload = {
        "role": str(bundle.role),
        "system": bundle.system_text,
        "user": bundle.user_text,
        "params": {k: v for k, v in sorted((params or {}).items()) if v is not None},
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionExchange:
    request_fingerprint: str
    response_text: str
    latency_ms: float = 0.0
    token_usage: dict | None = None
    role: str = ""
    cached: bool = False


class Backend(Protocol):
    backend_id: str

    def complete(self, bundle: PromptBundle) -> CompletionExchange: ...


@dataclass
class BackendConfig:
    kind: str = "replay"
    model_name: str = ""
    base_url: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout_ms: int = 120_000
    max_retries: int = 5
    rate_limit: int | None = None
    cache_dir: str | None = None
    cassette: str | None = None
    temperature: float | None = 0.0
    max_tokens: int | None = None

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path | None = None) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"backend: unknown key(s) {', '.join(sorted(unknown))}")
        cfg = cls(**dict(data))
        if base_dir is not None:
            for key in ("cache_dir", "cassette"):
                val = getattr(cfg, key)
                if val and not Path(val).is_absolute():
                    setattr(cfg, key, str((base_dir / val).resolve()))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.kind not in ("http", "replay"):
            raise ConfigError(f"backend.kind must be 'http' or 'replay', got {self.kind!r}")
        if self.kind == "http":
            if not self.base_url:
                raise ConfigError("backend.base_url is required for kind 'http'")
            if not self.model_name:
                raise ConfigError("backend.model_name is required for kind 'http'")
        if self.kind == "replay" and not self.cassette:
            raise ConfigError("backend.cassette is required for kind 'replay'")
        if self.timeout_ms <= 0:
            raise ConfigError("backend.timeout_ms must be positive")
        if self.max_retries < 0:
            raise ConfigError("backend.max_retries must be >= 0")
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ConfigError("backend.rate_limit must be positive when set")

    def decoding_params(self) -> dict:
        return {k: v for k, v in (("temperature", self.temperature), ("max_tokens", self.max_tokens))
                if v is not None}


class RateLimiter:
    """Blocking sliding-window limiter: at most ``limit`` acquisitions per ``window`` seconds."""

    def __init__(self, limit: int, window: float = 60.0, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if limit <= 0:
            raise ValueError("limit must be positive")
        self.limit = limit
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = self.window - (now - self._stamps[0])
            self._sleep(max(wait, 0.001))


class HttpBackend:
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep, backoff_base: float = 1.0,
                 backoff_max: float = 60.0, rate_limiter: RateLimiter | None = None):
        cfg.validate()
        if cfg.kind != "http":
            raise ConfigError("HttpBackend needs an http config")
        self.cfg = cfg
        self.params = cfg.decoding_params()
        self.backend_id = f"http:{cfg.model_name}"
        url = cfg.base_url.rstrip("/")
        self.url = url if url.endswith("/chat/completions") else url + "/chat/completions"
        self._client = httpx.Client(timeout=cfg.timeout_ms / 1000.0, transport=transport)
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._backoff_max = backoff_max
        self._limiter = rate_limiter or (RateLimiter(cfg.rate_limit) if cfg.rate_limit else None)
        self.attempts = 0
        self._count_lock = threading.Lock()

    def _api_key(self) -> str:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise AuthMissing(f"environment variable {self.cfg.api_key_env} is not set")
        return key

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        if response is not None:
            retry_after = response.headers.get("retry-after")
            if retry_after:
                try:
                    return min(float(retry_after), self._backoff_max)
                except ValueError:
                    pass
        return min(self._backoff_base * (2 ** attempt), self._backoff_max)

    def complete(self, bundle: PromptBundle) -> CompletionExchange:
        headers = {"Authorization": f"Bearer {self._api_key()}", "Content-Type": "application/json"}
        body = {
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
            **self.params,
        }
        fp = fingerprint(bundle, self.params)
        for attempt in range(self.cfg.max_retries + 1):
            last = attempt == self.cfg.max_retries
            if self._limiter is not None:
                self._limiter.acquire()
            with self._count_lock:
                self.attempts += 1
            started = time.perf_counter()
            try:
                resp = self._client.post(self.url, headers=headers, json=body)
            except httpx.TransportError as exc:
                if last:
                    raise TransportError(f"{type(exc).__name__}: {exc}") from exc
                logger.warning("transport error (%s), retrying", exc)
                self._sleep(self._delay(attempt, None))
                continue
            latency = (time.perf_counter() - started) * 1000.0
            if resp.status_code in RETRYABLE_STATUS:
                if last:
                    raise HttpStatusError(resp.status_code, resp.text)
                logger.warning("HTTP %d, retrying", resp.status_code)
                self._sleep(self._delay(attempt, resp))
                continue
            if resp.status_code >= 400:
                raise HttpStatusError(resp.status_code, resp.text)
            try:
                data = resp.json()
                text = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"malformed completion response: {exc}") from exc
            usage = data.get("usage") or None
            if usage:
                usage = {k: usage.get(k) for k in ("prompt_tokens", "completion_tokens") if k in usage}
            return CompletionExchange(fp, text or "", latency, usage, str(bundle.role))
        raise AssertionError("unreachable")

    def close(self) -> None:
        self._client.close()


class ReplayBackend:
    """Serves responses from a fingerprint table; never touches the network."""

    def __init__(self, table: Mapping[str, str], params: Mapping | None = None, backend_id: str = "replay"):
        self.table = dict(table)
        self.params = dict(params or {})
        self.backend_id = backend_id
        self._lock = threading.Lock()
        self.lookups = 0

    @classmethod
    def from_cassette(cls, path: str | Path, params: Mapping | None = None) -> "ReplayBackend":
        return cls(load_cassette(path), params, backend_id=f"replay:{Path(path).name}")

    def complete(self, bundle: PromptBundle) -> CompletionExchange:
        fp = fingerprint(bundle, self.params)
        with self._lock:
            self.lookups += 1
        try:
            text = self.table[fp]
        except KeyError:
            raise ReplayMiss(fp, str(bundle.role)) from None
        return CompletionExchange(fp, text, 0.0, None, str(bundle.role))


class ScriptedBackend:
    """Backend computing each response with a Python callable.

    Handy for dry runs and for producing cassettes without a live model.
    """

    def __init__(self, respond: Callable[[PromptBundle], str], params: Mapping | None = None,
                 backend_id: str = "scripted"):
        self.respond = respond
        self.params = dict(params or {})
        self.backend_id = backend_id
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, bundle: PromptBundle) -> CompletionExchange:
        with self._lock:
            self.calls += 1
        return CompletionExchange(fingerprint(bundle, self.params), self.respond(bundle), 0.0, None,
                                  str(bundle.role))


class CachingBackend:
    """Disk cache in front of another backend, keyed by request fingerprint and backend id."""

    def __init__(self, inner: Backend, cache_dir: str | Path):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.params = getattr(inner, "params", {})
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, fp: str) -> Path:
        key = hashlib.sha256(f"{self.backend_id}\0{fp}".encode()).hexdigest()
        return self.cache_dir / key[:2] / f"{key}.json"

    def complete(self, bundle: PromptBundle) -> CompletionExchange:
        fp = fingerprint(bundle, self.params)
        path = self._path(fp)
        if path.is_file():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
                with self._lock:
                    self.hits += 1
                return CompletionExchange(fp, data["response_text"], 0.0, data.get("token_usage"),
                                          str(bundle.role), cached=True)
            except (ValueError, KeyError):
                logger.warning("ignoring corrupt cache entry %s", path)
        with self._lock:
            self.misses += 1
        ex = self.inner.complete(bundle)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps({"fingerprint": fp, "response_text": ex.response_text,
                                   "token_usage": ex.token_usage}, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)
        return ex


class RecordingBackend:
    """Passes calls through and keeps every exchange for :func:`record_cassette`."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.params = getattr(inner, "params", {})
        self.exchanges: list[CompletionExchange] = []
        self._lock = threading.Lock()

    def complete(self, bundle: PromptBundle) -> CompletionExchange:
        ex = self.inner.complete(bundle)
        with self._lock:
            self.exchanges.append(ex)
        return ex


def record_cassette(exchanges: Iterable[CompletionExchange], path: str | Path) -> None:
    """Write exchanges as a JSONL cassette: one header line, then one entry per fingerprint.

    Repeated identical exchanges collapse to one entry; a fingerprint recorded
    with two different responses is an error.
    """
    entries: dict[str, CompletionExchange] = {}
    for ex in exchanges:
        prior = entries.get(ex.request_fingerprint)
        if prior is not None and prior.response_text != ex.response_text:
            raise CassetteError(path, None, f"conflicting responses for {ex.request_fingerprint[:16]}")
        entries.setdefault(ex.request_fingerprint, ex)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": CASSETTE_SCHEMA_VERSION, "type": "cassette",
                             "entries": len(entries)}) + "\n")
        for fp in sorted(entries):
            ex = entries[fp]
            fh.write(json.dumps({"fingerprint": fp, "role": ex.role, "response_text": ex.response_text},
                                ensure_ascii=False) + "\n")


def load_cassette(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise CassetteError(path, None, "file not found")
    table: dict[str, str] = {}
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CassetteError(path, 1, "missing header line")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CassetteError(path, lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise CassetteError(path, lineno, "expected a JSON object")
        if lineno == 1:
            if obj.get("type") != "cassette":
                raise CassetteError(path, 1, "missing cassette header")
            if obj.get("schema_version") != CASSETTE_SCHEMA_VERSION:
                raise CassetteError(path, 1, f"unsupported schema_version {obj.get('schema_version')!r}")
            continue
        fp, text = obj.get("fingerprint"), obj.get("response_text")
        if not isinstance(fp, str) or not isinstance(text, str):
            raise CassetteError(path, lineno, "entry needs string 'fingerprint' and 'response_text'")
        if fp in table:
            raise CassetteError(path, lineno, f"duplicate fingerprint {fp[:16]}")
        table[fp] = text
    return table


def make_backend(cfg: BackendConfig) -> Backend:
    cfg.validate()
    if cfg.kind == "replay":
        backend: Backend = ReplayBackend.from_cassette(cfg.cassette, cfg.decoding_params())
    else:
        backend = HttpBackend(cfg)
    if cfg.cache_dir:
        backend = CachingBackend(backend, cfg.cache_dir)
    return backend

