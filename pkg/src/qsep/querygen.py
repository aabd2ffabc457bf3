"""Text queries for the separator.

A vision-language provider describes the whole frame, a region-description
provider describes the masked object, and a chat LLM is asked for the sounds
that remain once that object is gone.  :func:`fallback_subtract` is an
offline token-set stand-in, and :func:`text_to_embedding` turns a query into
the vector the separator is conditioned on.

Providers are reached over a chat-completion JSON API::

    POST <endpoint_url>
    {"model": ..., "temperature": 0,
     "messages": [{"role": "user", "content": <text or content parts>}]}

and the reply text is read from ``choices[0].message.content``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import time
import warnings
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from string import Template

import httpx
import numpy as np

from .separator import QueryEmbedding

log = logging.getLogger(__name__)

MAX_QUERY_CHARS = 256
FALLBACK_QUERY = "background ambience"
QUERY_ORIGINS = ("llm", "fallback", "manual")


class ProviderError(RuntimeError):
    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class ProviderTimeoutError(ProviderError):
    """No usable response (timeout or connection failure) after every attempt."""


class ProviderHTTPError(ProviderError):
    def __init__(self, message: str, status_code: int, body: str = "", attempts: int = 0):
        super().__init__(message, attempts)
        self.status_code = status_code
        self.body = body


class ProviderResponseError(ProviderError):
    """The provider answered, but not with usable text."""


class MissingAPIKeyError(ProviderError):
    pass


@dataclass(frozen=True)
class SceneDescription:
    text: str
    provider_id: str
    frame_ref: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty description")


@dataclass(frozen=True)
class RegionalDescription:
    text: str
    provider_id: str
    frame_ref: str
    mask_ref: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty description")


@dataclass(frozen=True)
class TextQuery:
    text: str
    origin: str = "manual"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty query")
        if len(self.text) > MAX_QUERY_CHARS:
            raise ValueError(f"query longer than {MAX_QUERY_CHARS} characters")
        if self.origin not in QUERY_ORIGINS:
            raise ValueError(f"origin must be one of {QUERY_ORIGINS}, got {self.origin!r}")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str
    model_name: str
    api_key_env_var: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 2
    prompt_template_id: str | None = None
    provider_id: str | None = None

    def __post_init__(self):
        if not self.timeout_s > 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def name(self) -> str:
        return self.provider_id or self.model_name

    @classmethod
    def from_file(cls, path: str | Path) -> "ProviderConfig":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# prompt templates


def load_template(template_id: str, search_dirs: list[str | Path] | None = None) -> Template:
    """Load ``<template_id>.txt`` from ``search_dirs`` first, then the bundled set."""
    for d in search_dirs or []:
        p = Path(d) / f"{template_id}.txt"
        if p.is_file():
            return Template(p.read_text(encoding="utf-8"))
    try:
        text = resources.files("qsep").joinpath("data", "prompts", f"{template_id}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValueError(f"unknown prompt template {template_id!r}") from None
    return Template(text)


def render_prompt(template_id: str, search_dirs=None, **fields: str) -> str:
    return load_template(template_id, search_dirs).substitute(**fields)


# ---------------------------------------------------------------------------
# HTTP client


def _image_data_url(path: Path) -> str:
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64," + base64.b64encode(path.read_bytes()).decode("ascii")


def _redact(payload: dict) -> dict:
    """Copy of a request payload with inline image data replaced by a digest."""

    def scrub(obj):
        if isinstance(obj, dict):
            return {k: scrub(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [scrub(v) for v in obj]
        if isinstance(obj, str) and obj.startswith("data:") and ";base64," in obj:
            raw = obj.split(",", 1)[1]
            return f"<inline {len(raw)} b64 chars sha256={hashlib.sha256(raw.encode()).hexdigest()[:16]}>"
        return obj

    return scrub(payload)


def _extract_text(body) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProviderResponseError("malformed response: no choices[0].message.content") from None
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise ProviderResponseError(f"malformed response: content is {type(content).__name__}")
    return content.strip()


class ChatClient:
    """Chat-completion client with retry accounting and an optional JSONL audit log.

    Timeouts, connection failures, 429 and 5xx responses are retried up to
    ``max_retries`` times after the first attempt; other 4xx statuses and
    malformed bodies fail immediately.
    """

    def __init__(
        self,
        config: ProviderConfig,
        transport: httpx.BaseTransport | None = None,
        audit_log: str | Path | None = None,
        backoff_s: float = 0.5,
        sleep=time.sleep,
    ):
        self.config = config
        self.transport = transport
        self.audit_log = Path(audit_log) if audit_log else None
        self.backoff_s = backoff_s
        self.sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        var = self.config.api_key_env_var
        if var:
            key = os.environ.get(var)
            if not key:
                raise MissingAPIKeyError(f"environment variable {var} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _audit(self, record: dict) -> None:
        if self.audit_log is None:
            return
        self.audit_log.parent.mkdir(parents=True, exist_ok=True)
        with open(self.audit_log, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")

    def complete(self, content) -> str:
        cfg = self.config
        headers = self._headers()
        payload = {
            "model": cfg.model_name,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }
        attempts = cfg.max_retries + 1
        last_error: ProviderError | None = None
        with httpx.Client(timeout=cfg.timeout_s, transport=self.transport) as client:
            for attempt in range(1, attempts + 1):
                record = {
                    "time": datetime.now(timezone.utc).isoformat(),
                    "provider_id": cfg.name,
                    "endpoint": cfg.endpoint_url,
                    "attempt": attempt,
                    "request": _redact(payload),
                }
                try:
                    resp = client.post(cfg.endpoint_url, json=payload, headers=headers)
                except httpx.TimeoutException as exc:
                    last_error = ProviderTimeoutError(f"{cfg.name}: timed out ({exc})", attempt)
                except httpx.TransportError as exc:
                    last_error = ProviderTimeoutError(f"{cfg.name}: endpoint unreachable ({exc})", attempt)
                else:
                    record["status"] = resp.status_code
                    record["response"] = resp.text
                    if resp.status_code == 429 or resp.status_code >= 500:
                        last_error = ProviderHTTPError(
                            f"{cfg.name}: HTTP {resp.status_code}", resp.status_code, resp.text, attempt
                        )
                    elif resp.status_code >= 400:
                        self._audit(record)
                        raise ProviderHTTPError(
                            f"{cfg.name}: HTTP {resp.status_code}: {resp.text[:200]}",
                            resp.status_code,
                            resp.text,
                            attempt,
                        )
                    else:
                        self._audit(record)
                        try:
                            body = resp.json()
                        except ValueError:
                            raise ProviderResponseError(f"{cfg.name}: response is not JSON", attempt) from None
                        try:
                            return _extract_text(body)
                        except ProviderResponseError as exc:
                            exc.attempts = attempt
                            raise
                record["error"] = str(last_error)
                self._audit(record)
                log.warning("%s (attempt %d/%d)", last_error, attempt, attempts)
                if attempt < attempts:
                    self.sleep(self.backoff_s * 2 ** (attempt - 1))
        last_error.attempts = attempts
        raise last_error


def _client_for(provider: ProviderConfig, client: ChatClient | None) -> ChatClient:
    return client if client is not None else ChatClient(provider)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def global_describe(frame_ref, provider: ProviderConfig, client: ChatClient | None = None) -> SceneDescription:
    frame = _require_file(frame_ref, "frame")
    prompt = render_prompt(provider.prompt_template_id or "global_v1")
    content = [
        {"type": "text", "text": prompt},
        {"type": "image_url", "image_url": {"url": _image_data_url(frame)}},
    ]
    text = _client_for(provider, client).complete(content)
    if not text:
        raise ProviderResponseError("empty description")
    return SceneDescription(text, provider.name, str(frame_ref))


def regional_describe(
    frame_ref, mask_ref, provider: ProviderConfig, client: ChatClient | None = None
) -> RegionalDescription:
    frame = _require_file(frame_ref, "frame")
    mask = _require_file(mask_ref, "mask")
    prompt = render_prompt(provider.prompt_template_id or "regional_v1")
    content = [
        {"type": "text", "text": prompt},
        {"type": "image_url", "image_url": {"url": _image_data_url(frame)}},
        {"type": "image_url", "image_url": {"url": _image_data_url(mask)}},
    ]
    text = _client_for(provider, client).complete(content)
    if not text:
        raise ProviderResponseError("empty description")
    return RegionalDescription(text, provider.name, str(frame_ref), str(mask_ref))


def condense(text: str, limit: int = MAX_QUERY_CHARS) -> str:
    """Trim to ``limit`` characters, preferring a sentence end, then a word break."""
    text = " ".join(text.split())
    if len(text) <= limit:
        return text
    warnings.warn(f"query of {len(text)} characters truncated to {limit}", stacklevel=2)
    head = text[:limit]
    ends = [m.end() for m in re.finditer(r"[.!?](?=\s|$)", head)]
    if ends:
        return head[: ends[-1]].strip()
    cut = head.rfind(" ")
    return head[:cut].strip() if cut > 0 else head


def subtraction_prompt(d_v: SceneDescription, d_a: RegionalDescription, template_id: str = "subtract_v1", search_dirs=None) -> str:
    return render_prompt(template_id, search_dirs, scene=d_v.text, region=d_a.text)


def textual_subtract(
    d_v: SceneDescription, d_a: RegionalDescription, llm: ProviderConfig, client: ChatClient | None = None
) -> TextQuery:
    """Ask the LLM for the sounds that remain once the described region is removed."""
    prompt = subtraction_prompt(d_v, d_a, llm.prompt_template_id or "subtract_v1")
    text = _client_for(llm, client).complete(prompt)
    if not text:
        raise ProviderResponseError("empty query")
    return TextQuery(condense(text), "llm")


# ---------------------------------------------------------------------------
# offline path


def _load_stopwords() -> frozenset[str]:
    text = resources.files("qsep").joinpath("data", "stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


STOPWORDS = _load_stopwords()


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs."""
    return re.findall(r"[^\W_]+", text.lower())


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]


def fallback_subtract(d_v: SceneDescription | str, d_a: RegionalDescription | str) -> TextQuery:
    """Content tokens of the scene description that never occur in the region description."""
    scene = getattr(d_v, "text", d_v)
    region = getattr(d_a, "text", d_a)
    removed = set(tokenize(region))
    kept = [t for t in content_tokens(scene) if t not in removed]
    return TextQuery(condense(" ".join(kept)) if kept else FALLBACK_QUERY, "fallback")


def text_to_embedding(q: TextQuery | str, dim: int = 16, seed: int = 0) -> QueryEmbedding:
    """Signed feature hashing of content tokens, L2-normalised.

    Falls back to all tokens when every token is a stopword; text with no
    tokens at all maps to the zero vector.  Identical text always gives an
    identical vector for a given ``seed``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    text = getattr(q, "text", q)
    tokens = content_tokens(text) or tokenize(text)
    hashes = [
        int.from_bytes(hashlib.blake2b(f"{seed}\x00{tok}".encode(), digest_size=8).digest(), "big")
        for tok in tokens
    ]
    vec = np.zeros(dim)
    for h in hashes:
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    if hashes and not vec.any():
        # signs cancelled exactly; unsigned counts keep nonempty text nonzero
        for h in hashes:
            vec[h % dim] += 1.0
    norm = np.linalg.norm(vec)
    return QueryEmbedding(vec / norm if norm > 0 else vec)
