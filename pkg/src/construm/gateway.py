"""Uniform access to a chat model and an embedding model.

One ``ModelGateway`` fronts whichever backends are configured: a live
chat-completions HTTP endpoint for real runs, or a scripted backend that
maps prompts to canned replies for deterministic tests and offline demos.
The gateway owns the cross-cutting concerns so callers never do: per-call
timeouts with bounded retries, token/call accounting, an append-only disk
cache of chat replies (content-addressed by backend, role and prompt), and
an optional log of every prompt sent (used by the masking scanner).

The deterministic embedder maps each whitespace token to a seeded random
direction and sums them, so token overlap between two texts translates
into cosine similarity without any model in the loop.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ROLE_TAGS = ("tree_summary", "relation", "differentiation", "decision")


class GatewayError(Exception):
    """Base for model-access failures."""


class GatewayTimeout(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class ScriptError(GatewayError):
    """Scripted backend has no rule matching the prompt (test-mode error)."""


@dataclass
class ChatCall:
    role_tag: str
    prompt: str
    timeout: float = 90.0
    max_retries: int = 1

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass
class ChatReply:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float
    cache_hit: bool = False


@dataclass
class EmbeddingVector:
    """Unit-normalized embedding plus the pre-normalization magnitude."""

    values: np.ndarray
    norm: float

    @classmethod
    def from_raw(cls, raw) -> "EmbeddingVector":
        v = np.asarray(raw, dtype=np.float64)
        n = float(np.linalg.norm(v))
        if n == 0.0:
            raise GatewayError("cannot normalize a zero embedding vector")
        return cls(values=v / n, norm=n)

    def tolist(self) -> list[float]:
        return self.values.tolist()

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def estimate_tokens(text: str) -> int:
    # ~4 chars per token; only used by backends that report no usage
    return (len(text) + 3) // 4


# -- accounting --------------------------------------------------------------


@dataclass(frozen=True)
class AccountingSnapshot:
    llm_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cache_hits: int = 0
    embed_calls: int = 0
    embed_texts: int = 0
    latency: float = 0.0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __sub__(self, other: "AccountingSnapshot") -> "AccountingSnapshot":
        return AccountingSnapshot(
            llm_calls=self.llm_calls - other.llm_calls,
            prompt_tokens=self.prompt_tokens - other.prompt_tokens,
            completion_tokens=self.completion_tokens - other.completion_tokens,
            cache_hits=self.cache_hits - other.cache_hits,
            embed_calls=self.embed_calls - other.embed_calls,
            embed_texts=self.embed_texts - other.embed_texts,
            latency=self.latency - other.latency,
        )


class TokenAccounting:
    """Thread-safe counters; totals equal the sum over non-cache-hit replies."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snap = AccountingSnapshot()

    def record_chat(self, reply: ChatReply):
        with self._lock:
            s = self._snap
            self._snap = AccountingSnapshot(
                llm_calls=s.llm_calls + 1,
                prompt_tokens=s.prompt_tokens + reply.prompt_tokens,
                completion_tokens=s.completion_tokens + reply.completion_tokens,
                cache_hits=s.cache_hits,
                embed_calls=s.embed_calls,
                embed_texts=s.embed_texts,
                latency=s.latency + reply.latency,
            )

    def record_cache_hit(self):
        with self._lock:
            s = self._snap
            self._snap = AccountingSnapshot(
                llm_calls=s.llm_calls, prompt_tokens=s.prompt_tokens,
                completion_tokens=s.completion_tokens, cache_hits=s.cache_hits + 1,
                embed_calls=s.embed_calls, embed_texts=s.embed_texts, latency=s.latency,
            )

    def record_embed(self, n_texts: int):
        with self._lock:
            s = self._snap
            self._snap = AccountingSnapshot(
                llm_calls=s.llm_calls, prompt_tokens=s.prompt_tokens,
                completion_tokens=s.completion_tokens, cache_hits=s.cache_hits,
                embed_calls=s.embed_calls + 1, embed_texts=s.embed_texts + n_texts,
                latency=s.latency,
            )

    def snapshot(self) -> AccountingSnapshot:
        with self._lock:
            return self._snap


# -- disk cache --------------------------------------------------------------


class DiskCache:
    """Append-only directory of content-addressed JSON reply records.

    Writes go through a temp file followed by an atomic rename, so
    concurrent writers can never leave a torn record behind.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict | None:
        p = self._path(key)
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            logger.warning("discarding corrupt cache record %s", p)
            return None

    def put(self, key: str, record: dict):
        p = self._path(key)
        tmp = p.with_name(p.name + f".tmp{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        os.replace(tmp, p)


def cache_key(backend_id: str, role_tag: str, prompt: str) -> str:
    # timeout/retry settings are deliberately not part of the key
    h = hashlib.sha256()
    h.update(backend_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(role_tag.encode("utf-8"))
    h.update(b"\x00")
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


# -- chat backends -----------------------------------------------------------


@dataclass
class BackendReply:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float | None = None  # None: gateway measures wall time


@dataclass(frozen=True)
class ScriptRule:
    contains: str
    reply: str


class ScriptedChatBackend:
    """Pure prompt->reply backend driven by substring rules.

    The reply depends only on the prompt text and the loaded script: first
    matching rule wins, then the optional ``responder`` callable, then the
    optional ``default``. A missing match raises :class:`ScriptError`. An
    injected ``delay`` (seconds, slept for real) exercises timeout paths.
    Every attempt is appended to ``call_log`` as (role_tag, prompt).
    """

    def __init__(self, rules: Sequence[ScriptRule] = (), default: str | None = None,
                 responder: Callable[[str], str | None] | None = None,
                 delay: float = 0.0, backend_id: str = "scripted"):
        self.rules = tuple(rules)
        self.default = default
        self.responder = responder
        self.delay = delay
        self.backend_id = backend_id
        self.call_log: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ScriptedChatBackend":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [ScriptRule(r["contains"], r["reply"]) for r in doc.get("rules", [])]
        return cls(
            rules=rules,
            default=doc.get("default"),
            delay=float(doc.get("delay", 0.0)),
            backend_id=f"scripted:{Path(path).name}",
        )

    def chat(self, call: ChatCall) -> BackendReply:
        with self._lock:
            self.call_log.append((call.role_tag, call.prompt))
        if self.delay:
            time.sleep(self.delay)
        text = None
        for rule in self.rules:
            if rule.contains in call.prompt:
                text = rule.reply
                break
        if text is None and self.responder is not None:
            text = self.responder(call.prompt)
        if text is None:
            text = self.default
        if text is None:
            raise ScriptError(
                f"no scripted rule matches prompt (role={call.role_tag}): "
                f"{call.prompt[:120]!r}"
            )
        return BackendReply(
            text=text,
            prompt_tokens=estimate_tokens(call.prompt),
            completion_tokens=estimate_tokens(text),
            latency=self.delay,
        )


class HttpChatBackend:
    """Chat-completions style HTTP backend.

    POSTs ``{model, messages: [{role, content}], **decoding}`` to
    ``<base_url>/chat/completions`` with a bearer key. Decoding parameters
    are passed through untouched from configuration.
    """

    def __init__(self, base_url: str, model: str = "gpt-5", api_key: str | None = None,
                 decoding: dict | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.decoding = dict(decoding or {})
        self.backend_id = f"http:{self.base_url}:{model}"

    def chat(self, call: ChatCall) -> BackendReply:
        import requests

        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": call.prompt}],
            **self.decoding,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=body, headers=headers, timeout=call.timeout,
            )
            resp.raise_for_status()
            doc = resp.json()
        except requests.Timeout as exc:
            raise GatewayTimeout(f"chat call timed out after {call.timeout}s") from exc
        except requests.RequestException as exc:
            raise TransportError(f"chat transport error: {exc}") from exc
        try:
            text = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {doc!r:.200}") from exc
        usage = doc.get("usage", {})
        return BackendReply(
            text=text or "",
            prompt_tokens=int(usage.get("prompt_tokens", estimate_tokens(call.prompt))),
            completion_tokens=int(usage.get("completion_tokens", estimate_tokens(text or ""))),
        )


# -- embedding backends ------------------------------------------------------


class HashEmbeddingBackend:
    """Deterministic 64-d test embedder: no model, no network.

    Each whitespace token hashes (with the seed) to a fixed pseudo-random
    direction; a text embeds as the sum of its token directions. Texts
    sharing more tokens therefore get a higher cosine, which is enough to
    exercise similarity thresholds end to end.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.backend_id = f"hash{dim}:{seed}"
        self._token_cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token_vector(self, token: str) -> np.ndarray:
        with self._lock:
            v = self._token_cache.get(token)
        if v is not None:
            return v
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, salt=str(self.seed).encode()[:16]
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.standard_normal(self.dim)
        with self._lock:
            self._token_cache[token] = v
        return v

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            tokens = text.split() or [""]
            acc = np.zeros(self.dim, dtype=np.float64)
            for tok in tokens:
                acc += self._token_vector(tok)
            out.append(acc)
        return out


class HttpEmbeddingBackend:
    """Embeddings endpoint backend (``{model, input: [...]}`` POST)."""

    def __init__(self, base_url: str, model: str = "text-embedding-3-small",
                 api_key: str | None = None, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.backend_id = f"http-embed:{self.base_url}:{model}"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers=headers, timeout=self.timeout,
            )
            resp.raise_for_status()
            doc = resp.json()
        except requests.RequestException as exc:
            raise TransportError(f"embedding transport error: {exc}") from exc
        try:
            rows = sorted(doc["data"], key=lambda d: d["index"])
            return [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError(f"malformed embedding response: {doc!r:.200}") from exc


# -- gateway -----------------------------------------------------------------


class ModelGateway:
    """Shared front door for all chat and embedding traffic.

    Concurrency-safe: the cache writes atomically, counters take a lock,
    and scripted backends are pure functions of the prompt.
    """

    def __init__(self, chat_backend=None, embed_backend=None, cache: DiskCache | None = None):
        self.chat_backend = chat_backend
        self.embed_backend = embed_backend
        self.cache = cache
        self.accounting = TokenAccounting()
        self.prompt_log: list[tuple[str, str]] | None = None

    def enable_prompt_log(self):
        self.prompt_log = []

    # -- chat ---------------------------------------------------------------

    def complete(self, call: ChatCall) -> ChatReply:
        if self.chat_backend is None:
            raise GatewayError("no chat backend configured")
        if self.prompt_log is not None:
            self.prompt_log.append((call.role_tag, call.prompt))
        key = cache_key(self.chat_backend.backend_id, call.role_tag, call.prompt)
        if self.cache is not None:
            rec = self.cache.get(key)
            if rec is not None:
                self.accounting.record_cache_hit()
                return ChatReply(
                    text=rec["text"],
                    prompt_tokens=int(rec["prompt_tokens"]),
                    completion_tokens=int(rec["completion_tokens"]),
                    latency=0.0,
                    cache_hit=True,
                )
        last_exc: GatewayError | None = None
        attempts = 1 + max(0, call.max_retries)
        for attempt in range(attempts):
            t0 = time.monotonic()
            try:
                raw = self.chat_backend.chat(call)
            except (GatewayTimeout, TransportError) as exc:
                last_exc = exc
                logger.warning("chat attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                continue
            elapsed = time.monotonic() - t0
            latency = raw.latency if raw.latency is not None else elapsed
            if latency > call.timeout:
                last_exc = GatewayTimeout(
                    f"chat call exceeded timeout ({latency:.3f}s > {call.timeout}s)"
                )
                logger.warning("chat attempt %d/%d timed out", attempt + 1, attempts)
                continue
            if not raw.text:
                last_exc = TransportError("backend returned an empty reply")
                continue
            reply = ChatReply(
                text=raw.text,
                prompt_tokens=raw.prompt_tokens,
                completion_tokens=raw.completion_tokens,
                latency=latency,
            )
            self.accounting.record_chat(reply)
            if self.cache is not None:
                self.cache.put(key, {
                    "role_tag": call.role_tag,
                    "text": reply.text,
                    "prompt_tokens": reply.prompt_tokens,
                    "completion_tokens": reply.completion_tokens,
                })
            return reply
        assert last_exc is not None
        raise last_exc

    # -- embeddings -----------------------------------------------------------

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if self.embed_backend is None:
            raise GatewayError("no embedding backend configured")
        if not texts:
            raise GatewayError("empty batch")
        raw = self.embed_backend.embed(list(texts))
        if len(raw) != len(texts):
            raise TransportError(
                f"embedding backend returned {len(raw)} vectors for {len(texts)} texts"
            )
        dims = {int(np.asarray(v).shape[0]) for v in raw}
        if len(dims) != 1:
            raise GatewayError(f"dimension mismatch across batch: {sorted(dims)}")
        self.accounting.record_embed(len(texts))
        return [EmbeddingVector.from_raw(v) for v in raw]
