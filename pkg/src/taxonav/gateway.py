"""Chat and embedding gateway: backends, retries, metering, reply parsing.

Every LLM interaction in the package goes through ``LlmGateway`` so that
usage accounting, retry policy, and determinism rules live in one place.
Chat temperature is pinned to 0. Transport failures retry with exponential
backoff; unparseable index-list replies get exactly one stricter re-ask and
then resolve to an empty selection so pipelines degrade instead of dying.

The scripted mock backend is the test and offline workhorse: a table of
(label pattern, prompt regex) -> reply rules, optionally fronted by a
programmable oracle callable that inspects the full request.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GatewayError, IndexParseError, MalformedReplyError, TransportError

logger = logging.getLogger(__name__)

STRICT_REPLY_SUFFIX = "\n\nReply only with comma-separated numbers."

# Model-id patterns whose backends enable extended thinking by default; the
# request must carry an explicit disable flag to keep outputs deterministic.
DEFAULT_THINKING_DISABLE_PATTERNS = ("v4",)


def estimate_tokens(text: str) -> int:
    """Character-count fallback used only when a backend omits usage."""
    return (len(text) + 3) // 4


def parse_index_list(text: str, n_options: int) -> tuple[set[int], int]:
    """Extracts 1-based option indices from a free-form reply.

    Tolerates prose, brackets, and repeats. Returns the in-range index set
    plus a count of out-of-range tokens that were dropped. A reply with no
    digits at all raises IndexParseError so the caller can re-ask.
    """
    if n_options < 1:
        raise ValueError("n_options must be >= 1")
    tokens = re.findall(r"\d+", text)
    if not tokens:
        raise IndexParseError(f"no indices found in reply {text[:120]!r}")
    chosen: set[int] = set()
    dropped = 0
    for token in tokens:
        idx = int(token)
        if 1 <= idx <= n_options:
            chosen.add(idx)
        else:
            dropped += 1
    return chosen, dropped


def extract_json_object(text: str) -> dict:
    """Pulls the first JSON object out of a reply, tolerating code fences."""
    cleaned = re.sub(r"^\s*```(?:json)?|```\s*$", "", text.strip(), flags=re.MULTILINE)
    start = cleaned.find("{")
    end = cleaned.rfind("}")
    if start < 0 or end <= start:
        raise MalformedReplyError(f"no JSON object in reply {text[:120]!r}")
    try:
        obj = json.loads(cleaned[start : end + 1])
    except json.JSONDecodeError as exc:
        raise MalformedReplyError(f"invalid JSON in reply: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise MalformedReplyError("reply JSON is not an object")
    return obj


def l2_normalize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        raise GatewayError("cannot normalize a zero embedding vector")
    return vec / norm


@dataclass
class ChatRequest:
    system_prompt: str
    user_prompt: str
    model: str
    temperature: float = 0.0
    thinking_disabled: bool = False
    max_output_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.temperature != 0.0:
            raise ValueError("chat temperature is pinned to 0")
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("chat prompts must be non-empty")


@dataclass
class ChatResponse:
    text: str
    prompt_tokens: int
    output_tokens: int


@dataclass
class SelectionResult:
    """Outcome of an index-list chat, including the re-ask if one happened."""

    indices: tuple[int, ...]
    dropped: int
    parse_failed: bool
    calls: int
    prompt_tokens: int
    output_tokens: int


class UsageMeter:
    """Thread-safe call/token counters with a per-label breakdown."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._labels: dict[str, dict[str, int]] = {}

    def record(self, label: str, prompt_tokens: int, output_tokens: int) -> None:
        with self._lock:
            bucket = self._labels.setdefault(
                label, {"calls": 0, "prompt_tokens": 0, "output_tokens": 0}
            )
            bucket["calls"] += 1
            bucket["prompt_tokens"] += prompt_tokens
            bucket["output_tokens"] += output_tokens

    def snapshot(self) -> dict:
        with self._lock:
            labels = {name: dict(bucket) for name, bucket in sorted(self._labels.items())}
        return {
            "total_calls": sum(b["calls"] for b in labels.values()),
            "total_prompt_tokens": sum(b["prompt_tokens"] for b in labels.values()),
            "total_output_tokens": sum(b["output_tokens"] for b in labels.values()),
            "labels": labels,
        }


def usage_delta(before: dict, after: dict) -> dict:
    """Per-label difference between two UsageMeter snapshots."""
    labels = {}
    for name, bucket in after["labels"].items():
        prev = before["labels"].get(name, {"calls": 0, "prompt_tokens": 0, "output_tokens": 0})
        diff = {key: bucket[key] - prev[key] for key in bucket}
        if any(diff.values()):
            labels[name] = diff
    return {
        "total_calls": after["total_calls"] - before["total_calls"],
        "total_prompt_tokens": after["total_prompt_tokens"] - before["total_prompt_tokens"],
        "total_output_tokens": after["total_output_tokens"] - before["total_output_tokens"],
        "labels": labels,
    }


@dataclass
class ScriptRule:
    """One mock-backend rule: first rule whose patterns match wins."""

    pattern: str
    reply: str | list[str]
    label: str | None = None
    prompt_tokens: int | None = None
    output_tokens: int | None = None
    _served: int = field(default=0, repr=False)

    def matches(self, label: str, request: ChatRequest) -> bool:
        if self.label is not None and not re.search(self.label, label):
            return False
        return re.search(self.pattern, request.user_prompt, re.DOTALL) is not None

    def next_reply(self) -> str:
        if isinstance(self.reply, str):
            return self.reply
        idx = min(self._served, len(self.reply) - 1)
        self._served += 1
        return self.reply[idx]


@dataclass
class MockCall:
    label: str
    request: ChatRequest
    reply: str


class MockChatBackend:
    """Deterministic scripted chat backend.

    An optional oracle callable sees (label, request) first and may return a
    reply; when it returns None the rule table is consulted in order, then
    the default reply. A request nothing answers raises MalformedReplyError
    so silent test gaps cannot form.
    """

    def __init__(
        self,
        rules: Iterable[ScriptRule] = (),
        oracle: Callable[[str, ChatRequest], str | None] | None = None,
        default_reply: str | None = None,
    ) -> None:
        self.rules = list(rules)
        self.oracle = oracle
        self.default_reply = default_reply
        self.transcript: list[MockCall] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, script: dict | str | Path) -> "MockChatBackend":
        if not isinstance(script, dict):
            path = Path(script)
            try:
                script = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise MalformedReplyError(f"cannot load mock script {path}: {exc}") from exc
        rules = [
            ScriptRule(
                pattern=rule["pattern"],
                reply=rule["reply"],
                label=rule.get("label"),
                prompt_tokens=rule.get("prompt_tokens"),
                output_tokens=rule.get("output_tokens"),
            )
            for rule in script.get("rules", [])
        ]
        return cls(rules=rules, default_reply=script.get("default_reply"))

    def complete(self, request: ChatRequest, label: str) -> ChatResponse:
        with self._lock:
            reply = None
            rule = None
            if self.oracle is not None:
                reply = self.oracle(label, request)
            if reply is None:
                for candidate in self.rules:
                    if candidate.matches(label, request):
                        rule = candidate
                        reply = candidate.next_reply()
                        break
            if reply is None:
                reply = self.default_reply
            if reply is None:
                raise MalformedReplyError(
                    f"mock backend has no scripted reply for label {label!r}"
                )
            self.transcript.append(MockCall(label=label, request=request, reply=reply))
        prompt_tokens = estimate_tokens(request.system_prompt + request.user_prompt)
        output_tokens = estimate_tokens(reply)
        if rule is not None and rule.prompt_tokens is not None:
            prompt_tokens = rule.prompt_tokens
        if rule is not None and rule.output_tokens is not None:
            output_tokens = rule.output_tokens
        return ChatResponse(text=reply, prompt_tokens=prompt_tokens, output_tokens=output_tokens)


class HttpChatBackend:
    """OpenAI-compatible /chat/completions backend. One attempt per call;
    the gateway owns the retry loop."""

    def __init__(self, endpoint: str, api_key: str | None = None, session=None, timeout: float = 120.0):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, request: ChatRequest, label: str) -> ChatResponse:
        import requests

        body: dict = {
            "model": request.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        if request.thinking_disabled:
            body["thinking"] = {"type": "disabled"}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                f"{self.endpoint}/chat/completions", json=body, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"chat endpoint returned {resp.status_code}")
        if resp.status_code != 200:
            raise MalformedReplyError(f"chat endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedReplyError(f"unexpected chat response shape: {exc}") from exc
        usage = payload.get("usage") or {}
        prompt_tokens = usage.get("prompt_tokens")
        output_tokens = usage.get("completion_tokens")
        if prompt_tokens is None:
            prompt_tokens = estimate_tokens(request.system_prompt + request.user_prompt)
        if output_tokens is None:
            output_tokens = estimate_tokens(text)
        return ChatResponse(text=text, prompt_tokens=int(prompt_tokens), output_tokens=int(output_tokens))


class MockEmbeddingBackend:
    """Maps known texts to scripted vectors; unknown texts get a
    deterministic hash-seeded unit vector so tests never need a network."""

    def __init__(self, vectors: dict[str, Sequence[float]] | None = None, dim: int = 8):
        self.vectors = dict(vectors or {})
        self.dim = dim
        self.batches: list[list[str]] = []
        self._lock = threading.Lock()

    def _fallback(self, text: str) -> list[float]:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal(self.dim)
        return list(vec)

    def embed(self, texts: list[str], model: str) -> list[list[float]]:
        with self._lock:
            self.batches.append(list(texts))
        return [list(self.vectors.get(t, self._fallback(t))) for t in texts]


class HttpEmbeddingBackend:
    """OpenAI-compatible /embeddings backend."""

    def __init__(self, endpoint: str, api_key: str | None = None, session=None, timeout: float = 120.0):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed(self, texts: list[str], model: str) -> list[list[float]]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                f"{self.endpoint}/embeddings",
                json={"model": model, "input": texts},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"embedding endpoint returned {resp.status_code}")
        if resp.status_code != 200:
            raise MalformedReplyError(
                f"embedding endpoint returned {resp.status_code}: {resp.text[:200]}"
            )
        try:
            data = resp.json()["data"]
            return [item["embedding"] for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedReplyError(f"unexpected embedding response shape: {exc}") from exc


@dataclass
class EmbeddingVector:
    values: np.ndarray
    model: str


class LlmGateway:
    """Front door for all chat and embedding traffic."""

    def __init__(
        self,
        chat_backend=None,
        embedding_backend=None,
        *,
        chat_model: str = "mock-chat",
        embedding_model: str = "mock-embed",
        meter: UsageMeter | None = None,
        retries: int = 3,
        retry_backoff: float = 1.0,
        thinking_disable_patterns: Sequence[str] = DEFAULT_THINKING_DISABLE_PATTERNS,
        cache_dir: str | Path | None = None,
        workers: int = 20,
    ) -> None:
        self.chat_backend = chat_backend
        self.embedding_backend = embedding_backend
        self.chat_model = chat_model
        self.embedding_model = embedding_model
        self.meter = meter or UsageMeter()
        self.retries = max(1, retries)
        self.retry_backoff = retry_backoff
        self.thinking_disable_patterns = tuple(thinking_disable_patterns)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.workers = max(1, workers)
        self._memory_cache: dict[str, np.ndarray] = {}
        self._cache_lock = threading.Lock()

    # -- chat ------------------------------------------------------------

    def _thinking_disabled(self, model: str) -> bool:
        return any(re.search(p, model) for p in self.thinking_disable_patterns)

    def chat(self, system_prompt: str, user_prompt: str, *, label: str, model: str | None = None) -> ChatResponse:
        if self.chat_backend is None:
            raise GatewayError("no chat backend configured")
        model = model or self.chat_model
        request = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            model=model,
            thinking_disabled=self._thinking_disabled(model),
        )
        last_error: TransportError | None = None
        for attempt in range(self.retries):
            try:
                response = self.chat_backend.complete(request, label)
                break
            except TransportError as exc:
                last_error = exc
                if attempt + 1 < self.retries:
                    delay = self.retry_backoff * (2**attempt)
                    logger.warning(
                        "transport error on %s (attempt %d/%d): %s",
                        label, attempt + 1, self.retries, exc,
                    )
                    if delay > 0:
                        time.sleep(delay)
        else:
            raise TransportError(f"chat failed after {self.retries} attempts: {last_error}")
        self.meter.record(label, response.prompt_tokens, response.output_tokens)
        return response

    def select_indices(
        self, system_prompt: str, user_prompt: str, *, label: str, n_options: int
    ) -> SelectionResult:
        """Index-list chat with the one-re-ask-then-empty degradation policy."""
        response = self.chat(system_prompt, user_prompt, label=label)
        calls, ptok, otok = 1, response.prompt_tokens, response.output_tokens
        try:
            indices, dropped = parse_index_list(response.text, n_options)
            parse_failed = False
        except IndexParseError:
            retry = self.chat(system_prompt, user_prompt + STRICT_REPLY_SUFFIX, label=label)
            calls += 1
            ptok += retry.prompt_tokens
            otok += retry.output_tokens
            try:
                indices, dropped = parse_index_list(retry.text, n_options)
                parse_failed = False
            except IndexParseError:
                logger.warning("index reply unparseable after re-ask (%s); selecting nothing", label)
                indices, dropped, parse_failed = set(), 0, True
        return SelectionResult(
            indices=tuple(sorted(indices)),
            dropped=dropped,
            parse_failed=parse_failed,
            calls=calls,
            prompt_tokens=ptok,
            output_tokens=otok,
        )

    def chat_json(self, system_prompt: str, user_prompt: str, *, label: str) -> dict | None:
        """JSON-object chat with one re-ask; None when both replies are junk."""
        response = self.chat(system_prompt, user_prompt, label=label)
        try:
            return extract_json_object(response.text)
        except MalformedReplyError as exc:
            retry = self.chat(
                system_prompt,
                user_prompt + "\n\nReply with a single valid JSON object and nothing else.",
                label=label,
            )
            try:
                return extract_json_object(retry.text)
            except MalformedReplyError:
                logger.warning("JSON reply unparseable after re-ask (%s): %s", label, exc)
                return None

    # -- embeddings ------------------------------------------------------

    def _cache_key(self, model: str, text: str) -> str:
        return hashlib.sha256(f"{model}\x00{text}".encode("utf-8")).hexdigest()

    def _cache_load(self, key: str) -> np.ndarray | None:
        with self._cache_lock:
            if key in self._memory_cache:
                return self._memory_cache[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.npy"
            if path.exists():
                vec = np.load(path)
                with self._cache_lock:
                    self._memory_cache[key] = vec
                return vec
        return None

    def _cache_store(self, key: str, vec: np.ndarray) -> None:
        with self._cache_lock:
            self._memory_cache[key] = vec
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            np.save(self.cache_dir / f"{key}.npy", vec)

    def embed(self, texts: Sequence[str], *, model: str | None = None) -> list[EmbeddingVector]:
        """Embeds texts with content-hash caching; vectors come back unit-norm."""
        if self.embedding_backend is None:
            raise GatewayError("no embedding backend configured")
        model = model or self.embedding_model
        texts = list(texts)
        resolved: dict[str, np.ndarray] = {}
        misses: list[str] = []
        for text in texts:
            if text in resolved:
                continue
            cached = self._cache_load(self._cache_key(model, text))
            if cached is not None:
                resolved[text] = cached
            elif text not in misses:
                misses.append(text)
        if misses:
            raw = self.embedding_backend.embed(misses, model)
            if len(raw) != len(misses):
                raise MalformedReplyError(
                    f"embedding backend returned {len(raw)} vectors for {len(misses)} texts"
                )
            dims = {len(vec) for vec in raw}
            if len(dims) > 1:
                raise MalformedReplyError(f"inconsistent embedding dimensions {sorted(dims)}")
            for text, values in zip(misses, raw):
                vec = l2_normalize(values)
                self._cache_store(self._cache_key(model, text), vec)
                resolved[text] = vec
        return [EmbeddingVector(values=resolved[t], model=model) for t in texts]

    # -- concurrency -----------------------------------------------------

    def run_parallel(self, fn: Callable, items: Sequence) -> list:
        """Maps fn over items on a bounded pool; results in input order."""
        items = list(items)
        if self.workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))
