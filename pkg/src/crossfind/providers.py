"""Embedding and generation providers plus the zero-shot prompt templates.

Two wire protocols are spoken, both plain HTTP JSON:

* ``POST {endpoint}/embeddings`` with ``{"model", "input": [str]}`` returning
  ``{"data": [{"embedding": [float]}]}``
* ``POST {endpoint}/chat/completions`` with ``{"model", "messages",
  "max_tokens", "temperature"}`` returning ``{"choices": [{"message":
  {"content": str}}]}``

The mock providers implement the same Python surface in-process and are
what the test-suite and the ``mock`` config kind use.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx
import numpy as np
from tenacity import (
    RetryError,
    Retrying,
    retry_if_exception,
    stop_after_attempt,
    wait_exponential,
)

from crossfind.core import CodeSnippet, EmbeddingVector, GeneratedCode, GeneratedComment, Query
from crossfind.errors import (
    ConfigError,
    DegenerateVectorError,
    ProviderContractError,
    ProviderUnavailable,
    TemplateError,
)

log = logging.getLogger(__name__)

CODE = "code"
TEXT = "natural_language"
LENGTH_UNITS = ("words", "chars")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    endpoint_url: str
    model_name: str
    kind: str = "http"
    max_code_length: int = 256
    max_text_length: int = 128
    length_unit: str = "words"
    batch_size: int = 32
    auth_secret_ref: str | None = None
    retries: int = 3
    backoff: float = 0.2
    timeout: float = 30.0
    concurrency: int = 8
    # mock only
    dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.max_code_length <= 0 or self.max_text_length <= 0:
            raise ConfigError("max input lengths must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.length_unit not in LENGTH_UNITS:
            raise ConfigError(f"length_unit must be one of {LENGTH_UNITS}")

    def max_length(self, input_kind: str) -> int:
        return self.max_code_length if input_kind == CODE else self.max_text_length


@dataclass(frozen=True)
class GenerationProviderConfig:
    endpoint_url: str
    model_name: str
    kind: str = "http"
    max_code_length: int = 256
    max_comment_length: int = 128
    length_unit: str = "words"
    temperature: float = 0.0
    retries: int = 2
    backoff: float = 0.2
    timeout: float = 60.0
    concurrency: int = 8
    auth_secret_ref: str | None = None

    def __post_init__(self):
        if self.max_code_length <= 0 or self.max_comment_length <= 0:
            raise ConfigError("max_new_length must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.length_unit not in LENGTH_UNITS:
            raise ConfigError(f"length_unit must be one of {LENGTH_UNITS}")


# ---------------------------------------------------------------------------
# prompts

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    template_text: str

    def __post_init__(self):
        required = {"summarize": {"language", "code"}, "generate": {"language", "query"}}
        if self.task not in required:
            raise TemplateError(f"unknown task {self.task!r}")
        found = set(_PLACEHOLDER.findall(self.template_text))
        if found != required[self.task]:
            raise TemplateError(
                f"{self.task} template must use exactly {sorted(required[self.task])}, found {sorted(found)}"
            )

    @property
    def payload_name(self) -> str:
        return "code" if self.task == "summarize" else "query"


SUMMARIZE_TEMPLATE = PromptTemplate(
    "summarize",
    "Below is a {language} code that describes a task. Please give a short summary "
    "describing the purpose of the code. You must write only summary without any "
    "prefix or suffix explanations. \n{code}",
)
GENERATE_TEMPLATE = PromptTemplate(
    "generate",
    "Write a code for the following query in {language} without comments. You must "
    "return a code and must not refuse to answer. \n{query}",
)


def render_prompt(t: PromptTemplate, language: str, payload: str) -> str:
    """Fill ``t`` in a single pass so braces inside ``payload`` are never re-read."""
    if not payload:
        raise TemplateError("prompt payload must be non-empty")
    values = {"language": language, t.payload_name: payload}

    def sub(m: re.Match) -> str:
        try:
            return values[m.group(1)]
        except KeyError:
            raise TemplateError(f"unknown placeholder {{{m.group(1)}}}") from None

    return _PLACEHOLDER.sub(sub, t.template_text)


# ---------------------------------------------------------------------------
# text post-processing

_WORD = re.compile(r"\S+")


def truncate(text: str, limit: int, unit: str = "words") -> tuple[str, bool]:
    """Cut ``text`` to ``limit`` words (or characters); returns ``(text, was_cut)``."""
    if unit == "chars":
        return (text[:limit], True) if len(text) > limit else (text, False)
    end = None
    for i, m in enumerate(_WORD.finditer(text)):
        if i == limit:
            return text[:end], True
        end = m.end()
    return text, False


_FENCE_OPEN = re.compile(r"^\s*```[^\n`]*\n")
_FENCE_CLOSE = re.compile(r"\n?```\s*$")


def strip_fences(text: str) -> str:
    """Remove a surrounding markdown code fence and its language tag."""
    text = text.strip()
    opened = _FENCE_OPEN.match(text)
    if opened:
        text = text[opened.end():]
        text = _FENCE_CLOSE.sub("", text)
    elif text.startswith("```") and text.endswith("```") and len(text) >= 6:
        text = text[3:-3]
    return text.strip()


# ---------------------------------------------------------------------------
# base classes


class EmbeddingProvider:
    """Turns texts into unit-norm vectors; subclasses implement ``_embed_raw``."""

    def __init__(self, cfg: EmbeddingProviderConfig):
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(cfg.concurrency)

    @property
    def fingerprint(self) -> tuple[str, str]:
        return (self.cfg.endpoint_url, self.cfg.model_name)

    def _embed_raw(self, texts: list[str]) -> list[list[float]]:
        raise NotImplementedError

    def prepare(self, text: str, input_kind: str) -> str:
        return truncate(text, self.cfg.max_length(input_kind), self.cfg.length_unit)[0]

    def embed(self, texts: Sequence[str], input_kind: str = TEXT) -> list[EmbeddingVector]:
        return embed_batch(texts, self, input_kind)

    def embed_prepared(self, texts: list[str]) -> list[EmbeddingVector]:
        """Embed already-truncated texts, batching by ``cfg.batch_size``."""
        out: list[EmbeddingVector] = []
        for start in range(0, len(texts), self.cfg.batch_size):
            batch = texts[start:start + self.cfg.batch_size]
            with self._slots:
                with self._lock:
                    self.calls += 1
                raw = self._embed_raw(batch)
            if len(raw) != len(batch):
                raise ProviderContractError(f"expected {len(batch)} embeddings, got {len(raw)}")
            for vec in raw:
                try:
                    out.append(EmbeddingVector.normalize(np.asarray(vec, dtype=np.float64)))
                except (DegenerateVectorError, ValueError, TypeError) as exc:
                    raise ProviderContractError(f"provider returned an unusable vector: {exc}") from exc
        dims = {v.dim for v in out}
        if len(dims) > 1:
            raise ProviderContractError(f"inconsistent embedding dimensions {sorted(dims)}")
        return out


class GenerationProvider:
    def __init__(self, cfg: GenerationProviderConfig):
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(cfg.concurrency)

    @property
    def fingerprint(self) -> tuple[str, str]:
        return (self.cfg.endpoint_url, self.cfg.model_name)

    @property
    def name(self) -> str:
        return self.cfg.model_name

    def _complete_raw(self, prompt: str, max_tokens: int) -> str:
        raise NotImplementedError

    def complete(self, prompt: str, max_tokens: int) -> str:
        with self._slots:
            with self._lock:
                self.calls += 1
            return self._complete_raw(prompt, max_tokens)


def embed_batch(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    input_kind: str = TEXT,
    cache=None,
) -> list[EmbeddingVector]:
    """Embed ``texts`` after truncation, consulting ``cache`` first when given."""
    if not texts:
        raise ValueError("texts must be non-empty")
    prepared = [provider.prepare(t, input_kind) for t in texts]
    if cache is None:
        return provider.embed_prepared(prepared)
    result: list[EmbeddingVector | None] = [cache.get_vector(provider.fingerprint, t) for t in prepared]
    missing = sorted({t for t, v in zip(prepared, result) if v is None})
    if missing:
        fresh = dict(zip(missing, provider.embed_prepared(missing)))
        for t, v in fresh.items():
            cache.put_vector(provider.fingerprint, t, v)
        result = [v if v is not None else fresh[t] for t, v in zip(prepared, result)]
    dims = {v.dim for v in result}
    if len(dims) > 1:
        raise ProviderContractError(f"inconsistent embedding dimensions {sorted(dims)}")
    return result  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# generation


def _generate(provider: GenerationProvider, prompt: str, limit: int, cache) -> tuple[str, bool, str | None]:
    """Returns (text, truncated, error); error is set when every attempt failed."""
    if cache is not None:
        hit = cache.get_text(provider.fingerprint, prompt)
        if hit is not None:
            text, cut = truncate(hit, limit, provider.cfg.length_unit)
            return text, cut, None
    error = "empty"
    for attempt in range(provider.cfg.retries + 1):
        try:
            raw = provider.complete(prompt, limit)
        except ProviderUnavailable as exc:
            log.warning("generation attempt %d failed: %s", attempt + 1, exc)
            error = "unavailable"
            continue
        cleaned = strip_fences(raw or "")
        if cleaned:
            if cache is not None:
                cache.put_text(provider.fingerprint, prompt, cleaned)
            text, cut = truncate(cleaned, limit, provider.cfg.length_unit)
            return text, cut, None
        error = "empty"
    return "", False, error


def generate_comment(
    code: CodeSnippet,
    provider: GenerationProvider,
    template: PromptTemplate = SUMMARIZE_TEMPLATE,
    cache=None,
) -> GeneratedComment:
    prompt = render_prompt(template, code.language, code.source)
    text, cut, error = _generate(provider, prompt, provider.cfg.max_comment_length, cache)
    if error is not None:
        return GeneratedComment(code.source, provider.name, truncated=False, fallback=True, error=error)
    return GeneratedComment(text, provider.name, truncated=cut)


def generate_code(
    query: Query,
    provider: GenerationProvider,
    template: PromptTemplate = GENERATE_TEMPLATE,
    cache=None,
) -> GeneratedCode:
    prompt = render_prompt(template, query.language, query.text)
    text, cut, error = _generate(provider, prompt, provider.cfg.max_code_length, cache)
    if error is not None:
        return GeneratedCode(query.text, provider.name, truncated=False, fallback=True, error=error)
    return GeneratedCode(text, provider.name, truncated=cut)


# ---------------------------------------------------------------------------
# HTTP clients


def _resolve_token(ref: str | None) -> str | None:
    if not ref:
        return None
    token = os.environ.get(ref)
    if token is None:
        raise ConfigError(f"environment variable {ref!r} (provider auth) is not set")
    return token


def _retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code == 429 or exc.response.status_code >= 500
    return False


class _HttpMixin:
    cfg: EmbeddingProviderConfig | GenerationProviderConfig

    def _init_http(self, transport: httpx.BaseTransport | None) -> None:
        token = _resolve_token(self.cfg.auth_secret_ref)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(
            base_url=self.cfg.endpoint_url.rstrip("/"),
            headers=headers,
            timeout=self.cfg.timeout,
            transport=transport,
        )

    def _post(self, path: str, body: dict) -> dict:
        retrying = Retrying(
            stop=stop_after_attempt(self.cfg.retries + 1),
            wait=wait_exponential(multiplier=self.cfg.backoff, max=10),
            retry=retry_if_exception(_retryable),
            reraise=False,
        )
        try:
            for attempt in retrying:
                with attempt:
                    resp = self._client.post(path, json=body)
                    resp.raise_for_status()
        except RetryError as exc:
            raise ProviderUnavailable(f"{self.cfg.endpoint_url}{path}: {exc.last_attempt.exception()}") from exc
        except httpx.HTTPStatusError as exc:
            raise ProviderContractError(f"{self.cfg.endpoint_url}{path}: HTTP {exc.response.status_code}") from exc
        try:
            return resp.json()
        except ValueError as exc:
            raise ProviderContractError(f"{self.cfg.endpoint_url}{path}: response is not JSON") from exc

    def close(self) -> None:
        self._client.close()


class HttpEmbeddingProvider(_HttpMixin, EmbeddingProvider):
    def __init__(self, cfg: EmbeddingProviderConfig, transport: httpx.BaseTransport | None = None):
        EmbeddingProvider.__init__(self, cfg)
        self._init_http(transport)

    def _embed_raw(self, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.cfg.model_name, "input": texts})
        try:
            return [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError) as exc:
            raise ProviderContractError(f"malformed embeddings response: {exc!r}") from exc


class HttpChatProvider(_HttpMixin, GenerationProvider):
    def __init__(self, cfg: GenerationProviderConfig, transport: httpx.BaseTransport | None = None):
        GenerationProvider.__init__(self, cfg)
        self._init_http(transport)

    def _complete_raw(self, prompt: str, max_tokens: int) -> str:
        body = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
            "temperature": self.cfg.temperature,
        }
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderContractError(f"malformed chat response: {exc!r}") from exc


# ---------------------------------------------------------------------------
# in-process mocks

_TOKEN = re.compile(r"\w+")


def hashed_embedding(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-tokens embedding: sum of per-token Gaussian vectors.

    Texts sharing tokens land close together, which makes the mock useful for
    demos as well as tests.
    """
    tokens = _TOKEN.findall(text.lower()) or [text]
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        digest = hashlib.blake2b(f"{seed}:{tok}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vec += rng.standard_normal(dim)
    return vec


class MockEmbeddingProvider(EmbeddingProvider):
    """Deterministic in-process embedder.

    ``table`` maps exact (post-truncation) texts to raw vectors; anything not
    in the table falls back to :func:`hashed_embedding`. ``fail_after`` makes
    every raw call after that many succeed raise :class:`ProviderUnavailable`.
    """

    def __init__(
        self,
        cfg: EmbeddingProviderConfig | None = None,
        *,
        table: dict[str, Sequence[float]] | None = None,
        fail_after: int | None = None,
    ):
        super().__init__(cfg or EmbeddingProviderConfig("mock://embed", "mock-embed", kind="mock"))
        self.table = dict(table or {})
        self.fail_after = fail_after
        self.seen: list[str] = []

    @property
    def fingerprint(self) -> tuple[str, str]:
        # seed and dim change the vectors, so they are part of the model identity
        return (self.cfg.endpoint_url, f"{self.cfg.model_name}#dim={self.cfg.dim},seed={self.cfg.seed}")

    def _embed_raw(self, texts: list[str]) -> list[list[float]]:
        if self.fail_after is not None and self.calls > self.fail_after:
            raise ProviderUnavailable(f"{self.cfg.endpoint_url} is down")
        self.seen.extend(texts)
        out = []
        for t in texts:
            if t in self.table:
                out.append(list(self.table[t]))
            else:
                out.append(hashed_embedding(t, self.cfg.dim, self.cfg.seed).tolist())
        return out


def _echo_payload(prompt: str) -> str:
    return prompt.split("\n", 1)[1] if "\n" in prompt else prompt


class MockGenerationProvider(GenerationProvider):
    """Generation mock; ``responder`` maps a rendered prompt to the model's reply.

    The default responder echoes the prompt payload (the code for summaries,
    the query for code generation).
    """

    def __init__(
        self,
        cfg: GenerationProviderConfig | None = None,
        responder: Callable[[str], str] = _echo_payload,
        unavailable: bool = False,
    ):
        super().__init__(cfg or GenerationProviderConfig("mock://generate", "mock-generate", kind="mock"))
        self.responder = responder
        self.unavailable = unavailable

    def _complete_raw(self, prompt: str, max_tokens: int) -> str:
        if self.unavailable:
            raise ProviderUnavailable(f"{self.cfg.endpoint_url} is down")
        return self.responder(prompt)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ProviderSet:
    """Per-schema embedders plus the generator, as one engine's configuration.

    ``qc`` embeds queries and code for query-code matching, ``qm`` embeds
    queries and comments, ``cg`` embeds code and generated code. The same
    provider object may serve several schemas.
    """

    qc: EmbeddingProvider
    qm: EmbeddingProvider
    cg: EmbeddingProvider
    generator: GenerationProvider
    summarize_template: PromptTemplate = SUMMARIZE_TEMPLATE
    generate_template: PromptTemplate = GENERATE_TEMPLATE
    cache: object | None = None

    @classmethod
    def single(cls, embedder: EmbeddingProvider, generator: GenerationProvider, **kw) -> "ProviderSet":
        return cls(embedder, embedder, embedder, generator, **kw)

    def embedder(self, schema: str) -> EmbeddingProvider:
        return {"qc": self.qc, "qm": self.qm, "cg": self.cg}[schema]

    def total_calls(self) -> int:
        seen: dict[int, int] = {}
        for p in (self.qc, self.qm, self.cg, self.generator):
            seen[id(p)] = p.calls
        return sum(seen.values())
