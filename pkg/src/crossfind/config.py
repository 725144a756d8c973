"""Engine configuration: a YAML file with ``${ENV_VAR}`` interpolation.

Example::

    embeddings:
      default: {kind: http, endpoint_url: "http://localhost:8080/v1", model_name: unixcoder}
      qm: {kind: http, endpoint_url: "http://localhost:8081/v1", model_name: bge-large}
    generation:
      kind: http
      endpoint_url: "http://localhost:8000/v1"
      model_name: deepseek-coder-1.3b-instruct
      auth_secret_ref: LLM_TOKEN
    weights: [0.65, 0.25, 0.10]
    index_path: index/solidity.cfx
    cache_path: cache/
    server: {host: 127.0.0.1, port: 8765}
    concurrency: 8

Schemas missing from ``embeddings`` use ``default``. Relative paths are
resolved against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from crossfind.cache import EmbeddingCache
from crossfind.core import SCHEMAS, FusionWeights
from crossfind.errors import ConfigError, CrossfindError
from crossfind.providers import (
    EmbeddingProvider,
    EmbeddingProviderConfig,
    GenerationProvider,
    GenerationProviderConfig,
    HttpChatProvider,
    HttpEmbeddingProvider,
    MockEmbeddingProvider,
    MockGenerationProvider,
    ProviderSet,
)

_ENV = re.compile(r"\$\{(\w+)\}")


def interpolate(value: Any) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset environment variable {name!r}")
            return os.environ[name]
        return _ENV.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    return value


def _build(cls, raw: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class EngineConfig:
    embeddings: dict[str, EmbeddingProviderConfig]
    generation: GenerationProviderConfig
    weights: FusionWeights = field(default_factory=FusionWeights.default)
    index_path: Path | None = None
    cache_path: Path | None = None
    host: str = "127.0.0.1"
    port: int = 8765
    concurrency: int = 8

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "EngineConfig":
        raw = interpolate(raw or {})
        base_dir = base_dir or Path.cwd()
        emb_raw = raw.get("embeddings") or {}
        unknown = set(emb_raw) - {"default", *SCHEMAS}
        if unknown:
            raise ConfigError(f"embeddings: unknown schemas {sorted(unknown)}")
        default = emb_raw.get("default")
        embeddings = {}
        for schema in SCHEMAS:
            entry = emb_raw.get(schema, default)
            if entry is None:
                raise ConfigError(f"embeddings: no provider for schema {schema!r} and no default")
            embeddings[schema] = _build(EmbeddingProviderConfig, entry, f"embeddings.{schema}")
        if "generation" not in raw:
            raise ConfigError("missing 'generation' section")
        generation = _build(GenerationProviderConfig, raw["generation"], "generation")

        w = raw.get("weights")
        try:
            weights = FusionWeights(*map(float, w), origin="manual") if w is not None else FusionWeights.default()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"weights: {exc}") from exc
        except CrossfindError as exc:
            raise ConfigError(f"weights: {exc}") from exc

        def path(key: str) -> Path | None:
            v = raw.get(key)
            return None if v is None else (base_dir / v).resolve()

        server = raw.get("server") or {}
        return cls(
            embeddings=embeddings,
            generation=generation,
            weights=weights,
            index_path=path("index_path"),
            cache_path=path("cache_path"),
            host=str(server.get("host", "127.0.0.1")),
            port=int(server.get("port", 8765)),
            concurrency=int(raw.get("concurrency", 8)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EngineConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        return cls.from_dict(raw, path.parent)


def make_embedder(cfg: EmbeddingProviderConfig) -> EmbeddingProvider:
    if cfg.kind == "mock":
        return MockEmbeddingProvider(cfg)
    if cfg.kind == "http":
        return HttpEmbeddingProvider(cfg)
    raise ConfigError(f"unknown embedding provider kind {cfg.kind!r}")


def make_generator(cfg: GenerationProviderConfig) -> GenerationProvider:
    if cfg.kind == "mock":
        return MockGenerationProvider(cfg)
    if cfg.kind == "http":
        return HttpChatProvider(cfg)
    raise ConfigError(f"unknown generation provider kind {cfg.kind!r}")


def build_providers(cfg: EngineConfig) -> ProviderSet:
    """Instantiate providers; identical per-schema configs share one client."""
    made: dict[EmbeddingProviderConfig, EmbeddingProvider] = {}
    per_schema = {}
    for schema in SCHEMAS:
        c = cfg.embeddings[schema]
        if c not in made:
            made[c] = make_embedder(c)
        per_schema[schema] = made[c]
    cache = EmbeddingCache(cfg.cache_path) if cfg.cache_path else EmbeddingCache()
    return ProviderSet(
        qc=per_schema["qc"],
        qm=per_schema["qm"],
        cg=per_schema["cg"],
        generator=make_generator(cfg.generation),
        cache=cache,
    )
