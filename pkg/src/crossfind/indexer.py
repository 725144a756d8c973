"""Offline codebase indexing and index persistence.

On-disk layout, for an index written to ``foo.cfx``:

``foo.cfx``
    ``b"CFXIDX01"`` magic, a little-endian uint32 header length, a UTF-8 JSON
    header (fingerprints, dims, count, record size), then one record per
    snippet: uint32 CRC32 of the payload followed by the payload, which is the
    snippet's query-code, code-code and comment vectors as little-endian
    float32.
``foo.cfx.json``
    Sidecar with codebase id, creation time, generator identity and the
    snippets with their generated comments.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from crossfind.cache import EmbeddingCache
from crossfind.core import CodeSnippet, EmbeddingVector, GeneratedComment
from crossfind.errors import (
    BuildInterrupted,
    DataError,
    EmptyCodebaseError,
    IndexCorrupt,
    IndexIncompatible,
    ProviderUnavailable,
)
from crossfind.providers import CODE, TEXT, ProviderSet, embed_batch, generate_comment

log = logging.getLogger(__name__)

MAGIC = b"CFXIDX01"
_U32 = struct.Struct("<I")
VECTOR_FIELDS = ("c_qc", "c_cg", "m")
_FIELD_SCHEMA = {"c_qc": "qc", "c_cg": "cg", "m": "qm"}


@dataclass(frozen=True)
class IndexEntry:
    snippet: CodeSnippet
    comment: GeneratedComment
    c_vec_qc: EmbeddingVector
    c_vec_cc: EmbeddingVector
    m_vec: EmbeddingVector


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class CodebaseIndex:
    """Snippets, their comments and the three row-aligned vector matrices.

    ``c_qc`` holds code vectors in the query-code space, ``c_cg`` code
    vectors in the code-code space and ``m`` comment vectors in the
    query-comment space. Equality ignores ``created_at``.
    """

    codebase_id: str
    snippets: list[CodeSnippet]
    comments: list[GeneratedComment]
    c_qc: np.ndarray
    c_cg: np.ndarray
    m: np.ndarray
    provider_fingerprints: dict[str, dict]
    generator: dict = field(default_factory=dict)
    created_at: str = ""

    def __post_init__(self):
        self.c_qc, self.c_cg, self.m = _freeze(self.c_qc), _freeze(self.c_cg), _freeze(self.m)
        n = len(self.snippets)
        if len(self.comments) != n or any(a.shape[0] != n for a in (self.c_qc, self.c_cg, self.m)):
            raise DataError("index components disagree on entry count")
        for name in VECTOR_FIELDS:
            fp = self.provider_fingerprints.get(_FIELD_SCHEMA[name])
            if fp is not None and fp["dim"] != getattr(self, name).shape[1]:
                raise DataError(f"fingerprint dim for {name} does not match stored vectors")
        self.ids = [s.id for s in self.snippets]
        self.position = {cid: i for i, cid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.snippets)

    @property
    def entries(self) -> list[IndexEntry]:
        return [
            IndexEntry(
                s, c,
                EmbeddingVector(self.c_qc[i], normalized=True),
                EmbeddingVector(self.c_cg[i], normalized=True),
                EmbeddingVector(self.m[i], normalized=True),
            )
            for i, (s, c) in enumerate(zip(self.snippets, self.comments))
        ]

    @property
    def fallback_count(self) -> int:
        return sum(c.fallback for c in self.comments)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CodebaseIndex):
            return NotImplemented
        return (
            self.codebase_id == other.codebase_id
            and self.snippets == other.snippets
            and self.comments == other.comments
            and self.provider_fingerprints == other.provider_fingerprints
            and self.generator == other.generator
            and all(
                getattr(self, f).shape == getattr(other, f).shape
                and getattr(self, f).tobytes() == getattr(other, f).tobytes()
                for f in VECTOR_FIELDS
            )
        )


def provider_fingerprints(providers: ProviderSet, dims: dict[str, int] | None = None) -> dict[str, dict]:
    out = {}
    for schema in ("qc", "qm", "cg"):
        endpoint, model = providers.embedder(schema).fingerprint
        out[schema] = {"endpoint": endpoint, "model": model, "dim": (dims or {}).get(schema)}
    return out


def check_compatible(index: CodebaseIndex, providers: ProviderSet) -> None:
    """Refuse to score an index with embedders other than the ones that built it."""
    expected = provider_fingerprints(providers)
    for schema, fp in expected.items():
        have = index.provider_fingerprints.get(schema, {})
        if (have.get("endpoint"), have.get("model")) != (fp["endpoint"], fp["model"]):
            raise IndexIncompatible(
                f"index {schema} space was built with {have.get('model')!r} at {have.get('endpoint')!r}, "
                f"configured provider is {fp['model']!r} at {fp['endpoint']!r}"
            )


def _stack(vectors: Sequence[EmbeddingVector]) -> np.ndarray:
    return np.stack([v.values for v in vectors]).astype(np.float32)


def build_index(
    codebase: Sequence[CodeSnippet],
    providers: ProviderSet,
    cache: EmbeddingCache | None = None,
    *,
    codebase_id: str = "codebase",
    chunk_size: int = 64,
    progress: Callable[[int, int], None] | None = None,
) -> CodebaseIndex:
    """Generate a comment per snippet and embed code and comments.

    Work proceeds in chunks and every result goes through ``cache``; when a
    provider stays down past its retry budget a :class:`BuildInterrupted` is
    raised whose ``resume_handle`` is that cache. Passing it back in resumes
    the build without repeating finished work.
    """
    if not codebase:
        raise EmptyCodebaseError("codebase is empty")
    ids = [s.id for s in codebase]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate snippet ids: {dupes[:5]}")
    if cache is None:
        cache = providers.cache if providers.cache is not None else EmbeddingCache()

    comments: list[GeneratedComment] = []
    c_qc: list[EmbeddingVector] = []
    c_cg: list[EmbeddingVector] = []
    m: list[EmbeddingVector] = []
    gen = providers.generator
    workers = max(1, gen.cfg.concurrency)
    done = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(codebase), chunk_size):
            chunk = list(codebase[start:start + chunk_size])
            try:
                chunk_comments = list(pool.map(
                    lambda s: generate_comment(s, gen, providers.summarize_template, cache), chunk
                ))
                sources = [s.source for s in chunk]
                vq = embed_batch(sources, providers.qc, CODE, cache)
                vc = vq if providers.cg is providers.qc else embed_batch(sources, providers.cg, CODE, cache)
                vm = embed_batch([c.text for c in chunk_comments], providers.qm, TEXT, cache)
            except ProviderUnavailable as exc:
                raise BuildInterrupted(str(exc), done, len(codebase), cache) from exc
            comments.extend(chunk_comments)
            c_qc.extend(vq)
            c_cg.extend(vc)
            m.extend(vm)
            done += len(chunk)
            if progress is not None:
                progress(done, len(codebase))

    for c, s in zip(comments, codebase):
        if c.fallback:
            log.warning("comment generation fell back to raw code for snippet %s (%s)", s.id, c.error)
    mats = {"c_qc": _stack(c_qc), "c_cg": _stack(c_cg), "m": _stack(m)}
    dims = {"qc": mats["c_qc"].shape[1], "cg": mats["c_cg"].shape[1], "qm": mats["m"].shape[1]}
    return CodebaseIndex(
        codebase_id=codebase_id,
        snippets=list(codebase),
        comments=comments,
        provider_fingerprints=provider_fingerprints(providers, dims),
        generator={"endpoint": gen.fingerprint[0], "model": gen.fingerprint[1]},
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **mats,
    )


# ---------------------------------------------------------------------------
# persistence


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_index(index: CodebaseIndex, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = {f: int(getattr(index, f).shape[1]) for f in VECTOR_FIELDS}
    header = {
        "format": 1,
        "count": len(index),
        "dims": dims,
        "fingerprints": index.provider_fingerprints,
        "record_bytes": 4 * sum(dims.values()),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(len(header_bytes)))
        fh.write(header_bytes)
        for i in range(len(index)):
            payload = b"".join(getattr(index, f)[i].astype("<f4").tobytes() for f in VECTOR_FIELDS)
            fh.write(_U32.pack(zlib.crc32(payload)))
            fh.write(payload)
    meta = {
        "codebase_id": index.codebase_id,
        "created_at": index.created_at,
        "generator": index.generator,
        "entries": [
            {
                "id": s.id,
                "code": s.source,
                "language": s.language,
                "comment": {
                    "text": c.text,
                    "generator": c.generator,
                    "truncated": c.truncated,
                    "fallback": c.fallback,
                    "error": c.error,
                },
            }
            for s, c in zip(index.snippets, index.comments)
        ],
    }
    sidecar_path(path).write_text(json.dumps(meta, ensure_ascii=False, indent=1), encoding="utf-8")


def load_index(path: str | Path, providers: ProviderSet | None = None) -> CodebaseIndex:
    """Read an index written by :func:`save_index`.

    With ``providers`` given, the stored fingerprints must match them or
    :class:`IndexIncompatible` is raised.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
        side_text = sidecar_path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"index file not found: {exc.filename}") from exc

    if blob[:8] != MAGIC:
        raise IndexCorrupt(f"{path}: bad magic", 0)
    if len(blob) < 12:
        raise IndexCorrupt(f"{path}: truncated header", 8)
    (hlen,) = _U32.unpack_from(blob, 8)
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        count, dims, rec_bytes = header["count"], header["dims"], header["record_bytes"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IndexCorrupt(f"{path}: unreadable header ({exc})", 12) from exc

    mats = {f: np.empty((count, dims[f]), dtype=np.float32) for f in VECTOR_FIELDS}
    offset = 12 + hlen
    for i in range(count):
        if offset + 4 + rec_bytes > len(blob):
            raise IndexCorrupt(f"{path}: record {i} is truncated", offset)
        (crc,) = _U32.unpack_from(blob, offset)
        payload = blob[offset + 4:offset + 4 + rec_bytes]
        if zlib.crc32(payload) != crc:
            raise IndexCorrupt(f"{path}: checksum mismatch in record {i}", offset)
        vecs = np.frombuffer(payload, dtype="<f4")
        pos = 0
        for f in VECTOR_FIELDS:
            mats[f][i] = vecs[pos:pos + dims[f]]
            pos += dims[f]
        offset += 4 + rec_bytes
    if offset != len(blob):
        raise IndexCorrupt(f"{path}: {len(blob) - offset} trailing bytes", offset)

    try:
        meta = json.loads(side_text)
        snippets = [CodeSnippet(e["id"], e["code"], e["language"]) for e in meta["entries"]]
        comments = [GeneratedComment(**e["comment"]) for e in meta["entries"]]
    except json.JSONDecodeError as exc:
        raise IndexCorrupt(f"{sidecar_path(path)}: invalid JSON ({exc.msg})", exc.pos) from exc
    except (KeyError, TypeError, DataError) as exc:
        raise IndexCorrupt(f"{sidecar_path(path)}: malformed entry ({exc})") from exc
    if len(snippets) != count:
        raise IndexCorrupt(f"{path}: sidecar lists {len(snippets)} entries, vectors hold {count}")

    index = CodebaseIndex(
        codebase_id=meta.get("codebase_id", ""),
        snippets=snippets,
        comments=comments,
        provider_fingerprints=header["fingerprints"],
        generator=meta.get("generator", {}),
        created_at=meta.get("created_at", ""),
        **mats,
    )
    if providers is not None:
        check_compatible(index, providers)
    return index
