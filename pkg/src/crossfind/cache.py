"""Content-addressed cache for embeddings and generated text.

Entries are keyed by ``sha256(provider fingerprint, input text)``. With a
``root`` directory every entry is also written to its own file, so a build
that dies half way leaves a usable checkpoint behind and deleting one file
forces exactly that entry to be recomputed.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from pathlib import Path

import numpy as np

from crossfind.core import EmbeddingVector


def cache_key(fingerprint: tuple[str, ...], text: str) -> str:
    blob = json.dumps([list(fingerprint), text], ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class EmbeddingCache:
    """Thread-safe; concurrent writes to one key are last-write-wins."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._vectors: dict[str, EmbeddingVector] = {}
        self._texts: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, kind: str, key: str) -> Path:
        assert self.root is not None
        suffix = ".f32" if kind == "vec" else ".txt"
        return self.root / kind / key[:2] / f"{key}{suffix}"

    def vector_path(self, fingerprint: tuple[str, ...], text: str) -> Path:
        return self._path("vec", cache_key(fingerprint, text))

    def get_vector(self, fingerprint: tuple[str, ...], text: str) -> EmbeddingVector | None:
        key = cache_key(fingerprint, text)
        with self._lock:
            vec = self._vectors.get(key)
        if vec is None and self.root is not None:
            path = self._path("vec", key)
            if path.exists():
                # stored form is little-endian float32, normalized on receipt
                vec = EmbeddingVector(np.frombuffer(path.read_bytes(), dtype="<f4"), normalized=True)
                with self._lock:
                    self._vectors[key] = vec
        with self._lock:
            if vec is None:
                self.misses += 1
            else:
                self.hits += 1
        return vec

    def put_vector(self, fingerprint: tuple[str, ...], text: str, vec: EmbeddingVector) -> None:
        key = cache_key(fingerprint, text)
        with self._lock:
            self._vectors[key] = vec
        if self.root is not None:
            _atomic_write(self._path("vec", key), vec.values.astype("<f4").tobytes())

    def delete_vector(self, fingerprint: tuple[str, ...], text: str) -> None:
        key = cache_key(fingerprint, text)
        with self._lock:
            self._vectors.pop(key, None)
        if self.root is not None:
            self._path("vec", key).unlink(missing_ok=True)

    def get_text(self, fingerprint: tuple[str, ...], prompt: str) -> str | None:
        key = cache_key(fingerprint, prompt)
        with self._lock:
            text = self._texts.get(key)
        if text is None and self.root is not None:
            path = self._path("txt", key)
            if path.exists():
                text = path.read_text(encoding="utf-8")
                with self._lock:
                    self._texts[key] = text
        return text

    def put_text(self, fingerprint: tuple[str, ...], prompt: str, text: str) -> None:
        key = cache_key(fingerprint, prompt)
        with self._lock:
            self._texts[key] = text
        if self.root is not None:
            _atomic_write(self._path("txt", key), text.encode("utf-8"))
