"""Text-to-vector providers and the KGXE embedding file format.

Two providers share one contract: ``embed(text) -> 1-D float64 vector``
with a fixed ``dim``, deterministic per instance. The toy additive
embedder sums per-token pseudo-random vectors and maps "[MASK]" to the
zero vector, which makes sentence arithmetic exactly additive. The file
store serves precomputed vectors and refuses lookups it cannot answer.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer, check_magic
from .errors import FormatError, InvalidArgument, MissingEmbeddingError
from .numerics import derive_seed

KGXE_MAGIC = b"KGXE"
KGXE_VERSION = 1

MASK_TOKEN = "[MASK]"


class ToyAdditiveEmbedder:
    """Deterministic bag-of-tokens embedder for hermetic runs.

    Each token maps to a pseudo-random vector with components uniform in
    [-1, 1]/sqrt(dim), seeded by a 64-bit hash of (seed, token); a
    sentence embeds to the ordered sum of its whitespace tokens.
    "[MASK]" contributes the zero vector.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim < 1:
            raise InvalidArgument("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._table: dict[str, np.ndarray] = {MASK_TOKEN: np.zeros(dim)}
        self._lock = threading.Lock()

    def _token_vec(self, token: str) -> np.ndarray:
        cached = self._table.get(token)
        if cached is not None:
            return cached
        rng = np.random.default_rng(derive_seed(self.seed, f"token:{token}"))
        vec = rng.uniform(-1.0, 1.0, size=self.dim) / np.sqrt(self.dim)
        with self._lock:
            return self._table.setdefault(token, vec)

    def embed(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise InvalidArgument("cannot embed empty text")
        out = np.zeros(self.dim)
        for tok in tokens:
            out += self._token_vec(tok)
        return out

    def embed_key(self, key: str, text: str) -> np.ndarray:
        """Entity-style lookup: the toy embedder ignores the id key."""
        return self.embed(text)


@dataclass
class StoreMetadata:
    source: str = ""
    pooling: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"source": self.source, "pooling": self.pooling}
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "StoreMetadata":
        extra = {k: v for k, v in obj.items() if k not in ("source", "pooling")}
        return cls(source=str(obj.get("source", "")), pooling=str(obj.get("pooling", "")), extra=extra)


class FileEmbeddingStore:
    """Immutable id -> vector map backed by a KGXE file.

    Keys are exact strings (entity ids, or literal sentence strings for
    precomputed masked-sentence files); absent keys raise, they never
    silently map to zeros.
    """

    def __init__(self, dim: int, entries: dict[str, np.ndarray], metadata: StoreMetadata | None = None):
        if dim < 1:
            raise InvalidArgument("dim must be positive")
        self.dim = dim
        self.metadata = metadata or StoreMetadata()
        self._entries: dict[str, np.ndarray] = {}
        for key, vec in entries.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (dim,):
                raise FormatError(f"entry {key!r} has dim {arr.shape}, store dim is {dim}")
            self._entries[key] = arr

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def ids(self) -> list[str]:
        return list(self._entries.keys())

    def lookup(self, key: str) -> np.ndarray:
        try:
            return self._entries[key]
        except KeyError:
            raise MissingEmbeddingError(key) from None

    # Provider contract: a store "embeds" a text by exact-match lookup.
    def embed(self, text: str) -> np.ndarray:
        return self.lookup(text)

    def embed_key(self, key: str, text: str) -> np.ndarray:
        """Entity-style lookup by id (the exported record key)."""
        return self.lookup(key)


def store_to_bytes(store: FileEmbeddingStore) -> bytes:
    w = Writer()
    w.raw(KGXE_MAGIC)
    w.u16(KGXE_VERSION)
    w.u32(store.dim)
    w.u32(len(store))
    w.json_block(store.metadata.to_json())
    for key in store.ids():
        w.string(key)
        w.raw(np.asarray(store.lookup(key), dtype="<f4").tobytes())
    return w.getvalue()


def store_from_bytes(data: bytes) -> FileEmbeddingStore:
    r = Reader(data)
    check_magic(r, KGXE_MAGIC, KGXE_VERSION)
    dim = r.u32()
    count = r.u32()
    if dim < 1:
        raise FormatError("store dim must be positive")
    meta = StoreMetadata.from_json(r.json_block())
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        key = r.string()
        if key in entries:
            raise FormatError(f"duplicate id {key!r}")
        raw = r.take(4 * dim)
        entries[key] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    r.expect_end()
    return FileEmbeddingStore(dim=dim, entries=entries, metadata=meta)


def store_save(store: FileEmbeddingStore, path: str | Path) -> None:
    Path(path).write_bytes(store_to_bytes(store))


def store_load(path: str | Path) -> FileEmbeddingStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read embedding file {path}: {exc}") from exc
    return store_from_bytes(data)


def store_to_jsonl(store: FileEmbeddingStore, path: str | Path) -> None:
    """JSONL interchange: one {"id", "vec"} object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in store.ids():
            vec = [float(np.float32(x)) for x in store.lookup(key)]
            fh.write(json.dumps({"id": key, "vec": vec}) + "\n")


def store_from_jsonl(path: str | Path, source: str = "jsonl") -> FileEmbeddingStore:
    entries: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or "id" not in obj or "vec" not in obj:
                raise FormatError(f"{path}:{lineno}: expected an object with 'id' and 'vec'")
            key = str(obj["id"])
            if key in entries:
                raise FormatError(f"{path}:{lineno}: duplicate id {key!r}")
            vec = np.asarray(obj["vec"], dtype=np.float64)
            if dim is None:
                dim = int(vec.shape[0])
            if vec.shape != (dim,):
                raise FormatError(f"{path}:{lineno}: dim {vec.shape} != {dim}")
            entries[key] = vec
    if dim is None:
        raise FormatError(f"{path}: no records")
    return FileEmbeddingStore(dim=dim, entries=entries, metadata=StoreMetadata(source=source))
