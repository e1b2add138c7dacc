"""Deduplicated on-disk store of context embeddings.

Every distinct context string in a corpus is embedded exactly once and
written as one float32 row of a flat binary file; a text index maps each
sample back to its rows. Contexts repeat heavily in practice (metadata is
shared by whole documents), so the store is a small fraction of what
per-sample storage would cost, and rows can be read back by offset
without loading the payload.

Store layout (little-endian throughout):

    bytes 0..3   magic  b"CUEV"
    bytes 4..7   uint32 version (currently 1)
    bytes 8..11  uint32 row count c
    bytes 12..15 uint32 dimension r
    then exactly c * r float32 values, row-major

Index: UTF-8 text, one sample per line,
``sample_id<TAB>D:0:17,D:1:4,M:_:9`` where each entry is
kind (``D`` doc / ``M`` meta), distance (``_`` for meta) and row number.
A sample with no contexts has an empty entry list after the tab.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .contexts import ContextSet

MAGIC = b"CUEV"
VERSION = 1
HEADER = struct.Struct("<4sIII")


class StoreError(Exception):
    pass


class BadMagicError(StoreError):
    pass


class VersionUnsupportedError(StoreError):
    pass


class TruncatedFileError(StoreError):
    pass


class RowOutOfBoundsError(StoreError, IndexError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    """One sample's references into the store: (kind, distance, row) triples."""

    sample_id: str
    entries: tuple  # of (kind: "D"|"M", distance: int | None, row: int)


def build_store(samples, backend, store_path, index_path) -> tuple[str, str]:
    """Embed all contexts of ``samples`` and write the store + index pair.

    ``samples`` yields ``(sample_id, ContextSet)`` with text items. Each
    distinct context string is embedded once; rows are ordered by first
    appearance.
    """
    rows: list[np.ndarray] = []
    row_of: dict[str, int] = {}
    lines: list[str] = []
    for sample_id, cs in samples:
        fields = []
        for item, dist in cs.items():
            if item not in row_of:
                row_of[item] = len(rows)
                rows.append(np.ascontiguousarray(backend.embed(item), dtype=np.float32))
            row = row_of[item]
            if dist is None:
                fields.append(f"M:_:{row}")
            else:
                fields.append(f"D:{dist}:{row}")
        lines.append(f"{sample_id}\t{','.join(fields)}")

    r = backend.r
    with open(store_path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(rows), r))
        for row in rows:
            if row.shape != (r,):
                raise StoreError(f"embedding shape {row.shape} != ({r},)")
            fh.write(row.astype("<f4", copy=False).tobytes())
    with open(index_path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
    return str(store_path), str(index_path)


class EmbeddingStore:
    """Read-only handle over a store file; rows are fetched via memory mapping."""

    def __init__(self, path):
        with open(path, "rb") as fh:
            header = fh.read(HEADER.size)
        if len(header) < HEADER.size:
            raise TruncatedFileError(f"{path}: header incomplete")
        magic, version, count, dim = HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise VersionUnsupportedError(f"{path}: version {version} unsupported")
        expected = HEADER.size + 4 * count * dim
        actual = os.path.getsize(path)
        if actual != expected:
            raise TruncatedFileError(f"{path}: size {actual} != expected {expected}")
        self.path = str(path)
        self.count = count
        self.dim = dim
        self._rows = np.memmap(path, dtype="<f4", mode="r", offset=HEADER.size, shape=(count, dim))

    def row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.count:
            raise RowOutOfBoundsError(f"row {i} outside [0, {self.count})")
        return np.array(self._rows[i], dtype=np.float32)

    def rows(self) -> np.ndarray:
        return np.asarray(self._rows)


def lookup(store: EmbeddingStore, entry: IndexEntry):
    """Resolve an index entry to ``[(kind, distance, embedding), ...]`` in entry order."""
    return [(kind, dist, store.row(row)) for kind, dist, row in entry.entries]


def context_set_from_entry(store: EmbeddingStore, entry: IndexEntry, t: int = 5) -> ContextSet:
    """Rebuild a vectorized ContextSet from its index entry."""
    doc = []
    meta = []
    for kind, dist, emb in lookup(store, entry):
        if kind == "D":
            doc.append((emb, dist))
        else:
            meta.append(emb)
    return ContextSet(doc=tuple(doc), meta=tuple(meta), t=t)


def write_index(entries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fields = []
            for kind, dist, row in entry.entries:
                fields.append(f"{kind}:{'_' if dist is None else dist}:{row}")
            fh.write(f"{entry.sample_id}\t{','.join(fields)}\n")


def read_index(path) -> dict[str, IndexEntry]:
    out: dict[str, IndexEntry] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            sample_id, _, rest = line.partition("\t")
            entries = []
            if rest:
                for field in rest.split(","):
                    kind, dist_s, row_s = field.split(":")
                    if kind not in ("D", "M"):
                        raise StoreError(f"{path}:{line_no}: bad kind {kind!r}")
                    dist = None if dist_s == "_" else int(dist_s)
                    if (kind == "D") != (dist is not None):
                        raise StoreError(f"{path}:{line_no}: distance only valid for doc entries")
                    entries.append((kind, dist, int(row_s)))
            out[sample_id] = IndexEntry(sample_id, tuple(entries))
    return out
