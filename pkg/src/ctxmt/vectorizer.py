"""Deterministic context vectorization.

Maps every context string (a past sentence, a metadata note, a free-form
cue) to a single fixed-length vector. Three interchangeable backends:

- ``HashNGramBackend``: seeded feature hashing of character n-grams.
  Similar surface forms share n-grams and therefore land close in cosine
  space, which is the property zero-shot transfer rides on.
- ``DiscreteLookupBackend``: every distinct string gets an independent
  pseudorandom unit vector. No similarity structure at all; used to
  ablate the coherence property away.
- ``PrecomputedBackend``: exact-string lookup in a table imported from a
  TSV file, for plugging in embeddings computed offline by a real
  sentence-embedding model.

All backends are immutable after construction and safe to share across
threads. The same (backend, text) pair always produces the identical
vector, bit for bit.
"""

from __future__ import annotations

import hashlib
import struct
import unicodedata

import numpy as np

DEFAULT_DIM = 384
HASH_NGRAM_SIZES = (2, 3, 4)
MAX_HASH_CHARS = 512


class VectorizerError(Exception):
    """Base class for vectorization failures."""


class EmptyTextError(VectorizerError):
    """Raised when asked to embed a string that is empty after trimming."""


class UnknownContextError(VectorizerError, KeyError):
    """Raised when a precomputed table has no entry for the given text."""


class DimensionMismatchError(VectorizerError):
    """Raised when embedding dimensions disagree with the configured one."""


def _seeded_hash64(seed: int, data: str) -> int:
    key = struct.pack("<q", seed)
    digest = hashlib.blake2b(data.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def normalize_text(text: str) -> str:
    """NFC-normalize, lowercase and trim, so trivially different inputs collide."""
    return unicodedata.normalize("NFC", text).lower().strip()


class HashNGramBackend:
    """Feature-hashed character n-gram embedder."""

    kind = "hash_ngram"

    def __init__(self, seed: int = 0, r: int = DEFAULT_DIM):
        self.seed = int(seed)
        self.r = int(r)

    def embed(self, text: str) -> np.ndarray:
        norm = normalize_text(text)
        if not norm:
            raise EmptyTextError("cannot embed empty text")
        norm = norm[:MAX_HASH_CHARS]
        grams = [
            norm[i : i + n]
            for n in HASH_NGRAM_SIZES
            for i in range(len(norm) - n + 1)
        ]
        if not grams:
            grams = [norm]
        vec = np.zeros(self.r, dtype=np.float64)
        for gram in grams:
            h = _seeded_hash64(self.seed, gram)
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[h % self.r] += sign
        nrm = float(np.linalg.norm(vec))
        if nrm == 0.0:
            # pathological full cancellation: fall back to one whole-string feature
            h = _seeded_hash64(self.seed, "\x00" + norm)
            vec[h % self.r] = 1.0
            nrm = 1.0
        return (vec / nrm).astype(np.float32)


class DiscreteLookupBackend:
    """Maps each distinct string to an unrelated pseudorandom unit vector."""

    kind = "discrete"

    def __init__(self, seed: int = 0, r: int = DEFAULT_DIM):
        self.seed = int(seed)
        self.r = int(r)

    def embed(self, text: str) -> np.ndarray:
        norm = normalize_text(text)
        if not norm:
            raise EmptyTextError("cannot embed empty text")
        rng = np.random.default_rng(_seeded_hash64(self.seed, norm))
        vec = rng.standard_normal(self.r)
        return (vec / np.linalg.norm(vec)).astype(np.float32)


class PrecomputedBackend:
    """Exact-string lookup in an imported embedding table."""

    kind = "precomputed"

    def __init__(self, table: dict[str, np.ndarray], r: int | None = None):
        if not table:
            raise DimensionMismatchError("precomputed table is empty")
        dims = {v.shape[-1] for v in table.values()}
        if len(dims) != 1:
            raise DimensionMismatchError(f"table has mixed dimensions {sorted(dims)}")
        (dim,) = dims
        if r is not None and r != dim:
            raise DimensionMismatchError(f"table dimension {dim} != configured r {r}")
        self.r = int(dim)
        self.seed = 0
        self._table = {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmptyTextError("cannot embed empty text")
        try:
            return self._table[text]
        except KeyError:
            raise UnknownContextError(f"no precomputed embedding for {text!r}") from None

    def __contains__(self, text: str) -> bool:
        return text in self._table

    def __len__(self) -> int:
        return len(self._table)


Backend = HashNGramBackend | DiscreteLookupBackend | PrecomputedBackend

_BACKENDS = {
    "hash_ngram": HashNGramBackend,
    "hash": HashNGramBackend,
    "discrete": DiscreteLookupBackend,
}


def make_backend(kind: str, seed: int = 0, r: int = DEFAULT_DIM) -> Backend:
    try:
        cls = _BACKENDS[kind]
    except KeyError:
        raise ValueError(f"unknown backend kind {kind!r}") from None
    return cls(seed=seed, r=r)


class ParseError(VectorizerError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class DuplicateKeyError(VectorizerError):
    def __init__(self, path, line_no, key):
        super().__init__(f"{path}:{line_no}: duplicate context {key!r}")
        self.key = key


def import_precomputed(path) -> dict[str, np.ndarray]:
    """Read a ``text<TAB>v1 v2 ... vr`` TSV into an embedding table.

    Every row must have the same dimension; duplicate texts are rejected.
    """
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8", newline="\n") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 2 tab-separated fields, got {len(parts)}")
            text, values = parts
            if text in table:
                raise DuplicateKeyError(path, line_no, text)
            try:
                vec = np.array([float(v) for v in values.split()], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if vec.size == 0:
                raise ParseError(path, line_no, "row has no values")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(path, line_no, f"dimension {vec.size} != {dim} seen earlier")
            table[text] = vec
    return table


def export_precomputed(table: dict[str, np.ndarray], path) -> None:
    """Write a table in the TSV format read by :func:`import_precomputed`.

    Values are written with full round-trip precision, so export followed
    by import reproduces the float32 entries bit for bit.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for text, vec in table.items():
            values = " ".join(repr(float(v)) for v in np.asarray(vec, dtype=np.float32))
            fh.write(f"{text}\t{values}\n")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
