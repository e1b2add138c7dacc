"""Subtitle-style parallel corpus ingestion.

Takes timestamped source/target pairs grouped by work (one JSONL record
per pair), reconstructs continuous dialogue documents from the
timestamps, normalizes the per-work metadata into context strings,
attaches up to ``t`` previous source sentences to every pair, and splits
by held-out work identifiers so no work leaks across splits.

Document reconstruction drops pairs whose alignment overlap is below
0.9 and breaks a document wherever a pair was dropped or two consecutive
kept pairs are more than seven seconds apart.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass

MIN_OVERLAP = 0.9
MAX_GAP_SECONDS = 7.0
DEFAULT_MAX_DISTANCE = 5

METADATA_FIELDS = ("genre", "pg_rating", "writers", "year", "country", "plot")
_METADATA_PREFIXES = {
    "pg_rating": "PG rating: ",
    "year": "Released in ",
    "writers": "Writers: ",
}
_NON_VALUES = {"n/a", "not rated", ""}

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
NUM_SPECIALS = 4


class CorpusError(Exception):
    pass


class UnsortedInputError(CorpusError):
    pass


class OverlappingHeldoutError(CorpusError):
    pass


@dataclass(frozen=True)
class RawPair:
    """One aligned subtitle pair with its timing information."""

    src: str
    tgt: str
    doc_key: str
    start_time: float
    overlap: float = 1.0

    def __post_init__(self):
        if self.start_time < 0:
            raise CorpusError(f"negative start_time {self.start_time}")
        if not 0.0 <= self.overlap <= 1.0:
            raise CorpusError(f"overlap {self.overlap} outside [0, 1]")


@dataclass
class MetadataRecord:
    """Normalized per-work metadata; absent fields stay None."""

    genre: str | None = None
    pg_rating: str | None = None
    writers: str | None = None
    year: str | None = None
    country: str | None = None
    plot: str | None = None

    def contexts(self) -> list[str]:
        return [v for v in (getattr(self, f) for f in METADATA_FIELDS) if v is not None]


@dataclass
class SampleRecord:
    """One training/eval sample: texts plus attached contexts."""

    sample_id: str
    src: str
    tgt: str
    doc_context: tuple = ()   # of (distance, text), nearest first
    meta_context: tuple = ()  # of text
    split: str = ""

    def __post_init__(self):
        self.doc_context = tuple((int(d), text) for d, text in self.doc_context)
        self.meta_context = tuple(self.meta_context)


_QUOTE_CHARS = "\"'“”‘’"
_QUOTE_PAIRS = {
    '"': '"',
    "'": "'",
    "“": "”",
    "‘": "’",
    "”": "“",
    "’": "‘",
}


def clean_text(text: str) -> str:
    """Reduced subtitle cleanup: leading dash, whitespace, unmatched quotes."""
    text = re.sub(r"\s+", " ", text).strip()
    if text.startswith("- "):
        text = text[2:].lstrip()
    if text and text[0] in _QUOTE_CHARS and _QUOTE_PAIRS[text[0]] not in text[1:]:
        text = text[1:].lstrip()
    if text and text[-1] in _QUOTE_CHARS and _QUOTE_PAIRS[text[-1]] not in text[:-1]:
        text = text[:-1].rstrip()
    return text


def build_documents(pairs) -> list[list[RawPair]]:
    """Group pairs into maximal continuous documents.

    Pairs must arrive sorted by start_time within each doc_key. A pair
    with overlap < 0.9 is dropped and forces a document boundary; so does
    a gap of more than seven seconds between consecutive kept pairs.
    """
    by_key: dict[str, list[RawPair]] = {}
    for pair in pairs:
        by_key.setdefault(pair.doc_key, []).append(pair)

    documents: list[list[RawPair]] = []
    for key in sorted(by_key):
        group = by_key[key]
        for prev, cur in zip(group, group[1:]):
            if cur.start_time < prev.start_time:
                raise UnsortedInputError(f"doc_key {key!r} not sorted by start_time")
        current: list[RawPair] = []
        for pair in group:
            if pair.overlap < MIN_OVERLAP:
                if current:
                    documents.append(current)
                    current = []
                continue
            if current and pair.start_time - current[-1].start_time > MAX_GAP_SECONDS:
                documents.append(current)
                current = []
            current.append(pair)
        if current:
            documents.append(current)
    return documents


def normalize_metadata(raw: dict) -> MetadataRecord:
    """Drop non-values and add disambiguating prefixes to terse fields.

    Idempotent: values already carrying their prefix are left alone.
    """
    record = MetadataRecord()
    for name in METADATA_FIELDS:
        value = raw.get(name)
        if value is None:
            continue
        value = re.sub(r"\s+", " ", str(value)).strip()
        if value.lower() in _NON_VALUES:
            continue
        prefix = _METADATA_PREFIXES.get(name)
        if prefix and not value.startswith(prefix):
            value = prefix + value
        setattr(record, name, value)
    return record


def build_samples(documents, metadata=None, t: int = DEFAULT_MAX_DISTANCE) -> list[SampleRecord]:
    """One sample per kept pair, with up to ``t`` previous source sentences.

    Document contexts are nearest-first (distance 1 = immediately
    preceding sentence). Metadata contexts are attached whenever the
    pair's doc_key has a metadata record. Pairs without any context are
    kept as plain samples.
    """
    metadata = metadata or {}
    counters: Counter[str] = Counter()
    samples = []
    for doc in documents:
        for i, pair in enumerate(doc):
            n = counters[pair.doc_key]
            counters[pair.doc_key] += 1
            meta_rec = metadata.get(pair.doc_key)
            doc_ctx = [
                (dist, doc[i - dist].src)
                for dist in range(1, min(i, t) + 1)
            ]
            samples.append(
                SampleRecord(
                    sample_id=f"{pair.doc_key}-{n}",
                    src=pair.src,
                    tgt=pair.tgt,
                    doc_context=doc_ctx,
                    meta_context=meta_rec.contexts() if meta_rec else [],
                )
            )
    return samples


def split_samples(samples, valid_keys, test_keys) -> dict[str, list[SampleRecord]]:
    """Assign whole doc_keys to valid/test; everything else trains."""
    valid_keys = set(valid_keys)
    test_keys = set(test_keys)
    both = valid_keys & test_keys
    if both:
        raise OverlappingHeldoutError(f"doc_keys in both held-out lists: {sorted(both)[:5]}")
    out = {"train": [], "valid": [], "test": []}
    for sample in samples:
        key = sample.sample_id.rsplit("-", 1)[0]
        if key in valid_keys:
            sample.split = "valid"
        elif key in test_keys:
            sample.split = "test"
        else:
            sample.split = "train"
        out[sample.split].append(sample)
    return out


class WordTokenizer:
    """Whitespace tokenizer with a frequency-ordered vocabulary.

    Ids 0..3 are PAD/UNK/BOS/EOS; the vocab file stores one token per
    line, line number = id - 4. Stands in for subword tokenization; any
    object with the same encode/decode/vocab_size surface plugs in.
    """

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self._ids = {tok: i + NUM_SPECIALS for i, tok in enumerate(self.tokens)}

    @classmethod
    def train(cls, texts, max_size: int | None = None) -> "WordTokenizer":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[:max_size]
        return cls([tok for tok, _ in ranked])

    @property
    def vocab_size(self) -> int:
        return len(self.tokens) + NUM_SPECIALS

    def encode(self, text: str) -> list[int]:
        return [BOS_ID] + [self._ids.get(tok, UNK_ID) for tok in text.split()] + [EOS_ID]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i < NUM_SPECIALS:
                continue
            words.append(self.tokens[i - NUM_SPECIALS])
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def read_pairs_jsonl(path) -> list[RawPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pairs.append(
                RawPair(
                    src=rec["src"],
                    tgt=rec["tgt"],
                    doc_key=rec["doc_key"],
                    start_time=float(rec["start_time"]),
                    overlap=float(rec.get("overlap", 1.0)),
                )
            )
    return pairs


def read_metadata_jsonl(path) -> dict[str, MetadataRecord]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            key = rec.pop("doc_key")
            out[key] = normalize_metadata(rec)
    return out


def write_samples_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            rec = {
                "sample_id": s.sample_id,
                "src": s.src,
                "tgt": s.tgt,
                "doc": [{"d": d, "text": text} for d, text in s.doc_context],
                "meta": list(s.meta_context),
                "split": s.split,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_samples_jsonl(path) -> list[SampleRecord]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            samples.append(
                SampleRecord(
                    sample_id=rec["sample_id"],
                    src=rec["src"],
                    tgt=rec["tgt"],
                    doc_context=[(d["d"], d["text"]) for d in rec.get("doc", [])],
                    meta_context=list(rec.get("meta", [])),
                    split=rec.get("split", ""),
                )
            )
    return samples


def context_set_for(sample: SampleRecord, t: int = DEFAULT_MAX_DISTANCE, source_at_zero: bool = False):
    """Build the sample's ContextSet, optionally with the source itself at distance 0."""
    from .contexts import ContextSet

    doc = tuple((text, dist) for dist, text in sorted(sample.doc_context))
    cs = ContextSet(doc=doc, meta=tuple(sample.meta_context), t=t)
    if source_at_zero:
        cs = cs.with_source(sample.src)
    return cs
