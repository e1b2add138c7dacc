"""Binary embedding store: layout, dedup, round-trip, corruption handling."""

import struct

import numpy as np
import pytest

from ctxmt.contexts import ContextSet
from ctxmt.store import (
    HEADER,
    MAGIC,
    BadMagicError,
    EmbeddingStore,
    IndexEntry,
    RowOutOfBoundsError,
    TruncatedFileError,
    VersionUnsupportedError,
    build_store,
    context_set_from_entry,
    lookup,
    read_index,
    write_index,
)
from ctxmt.vectorizer import HashNGramBackend


class _CountingBackend:
    """Records every embed call so dedup can be asserted exactly."""

    def __init__(self, r=4):
        self.r = r
        self.calls = []

    def embed(self, text):
        self.calls.append(text)
        rng = np.random.default_rng(abs(hash(text)) % (2 ** 32))
        return rng.standard_normal(self.r).astype(np.float32)


def _sample(i, doc=(), meta=()):
    return (f"s{i}", ContextSet(doc=tuple(doc), meta=tuple(meta)))


def test_file_size_is_header_plus_rows(tmp_path):
    # 5 distinct contexts at r=4: 16-byte header + 5*4*4 payload = 96 bytes
    backend = _CountingBackend(r=4)
    samples = [_sample(i, meta=(f"m{i}",)) for i in range(5)]
    store_path, _ = build_store(samples, backend, tmp_path / "s.bin", tmp_path / "s.idx")
    raw = open(store_path, "rb").read()
    assert len(raw) == 96
    magic, version, count, dim = HEADER.unpack(raw[: HEADER.size])
    assert (magic, version, count, dim) == (MAGIC, 1, 5, 4)


def test_each_distinct_context_embedded_once(tmp_path):
    backend = _CountingBackend()
    shared = "genre: drama"
    samples = [_sample(i, doc=((f"line {i}", 1),), meta=(shared,)) for i in range(20)]
    build_store(samples, backend, tmp_path / "s.bin", tmp_path / "s.idx")
    assert backend.calls.count(shared) == 1
    assert len(backend.calls) == len(set(backend.calls)) == 21


def test_round_trip_is_bit_exact(tmp_path):
    backend = HashNGramBackend(seed=5, r=12)
    samples = [
        _sample(0, doc=(("previous line", 1), ("older line", 3)), meta=("year: 1999",)),
        _sample(1, meta=("year: 1999", "genre: war")),
        _sample(2),  # no contexts at all
    ]
    store_path, index_path = build_store(samples, backend, tmp_path / "s.bin", tmp_path / "s.idx")
    store = EmbeddingStore(store_path)
    index = read_index(index_path)

    assert store.count == 4 and store.dim == 12
    assert index["s2"].entries == ()
    resolved = lookup(store, index["s0"])
    assert [(k, d) for k, d, _ in resolved] == [("D", 1), ("D", 3), ("M", None)]
    np.testing.assert_array_equal(resolved[0][2], backend.embed("previous line"))
    np.testing.assert_array_equal(resolved[2][2], backend.embed("year: 1999"))
    # shared metadata resolves to the same physical row
    row_ids = {f: e for e in index["s1"].entries for f in [e[2]]}
    assert index["s1"].entries[0][2] in {r for _, _, r in index["s0"].entries}


def test_context_set_from_entry_rebuilds_structure(tmp_path):
    backend = HashNGramBackend(seed=1, r=8)
    samples = [_sample(0, doc=(("a b", 2),), meta=("m one",))]
    store_path, index_path = build_store(samples, backend, tmp_path / "s.bin", tmp_path / "s.idx")
    store = EmbeddingStore(store_path)
    cs = context_set_from_entry(store, read_index(index_path)["s0"])
    assert len(cs.doc) == 1 and len(cs.meta) == 1
    emb, dist = cs.doc[0]
    assert dist == 2
    np.testing.assert_array_equal(emb, backend.embed("a b"))


def test_dedup_payload_is_under_ten_percent_of_naive(tmp_path):
    # 10x-repetition corpus: every context string recurs ten times
    backend = _CountingBackend(r=16)
    uniques = [f"ctx {i}" for i in range(40)]
    samples = []
    n_refs = 0
    for i in range(100):
        metas = tuple(uniques[(i * 4 + j) % 40] for j in range(4))
        samples.append(_sample(i, meta=metas))
        n_refs += 4
    store_path, _ = build_store(samples, backend, tmp_path / "s.bin", tmp_path / "s.idx")
    payload = (tmp_path / "s.bin").stat().st_size - HEADER.size
    naive = n_refs * 16 * 4
    assert payload <= 0.10 * naive


def test_open_rejects_corruption(tmp_path):
    backend = _CountingBackend(r=4)
    store_path, _ = build_store([_sample(0, meta=("x",))], backend,
                                tmp_path / "s.bin", tmp_path / "s.idx")
    raw = open(store_path, "rb").read()

    bad = tmp_path / "magic.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        EmbeddingStore(bad)

    bad = tmp_path / "ver.bin"
    bad.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(VersionUnsupportedError):
        EmbeddingStore(bad)

    bad = tmp_path / "short.bin"
    bad.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        EmbeddingStore(bad)

    bad = tmp_path / "tiny.bin"
    bad.write_bytes(raw[:8])
    with pytest.raises(TruncatedFileError):
        EmbeddingStore(bad)


def test_row_bounds_checked(tmp_path):
    backend = _CountingBackend(r=4)
    store_path, _ = build_store([_sample(0, meta=("x",))], backend,
                                tmp_path / "s.bin", tmp_path / "s.idx")
    store = EmbeddingStore(store_path)
    with pytest.raises(RowOutOfBoundsError):
        store.row(1)
    with pytest.raises(RowOutOfBoundsError):
        store.row(-1)


def test_index_text_round_trip(tmp_path):
    entries = [
        IndexEntry("a", (("D", 1, 0), ("M", None, 2))),
        IndexEntry("b", ()),
    ]
    path = tmp_path / "i.idx"
    write_index(entries, path)
    back = read_index(path)
    assert back["a"].entries == (("D", 1, 0), ("M", None, 2))
    assert back["b"].entries == ()
    assert open(path).read() == "a\tD:1:0,M:_:2\nb\t\n"


def test_index_rejects_malformed_fields(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_text("a\tQ:1:0\n")
    with pytest.raises(Exception):
        read_index(path)
    path.write_text("a\tD:_:0\n")
    with pytest.raises(Exception):
        read_index(path)
