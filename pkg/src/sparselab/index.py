"""Impact-ordered inverted index built from sparse document vectors.

Postings are held in CSR form: for term ``t`` the slice
``offsets[t]:offsets[t + 1]`` of ``post_docs``/``post_impacts`` lists the
documents containing ``t`` in ascending internal doc id.

Binary layout (version 1, all integers little-endian)::

    magic        8 bytes   b"SPLXIDX\\0"
    version      u32
    flags        u32       bit 0: term-frequency index, bit 1: vocabulary present
    vocab_size   u32
    n_docs       u64
    n_postings   u64
    doc table    n_docs x (u32 byte length, utf-8 external id)
    doc_lengths  i64[n_docs]
    offsets      i64[vocab_size + 1]
    post_docs    i32[n_postings]
    post_impacts f32[n_postings]
    max_impacts  f32[vocab_size]
    vocabulary   vocab_size x (u32 byte length, utf-8 token)   if flag bit 1
    crc32        u32       over every preceding byte
"""

from __future__ import annotations

import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ._io import PathLike, atomic_write_bytes
from .errors import FormatError, IndexBuildError
from .sparse import SparseVector, Vocabulary, tokenize

MAGIC = b"SPLXIDX\x00"
FORMAT_VERSION = 1
_FLAG_TF = 1
_FLAG_VOCAB = 2
_HEADER = struct.Struct("<8sIIIQQ")


@dataclass(frozen=True)
class PostingList:
    term: int
    docs: np.ndarray
    impacts: np.ndarray
    max_impact: float

    def __len__(self) -> int:
        return int(self.docs.size)


@dataclass(frozen=True)
class IndexStats:
    num_docs: int
    num_terms: int
    total_postings: int
    mean_doc_nnz: float


class InvertedIndex:
    """Immutable inverted index.  Safe for any number of concurrent readers."""

    def __init__(
        self,
        doc_ids: Sequence[str],
        doc_lengths: np.ndarray,
        offsets: np.ndarray,
        post_docs: np.ndarray,
        post_impacts: np.ndarray,
        vocab_size: int,
        *,
        term_frequency: bool = False,
        vocabulary: Optional[Vocabulary] = None,
    ):
        self.doc_ids: Tuple[str, ...] = tuple(doc_ids)
        self.doc_lengths = _frozen(np.asarray(doc_lengths, dtype=np.int64))
        self.offsets = _frozen(np.asarray(offsets, dtype=np.int64))
        self.post_docs = _frozen(np.asarray(post_docs, dtype=np.int32))
        self.post_impacts = _frozen(np.asarray(post_impacts, dtype=np.float32))
        self.vocab_size = int(vocab_size)
        self.term_frequency = bool(term_frequency)
        self.vocabulary = vocabulary
        if vocabulary is not None and vocabulary.size != self.vocab_size:
            raise IndexBuildError("vocabulary size does not match index vocab_size")
        self.max_impacts = _frozen(_list_maxima(self.offsets, self.post_impacts))
        self._doc_index = {d: i for i, d in enumerate(self.doc_ids)}
        self._py_lists: Dict[int, Tuple[List[int], List[float]]] = {}
        self._lock = threading.Lock()

    # -- basic properties ----------------------------------------------
    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def total_postings(self) -> int:
        return int(self.post_docs.size)

    @property
    def avg_doc_length(self) -> float:
        return float(self.doc_lengths.mean())

    def internal_id(self, external_id: str) -> int:
        return self._doc_index[external_id]

    def terms(self) -> np.ndarray:
        """Term ids that have a non-empty posting list, ascending."""
        return np.flatnonzero(np.diff(self.offsets) > 0)

    def df(self, term: int) -> int:
        if not 0 <= term < self.vocab_size:
            return 0
        return int(self.offsets[term + 1] - self.offsets[term])

    def posting_list(self, term: int) -> Optional[PostingList]:
        if self.df(term) == 0:
            return None
        lo, hi = self.offsets[term], self.offsets[term + 1]
        return PostingList(
            int(term), self.post_docs[lo:hi], self.post_impacts[lo:hi], float(self.max_impacts[term])
        )

    def python_postings(self, term: int) -> Tuple[List[int], List[float]]:
        """Posting list as plain Python lists, cached; used by the DAAT loops."""
        cached = self._py_lists.get(term)
        if cached is None:
            lo, hi = self.offsets[term], self.offsets[term + 1]
            cached = (self.post_docs[lo:hi].tolist(), self.post_impacts[lo:hi].tolist())
            with self._lock:
                self._py_lists.setdefault(term, cached)
        return cached

    def document_vector(self, doc: int) -> SparseVector:
        """Reconstruct a stored document vector (linear scan; for tests and tools)."""
        hits = np.flatnonzero(self.post_docs == doc)
        terms = np.searchsorted(self.offsets, hits, side="right") - 1
        return SparseVector(terms, self.post_impacts[hits], self.vocab_size)

    def stats(self) -> IndexStats:
        return index_stats(self)

    # -- equality / persistence -------------------------------------
    def to_bytes(self) -> bytes:
        return _serialize(self)

    def save(self, path: PathLike) -> None:
        save_index(self, path)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        kind = "tf" if self.term_frequency else "impact"
        return (
            f"InvertedIndex({kind}, docs={self.num_docs}, terms={len(self.terms())}, "
            f"postings={self.total_postings})"
        )


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _list_maxima(offsets: np.ndarray, impacts: np.ndarray) -> np.ndarray:
    out = np.zeros(offsets.size - 1, dtype=np.float32)
    nonempty = np.flatnonzero(np.diff(offsets) > 0)
    if nonempty.size:
        out[nonempty] = np.maximum.reduceat(impacts, offsets[nonempty])
    return out


def build_index(
    docs: Iterable[Tuple[str, SparseVector]],
    *,
    term_frequency: bool = False,
    vocabulary: Optional[Vocabulary] = None,
    doc_lengths: Optional[Sequence[int]] = None,
) -> InvertedIndex:
    """Build an index from ``(external_id, vector)`` pairs.

    Document length defaults to the total term count for a term-frequency
    index and to ``nnz`` otherwise.
    """
    docs = list(docs)
    if not docs:
        raise IndexBuildError("cannot build an index from an empty collection")
    ids = [d for d, _ in docs]
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for d in ids:
            if d in seen:
                dup = d
                break
            seen.add(d)
        raise IndexBuildError(f"duplicate external document id: {dup!r}")
    vocab_size = docs[0][1].vocab_size
    for d, v in docs:
        if v.vocab_size != vocab_size:
            raise IndexBuildError(
                f"document {d!r} has vocab_size {v.vocab_size}, expected {vocab_size}"
            )
    counts = np.array([v.nnz for _, v in docs], dtype=np.int64)
    all_terms = np.concatenate([v.terms for _, v in docs]) if counts.sum() else np.empty(0, np.int32)
    all_weights = (
        np.concatenate([v.weights for _, v in docs]) if counts.sum() else np.empty(0, np.float32)
    )
    all_docs = np.repeat(np.arange(len(docs), dtype=np.int32), counts)
    if term_frequency and np.any(all_weights != np.round(all_weights)):
        raise IndexBuildError("term-frequency index requires integral weights")

    # Stable sort by term keeps doc ids ascending inside each list.
    order = np.argsort(all_terms, kind="stable")
    post_docs = all_docs[order]
    post_impacts = all_weights[order]
    offsets = np.zeros(vocab_size + 1, dtype=np.int64)
    np.cumsum(np.bincount(all_terms, minlength=vocab_size), out=offsets[1:])

    if doc_lengths is not None:
        lengths = np.asarray(doc_lengths, dtype=np.int64)
        if lengths.shape != (len(docs),):
            raise IndexBuildError("doc_lengths must have one entry per document")
    elif term_frequency:
        lengths = np.array([int(v.weights.astype(np.float64).sum()) for _, v in docs], dtype=np.int64)
    else:
        lengths = counts
    return InvertedIndex(
        ids, lengths, offsets, post_docs, post_impacts, vocab_size,
        term_frequency=term_frequency, vocabulary=vocabulary,
    )


def index_stats(index: InvertedIndex) -> IndexStats:
    n = index.num_docs
    return IndexStats(
        num_docs=n,
        num_terms=int(len(index.terms())),
        total_postings=index.total_postings,
        mean_doc_nnz=index.total_postings / n,
    )


# -- text collections ------------------------------------------------------

def read_collection(path: PathLike) -> List[Tuple[str, str]]:
    """Read a ``docId<TAB>text`` file."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>text'")
            doc_id, text = line.split("\t", 1)
            out.append((doc_id, text))
    return out


def tf_vector(tokens: Iterable[str], vocabulary: Vocabulary) -> SparseVector:
    ids = vocabulary.ids(tokens)
    if not ids:
        return SparseVector.empty(vocabulary.size)
    terms, counts = np.unique(np.asarray(ids, dtype=np.int64), return_counts=True)
    return SparseVector(terms, counts.astype(np.float32), vocabulary.size)


def build_tf_index(
    collection: Sequence[Tuple[str, str]], vocabulary: Optional[Vocabulary] = None
) -> InvertedIndex:
    """Tokenize a text collection and index raw term frequencies (for BM25)."""
    if vocabulary is None:
        vocabulary = Vocabulary.from_texts(text for _, text in collection)
    docs = [(d, tf_vector(tokenize(text), vocabulary)) for d, text in collection]
    return build_index(docs, term_frequency=True, vocabulary=vocabulary)


# -- persistence ---------------------------------------------------------

def _pack_strings(strings: Sequence[str]) -> bytes:
    parts = []
    for s in strings:
        raw = s.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def _serialize(index: InvertedIndex) -> bytes:
    flags = (_FLAG_TF if index.term_frequency else 0) | (_FLAG_VOCAB if index.vocabulary else 0)
    body = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, flags, index.vocab_size, index.num_docs, index.total_postings),
        _pack_strings(index.doc_ids),
        index.doc_lengths.astype("<i8").tobytes(),
        index.offsets.astype("<i8").tobytes(),
        index.post_docs.astype("<i4").tobytes(),
        index.post_impacts.astype("<f4").tobytes(),
        index.max_impacts.astype("<f4").tobytes(),
    ]
    if index.vocabulary is not None:
        body.append(_pack_strings(index.vocabulary.tokens))
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_index(index: InvertedIndex, path: PathLike) -> None:
    atomic_write_bytes(path, _serialize(index))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated index file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def strings(self, count: int) -> List[str]:
        out = []
        for _ in range(count):
            (n,) = struct.unpack("<I", self.take(4))
            out.append(self.take(n).decode("utf-8"))
        return out


def index_from_bytes(data: bytes, source: str = "<bytes>") -> InvertedIndex:
    expected = f"expected sparselab index format version {FORMAT_VERSION}"
    if len(data) < _HEADER.size or data[:8] != MAGIC:
        raise FormatError(f"{source}: not a sparselab index (bad magic header); {expected}")
    _, version, flags, vocab_size, n_docs, n_post = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: index format version {version}; {expected}")
    if len(data) < _HEADER.size + 4:
        raise FormatError(f"{source}: truncated index file")
    blob, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(blob) != crc:
        raise FormatError(f"{source}: checksum mismatch (truncated or corrupt index file)")
    r = _Reader(blob, source)
    r.pos = _HEADER.size
    doc_ids = r.strings(n_docs)
    doc_lengths = r.array("<i8", n_docs)
    offsets = r.array("<i8", vocab_size + 1)
    post_docs = r.array("<i4", n_post)
    post_impacts = r.array("<f4", n_post)
    r.array("<f4", vocab_size)  # max impacts are recomputed from the postings
    vocabulary = Vocabulary(r.strings(vocab_size)) if flags & _FLAG_VOCAB else None
    if r.pos != len(blob):
        raise FormatError(f"{source}: trailing bytes after index payload")
    if offsets[0] != 0 or offsets[-1] != n_post or np.any(np.diff(offsets) < 0):
        raise FormatError(f"{source}: inconsistent posting offsets")
    return InvertedIndex(
        doc_ids, doc_lengths, offsets, post_docs, post_impacts, vocab_size,
        term_frequency=bool(flags & _FLAG_TF), vocabulary=vocabulary,
    )


def load_index(path: PathLike) -> InvertedIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    return index_from_bytes(data, str(path))
