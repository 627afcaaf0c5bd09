"""Sparse term-weight vectors over an integer vocabulary.

A :class:`SparseVector` is the common currency of the library: encoded
queries, encoded documents and term-frequency bags all use it.  Weights are
stored as float32; every score computed from them is accumulated in float64,
adding one product at a time in ascending term order.  Because the product of
two float32 values is exact in float64, any two code paths that follow that
order produce bit-identical scores.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._io import PathLike, atomic_write_text
from .errors import ContractViolation, FormatError

DEFAULT_VOCAB_SIZE = 1024

# Lucene's classic English stop set.
ENGLISH_STOP_WORDS = (
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "if",
    "in", "into", "is", "it", "no", "not", "of", "on", "or", "such", "that",
    "the", "their", "then", "there", "these", "they", "this", "to", "was",
    "will", "with",
)

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Lowercase ``text`` and split it into word tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Immutable sparse vector with strictly increasing term ids and positive weights."""

    terms: np.ndarray
    weights: np.ndarray
    vocab_size: int

    def __post_init__(self):
        terms = np.ascontiguousarray(self.terms, dtype=np.int32)
        weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if terms.ndim != 1 or terms.shape != weights.shape:
            raise ContractViolation("terms and weights must be 1-d arrays of equal length")
        if self.vocab_size <= 0:
            raise ContractViolation(f"vocab_size must be positive, got {self.vocab_size}")
        if terms.size:
            if terms[0] < 0 or terms[-1] >= self.vocab_size:
                raise ContractViolation(
                    f"term ids must lie in [0, {self.vocab_size}), got range "
                    f"[{terms.min()}, {terms.max()}]"
                )
            if np.any(np.diff(terms) <= 0):
                raise ContractViolation("term ids must be strictly increasing")
            if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
                raise ContractViolation("stored weights must be finite and positive")
        terms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "weights", weights)

    # -- construction -------------------------------------------------
    @classmethod
    def from_pairs(
        cls, pairs: Iterable[Tuple[int, float]], vocab_size: int = DEFAULT_VOCAB_SIZE
    ) -> "SparseVector":
        """Build from ``(term, weight)`` pairs in any order.

        Zero weights are dropped, negative weights and duplicate terms raise.
        """
        pairs = list(pairs)
        if not pairs:
            return cls.empty(vocab_size)
        terms = np.array([int(t) for t, _ in pairs], dtype=np.int64)
        weights = np.array([float(w) for _, w in pairs], dtype=np.float64)
        return cls._from_arrays(terms, weights, vocab_size)

    @classmethod
    def from_dict(
        cls, mapping: Mapping[int, float], vocab_size: int = DEFAULT_VOCAB_SIZE
    ) -> "SparseVector":
        return cls.from_pairs(mapping.items(), vocab_size)

    @classmethod
    def from_dense(cls, dense: Sequence[float]) -> "SparseVector":
        """Sparsify a dense non-negative array; its length is the vocabulary size."""
        arr = np.asarray(dense, dtype=np.float64)
        if arr.ndim != 1:
            raise ContractViolation("dense input must be 1-d")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ContractViolation("weights must be finite and non-negative")
        w32 = arr.astype(np.float32)
        nz = np.flatnonzero(w32)
        return cls(nz, w32[nz], int(arr.size))

    @classmethod
    def empty(cls, vocab_size: int = DEFAULT_VOCAB_SIZE) -> "SparseVector":
        return cls(np.empty(0, np.int32), np.empty(0, np.float32), vocab_size)

    @classmethod
    def _from_arrays(cls, terms: np.ndarray, weights: np.ndarray, vocab_size: int) -> "SparseVector":
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ContractViolation("weights must be finite and non-negative")
        order = np.argsort(terms, kind="stable")
        terms, weights = terms[order], weights[order].astype(np.float32)
        if terms.size > 1 and np.any(terms[1:] == terms[:-1]):
            raise ContractViolation("duplicate term ids")
        keep = weights > 0
        return cls(terms[keep], weights[keep], vocab_size)

    # -- views -------------------------------------------------------
    @property
    def nnz(self) -> int:
        return int(self.terms.size)

    def items(self) -> Iterator[Tuple[int, float]]:
        return zip(self.terms.tolist(), self.weights.tolist())

    def to_dict(self) -> Dict[int, float]:
        return dict(self.items())

    def densify(self) -> np.ndarray:
        """Dense float32 array of length ``vocab_size``."""
        out = np.zeros(self.vocab_size, dtype=np.float32)
        out[self.terms] = self.weights
        return out

    def scaled(self, factor: float) -> "SparseVector":
        if factor <= 0:
            raise ContractViolation("scale factor must be positive")
        w = (self.weights.astype(np.float64) * factor).astype(np.float32)
        keep = w > 0
        return SparseVector(self.terms[keep], w[keep], self.vocab_size)

    def __len__(self) -> int:
        return self.nnz

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and np.array_equal(self.terms, other.terms)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        body = ", ".join(f"{t}: {w:g}" for t, w in list(self.items())[:8])
        more = ", ..." if self.nnz > 8 else ""
        return f"SparseVector({{{body}{more}}}, vocab_size={self.vocab_size})"


def nnz(v: SparseVector) -> int:
    return v.nnz


def densify(v: SparseVector) -> np.ndarray:
    return v.densify()


def dot(a: SparseVector, b: SparseVector) -> float:
    """Dot product by merging the two sorted term lists."""
    if a.vocab_size != b.vocab_size:
        raise ContractViolation(
            f"vocabulary size mismatch: {a.vocab_size} vs {b.vocab_size}"
        )
    _, ia, ib = np.intersect1d(a.terms, b.terms, assume_unique=True, return_indices=True)
    total = 0.0
    for x, y in zip(a.weights[ia].tolist(), b.weights[ib].tolist()):
        total += x * y
    return total


@dataclass
class Vocabulary:
    """Bijection between surface tokens and term ids."""

    tokens: List[str]
    _lookup: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._lookup = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._lookup) != len(self.tokens):
            raise ContractViolation("vocabulary tokens must be unique")
        if not self.tokens:
            raise ContractViolation("vocabulary must not be empty")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._lookup

    def lookup(self, token: str) -> Optional[int]:
        return self._lookup.get(token)

    def token(self, term: int) -> str:
        return self.tokens[term]

    def ids(self, tokens: Iterable[str]) -> List[int]:
        """Map tokens to ids, silently dropping out-of-vocabulary ones."""
        out = []
        for tok in tokens:
            i = self._lookup.get(tok)
            if i is not None:
                out.append(i)
        return out

    @classmethod
    def synthetic(cls, size: int = DEFAULT_VOCAB_SIZE) -> "Vocabulary":
        """Toy vocabulary: the English stop words first, then ``w0033``-style fillers.

        Placing the stop words at the lowest ids makes them the most frequent
        tokens under the Zipf sampler used for synthetic corpora.
        """
        head = list(ENGLISH_STOP_WORDS[:size])
        tail = [f"w{i:04d}" for i in range(len(head), size)]
        return cls(head + tail)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen))


# -- JSON lines I/O --------------------------------------------------------

def format_weight(w: float) -> str:
    """Shortest decimal that reads back to the same float32."""
    return np.format_float_positional(np.float32(w), unique=True, trim="-")


def vector_to_json(doc_id: str, v: SparseVector) -> str:
    body = ", ".join(f'"{t}": {format_weight(w)}' for t, w in zip(v.terms.tolist(), v.weights))
    return f'{{"id": {json.dumps(doc_id)}, "vector": {{{body}}}}}'


def write_vectors(path: PathLike, items: Iterable[Tuple[str, SparseVector]]) -> None:
    lines = [vector_to_json(i, v) for i, v in items]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def iter_vectors(path: PathLike, vocab_size: int = DEFAULT_VOCAB_SIZE) -> Iterator[Tuple[str, SparseVector]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ident = str(obj["id"])
                pairs = [(int(k), float(w)) for k, w in obj["vector"].items()]
                yield ident, SparseVector.from_pairs(pairs, vocab_size)
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad vector line ({exc})") from exc


def read_vectors(path: PathLike, vocab_size: int = DEFAULT_VOCAB_SIZE) -> List[Tuple[str, SparseVector]]:
    return list(iter_vectors(path, vocab_size))
