"""Seeded synthetic corpora: the distillation task and benchmark collections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .index import InvertedIndex, build_index
from .retrieval import BM25Params, bm25_scores
from .sparse import SparseVector, Vocabulary

ZIPF_EXPONENT = 1.0


def zipf_probabilities(vocab_size: int, exponent: float = ZIPF_EXPONENT) -> np.ndarray:
    p = 1.0 / np.arange(1, vocab_size + 1, dtype=np.float64) ** exponent
    return p / p.sum()


def _tf_vector(tokens: np.ndarray, vocab_size: int) -> SparseVector:
    terms, counts = np.unique(tokens, return_counts=True)
    return SparseVector(terms, counts.astype(np.float32), vocab_size)


@dataclass
class TrainingBatch:
    """Queries, the distinct documents they are scored against, and teacher scores.

    ``candidates[i, j]`` indexes ``documents``: query ``i``'s ``j``-th
    candidate.  Storing each document once lets candidates be shared between
    queries without encoding them twice.
    """

    queries: List[np.ndarray]
    documents: List[np.ndarray]
    candidates: np.ndarray  # (B, m) indices into ``documents``
    teacher_scores: np.ndarray  # (B, m)

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        if self.teacher_scores.ndim != 2 or self.teacher_scores.shape[1] < 2:
            raise ValueError("each query needs at least two candidates")
        if len(self.queries) != self.teacher_scores.shape[0]:
            raise ValueError("one row of teacher scores per query")
        if self.candidates.shape != self.teacher_scores.shape:
            raise ValueError("candidates and teacher scores must have the same shape")
        if self.candidates.size and (self.candidates.min() < 0 or self.candidates.max() >= len(self.documents)):
            raise ValueError("candidate index out of range")

    @classmethod
    def from_lists(cls, queries, candidates: Sequence[Sequence[np.ndarray]], teacher_scores) -> "TrainingBatch":
        """Build from per-query candidate token sequences (no sharing)."""
        docs = [d for cands in candidates for d in cands]
        m = len(candidates[0]) if candidates else 0
        index = np.arange(len(docs), dtype=np.int64).reshape(len(candidates), m)
        return cls(list(queries), docs, index, np.asarray(teacher_scores, dtype=np.float64))


@dataclass
class SyntheticTask:
    """Documents, queries and BM25 teacher scores for toy distillation."""

    seed: int
    vocabulary: Vocabulary
    doc_ids: List[str]
    docs: List[np.ndarray]
    bm25_index: InvertedIndex
    train_queries: List[np.ndarray]
    train_sources: np.ndarray
    candidates: np.ndarray  # (n_train, m) internal doc ids, source first
    teacher_scores: np.ndarray  # (n_train, m)
    heldout_ids: List[str]
    heldout_queries: List[np.ndarray]
    qrels: Dict[str, Dict[str, int]]
    bm25: BM25Params = BM25Params()

    @property
    def vocab_size(self) -> int:
        return self.vocabulary.size

    def batch(self, query_rows: Sequence[int], in_batch_negatives: bool = False) -> TrainingBatch:
        """Training batch for the given query rows.

        With ``in_batch_negatives`` every query is scored against the union of
        the batch's candidate lists, teacher scores included, so each query
        sees ``B * m`` candidates for the encoding cost of ``B * m`` documents.
        """
        rows = np.asarray(query_rows, dtype=np.int64)
        cand = self.candidates[rows]
        if not in_batch_negatives:
            docs = [self.docs[d] for d in cand.ravel()]
            index = np.arange(cand.size, dtype=np.int64).reshape(cand.shape)
            return TrainingBatch([self.train_queries[r] for r in rows], docs, index, self.teacher_scores[rows])
        # Keep each query's source first in the shared pool order.
        pool = list(dict.fromkeys(cand[:, 0].tolist() + cand[:, 1:].ravel().tolist()))
        pool_arr = np.asarray(pool, dtype=np.int64)
        teacher = np.stack([
            bm25_scores(self.bm25_index, self.train_queries[r].tolist(), pool_arr, self.bm25) for r in rows
        ])
        index = np.broadcast_to(np.arange(len(pool)), teacher.shape)
        return TrainingBatch([self.train_queries[r] for r in rows], [self.docs[d] for d in pool], index, teacher)

    def texts(self) -> List[Tuple[str, str]]:
        vocab = self.vocabulary
        return [(i, " ".join(vocab.token(t) for t in d)) for i, d in zip(self.doc_ids, self.docs)]

    def heldout_texts(self) -> List[Tuple[str, str]]:
        vocab = self.vocabulary
        return [(i, " ".join(vocab.token(t) for t in q)) for i, q in zip(self.heldout_ids, self.heldout_queries)]


def build_synthetic_task(
    seed: int,
    vocab_size: int = 1024,
    num_docs: int = 2000,
    num_queries: int = 200,
    *,
    num_heldout: int = 200,
    candidates: int = 8,
    doc_length: Tuple[int, int] = (12, 32),
    query_length: Tuple[int, int] = (2, 5),
    bm25: BM25Params = BM25Params(),
) -> SyntheticTask:
    """Zipf-distributed token documents with queries drawn from a source document.

    Each query samples distinct tokens of one source document, which is its
    relevant document.  Training candidates are the source (a guaranteed
    lexical match) followed by ``candidates - 1`` other documents drawn at
    random; the teacher scores them with BM25 over the whole collection.
    """
    if min(vocab_size, num_docs, num_queries) < 1:
        raise ValueError("sizes must be >= 1")
    if candidates < 2:
        raise ValueError("need at least two candidates per query")
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.synthetic(vocab_size)
    probs = zipf_probabilities(vocab_size)
    lengths = rng.integers(doc_length[0], doc_length[1] + 1, size=num_docs)
    docs = [rng.choice(vocab_size, size=int(n), p=probs).astype(np.int64) for n in lengths]
    doc_ids = [f"D{i:05d}" for i in range(num_docs)]
    index = build_index(
        [(d, _tf_vector(t, vocab_size)) for d, t in zip(doc_ids, docs)],
        term_frequency=True,
        vocabulary=vocab,
    )

    def make_query(source: int) -> np.ndarray:
        distinct = np.unique(docs[source])
        n = int(rng.integers(query_length[0], query_length[1] + 1))
        return rng.choice(distinct, size=min(n, distinct.size), replace=False).astype(np.int64)

    total = num_queries + num_heldout
    sources = rng.integers(0, num_docs, size=total)
    queries = [make_query(int(s)) for s in sources]

    m = min(candidates, num_docs)
    if m < 2:
        raise ValueError("need at least two documents for candidate lists")
    cand = np.empty((num_queries, m), dtype=np.int64)
    teacher = np.empty((num_queries, m), dtype=np.float64)
    for i in range(num_queries):
        src = int(sources[i])
        others = rng.choice(num_docs - 1, size=m - 1, replace=False)
        others = others + (others >= src)
        cand[i, 0] = src
        cand[i, 1:] = others
        teacher[i] = bm25_scores(index, queries[i].tolist(), cand[i], bm25)

    heldout_ids = [f"Q{i:05d}" for i in range(num_heldout)]
    qrels = {qid: {doc_ids[int(sources[num_queries + i])]: 1} for i, qid in enumerate(heldout_ids)}
    return SyntheticTask(
        seed=seed,
        vocabulary=vocab,
        doc_ids=doc_ids,
        docs=docs,
        bm25_index=index,
        train_queries=queries[:num_queries],
        train_sources=sources[:num_queries].copy(),
        candidates=cand,
        teacher_scores=teacher,
        heldout_ids=heldout_ids,
        heldout_queries=queries[num_queries:],
        qrels=qrels,
        bm25=bm25,
    )


# -- benchmark collections -------------------------------------------------

def random_impact_vectors(
    rng: np.random.Generator, count: int, vocab_size: int, mean_nnz: float, *, spread: float = 0.5
) -> List[SparseVector]:
    """Random sparse vectors with roughly ``mean_nnz`` terms drawn uniformly."""
    lo = max(1, int(round(mean_nnz * (1 - spread))))
    hi = max(lo, int(round(mean_nnz * (1 + spread))))
    hi = min(hi, vocab_size)
    lo = min(lo, hi)
    out = []
    for n in rng.integers(lo, hi + 1, size=count):
        terms = np.sort(rng.choice(vocab_size, size=int(n), replace=False))
        weights = rng.uniform(0.05, 3.0, size=terms.size).astype(np.float32)
        out.append(SparseVector(terms, weights, vocab_size))
    return out


def random_impact_index(
    seed: int, num_docs: int, vocab_size: int = 1024, mean_nnz: float = 16, chunk: int = 4096
) -> InvertedIndex:
    """Impact index over uniformly random document vectors, built in bulk."""
    rng = np.random.default_rng(seed)
    lo, hi = max(1, int(mean_nnz // 2)), min(vocab_size, max(1, int(mean_nnz * 3 // 2)))
    counts = rng.integers(lo, hi + 1, size=num_docs)
    term_parts, doc_parts = [], []
    for start in range(0, num_docs, chunk):
        stop = min(num_docs, start + chunk)
        # Ranking random keys gives distinct terms per doc without a Python loop.
        picks = np.argsort(rng.random((stop - start, vocab_size)), axis=1)[:, :hi]
        keep = np.arange(hi)[None, :] < counts[start:stop, None]
        picks = np.sort(np.where(keep, picks, vocab_size), axis=1)
        docs = np.broadcast_to(np.arange(start, stop)[:, None], picks.shape)
        valid = picks < vocab_size
        term_parts.append(picks[valid])
        doc_parts.append(docs[valid])
    flat_terms = np.concatenate(term_parts)
    flat_docs = np.concatenate(doc_parts).astype(np.int32)
    weights = rng.uniform(0.05, 3.0, size=flat_terms.size).astype(np.float32)
    order = np.argsort(flat_terms, kind="stable")
    offsets = np.zeros(vocab_size + 1, dtype=np.int64)
    np.cumsum(np.bincount(flat_terms, minlength=vocab_size), out=offsets[1:])
    return InvertedIndex(
        [f"B{i:06d}" for i in range(num_docs)],
        counts.astype(np.int64),
        offsets,
        flat_docs[order],
        weights[order],
        vocab_size,
    )
