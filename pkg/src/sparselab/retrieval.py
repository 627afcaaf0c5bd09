"""Top-k query processing over an :class:`~sparselab.index.InvertedIndex`.

Every document score is accumulated in float64 by adding ``query_weight *
impact`` products in ascending term-id order, starting from 0.0.  The
exhaustive and MaxScore paths both follow that order, so they agree bit for
bit, and ties are broken by ascending internal doc id in both.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_left
from dataclasses import dataclass
from itertools import repeat
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ._io import PathLike
from .errors import ContractViolation
from .index import InvertedIndex
from .runs import RunList
from .sparse import ENGLISH_STOP_WORDS, SparseVector, Vocabulary

# Upper bounds are summed in a different order than exact scores; inflating
# them by a relative margin keeps pruning safe against rounding.
_BOUND_SLACK = 1.0 + 1e-9

StopWordList = FrozenSet[str]
DEFAULT_STOP_WORDS: StopWordList = frozenset(ENGLISH_STOP_WORDS)


@dataclass(frozen=True)
class BM25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self):
        if not self.k1 > 0:
            raise ContractViolation(f"k1 must be positive, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ContractViolation(f"b must lie in [0, 1], got {self.b}")


def _query_terms(index: InvertedIndex, query: SparseVector) -> List[Tuple[int, float]]:
    if query.vocab_size != index.vocab_size:
        raise ContractViolation(
            f"query vocab_size {query.vocab_size} does not match index vocab_size {index.vocab_size}"
        )
    return [(t, w) for t, w in query.items() if index.df(t)]


def _finish(index: InvertedIndex, heap: List[Tuple[float, int]], query_id: str, k: int) -> RunList:
    ranked = sorted(((-neg_doc, score) for score, neg_doc in heap), key=lambda x: (-x[1], x[0]))
    return RunList.from_ranked(query_id, [(index.doc_ids[d], s) for d, s in ranked], k)


def _offer(heap: List[Tuple[float, int]], k: int, doc: int, score: float) -> None:
    # Docs arrive in ascending id order, so an equal score never displaces.
    if len(heap) < k:
        heapq.heappush(heap, (score, -doc))
    elif score > heap[0][0]:
        heapq.heapreplace(heap, (score, -doc))


def retrieve_exhaustive(index: InvertedIndex, query: SparseVector, k: int, query_id: str = "") -> RunList:
    """Score every document that shares a term with the query (DAAT merge)."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    terms = _query_terms(index, query)
    weights = [w for _, w in terms]
    streams = []
    for i, (t, _) in enumerate(terms):
        docs, imps = index.python_postings(t)
        streams.append(zip(docs, repeat(i), imps))
    heap: List[Tuple[float, int]] = []
    cur, score = -1, 0.0
    # Merge order is (doc, term position): ascending terms within a doc.
    for doc, i, imp in heapq.merge(*streams):
        if doc != cur:
            if cur >= 0:
                _offer(heap, k, cur, score)
            cur, score = doc, 0.0
        score += weights[i] * imp
    if cur >= 0:
        _offer(heap, k, cur, score)
    return _finish(index, heap, query_id, k)


def retrieve_maxscore(index: InvertedIndex, query: SparseVector, k: int, query_id: str = "") -> RunList:
    """Safe MaxScore DAAT top-k retrieval.

    Lists are ordered by their score upper bound ``weight * max_impact``.  The
    lowest-bound prefix whose cumulative bound cannot beat the current k-th
    score is non-essential: candidates are only drawn from the remaining
    lists, and non-essential lists are probed with binary search while the
    candidate can still make the heap.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    terms = _query_terms(index, query)
    n = len(terms)
    if n == 0:
        return RunList(query_id, [], k)
    bounds = [w * float(index.max_impacts[t]) for t, w in terms]
    order = sorted(range(n), key=lambda i: (bounds[i], i))
    docs_l, imps_l, qw, canon = [], [], [], []
    for i in order:
        docs, imps = index.python_postings(terms[i][0])
        docs_l.append(docs)
        imps_l.append(imps)
        qw.append(terms[i][1])
        canon.append(i)
    lens = [len(d) for d in docs_l]
    cum = []
    acc = 0.0
    for i in order:
        acc += bounds[i]
        cum.append(acc * _BOUND_SLACK)

    pos = [0] * n
    contrib = [0.0] * n
    heap: List[Tuple[float, int]] = []
    theta = 0.0
    first_essential = 0
    inf = math.inf
    while True:
        cur = inf
        for p in range(first_essential, n):
            j = pos[p]
            if j < lens[p]:
                d = docs_l[p][j]
                if d < cur:
                    cur = d
        if cur == inf:
            break
        touched = []
        partial = 0.0
        for p in range(first_essential, n):
            j = pos[p]
            if j < lens[p] and docs_l[p][j] == cur:
                c = qw[p] * imps_l[p][j]
                contrib[canon[p]] = c
                touched.append(canon[p])
                partial += c
                pos[p] = j + 1
        pruned = False
        for p in range(first_essential - 1, -1, -1):
            if partial * _BOUND_SLACK + cum[p] <= theta:
                pruned = True
                break
            dl = docs_l[p]
            j = bisect_left(dl, cur, pos[p])
            if j < lens[p] and dl[j] == cur:
                c = qw[p] * imps_l[p][j]
                contrib[canon[p]] = c
                touched.append(canon[p])
                partial += c
                j += 1
            pos[p] = j
        if pruned:
            for c in touched:
                contrib[c] = 0.0
            continue
        touched.sort()
        score = 0.0
        for c in touched:
            score += contrib[c]
            contrib[c] = 0.0
        if len(heap) < k:
            heapq.heappush(heap, (score, -cur))
            if len(heap) < k:
                continue
        elif score > heap[0][0]:
            heapq.heapreplace(heap, (score, -cur))
        else:
            continue
        theta = heap[0][0]
        while first_essential < n and cum[first_essential] <= theta:
            first_essential += 1
    return _finish(index, heap, query_id, k)


def retrieve_taat(index: InvertedIndex, query: SparseVector, k: int, query_id: str = "") -> RunList:
    """Exhaustive term-at-a-time scoring with numpy accumulators.

    Terms are visited in ascending id order, so each document's float64 sum
    matches the DAAT paths exactly.  Fast for dense queries; used for
    evaluation of weakly sparse encoders.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    terms = _query_terms(index, query)
    scores = np.zeros(index.num_docs, dtype=np.float64)
    matched = np.zeros(index.num_docs, dtype=bool)
    for t, w in terms:
        lo, hi = index.offsets[t], index.offsets[t + 1]
        docs = index.post_docs[lo:hi]
        scores[docs] += w * index.post_impacts[lo:hi].astype(np.float64)
        matched[docs] = True
    return _top_k(index, scores, matched, k, query_id)


def _top_k(index: InvertedIndex, scores: np.ndarray, matched: np.ndarray, k: int, query_id: str) -> RunList:
    cand = np.flatnonzero(matched)
    if cand.size > k:
        # Keep everything tied with the k-th score so the id tie-break stays exact.
        kth = np.partition(scores[cand], cand.size - k)[cand.size - k]
        cand = cand[scores[cand] >= kth]
    ranked = cand[np.lexsort((cand, -scores[cand]))][:k]
    return RunList.from_ranked(query_id, [(index.doc_ids[d], float(scores[d])) for d in ranked], k)


RETRIEVERS = {
    "exhaustive": retrieve_exhaustive,
    "maxscore": retrieve_maxscore,
    "taat": retrieve_taat,
}

Retriever = Callable[[InvertedIndex, SparseVector, int, str], RunList]


def get_retriever(name: str) -> Retriever:
    try:
        return RETRIEVERS[name]
    except KeyError:
        raise ContractViolation(f"unknown retrieval mode {name!r}; choose from {sorted(RETRIEVERS)}") from None


# -- BM25 -----------------------------------------------------------------

def bm25_idf(num_docs: int, df: int) -> float:
    return math.log(1.0 + (num_docs - df + 0.5) / (df + 0.5))


def score_bm25(
    index: InvertedIndex,
    query_terms: Sequence[int],
    params: BM25Params = BM25Params(),
    k: int = 1000,
    query_id: str = "",
) -> RunList:
    """Rank documents by Okapi BM25 over a term-frequency index.

    Repeated query terms contribute once per occurrence.
    """
    if not index.term_frequency:
        raise ContractViolation("BM25 scoring needs a term-frequency index")
    if k < 1:
        raise ContractViolation("k must be >= 1")
    n = index.num_docs
    norm = params.k1 * (1.0 - params.b + params.b * index.doc_lengths / index.avg_doc_length)
    scores = np.zeros(n, dtype=np.float64)
    matched = np.zeros(n, dtype=bool)
    for t in query_terms:
        df = index.df(int(t))
        if df == 0:
            continue
        lo, hi = index.offsets[t], index.offsets[t + 1]
        docs = index.post_docs[lo:hi]
        tf = index.post_impacts[lo:hi].astype(np.float64)
        scores[docs] += bm25_idf(n, df) * tf / (tf + norm[docs])
        matched[docs] = True
    return _top_k(index, scores, matched, k, query_id)


def bm25_scores(index: InvertedIndex, query_terms: Sequence[int], docs: Sequence[int],
                params: BM25Params = BM25Params()) -> np.ndarray:
    """BM25 scores of specific internal doc ids (used as teacher scores)."""
    n = index.num_docs
    docs = np.asarray(docs, dtype=np.int64)
    norm = params.k1 * (1.0 - params.b + params.b * index.doc_lengths[docs] / index.avg_doc_length)
    out = np.zeros(docs.size, dtype=np.float64)
    for t in query_terms:
        df = index.df(int(t))
        if df == 0:
            continue
        lo, hi = index.offsets[t], index.offsets[t + 1]
        plist = index.post_docs[lo:hi]
        j = np.searchsorted(plist, docs)
        j_ok = np.minimum(j, plist.size - 1)
        hit = plist[j_ok] == docs
        tf = np.where(hit, index.post_impacts[lo:hi][j_ok], 0.0).astype(np.float64)
        out += bm25_idf(n, df) * tf / (tf + norm)
    return out


# -- query construction -----------------------------------------------------

def load_stopwords(path: PathLike) -> StopWordList:
    """One word per line; blank lines and ``#`` comments ignored."""
    words = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            w = line.split("#", 1)[0].strip().lower()
            if w:
                words.add(w)
    return frozenset(words)


def remove_stop_words(tokens: Iterable[str], stopwords: StopWordList = DEFAULT_STOP_WORDS) -> List[str]:
    return [t for t in tokens if t.lower() not in stopwords]


def splade_doc_query(
    tokens: Iterable[str],
    vocabulary: Vocabulary,
    stopped: bool = False,
    stopwords: StopWordList = DEFAULT_STOP_WORDS,
) -> SparseVector:
    """Query vector with weight 1.0 on every distinct in-vocabulary token."""
    tokens = [t.lower() for t in tokens]
    if stopped:
        tokens = remove_stop_words(tokens, stopwords)
    ids = sorted(set(vocabulary.ids(tokens)))
    return SparseVector(np.array(ids, dtype=np.int32), np.ones(len(ids), np.float32), vocabulary.size)


def uniform_query(term_ids: Iterable[int], vocab_size: int) -> SparseVector:
    ids = sorted(set(int(t) for t in term_ids))
    return SparseVector(np.array(ids, dtype=np.int32), np.ones(len(ids), np.float32), vocab_size)

