"""Ranked result lists and the TREC run file format."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

from ._io import PathLike, atomic_write_text
from .errors import FormatError


@dataclass(frozen=True)
class ScoredDoc:
    doc: str
    score: float
    rank: int


@dataclass
class RunList:
    """Top-k hits for one query; ranks are 1..n with non-increasing scores."""

    query_id: str
    hits: List[ScoredDoc] = field(default_factory=list)
    k: int = 1000

    @classmethod
    def from_ranked(cls, query_id: str, ranked: Sequence[Tuple[str, float]], k: int) -> "RunList":
        hits = [ScoredDoc(d, float(s), r) for r, (d, s) in enumerate(ranked[:k], 1)]
        return cls(query_id, hits, k)

    def docs(self) -> List[str]:
        return [h.doc for h in self.hits]

    def scores(self) -> List[float]:
        return [h.score for h in self.hits]

    def as_pairs(self) -> List[Tuple[str, float]]:
        return [(h.doc, h.score) for h in self.hits]

    def truncated(self, depth: int) -> "RunList":
        return RunList(self.query_id, self.hits[:depth], min(self.k, depth))

    def __len__(self) -> int:
        return len(self.hits)


def format_run(runs: Iterable[RunList], tag: str = "sparselab") -> str:
    lines = []
    for run in runs:
        for h in run.hits:
            lines.append(f"{run.query_id} Q0 {h.doc} {h.rank} {h.score:.6f} {tag}\n")
    return "".join(lines)


def write_run(path: PathLike, runs: Iterable[RunList], tag: str = "sparselab") -> None:
    atomic_write_text(path, format_run(runs, tag))


def parse_run(text: str, source: str = "<run>") -> Dict[str, RunList]:
    """Parse TREC run lines.  Hits are ordered by the rank column."""
    raw: Dict[str, List[Tuple[int, str, float]]] = {}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{source}:{lineno}: expected 6 fields 'qid Q0 docid rank score tag'")
        qid, _, doc, rank, score, _ = parts
        try:
            rank_i, score_f = int(rank), float(score)
        except ValueError:
            raise FormatError(f"{source}:{lineno}: bad rank or score") from None
        if (qid, doc) in seen:
            raise FormatError(f"{source}:{lineno}: duplicate document {doc!r} for query {qid!r}")
        seen.add((qid, doc))
        raw.setdefault(qid, []).append((rank_i, doc, score_f))
    runs = {}
    for qid, rows in raw.items():
        rows.sort(key=lambda r: r[0])
        hits = [ScoredDoc(doc, score, rank) for rank, doc, score in rows]
        runs[qid] = RunList(qid, hits, max(len(hits), 1))
    return runs


def read_run(path: PathLike) -> Dict[str, RunList]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run(fh.read(), str(path))
