"""MRR@k and nDCG@k over TREC runs and qrels."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

from ._io import PathLike, atomic_write_text
from .errors import FormatError
from .runs import RunList, read_run

Qrels = Dict[str, Dict[str, int]]


def parse_qrels(text: str, source: str = "<qrels>") -> Qrels:
    qrels: Qrels = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{source}:{lineno}: expected 'qid 0 docid grade'")
        qid, _, doc, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise FormatError(f"{source}:{lineno}: grade must be an integer") from None
        if g < 0:
            raise FormatError(f"{source}:{lineno}: negative grade")
        per_q = qrels.setdefault(qid, {})
        if doc in per_q:
            raise FormatError(f"{source}:{lineno}: duplicate judgement for ({qid}, {doc})")
        per_q[doc] = g
    return qrels


def read_qrels(path: PathLike) -> Qrels:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_qrels(fh.read(), str(path))


def format_qrels(qrels: Mapping[str, Mapping[str, int]]) -> str:
    return "".join(f"{q} 0 {d} {g}\n" for q, docs in qrels.items() for d, g in docs.items())


def write_qrels(path: PathLike, qrels: Mapping[str, Mapping[str, int]]) -> None:
    atomic_write_text(path, format_qrels(qrels))


def mrr_at_k(run: RunList, judged: Mapping[str, int], k: int = 10) -> float:
    for rank, hit in enumerate(run.hits[:k], 1):
        if judged.get(hit.doc, 0) >= 1:
            return 1.0 / rank
    return 0.0


def _gain(grade: int, exponential: bool) -> float:
    return (2.0 ** grade - 1.0) if exponential else float(grade)


def ndcg_at_k(run: RunList, judged: Mapping[str, int], k: int = 10, exponential: bool = False) -> float:
    """Linear gain by default (trec_eval convention); ``exponential`` uses 2^g - 1."""
    dcg = 0.0
    for i, hit in enumerate(run.hits[:k], 1):
        g = judged.get(hit.doc, 0)
        if g > 0:
            dcg += _gain(g, exponential) / math.log2(i + 1)
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = sum(_gain(g, exponential) / math.log2(i + 1) for i, g in enumerate(ideal, 1))
    return dcg / idcg if idcg > 0 else 0.0


@dataclass
class QueryScores:
    query_id: str
    mrr: float
    ndcg: float


@dataclass
class EvalReport:
    k: int
    per_query: List[QueryScores] = field(default_factory=list)
    excluded: List[str] = field(default_factory=list)  # run queries without relevant judgements

    @property
    def mean_mrr(self) -> Optional[float]:
        if not self.per_query:
            return None
        return sum(q.mrr for q in self.per_query) / len(self.per_query)

    @property
    def mean_ndcg(self) -> Optional[float]:
        if not self.per_query:
            return None
        return sum(q.ndcg for q in self.per_query) / len(self.per_query)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", f"mrr@{self.k}", f"ndcg@{self.k}"])
        for q in self.per_query:
            w.writerow([q.query_id, f"{q.mrr:.6f}", f"{q.ndcg:.6f}"])
        fmt = lambda x: "n/a" if x is None else f"{x:.6f}"
        w.writerow(["mean", fmt(self.mean_mrr), fmt(self.mean_ndcg)])
        w.writerow(["queries", len(self.per_query), ""])
        w.writerow(["excluded", len(self.excluded), ""])
        return buf.getvalue()


def evaluate_runs(
    runs: Mapping[str, RunList], qrels: Qrels, k: int = 10, exponential_gain: bool = False
) -> EvalReport:
    """Per-query metrics for run queries that have at least one relevant document."""
    report = EvalReport(k)
    for qid in sorted(runs):
        judged = qrels.get(qid, {})
        if not any(g >= 1 for g in judged.values()):
            report.excluded.append(qid)
            continue
        run = runs[qid]
        report.per_query.append(
            QueryScores(qid, mrr_at_k(run, judged, k), ndcg_at_k(run, judged, k, exponential_gain))
        )
    return report


def evaluate_run_file(
    run_path: PathLike, qrels_path: PathLike, k: int = 10, exponential_gain: bool = False
) -> EvalReport:
    return evaluate_runs(read_run(run_path), read_qrels(qrels_path), k, exponential_gain)
