"""Latency and throughput measurement for query encoding plus retrieval.

Per-query latency is ``encode + retrieve`` in integer microseconds from a
monotonic clock.  Single-worker latency runs stay on the calling thread;
throughput runs start ``workers`` workers that pull query slots from one
shared counter.
"""

from __future__ import annotations

import csv
import io
import math
import multiprocessing as mp
import os
import platform
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .encoder import EncoderParams, QueryEncoder
from .errors import ContractViolation
from .index import InvertedIndex
from .retrieval import get_retriever, uniform_query
from .runs import RunList
from .sparse import SparseVector

QueryInput = Tuple[str, object]  # (query id, encoder payload)
Encoder = Callable[[object], SparseVector]


@dataclass(frozen=True)
class LatencySample:
    query_id: str
    encode_us: int
    retrieve_us: int

    @property
    def total_us(self) -> int:
        return self.encode_us + self.retrieve_us


def order_statistic(values: Sequence[float], q: float) -> float:
    """Value at the ``ceil(q * n)``-th smallest position (1-based)."""
    if not values:
        raise ContractViolation("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def host_description() -> str:
    cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{cpus}; python {platform.python_version()}"


@dataclass
class LatencyReport:
    samples: List[LatencySample]
    mean_ms: float
    p50_ms: float
    p99_ms: float
    mean_encode_ms: float
    mean_retrieve_ms: float
    workers: int = 1
    qps: Optional[float] = None
    wall_seconds: Optional[float] = None
    environment: str = ""
    runs: Dict[str, RunList] = field(default_factory=dict, repr=False)

    def summary_line(self) -> str:
        qps = "" if self.qps is None else f"{self.qps:.3f}"
        return f"{self.mean_ms:.6f},{self.p50_ms:.6f},{self.p99_ms:.6f},{qps},{self.workers}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "encode_us", "retrieve_us", "total_us"])
        for s in self.samples:
            w.writerow([s.query_id, s.encode_us, s.retrieve_us, s.total_us])
        w.writerow([])
        w.writerow(["# summary"])
        w.writerow(["mean_encode_ms", f"{self.mean_encode_ms:.6f}"])
        w.writerow(["mean_retrieve_ms", f"{self.mean_retrieve_ms:.6f}"])
        w.writerow(["environment", self.environment])
        w.writerow(["mean_ms", "p50_ms", "p99_ms", "qps", "workers"])
        buf.write(self.summary_line() + "\n")
        return buf.getvalue()


def aggregate(
    samples: Sequence[LatencySample],
    workers: int = 1,
    wall_seconds: Optional[float] = None,
    environment: str = "",
) -> LatencyReport:
    """Summary statistics of latency samples; QPS only for multi-worker runs with a wall clock."""
    if not samples:
        raise ContractViolation("no latency samples")
    totals = [s.total_us / 1000.0 for s in samples]
    n = len(samples)
    qps = n / wall_seconds if wall_seconds else None
    return LatencyReport(
        samples=list(samples),
        mean_ms=sum(totals) / n,
        p50_ms=order_statistic(totals, 0.50),
        p99_ms=order_statistic(totals, 0.99),
        mean_encode_ms=sum(s.encode_us for s in samples) / n / 1000.0,
        mean_retrieve_ms=sum(s.retrieve_us for s in samples) / n / 1000.0,
        workers=workers,
        qps=qps,
        wall_seconds=wall_seconds,
        environment=environment,
    )


# -- query encoders -------------------------------------------------------------

class LookupEncoder:
    """Pre-encoded query vectors keyed by query id: encoding is a table read."""

    def __init__(self, vectors: Mapping[str, SparseVector]):
        self.vectors = dict(vectors)

    def __call__(self, payload) -> SparseVector:
        return self.vectors[payload]


class SpladeDocEncoder:
    """Uniform-weight bag of query term ids, optionally without stop-word ids."""

    def __init__(self, vocab_size: int, drop_ids: Sequence[int] = ()):
        self.vocab_size = vocab_size
        self.drop = frozenset(int(t) for t in drop_ids)

    def __call__(self, payload) -> SparseVector:
        return uniform_query((t for t in payload if t not in self.drop), self.vocab_size)


def toy_encoder(params: EncoderParams) -> Encoder:
    return QueryEncoder(params)


# -- measurement --------------------------------------------------------------------

def _now_us() -> int:
    return time.monotonic_ns() // 1000


def _timed(index, retrieve, encoder, k, qid, payload) -> Tuple[LatencySample, RunList]:
    t0 = _now_us()
    vec = encoder(payload)
    t1 = _now_us()
    run = retrieve(index, vec, k, qid)
    t2 = _now_us()
    return LatencySample(qid, t1 - t0, t2 - t1), run


def _resolve(retriever):
    return get_retriever(retriever) if isinstance(retriever, str) else retriever


def bench_latency(
    index: InvertedIndex,
    queries: Sequence[QueryInput],
    encoder: Encoder,
    retriever="maxscore",
    k: int = 10,
    warmup: int = 10,
    repetitions: int = 3,
) -> LatencyReport:
    """Single-threaded latency: ``warmup`` untimed passes then ``repetitions`` timed ones."""
    if not queries:
        raise ContractViolation("empty query set")
    if warmup < 0 or repetitions < 1:
        raise ContractViolation("warmup must be >= 0 and repetitions >= 1")
    retrieve = _resolve(retriever)
    for _ in range(warmup):
        for qid, payload in queries:
            retrieve(index, encoder(payload), k, qid)
    samples, runs = [], {}
    for rep in range(repetitions):
        for qid, payload in queries:
            sample, run = _timed(index, retrieve, encoder, k, qid, payload)
            samples.append(sample)
            if rep == 0:
                runs[qid] = run
    report = aggregate(samples, workers=1, environment=host_description())
    report.runs = runs
    return report


def _worker_loop(index, retrieve, encoder, k, queries, total, claim, start_gate):
    start_gate()
    samples, runs = [], {}
    began = _now_us()
    n = len(queries)
    while True:
        slot = claim()
        if slot >= total:
            break
        qid, payload = queries[slot % n]
        sample, run = _timed(index, retrieve, encoder, k, qid, payload)
        samples.append(sample)
        if slot < n:
            runs[qid] = run
    return samples, runs, began, _now_us()


# Process workers inherit these through fork instead of pickling the index.
_FORK_STATE: dict = {}


def _process_main(result_queue, counter, barrier):
    st = _FORK_STATE

    def claim():
        with counter.get_lock():
            slot = counter.value
            counter.value += 1
        return slot

    out = _worker_loop(st["index"], st["retrieve"], st["encoder"], st["k"], st["queries"],
                       st["total"], claim, barrier.wait)
    result_queue.put(out)


def bench_qps(
    index: InvertedIndex,
    queries: Sequence[QueryInput],
    encoder: Encoder,
    retriever="maxscore",
    k: int = 10,
    workers: int = 128,
    repetitions: int = 3,
    warmup: int = 1,
    backend: str = "auto",
) -> LatencyReport:
    """Multi-worker throughput.  ``workers`` is capped at the host's CPU count.

    ``backend`` is ``"process"`` (forked workers, real parallelism),
    ``"thread"`` or ``"auto"`` (process when fork is available).
    """
    if workers < 1:
        raise ContractViolation("workers must be >= 1")
    if not queries:
        raise ContractViolation("empty query set")
    cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    workers = min(workers, cpus)
    retrieve = _resolve(retriever)
    if backend == "auto":
        backend = "process" if "fork" in mp.get_all_start_methods() else "thread"
    for _ in range(warmup):
        for qid, payload in queries:
            retrieve(index, encoder(payload), k, qid)
    queries = list(queries)
    total = len(queries) * repetitions

    if backend == "thread":
        lock = threading.Lock()
        counter = [0]

        def claim():
            with lock:
                slot = counter[0]
                counter[0] += 1
            return slot

        barrier = threading.Barrier(workers)
        results: List = [None] * workers

        def run_one(i):
            results[i] = _worker_loop(index, retrieve, encoder, k, queries, total, claim, barrier.wait)

        threads = [threading.Thread(target=run_one, args=(i,)) for i in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elif backend == "process":
        ctx = mp.get_context("fork")
        _FORK_STATE.update(index=index, retrieve=retrieve, encoder=encoder, k=k, queries=queries, total=total)
        try:
            counter = ctx.Value("q", 0)
            barrier = ctx.Barrier(workers)
            result_queue = ctx.Queue()
            procs = [ctx.Process(target=_process_main, args=(result_queue, counter, barrier)) for _ in range(workers)]
            for p in procs:
                p.start()
            results = [result_queue.get() for _ in procs]
            for p in procs:
                p.join()
        finally:
            _FORK_STATE.clear()
    else:
        raise ContractViolation(f"unknown backend {backend!r}")

    samples: List[LatencySample] = []
    runs: Dict[str, RunList] = {}
    for s, r, _, _ in results:
        samples.extend(s)
        runs.update(r)
    began = min(r[2] for r in results)
    ended = max(r[3] for r in results)
    wall = max(ended - began, 1) / 1e6
    report = aggregate(samples, workers=workers, wall_seconds=wall, environment=host_description())
    report.runs = runs
    return report
