import os

import numpy as np
import pytest

from sparselab.benchmark import (
    LatencySample,
    LookupEncoder,
    SpladeDocEncoder,
    aggregate,
    bench_latency,
    bench_qps,
    order_statistic,
)
from sparselab.errors import ContractViolation
from sparselab.retrieval import retrieve_maxscore
from sparselab.synthetic import random_impact_index, random_impact_vectors

CPUS = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


@pytest.fixture(scope="module")
def setup():
    index = random_impact_index(3, 20_000, vocab_size=512, mean_nnz=24)
    vecs = random_impact_vectors(np.random.default_rng(4), 40, 512, 8)
    queries = [(f"q{i}", f"q{i}") for i in range(len(vecs))]
    return index, queries, LookupEncoder({f"q{i}": v for i, v in enumerate(vecs)})


class TestAggregate:
    def test_order_statistics(self):
        samples = [LatencySample(str(i), 0, i * 1000) for i in range(1, 101)]
        report = aggregate(samples)
        assert report.p99_ms == 99.0 and report.p50_ms == 50.0
        assert report.mean_ms == pytest.approx(50.5)
        assert report.qps is None

    def test_small_sets(self):
        assert order_statistic([5.0], 0.99) == 5.0
        assert order_statistic([3.0, 1.0], 0.5) == 1.0

    def test_total_is_exact_sum(self):
        s = LatencySample("q", 17, 25)
        assert s.total_us == 42

    def test_qps_from_wall(self):
        samples = [LatencySample(str(i), 0, 1000) for i in range(10)]
        assert aggregate(samples, workers=2, wall_seconds=0.5).qps == 20.0

    def test_summary_line(self):
        report = aggregate([LatencySample("a", 1000, 1000)], workers=1, wall_seconds=0.002)
        assert report.summary_line() == "2.000000,2.000000,2.000000,500.000,1"
        assert report.to_csv().splitlines()[-1] == report.summary_line()

    def test_empty(self):
        with pytest.raises(ContractViolation):
            aggregate([])


class TestLatency:
    def test_lookup_encoder_is_cheap(self, setup):
        index, queries, enc = setup
        report = bench_latency(index, queries, enc, warmup=1, repetitions=3)
        assert len(report.samples) == 3 * len(queries)
        assert report.mean_encode_ms < report.mean_retrieve_ms

    def test_hits_match_plain_retrieval(self, setup):
        index, queries, enc = setup
        report = bench_latency(index, queries, enc, warmup=0, repetitions=1)
        for qid, payload in queries:
            assert report.runs[qid].as_pairs() == retrieve_maxscore(index, enc(payload), 10, qid).as_pairs()

    def test_empty_queries(self, setup):
        with pytest.raises(ContractViolation):
            bench_latency(setup[0], [], setup[2])

    def test_splade_doc_encoder(self):
        enc = SpladeDocEncoder(10, drop_ids=[2])
        assert enc([1, 2, 5, 5]).to_dict() == {1: 1.0, 5: 1.0}


class TestQps:
    @pytest.mark.parametrize("backend", ["thread", "process"])
    def test_single_worker_consistent(self, setup, backend):
        index, queries, enc = setup
        report = bench_qps(index, queries, enc, workers=1, repetitions=3, backend=backend)
        assert report.workers == 1
        assert report.qps == pytest.approx(1000.0 / report.mean_ms, rel=0.2)

    def test_hits_identical_across_workers(self, setup):
        index, queries, enc = setup
        one = bench_qps(index, queries, enc, workers=1, repetitions=1)
        many = bench_qps(index, queries, enc, workers=4, repetitions=1)
        assert {q: r.as_pairs() for q, r in one.runs.items()} == {q: r.as_pairs() for q, r in many.runs.items()}

    @pytest.mark.skipif(CPUS < 2, reason="needs a multi-core host")
    def test_two_workers_not_slower(self, setup):
        index, queries, enc = setup
        one = bench_qps(index, queries, enc, workers=1, repetitions=5)
        two = bench_qps(index, queries, enc, workers=2, repetitions=5)
        assert two.qps >= 0.9 * one.qps

    def test_workers_must_be_positive(self, setup):
        with pytest.raises(ContractViolation):
            bench_qps(setup[0], setup[1], setup[2], workers=0)
