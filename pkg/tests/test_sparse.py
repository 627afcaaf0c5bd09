import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparselab.errors import ContractViolation, FormatError
from sparselab.sparse import (
    SparseVector,
    Vocabulary,
    densify,
    dot,
    nnz,
    read_vectors,
    tokenize,
    write_vectors,
)


def sv(d, vocab=8):
    return SparseVector.from_dict(d, vocab)


class TestDot:
    def test_hand_example(self):
        assert dot(sv({1: 2.0, 3: 1.0}), sv({1: 3.0, 2: 5.0})) == 6.0

    def test_disjoint(self):
        assert dot(sv({1: 2.0}), sv({2: 5.0})) == 0.0

    def test_empty(self):
        assert dot(sv({}), sv({1: 7.0})) == 0.0

    def test_vocab_mismatch(self):
        with pytest.raises(ContractViolation):
            dot(sv({1: 1.0}, 8), sv({1: 1.0}, 9))

    @given(st.lists(st.floats(0, 10, width=32), min_size=6, max_size=6),
           st.lists(st.floats(0, 10, width=32), min_size=6, max_size=6))
    def test_symmetric_and_matches_dense(self, a, b):
        va, vb = SparseVector.from_dense(a), SparseVector.from_dense(b)
        assert dot(va, vb) == dot(vb, va)
        expected = 0.0
        for x, y in zip(np.float32(a).tolist(), np.float32(b).tolist()):
            expected += x * y
        assert dot(va, vb) == expected


class TestNnzAndDensify:
    def test_nnz(self):
        assert nnz(sv({})) == 0
        assert nnz(sv({1: 2.0, 3: 1.0})) == 2

    def test_zeros_dropped(self):
        assert nnz(SparseVector.from_dense([0, 0.5, 0, 1.2])) == 2

    def test_densify(self):
        assert densify(sv({}, 3)).tolist() == [0, 0, 0]
        assert densify(sv({0: 1.5}, 2)).tolist() == [1.5, 0]

    @given(st.lists(st.floats(0, 1e6, width=32), min_size=1, max_size=40))
    def test_round_trip(self, xs):
        x = np.asarray(xs, dtype=np.float32)
        assert np.array_equal(densify(SparseVector.from_dense(x)), x)


class TestConstruction:
    def test_negative_weight_rejected(self):
        with pytest.raises(ContractViolation):
            sv({1: -1.0})

    def test_duplicate_term_rejected(self):
        with pytest.raises(ContractViolation):
            SparseVector.from_pairs([(1, 1.0), (1, 2.0)], 8)

    def test_out_of_range_term(self):
        with pytest.raises(ContractViolation):
            sv({8: 1.0}, 8)

    def test_unsorted_raw_arrays_rejected(self):
        with pytest.raises(ContractViolation):
            SparseVector(np.array([3, 1]), np.array([1.0, 1.0]), 8)

    def test_pairs_sorted(self):
        v = SparseVector.from_pairs([(5, 1.0), (2, 3.0)], 8)
        assert v.terms.tolist() == [2, 5]
        assert v.weights.tolist() == [3.0, 1.0]

    def test_immutable(self):
        v = sv({1: 1.0})
        with pytest.raises(ValueError):
            v.weights[0] = 2.0


class TestVocabulary:
    def test_tokenize_lowercases(self):
        assert tokenize("What is THE capital?") == ["what", "is", "the", "capital"]

    def test_ids_drop_unknown(self):
        vocab = Vocabulary(["neural", "search"])
        assert vocab.ids(["search", "zzz", "neural"]) == [1, 0]

    def test_synthetic_is_stable(self):
        a, b = Vocabulary.synthetic(64), Vocabulary.synthetic(64)
        assert a.size == 64
        assert [a.token(i) for i in range(64)] == [b.token(i) for i in range(64)]


class TestVectorFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        items = [(f"d{i}", SparseVector.from_dense(rng.random(50) * (rng.random(50) < 0.2)))
                 for i in range(20)]
        path = tmp_path / "v.jsonl"
        write_vectors(path, items)
        back = read_vectors(path, 50)
        assert [d for d, _ in back] == [d for d, _ in items]
        assert all(a == b for (_, a), (_, b) in zip(items, back))

    def test_malformed_line_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "vector": {"1": 1.0}}\nnot json\n')
        with pytest.raises(FormatError, match=":2"):
            read_vectors(path, 8)
