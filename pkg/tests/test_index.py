import numpy as np
import pytest

from sparselab.errors import FormatError, IndexBuildError
from sparselab.index import (
    build_index,
    build_tf_index,
    index_from_bytes,
    index_stats,
    load_index,
    save_index,
)
from sparselab.sparse import SparseVector, Vocabulary


def two_doc_index():
    return build_index([
        ("d0", SparseVector.from_dict({1: 2.0}, 4)),
        ("d1", SparseVector.from_dict({1: 1.0, 2: 3.0}, 4)),
    ])


def random_index(seed=0, docs=60, vocab=40):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(docs):
        dense = rng.random(vocab) * (rng.random(vocab) < 0.2)
        items.append((f"doc{i}", SparseVector.from_dense(dense)))
    return build_index(items)


class TestBuild:
    def test_hand_example(self):
        idx = two_doc_index()
        p1, p2 = idx.posting_list(1), idx.posting_list(2)
        assert list(zip(p1.docs.tolist(), p1.impacts.tolist())) == [(0, 2.0), (1, 1.0)]
        assert p1.max_impact == 2.0
        assert list(zip(p2.docs.tolist(), p2.impacts.tolist())) == [(1, 3.0)]
        assert p2.max_impact == 3.0
        assert idx.posting_list(0) is None

    def test_single_empty_doc(self):
        idx = build_index([("only", SparseVector.empty(4))])
        assert idx.num_docs == 1
        assert len(idx.terms()) == 0
        st = index_stats(idx)
        assert (st.num_docs, st.num_terms, st.total_postings, st.mean_doc_nnz) == (1, 0, 0, 0.0)

    def test_stats(self):
        st = index_stats(two_doc_index())
        assert (st.num_docs, st.num_terms, st.total_postings, st.mean_doc_nnz) == (2, 2, 3, 1.5)

    def test_rebuild_is_byte_identical(self):
        assert random_index(3).to_bytes() == random_index(3).to_bytes()

    def test_doc_ids_ascending_in_lists(self):
        idx = random_index(1)
        for t in idx.terms():
            docs = idx.posting_list(int(t)).docs
            assert np.all(np.diff(docs) > 0)

    def test_document_vector_round_trip(self):
        rng = np.random.default_rng(5)
        vecs = [SparseVector.from_dense(rng.random(30) * (rng.random(30) < 0.3)) for _ in range(10)]
        idx = build_index([(f"x{i}", v) for i, v in enumerate(vecs)])
        assert all(idx.document_vector(i) == v for i, v in enumerate(vecs))

    def test_empty_collection_rejected(self):
        with pytest.raises(IndexBuildError):
            build_index([])

    def test_duplicate_ids_rejected(self):
        v = SparseVector.from_dict({1: 1.0}, 4)
        with pytest.raises(IndexBuildError, match="dup"):
            build_index([("a", v), ("a", v)])

    def test_vocab_mismatch_rejected(self):
        with pytest.raises(IndexBuildError):
            build_index([("a", SparseVector.empty(4)), ("b", SparseVector.empty(5))])

    def test_tf_index_requires_integers(self):
        with pytest.raises(IndexBuildError):
            build_index([("a", SparseVector.from_dict({1: 1.5}, 4))], term_frequency=True)

    def test_tf_index_from_text(self):
        idx = build_tf_index([("a", "red red fish"), ("b", "blue fish")])
        fish = idx.vocabulary.lookup("fish")
        red = idx.vocabulary.lookup("red")
        assert idx.df(fish) == 2
        assert idx.posting_list(red).impacts.tolist() == [2.0]
        assert idx.doc_lengths.tolist() == [3, 2]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        idx = random_index(7)
        path = tmp_path / "idx.bin"
        save_index(idx, path)
        back = load_index(path)
        assert back == idx
        assert back.doc_ids == idx.doc_ids
        assert np.array_equal(back.post_impacts, idx.post_impacts)
        assert index_stats(back) == index_stats(idx)

    def test_vocabulary_survives(self, tmp_path):
        idx = build_tf_index([("a", "red fish"), ("b", "blue fish")])
        save_index(idx, tmp_path / "t.bin")
        back = load_index(tmp_path / "t.bin")
        assert back.term_frequency
        assert [back.vocabulary.token(i) for i in range(back.vocab_size)] == \
               [idx.vocabulary.token(i) for i in range(idx.vocab_size)]

    def test_truncated_file(self):
        data = two_doc_index().to_bytes()
        for cut in (4, len(data) // 2, len(data) - 1):
            with pytest.raises(FormatError):
                index_from_bytes(data[:cut])

    def test_wrong_magic(self):
        data = bytearray(two_doc_index().to_bytes())
        data[:8] = b"NOTINDEX"
        with pytest.raises(FormatError, match="version 1"):
            index_from_bytes(bytes(data))

    def test_corruption_detected(self):
        data = bytearray(two_doc_index().to_bytes())
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(FormatError):
            index_from_bytes(bytes(data))

    def test_failed_save_leaves_no_partial_file(self, tmp_path):
        target = tmp_path / "missing_dir" / "idx.bin"
        with pytest.raises(OSError):
            save_index(two_doc_index(), target)
        assert not target.exists()

    def test_vocab_size_must_match(self):
        with pytest.raises(IndexBuildError):
            build_index([("a", SparseVector.empty(4))], vocabulary=Vocabulary(["x", "y"]))
