"""Candidate index: exactness against a full-scan oracle, persistence."""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cmcrank.errors import DuplicateId, FormatError, InvalidShape
from cmcrank.index import (HEADER_BYTES, CandidateIndex, build_index,
                           open_index, search_topk)


def naive_topk(ids, matrix, query, k):
    """Full-scan oracle: score everything, sort by (-score, id), cut at k."""
    scores = [float(np.dot(row, query)) for row in matrix]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(int(ids[i]), scores[i]) for i in order[:k]]


class TestBuild:
    def test_empty_index_is_searchable(self, tmp_path):
        index = build_index([], np.empty((0, 4), dtype=np.float32),
                            tmp_path / "empty.cmci")
        result = search_topk(index, np.zeros(4, dtype=np.float32), 5)
        assert len(result) == 0
        reopened = open_index(tmp_path / "empty.cmci")
        assert len(reopened) == 0 and reopened.dim == 4

    def test_single_candidate_file_size(self, tmp_path):
        path = tmp_path / "one.cmci"
        build_index([42], np.ones((1, 3), dtype=np.float32), path)
        assert path.stat().st_size == HEADER_BYTES + 8 + 3 * 4

    def test_payload_bytes_per_candidate(self, tmp_path):
        """Single-vector storage: matrix region is exactly count*dim*4 bytes."""
        rng = np.random.default_rng(0)
        for count, dim in ((5, 8), (17, 64)):
            path = tmp_path / f"idx_{count}.cmci"
            build_index(np.arange(count), rng.standard_normal(
                (count, dim)).astype(np.float32), path)
            assert path.stat().st_size == HEADER_BYTES + count * 8 + count * dim * 4

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        ids = rng.choice(10 ** 9, size=10_000, replace=False)
        matrix = rng.standard_normal((10_000, 64)).astype(np.float32)
        path = tmp_path / "big.cmci"
        built = build_index(ids, matrix, path)
        reopened = open_index(path)
        assert reopened.ids.tolist() == built.ids.tolist()
        assert np.asarray(reopened.matrix).tobytes() == built.matrix.tobytes()

    def test_duplicate_id_rejected(self, tmp_path):
        with pytest.raises(DuplicateId):
            build_index([1, 1], np.zeros((2, 2), dtype=np.float32),
                        tmp_path / "dup.cmci")

    def test_dim_mismatch_rejected(self, tmp_path):
        with pytest.raises(InvalidShape):
            build_index([1], np.zeros(3, dtype=np.float32), tmp_path / "bad.cmci")


class TestOpen:
    def test_open_matches_in_memory_search(self, tmp_path):
        rng = np.random.default_rng(2)
        ids = np.arange(200)
        matrix = rng.standard_normal((200, 16)).astype(np.float32)
        built = build_index(ids, matrix, tmp_path / "idx.cmci")
        reopened = open_index(tmp_path / "idx.cmci")
        for _ in range(10):
            q = rng.standard_normal(16).astype(np.float32)
            a = search_topk(built, q, 7)
            b = search_topk(reopened, q, 7)
            assert a.ids.tolist() == b.ids.tolist()
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_tampered_payload_detected(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "tamper.cmci"
        build_index(np.arange(50),
                    rng.standard_normal((50, 8)).astype(np.float32), path)
        data = bytearray(path.read_bytes())
        data[-10] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            open_index(path)

    def test_opened_matrix_is_read_only(self, tmp_path):
        path = tmp_path / "ro.cmci"
        build_index([1, 2], np.ones((2, 2), dtype=np.float32), path)
        index = open_index(path)
        with pytest.raises((ValueError, RuntimeError)):
            index.matrix[0, 0] = 5.0

    def test_concurrent_readers_identical(self, tmp_path):
        """Two independently opened readers, searched from a thread pool,
        agree with each other and with serial execution."""
        rng = np.random.default_rng(4)
        path = tmp_path / "conc.cmci"
        build_index(np.arange(500),
                    rng.standard_normal((500, 32)).astype(np.float32), path)
        readers = [open_index(path), open_index(path)]
        queries = rng.standard_normal((40, 32)).astype(np.float32)

        def run(job):
            reader, q = job
            result = search_topk(reader, q, 10)
            return result.ids.tolist(), result.scores.tolist()

        serial = [run((readers[0], q)) for q in queries]
        for reader in readers:
            with ThreadPoolExecutor(max_workers=4) as pool:
                threaded = list(pool.map(run, ((reader, q) for q in queries)))
            assert serial == threaded


class TestSearch:
    def test_unit_vector_ranks_first(self):
        basis = np.eye(5, dtype=np.float32)
        index = CandidateIndex(np.arange(5), basis)
        result = search_topk(index, basis[3], 2)
        assert int(result.ids[0]) == 3
        assert result.scores[0] == pytest.approx(1.0)

    def test_k_zero_empty(self):
        index = CandidateIndex([1], np.ones((1, 2), dtype=np.float32))
        assert len(search_topk(index, np.ones(2, dtype=np.float32), 0)) == 0

    def test_k_exceeding_count_returns_all(self):
        rng = np.random.default_rng(5)
        index = CandidateIndex(np.arange(7),
                               rng.standard_normal((7, 3)).astype(np.float32))
        result = search_topk(index, rng.standard_normal(3).astype(np.float32), 99)
        assert len(result) == 7

    def test_matches_full_scan_oracle(self):
        rng = np.random.default_rng(6)
        ids = rng.choice(10 ** 6, size=1000, replace=False)
        matrix = rng.standard_normal((1000, 64)).astype(np.float32)
        index = CandidateIndex(ids, matrix)
        q = rng.standard_normal(64).astype(np.float32)
        got = search_topk(index, q, 64)
        expected = naive_topk(index.ids, np.asarray(index.matrix), q, 64)
        assert got.entries() == [(i, pytest.approx(s, rel=1e-6))
                                 for i, s in expected]
        assert [i for i, _ in got.entries()] == [i for i, _ in expected]

    def test_prefix_monotonicity(self):
        rng = np.random.default_rng(7)
        index = CandidateIndex(np.arange(100),
                               rng.standard_normal((100, 8)).astype(np.float32))
        q = rng.standard_normal(8).astype(np.float32)
        for k in range(1, 30):
            small = search_topk(index, q, k).ids.tolist()
            large = search_topk(index, q, k + 1).ids.tolist()
            assert large[:k] == small

    def test_ties_break_by_ascending_id(self):
        matrix = np.ones((6, 2), dtype=np.float32)
        index = CandidateIndex([9, 3, 7, 1, 5, 2], matrix)
        result = search_topk(index, np.ones(2, dtype=np.float32), 4)
        assert result.ids.tolist() == [1, 2, 3, 5]

    def test_dim_mismatch(self):
        index = CandidateIndex([1], np.ones((1, 2), dtype=np.float32))
        with pytest.raises(InvalidShape):
            search_topk(index, np.ones(3, dtype=np.float32), 1)
