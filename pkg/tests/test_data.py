"""sparse data layer: parsing, partitioning, chunk storage, spectral bound."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierglm.data import (ChunkFormatError, DataFormatError, PartitionError,
                          SparseColumnMatrix, concat_chunks, hstack,
                          open_chunks, parse_svmlight, partition_columns,
                          read_chunk, spectral_bound, write_chunks,
                          write_svmlight)

from .synth import sparse_columns
from . import oracles


class TestParse:
    def test_single_example(self):
        m, y = parse_svmlight(["+1 3:1.5"])
        assert m.n_cols == 1 and m.n_rows == 3
        assert y.tolist() == [1.0]
        rows, vals = m.col(0)
        assert rows.tolist() == [2] and vals.tolist() == [1.5]

    def test_empty_stream(self):
        m, y = parse_svmlight([])
        assert m.n_cols == 0 and m.n_rows == 0 and len(y) == 0

    def test_label_only_line(self):
        m, y = parse_svmlight(["-1"])
        assert m.n_cols == 1 and m.nnz == 0 and y.tolist() == [-1.0]

    def test_roundtrip_50_examples(self):
        rng = np.random.default_rng(7)
        mat = sparse_columns(30, 50, 5, rng, normalize=False)
        labels = np.where(rng.random(50) > 0.5, 1.0, -1.0)
        buf = io.StringIO()
        write_svmlight(mat, labels, buf)
        again, y2 = parse_svmlight(buf.getvalue())
        # value-equivalent exactly after one round trip
        assert y2.tolist() == labels.tolist()
        assert again.n_cols == 50
        assert again.n_rows <= 30  # trailing all-zero features collapse
        for j in range(50):
            r1, v1 = mat.col(j)
            r2, v2 = again.col(j)
            assert r1.tolist() == r2.tolist()
            assert v1.tolist() == v2.tolist()
        # second serialization is byte-identical (fixed point)
        buf2 = io.StringIO()
        write_svmlight(again, y2, buf2)
        assert buf2.getvalue() == buf.getvalue()

    @pytest.mark.parametrize("line,fragment", [
        ("abc 1:1", "line 1"),
        ("+1 0:2", "index 0 < 1"),
        ("+1 3:1 2:1", "strictly increasing"),
        ("+1 1:xyz", "bad feature token"),
    ])
    def test_malformed(self, line, fragment):
        with pytest.raises(DataFormatError, match=fragment):
            parse_svmlight([line])

    def test_error_reports_line_number(self):
        with pytest.raises(DataFormatError, match="line 3"):
            parse_svmlight(["+1 1:1", "-1 2:1", "+1 5:4 2:1"])


class TestMatrixOps:
    def test_matvec_rmatvec_match_dense(self):
        rng = np.random.default_rng(3)
        m = sparse_columns(17, 23, 4, rng, normalize=False)
        dense = m.to_dense()
        x = rng.standard_normal(23)
        w = rng.standard_normal(17)
        np.testing.assert_allclose(m.matvec(x), dense @ x, rtol=1e-13)
        np.testing.assert_allclose(m.rmatvec(w), dense.T @ w, rtol=1e-13)
        np.testing.assert_allclose(m.col_sqnorms(), (dense ** 2).sum(axis=0),
                                   rtol=1e-13)

    def test_transpose(self):
        rng = np.random.default_rng(4)
        m = sparse_columns(9, 12, 3, rng, normalize=False)
        np.testing.assert_array_equal(m.transpose().to_dense(), m.to_dense().T)

    def test_select_columns(self):
        rng = np.random.default_rng(5)
        m = sparse_columns(8, 10, 3, rng)
        sub = m.select_columns(np.array([1, 4, 7]))
        np.testing.assert_array_equal(sub.to_dense(), m.to_dense()[:, [1, 4, 7]])

    def test_validation_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            SparseColumnMatrix(2, [0, 2], [0, 5], [1.0, 1.0])
        with pytest.raises(ValueError):
            SparseColumnMatrix(3, [0, 2], [1, 1], [1.0, 1.0])  # duplicate row
        with pytest.raises(ValueError):
            SparseColumnMatrix(3, [0, 1], [0], [np.inf])


class TestPartition:
    def test_contiguous_4_2_2(self):
        parts = partition_columns(4, 2, 2)
        assert [p.cols.tolist() for p in parts] == [[0], [1], [2], [3]]
        assert [(p.node, p.device) for p in parts] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_single_worker_identity(self):
        (p,) = partition_columns(4, 1, 1)
        assert p.cols.tolist() == [0, 1, 2, 3]

    def test_too_many_workers(self):
        with pytest.raises(PartitionError):
            partition_columns(3, 2, 2)

    def test_balanced_by_nnz_on_skewed_matrix(self):
        rng = np.random.default_rng(11)
        # skewed: column nnz follows a heavy-ish geometric profile
        col_nnz = rng.geometric(0.08, size=1000)
        parts = partition_columns(1000, 2, 2, strategy="balanced-by-nnz",
                                  col_nnz=col_nnz)
        loads = [col_nnz[p.cols].sum() for p in parts]
        assert max(loads) / min(loads) <= 1.2
        # contiguous ranges, only the boundaries differ from `contiguous`
        flat = np.concatenate([p.cols for p in parts])
        np.testing.assert_array_equal(flat, np.arange(1000))

    @given(st.integers(1, 200), st.integers(1, 4), st.integers(1, 4),
           st.sampled_from(["contiguous", "balanced-by-nnz"]))
    @settings(max_examples=60, deadline=None)
    def test_disjoint_cover_property(self, n, k, l, strategy):
        if k * l > n:
            return
        nnz = np.random.default_rng(n).integers(0, 9, size=n)
        parts = partition_columns(n, k, l, strategy=strategy, col_nnz=nnz)
        assert len(parts) == k * l
        allcols = np.concatenate([p.cols for p in parts])
        assert len(allcols) == n
        assert sorted(allcols.tolist()) == list(range(n))
        for p in parts:
            assert np.all(np.diff(p.cols) > 0)  # sorted


class TestChunks:
    def test_single_chunk_identity(self, tmp_path):
        rng = np.random.default_rng(21)
        m = sparse_columns(6, 10, 2, rng, normalize=False)
        store = write_chunks(m, 10, tmp_path / "one.chunks")
        assert store.n_chunks == 1
        back = read_chunk(store, 0)
        assert back.value_equal(m)

    def test_chunk_sizes(self, tmp_path):
        rng = np.random.default_rng(22)
        m = sparse_columns(6, 10, 2, rng)
        store = write_chunks(m, 3, tmp_path / "four.chunks")
        assert [c.n_cols for c in store.chunks] == [3, 3, 3, 1]

    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(23)
        m = sparse_columns(19, 37, 5, rng, normalize=False)
        labels = rng.standard_normal(37)
        m = SparseColumnMatrix(m.n_rows, m.indptr, m.rows, m.vals, labels)
        path = tmp_path / "rt.chunks"
        write_chunks(m, 8, path)
        store = open_chunks(path)
        assert store.has_labels
        back = concat_chunks(store)
        assert back.value_equal(m)
        np.testing.assert_array_equal(back.labels, labels)

    @given(st.integers(1, 40), st.integers(1, 17), st.integers(0, 2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, tmp_path_factory, n_cols, chunk_size, seed):
        rng = np.random.default_rng(seed)
        m = sparse_columns(11, n_cols, 3, rng, normalize=False)
        path = tmp_path_factory.mktemp("chunks") / "p.chunks"
        store = write_chunks(m, chunk_size, path)
        assert store.n_chunks == -(-n_cols // chunk_size)
        back = hstack(read_chunk(store, i) for i in range(store.n_chunks))
        assert back.value_equal(m)

    def test_row_vector_section(self, tmp_path):
        rng = np.random.default_rng(24)
        m = sparse_columns(7, 5, 2, rng)
        target = rng.standard_normal(7)
        path = tmp_path / "rv.chunks"
        write_chunks(m, 2, path, row_vector=target)
        store = open_chunks(path)
        np.testing.assert_array_equal(store.row_vector, target)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.chunks"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 24)
        with pytest.raises(ChunkFormatError, match="bad magic"):
            open_chunks(path)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(25)
        m = sparse_columns(6, 10, 2, rng)
        path = tmp_path / "t.chunks"
        write_chunks(m, 3, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 7])
        with pytest.raises(ChunkFormatError):
            store = open_chunks(path)
            read_chunk(store, store.n_chunks - 1)


class TestSpectralBound:
    def test_orthonormal_columns(self):
        # one unit entry per column, d = n = 3
        m = SparseColumnMatrix(3, [0, 1, 2, 3], [0, 1, 2], [1.0, 1.0, 1.0])
        assert spectral_bound(m, 1e-6) == 1.0

    def test_one_by_one(self):
        m = SparseColumnMatrix(1, [0, 1], [0], [2.0])
        assert spectral_bound(m, 1e-6) == 4.0

    def test_zero_matrix(self):
        m = SparseColumnMatrix(4, [0, 0, 0], [], [])
        assert spectral_bound(m, 1e-6) == 0.0

    def test_random_matrix_vs_dense_oracle(self):
        rng = np.random.default_rng(31)
        m = sparse_columns(20, 30, 6, rng, normalize=False)
        exact = oracles.dense_spectral_sq(m.to_dense())
        bound = spectral_bound(m, 1e-9, max_iters=5000)
        assert bound >= exact * (1.0 - 1e-9)
        assert bound <= exact * 1.05

    def test_upper_bounds_random_rayleigh_quotients(self):
        rng = np.random.default_rng(32)
        m = sparse_columns(15, 25, 4, rng, normalize=False)
        dense = m.to_dense()
        bound = spectral_bound(m, 1e-6)
        for _ in range(100):
            x = rng.standard_normal(25)
            x /= np.linalg.norm(x)
            assert bound >= float(np.dot(dense @ x, dense @ x)) - 1e-12
