"""Column-major sparse training data: svmlight parsing, partitioning, chunked storage.

Coordinate descent touches one column of A per update, so the canonical layout
is CSC-like: the matrix is stored as (indptr, rows, vals) triples with columns
being the coordinates of the optimization variable. The svmlight parser returns
an example-major matrix (columns = examples); dual objectives use it directly
after folding labels, primal objectives transpose once at load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHUNK_MAGIC = b"GLMCHUNK"
CHUNK_VERSION = 1
ENDIAN_MARK = 0xFEFF
_FLAG_LABELS = 1
_FLAG_ROW_VECTOR = 2

# header: magic[8] version:u32 flags:u16 endian:u16 n_rows:u64 n_cols:u64
_HEADER = struct.Struct("<8sIHHQQ")
assert _HEADER.size == 32
# per chunk: n_cols:u32 nnz:u64
_CHUNK_HEAD = struct.Struct("<IQ")


class DataFormatError(ValueError):
    """Malformed svmlight input."""


class ChunkFormatError(ValueError):
    """Corrupt or incompatible chunk file."""


class PartitionError(ValueError):
    """Requested partitioning is impossible."""


class SparseColumnMatrix:
    """Immutable CSC-like sparse matrix with optional per-column labels.

    Row indices are sorted and unique within each column; values are finite
    float64. Instances are safe to share across threads.
    """

    __slots__ = ("n_rows", "n_cols", "indptr", "rows", "vals", "labels", "_sqnorms")

    def __init__(self, n_rows, indptr, rows, vals, labels=None, validate=True):
        self.n_rows = int(n_rows)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.rows = np.ascontiguousarray(rows, dtype=np.int32)
        self.vals = np.ascontiguousarray(vals, dtype=np.float64)
        self.n_cols = len(self.indptr) - 1
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.float64)
        self.labels = labels
        self._sqnorms = None
        if validate:
            self._validate()

    def _validate(self):
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.rows):
            raise ValueError("indptr does not span the value arrays")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if len(self.rows) != len(self.vals):
            raise ValueError("rows/vals length mismatch")
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ValueError("row index out of range")
            if not np.all(np.isfinite(self.vals)):
                raise ValueError("non-finite value in matrix")
            # sorted + unique within each column: strictly increasing except
            # at column starts
            d = np.diff(self.rows)
            starts = np.zeros(len(self.rows), dtype=bool)
            starts[self.indptr[1:-1]] = True
            if np.any((d <= 0) & ~starts[1:]):
                raise ValueError("row indices must be strictly increasing per column")
        if self.labels is not None and len(self.labels) != self.n_cols:
            raise ValueError("labels length must equal n_cols")

    @property
    def nnz(self):
        return int(self.indptr[-1])

    def col(self, j):
        """Return (row_indices, values) views for column j."""
        lo, hi = self.indptr[j], self.indptr[j + 1]
        return self.rows[lo:hi], self.vals[lo:hi]

    def col_nnz(self):
        return np.diff(self.indptr)

    def col_sqnorms(self):
        """Squared euclidean norm of every column (cached)."""
        if self._sqnorms is None:
            sq = self.vals * self.vals
            out = np.zeros(self.n_cols)
            keep = np.flatnonzero(np.diff(self.indptr) > 0)
            if sq.size:
                out[keep] = np.add.reduceat(sq, self.indptr[:-1][keep])
            self._sqnorms = out
        return self._sqnorms

    def matvec(self, x):
        """A @ x for dense x of length n_cols."""
        out = np.zeros(self.n_rows)
        if self.nnz:
            np.add.at(out, self.rows, self.vals * np.repeat(x, np.diff(self.indptr)))
        return out

    def rmatvec(self, w):
        """A.T @ w for dense w of length n_rows (per-column dot products)."""
        out = np.zeros(self.n_cols)
        if self.nnz:
            prods = self.vals * w[self.rows]
            keep = np.flatnonzero(np.diff(self.indptr) > 0)
            out[keep] = np.add.reduceat(prods, self.indptr[:-1][keep])
        return out

    def to_dense(self):
        out = np.zeros((self.n_rows, self.n_cols))
        for j in range(self.n_cols):
            r, v = self.col(j)
            out[r, j] = v
        return out

    def select_columns(self, cols):
        """Copy of the submatrix with the given columns (labels sliced along)."""
        cols = np.asarray(cols, dtype=np.int64)
        counts = np.diff(self.indptr)[cols]
        indptr = np.zeros(len(cols) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        rows = np.empty(int(indptr[-1]), dtype=np.int32)
        vals = np.empty(int(indptr[-1]))
        for out_j, j in enumerate(cols):
            lo, hi = self.indptr[j], self.indptr[j + 1]
            rows[indptr[out_j]:indptr[out_j + 1]] = self.rows[lo:hi]
            vals[indptr[out_j]:indptr[out_j + 1]] = self.vals[lo:hi]
        labels = self.labels[cols] if self.labels is not None else None
        return SparseColumnMatrix(self.n_rows, indptr, rows, vals, labels, validate=False)

    def scale_columns(self, scales):
        """New matrix with column j multiplied by scales[j]."""
        scales = np.asarray(scales, dtype=np.float64)
        vals = self.vals * np.repeat(scales, np.diff(self.indptr))
        return SparseColumnMatrix(self.n_rows, self.indptr.copy(), self.rows.copy(),
                                  vals, None if self.labels is None else self.labels.copy(),
                                  validate=False)

    def transpose(self):
        """Swap the roles of rows and columns (labels are dropped)."""
        order = np.argsort(self.rows, kind="stable")
        new_cols = self.rows[order]
        col_of = np.repeat(np.arange(self.n_cols, dtype=np.int32), np.diff(self.indptr))
        new_rows = col_of[order]
        new_vals = self.vals[order]
        indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.add.at(indptr[1:], new_cols, 1)
        np.cumsum(indptr, out=indptr)
        return SparseColumnMatrix(self.n_cols, indptr, new_rows, new_vals, validate=False)

    def value_equal(self, other):
        return (self.n_rows == other.n_rows and self.n_cols == other.n_cols
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.vals, other.vals))


def hstack(blocks):
    """Concatenate matrices column-wise; all must share n_rows."""
    blocks = list(blocks)
    n_rows = blocks[0].n_rows
    if any(b.n_rows != n_rows for b in blocks):
        raise ValueError("n_rows mismatch in hstack")
    indptr = np.concatenate([[0]] + [np.diff(b.indptr) for b in blocks]).cumsum()
    rows = np.concatenate([b.rows for b in blocks]) if blocks else np.empty(0, np.int32)
    vals = np.concatenate([b.vals for b in blocks])
    labels = None
    if all(b.labels is not None for b in blocks):
        labels = np.concatenate([b.labels for b in blocks])
    return SparseColumnMatrix(n_rows, indptr.astype(np.int64), rows, vals, labels,
                              validate=False)


def parse_svmlight(stream):
    """Parse svmlight text into an example-major matrix plus label vector.

    Each line is `<label> <idx>:<val> ...` with 1-based, strictly increasing
    feature indices. Columns of the returned matrix are examples, rows are
    features (n_rows = max feature index seen). Blank lines and lines starting
    with '#' are skipped.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    labels = []
    indptr = [0]
    rows = []
    vals = []
    max_feat = 0
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            y = float(parts[0])
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad label {parts[0]!r}")
        prev = 0
        for tok in parts[1:]:
            try:
                idx_s, val_s = tok.split(":", 1)
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise DataFormatError(f"line {lineno}: bad feature token {tok!r}")
            if idx < 1:
                raise DataFormatError(f"line {lineno}: feature index {idx} < 1")
            if idx <= prev:
                raise DataFormatError(
                    f"line {lineno}: feature indices must be strictly increasing")
            prev = idx
            rows.append(idx - 1)
            vals.append(val)
        max_feat = max(max_feat, prev)
        labels.append(y)
        indptr.append(len(rows))
    mat = SparseColumnMatrix(
        max_feat,
        np.asarray(indptr, dtype=np.int64),
        np.asarray(rows, dtype=np.int32),
        np.asarray(vals, dtype=np.float64),
    )
    return mat, np.asarray(labels, dtype=np.float64)


def write_svmlight(matrix, labels, stream):
    """Serialize an example-major matrix back to svmlight text (value-exact)."""
    for j in range(matrix.n_cols):
        r, v = matrix.col(j)
        feats = " ".join("%d:%.17g" % (ri + 1, vi) for ri, vi in zip(r, v))
        line = "%.17g" % labels[j]
        if feats:
            line += " " + feats
        stream.write(line + "\n")


@dataclass(frozen=True)
class Partition:
    """Disjoint coordinate set owned by device `device` of node `node`."""
    node: int
    device: int
    cols: np.ndarray

    def __len__(self):
        return len(self.cols)


def partition_columns(n_cols, n_nodes, n_devices, strategy="contiguous", col_nnz=None):
    """Split [0, n_cols) into n_nodes * n_devices disjoint sorted coordinate sets.

    `contiguous` splits into equal-count ranges; `balanced-by-nnz` keeps
    contiguous ranges but places the boundaries at nnz-prefix-sum quantiles
    (requires col_nnz).
    """
    if n_nodes < 1 or n_devices < 1 or n_cols < 1:
        raise PartitionError("need n_cols, nodes and devices all >= 1")
    workers = n_nodes * n_devices
    if workers > n_cols:
        raise PartitionError(
            f"{workers} workers but only {n_cols} coordinates to assign")
    if strategy == "contiguous":
        pieces = np.array_split(np.arange(n_cols, dtype=np.int64), workers)
    elif strategy == "balanced-by-nnz":
        if col_nnz is None:
            raise PartitionError("balanced-by-nnz requires col_nnz")
        pieces = _nnz_balanced_split(np.asarray(col_nnz, dtype=np.int64), workers)
    else:
        raise PartitionError(f"unknown strategy {strategy!r}")
    out = []
    for w, piece in enumerate(pieces):
        out.append(Partition(node=w // n_devices, device=w % n_devices, cols=piece))
    return out


def _nnz_balanced_split(col_nnz, workers):
    n = len(col_nnz)
    csum = np.cumsum(col_nnz)
    total = csum[-1] if n else 0
    bounds = [0]
    for m in range(1, workers):
        target = total * m / workers
        b = int(np.searchsorted(csum, target))
        # every block keeps at least one column
        b = max(b, bounds[-1] + 1)
        b = min(b, n - (workers - m))
        bounds.append(b)
    bounds.append(n)
    return [np.arange(bounds[i], bounds[i + 1], dtype=np.int64) for i in range(workers)]


@dataclass
class ChunkDescriptor:
    offset: int
    n_cols: int
    nnz: int


@dataclass
class ChunkStore:
    """On-disk sequence of column chunks; concatenation reproduces the matrix."""
    path: str
    n_rows: int
    n_cols: int
    has_labels: bool
    chunks: list[ChunkDescriptor] = field(default_factory=list)
    row_vector: np.ndarray | None = None

    @property
    def n_chunks(self):
        return len(self.chunks)


def write_chunks(matrix, chunk_size, path, row_vector=None):
    """Write matrix to `path` in ceil(n_cols / chunk_size) column chunks."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    has_labels = matrix.labels is not None
    flags = (_FLAG_LABELS if has_labels else 0)
    if row_vector is not None:
        row_vector = np.ascontiguousarray(row_vector, dtype=np.float64)
        if len(row_vector) != matrix.n_rows:
            raise ValueError("row_vector length must equal n_rows")
        flags |= _FLAG_ROW_VECTOR
    store = ChunkStore(path=path, n_rows=matrix.n_rows, n_cols=matrix.n_cols,
                       has_labels=has_labels, row_vector=row_vector)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHUNK_MAGIC, CHUNK_VERSION, flags, ENDIAN_MARK,
                              matrix.n_rows, matrix.n_cols))
        if row_vector is not None:
            fh.write(row_vector.tobytes())
        for lo in range(0, matrix.n_cols, chunk_size):
            hi = min(lo + chunk_size, matrix.n_cols)
            sub_ptr = (matrix.indptr[lo:hi + 1] - matrix.indptr[lo]).astype(np.uint64)
            nnz = int(sub_ptr[-1])
            store.chunks.append(ChunkDescriptor(fh.tell(), hi - lo, nnz))
            fh.write(_CHUNK_HEAD.pack(hi - lo, nnz))
            fh.write(sub_ptr.tobytes())
            fh.write(matrix.rows[matrix.indptr[lo]:matrix.indptr[hi]]
                     .astype(np.uint32).tobytes())
            fh.write(matrix.vals[matrix.indptr[lo]:matrix.indptr[hi]].tobytes())
            if has_labels:
                fh.write(matrix.labels[lo:hi].tobytes())
    return store


def open_chunks(path):
    """Scan a chunk file and rebuild its ChunkStore descriptor table."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ChunkFormatError("truncated header")
        magic, version, flags, endian, n_rows, n_cols = _HEADER.unpack(head)
        if magic != CHUNK_MAGIC:
            raise ChunkFormatError(f"bad magic {magic!r}")
        if endian != ENDIAN_MARK:
            raise ChunkFormatError("endianness mismatch")
        if version != CHUNK_VERSION:
            raise ChunkFormatError(f"unsupported version {version}")
        has_labels = bool(flags & _FLAG_LABELS)
        store = ChunkStore(path=path, n_rows=n_rows, n_cols=n_cols,
                           has_labels=has_labels)
        if flags & _FLAG_ROW_VECTOR:
            buf = fh.read(8 * n_rows)
            if len(buf) < 8 * n_rows:
                raise ChunkFormatError("truncated row vector")
            store.row_vector = np.frombuffer(buf, dtype="<f8").copy()
        seen = 0
        while seen < n_cols:
            offset = fh.tell()
            head = fh.read(_CHUNK_HEAD.size)
            if len(head) < _CHUNK_HEAD.size:
                raise ChunkFormatError("truncated chunk header")
            c_cols, c_nnz = _CHUNK_HEAD.unpack(head)
            store.chunks.append(ChunkDescriptor(offset, c_cols, c_nnz))
            body = 8 * (c_cols + 1) + 4 * c_nnz + 8 * c_nnz
            if has_labels:
                body += 8 * c_cols
            fh.seek(body, 1)
            seen += c_cols
        if seen != n_cols:
            raise ChunkFormatError("chunk column counts do not sum to n_cols")
    return store


def read_chunk(store, index):
    """Load chunk `index` as a SparseColumnMatrix (bit-exact round trip)."""
    desc = store.chunks[index]
    with open(store.path, "rb") as fh:
        fh.seek(desc.offset)
        head = fh.read(_CHUNK_HEAD.size)
        if len(head) < _CHUNK_HEAD.size:
            raise ChunkFormatError("truncated chunk header")
        c_cols, c_nnz = _CHUNK_HEAD.unpack(head)
        if (c_cols, c_nnz) != (desc.n_cols, desc.nnz):
            raise ChunkFormatError("chunk header disagrees with descriptor")
        need = 8 * (c_cols + 1) + 12 * c_nnz + (8 * c_cols if store.has_labels else 0)
        buf = fh.read(need)
        if len(buf) < need:
            raise ChunkFormatError("truncated chunk body")
    off = 0
    indptr = np.frombuffer(buf, dtype="<u8", count=c_cols + 1, offset=off).astype(np.int64)
    off += 8 * (c_cols + 1)
    rows = np.frombuffer(buf, dtype="<u4", count=c_nnz, offset=off).astype(np.int32)
    off += 4 * c_nnz
    vals = np.frombuffer(buf, dtype="<f8", count=c_nnz, offset=off).copy()
    off += 8 * c_nnz
    labels = None
    if store.has_labels:
        labels = np.frombuffer(buf, dtype="<f8", count=c_cols, offset=off).copy()
    return SparseColumnMatrix(store.n_rows, indptr, rows, vals, labels, validate=False)


def concat_chunks(store):
    """Materialize the full matrix by concatenating every chunk in order."""
    return hstack(read_chunk(store, i) for i in range(store.n_chunks))


def spectral_bound(matrix, tolerance=1e-3, max_iters=500):
    """Upper bound on ||A||_2^2 via power iteration with a Frobenius ceiling.

    Returns min(||A||_F^2, rho + ||r||) where rho is the final Rayleigh
    quotient of A^T A and r its eigen-residual; always >= the power-iteration
    estimate and exact when the residual vanishes.
    """
    frob = float(np.dot(matrix.vals, matrix.vals))
    if frob == 0.0 or matrix.n_cols == 0:
        return 0.0
    rng = np.random.default_rng(0x5EED)
    y = rng.standard_normal(matrix.n_cols)
    y /= np.linalg.norm(y)
    rho = 0.0
    for _ in range(max_iters):
        my = matrix.rmatvec(matrix.matvec(y))
        new_rho = float(np.dot(y, my))
        nrm = np.linalg.norm(my)
        if nrm == 0.0:
            return 0.0
        done = abs(new_rho - rho) <= tolerance * max(new_rho, 1e-300)
        rho = new_rho
        y_next = my / nrm
        if done:
            y = y_next
            break
        y = y_next
    my = matrix.rmatvec(matrix.matvec(y))
    rho = float(np.dot(y, my))
    resid = float(np.linalg.norm(my - rho * y))
    return min(frob, rho + resid)
