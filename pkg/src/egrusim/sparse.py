"""CSR weight storage and the two matvec kernels used by every EGRU layer.

All numerics are float32. Both kernels accumulate into per-destination
accumulators strictly in ascending presynaptic index order, so the dense
kernel, the event-driven kernel and any partitioned execution of either
produce bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FLOAT = np.float32
INDEX = np.uint32
ELEMENT_BYTES = 4


class DimensionError(ValueError):
    """Operand shapes do not agree."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass
class OpCounter:
    """Multiply-accumulate tally filled in by the kernels when passed one."""

    macs: int = 0


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    n_rows: int
    n_cols: int
    values: np.ndarray
    col_indices: np.ndarray
    row_extents: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=FLOAT)
        cols = np.ascontiguousarray(self.col_indices, dtype=INDEX)
        ext = np.ascontiguousarray(self.row_extents, dtype=INDEX)
        if self.n_rows < 0 or self.n_cols < 0:
            raise DimensionError("negative matrix dimension")
        if ext.shape != (self.n_rows + 1,):
            raise DimensionError(f"row_extents must have {self.n_rows + 1} entries, got {ext.shape}")
        if values.ndim != 1 or values.shape != cols.shape:
            raise DimensionError("values and col_indices must be 1-D of equal length")
        nz = values.shape[0]
        if ext[0] != 0 or int(ext[-1]) != nz:
            raise DimensionError("row_extents must start at 0 and end at NZ")
        if np.any(np.diff(ext.astype(np.int64)) < 0):
            raise DimensionError("row_extents must be non-decreasing")
        if nz:
            if int(cols.max()) >= self.n_cols:
                raise DimensionError("column index out of range")
            # strictly ascending within a row: only row starts may step down
            step = np.diff(cols.astype(np.int64))
            starts = np.zeros(nz, dtype=bool)
            starts[ext[1:-1][ext[1:-1] < nz].astype(np.int64)] = True
            if np.any((step <= 0) & ~starts[1:]):
                raise DimensionError("column indices must be strictly ascending within a row")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "col_indices", _frozen(cols))
        object.__setattr__(self, "row_extents", _frozen(ext))

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_extents.astype(np.int64))

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = int(self.row_extents[i]), int(self.row_extents[i + 1])
        return self.col_indices[lo:hi], self.values[lo:hi]

    def entry_rows(self) -> np.ndarray:
        """Row index of every stored entry, in storage order."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), self.row_lengths())


@dataclass(frozen=True, eq=False)
class EventVector:
    """Sparse layer output: ascending unit indices with their nonzero magnitudes."""

    dim: int
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=INDEX))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=FLOAT))

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=INDEX)
        val = np.ascontiguousarray(self.values, dtype=FLOAT)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise DimensionError("indices and values must be 1-D of equal length")
        if idx.size:
            if int(idx[-1]) >= self.dim or int(idx.max()) >= self.dim:
                raise DimensionError(f"event index out of range for dim {self.dim}")
            if np.any(np.diff(idx.astype(np.int64)) <= 0):
                raise ValueError("event indices must be strictly ascending")
            if np.any(val == 0):
                raise ValueError("zero-valued events are never stored")
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "values", _frozen(val))

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    @classmethod
    def empty(cls, dim: int) -> "EventVector":
        return cls(dim)

    @classmethod
    def from_dense(cls, x) -> "EventVector":
        x = np.asarray(x, dtype=FLOAT)
        (idx,) = np.nonzero(x)
        return cls(int(x.shape[0]), idx.astype(INDEX), x[idx])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=FLOAT)
        out[self.indices] = self.values
        return out


def csr_from_dense(dense, zero_tolerance: float = 0.0) -> CsrMatrix:
    if zero_tolerance < 0:
        raise ValueError("zero_tolerance must be >= 0")
    d = np.asarray(dense, dtype=FLOAT)
    if d.ndim != 2:
        raise DimensionError("dense matrix must be 2-D")
    keep = np.abs(d) > zero_tolerance
    rows, cols = np.nonzero(keep)  # row-major, ascending columns per row
    ext = np.zeros(d.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=d.shape[0]), out=ext[1:])
    return CsrMatrix(d.shape[0], d.shape[1], d[rows, cols], cols, ext)


def csr_to_dense(m: CsrMatrix) -> np.ndarray:
    out = np.zeros(m.shape, dtype=FLOAT)
    out[m.entry_rows(), m.col_indices.astype(np.int64)] = m.values
    return out


def csr_storage_count(m: CsrMatrix) -> int:
    """Array elements needed to hold ``m``: values, column indices and row extents."""
    return 2 * m.nnz + m.n_rows + 1


def csr_storage_bytes(m: CsrMatrix) -> int:
    return ELEMENT_BYTES * csr_storage_count(m)


def csr_transpose(m: CsrMatrix) -> CsrMatrix:
    rows = m.entry_rows()
    cols = m.col_indices.astype(np.int64)
    order = np.lexsort((rows, cols))
    ext = np.zeros(m.n_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=m.n_cols), out=ext[1:])
    return CsrMatrix(m.n_cols, m.n_rows, m.values[order], rows[order], ext)


def csr_row_slice(m: CsrMatrix, start: int, stop: int) -> CsrMatrix:
    lo, hi = int(m.row_extents[start]), int(m.row_extents[stop])
    ext = m.row_extents[start : stop + 1].astype(np.int64) - lo
    return CsrMatrix(stop - start, m.n_cols, m.values[lo:hi], m.col_indices[lo:hi], ext)


def csr_col_slice(m: CsrMatrix, start: int, stop: int) -> CsrMatrix:
    """Keep columns ``[start, stop)``, renumbered to start at 0."""
    cols = m.col_indices.astype(np.int64)
    keep = (cols >= start) & (cols < stop)
    ext = np.zeros(m.n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(m.entry_rows()[keep], minlength=m.n_rows), out=ext[1:])
    return CsrMatrix(m.n_rows, stop - start, m.values[keep], cols[keep] - start, ext)


def dense_matvec(m: CsrMatrix, x, counter: OpCounter | None = None) -> np.ndarray:
    """``m @ x`` with each row summed left to right over its stored columns."""
    x = np.asarray(x, dtype=FLOAT)
    if x.shape != (m.n_cols,):
        raise DimensionError(f"x has shape {x.shape}, matrix expects ({m.n_cols},)")
    out = np.zeros(m.n_rows, dtype=FLOAT)
    # ufunc.at is unbuffered and applies entries in storage order
    np.add.at(out, m.entry_rows(), m.values * x[m.col_indices])
    if counter is not None:
        counter.macs += m.nnz
    return out


def event_matvec(m_t: CsrMatrix, y: EventVector, counter: OpCounter | None = None) -> np.ndarray:
    """Recurrent projection driven by events.

    ``m_t`` holds the recurrent matrix transposed, so row ``i`` lists the
    outgoing weights of presynaptic unit ``i``. Only rows of active units are
    read; contributions land in each destination in ascending event order.
    """
    if y.dim != m_t.n_rows:
        raise DimensionError(f"event dim {y.dim} != matrix rows {m_t.n_rows}")
    out = np.zeros(m_t.n_cols, dtype=FLOAT)
    if not len(y):
        return out
    starts = m_t.row_extents[y.indices].astype(np.int64)
    lengths = m_t.row_extents[y.indices + 1].astype(np.int64) - starts
    total = int(lengths.sum())
    if total:
        offsets = np.repeat(starts - np.cumsum(lengths) + lengths, lengths) + np.arange(total)
        scale = np.repeat(y.values, lengths)
        np.add.at(out, m_t.col_indices[offsets], scale * m_t.values[offsets])
    if counter is not None:
        counter.macs += total
    return out


def event_macs(m_t: CsrMatrix, y: EventVector) -> int:
    """MACs ``event_matvec(m_t, y)`` performs: the summed lengths of the active rows."""
    if not len(y):
        return 0
    return int((m_t.row_extents[y.indices + 1].astype(np.int64) - m_t.row_extents[y.indices]).sum())


def magnitude_prune(dense, target_sparsity: float) -> np.ndarray:
    """Zero the ``floor(target_sparsity * size)`` smallest-magnitude entries.

    Ties go to the lowest flat index. Existing zeros count toward the target
    since they have the smallest magnitude.
    """
    if not 0 <= target_sparsity < 1:
        raise ValueError("target_sparsity must be in [0, 1)")
    d = np.array(dense, dtype=FLOAT, copy=True)
    # guard against representation error like 0.95 * 100 = 94.999...
    k = math.floor(target_sparsity * d.size + 1e-9)
    if k:
        order = np.argsort(np.abs(d).ravel(), kind="stable")
        d.ravel()[order[:k]] = 0
    return d
