"""Blocked-CSR storage, block norms, permutations and the BSM1 file format.

Blocks are dense, double precision and stored column-major inside one
contiguous buffer, in CSR order (block row major, ascending block column).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConstructionError, FormatError, IntegrityError, ParameterError

__all__ = [
    "BlockLayout",
    "BlockCsr",
    "Permutation",
    "build_from_triplets",
    "frobenius_norm",
    "to_dense",
    "to_blocks",
    "filter_blocks",
    "random_permutation",
    "write_bsm",
    "read_bsm",
    "panel_bytes",
    "panel_from_bytes",
]

BSM_MAGIC = b"BSM1"
BSM_VERSION = 1

_I64 = np.int64


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class BlockLayout:
    """Row and column block sizes of a blocked matrix."""

    row_block_sizes: tuple
    col_block_sizes: tuple
    row_offsets: np.ndarray = field(init=False, repr=False)
    col_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = tuple(int(s) for s in self.row_block_sizes)
        cols = tuple(int(s) for s in self.col_block_sizes)
        if any(s < 1 for s in rows) or any(s < 1 for s in cols):
            raise ParameterError("block sizes must be >= 1")
        object.__setattr__(self, "row_block_sizes", rows)
        object.__setattr__(self, "col_block_sizes", cols)
        object.__setattr__(self, "row_offsets", _frozen(np.concatenate([[0], np.cumsum(rows, dtype=_I64)]).astype(_I64)))
        object.__setattr__(self, "col_offsets", _frozen(np.concatenate([[0], np.cumsum(cols, dtype=_I64)]).astype(_I64)))

    @classmethod
    def square(cls, sizes):
        return cls(tuple(sizes), tuple(sizes))

    @property
    def n_row_blocks(self) -> int:
        return len(self.row_block_sizes)

    @property
    def n_col_blocks(self) -> int:
        return len(self.col_block_sizes)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.row_offsets[-1]), int(self.col_offsets[-1])

    def transpose(self) -> "BlockLayout":
        return BlockLayout(self.col_block_sizes, self.row_block_sizes)

    def __eq__(self, other):
        if not isinstance(other, BlockLayout):
            return NotImplemented
        return (self.row_block_sizes == other.row_block_sizes
                and self.col_block_sizes == other.col_block_sizes)

    def __hash__(self):
        return hash((self.row_block_sizes, self.col_block_sizes))


def _block_norms(data, offsets):
    # One fixed reduction for every norm we store, so recomputation is bitwise stable.
    if len(offsets) <= 1:
        return np.zeros(0)
    return np.sqrt(np.add.reduceat(data * data, offsets[:-1]))


def frobenius_norm(values) -> float:
    """Square root of the sum of squares of all elements of a block."""
    flat = np.asarray(values, dtype=np.float64).ravel(order="F")
    if flat.size == 0:
        return 0.0
    return float(_block_norms(flat, np.array([0, flat.size]))[0])


def _gather_segments(data, starts, lengths):
    """Concatenate ``data[s:s+l]`` for each (s, l) pair, vectorized."""
    lengths = np.asarray(lengths, dtype=_I64)
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=data.dtype)
    new_starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    idx = np.repeat(np.asarray(starts, dtype=_I64) - new_starts, lengths) + np.arange(total, dtype=_I64)
    return data[idx]


@dataclass(frozen=True, eq=False)
class BlockCsr:
    """Blocked compressed sparse row matrix.

    ``block_offsets`` has one entry per stored block plus a trailing total,
    so block ``b`` occupies ``block_data[block_offsets[b]:block_offsets[b+1]]``.
    Instances are immutable; all arrays are read-only.
    """

    layout: BlockLayout
    row_ptr: np.ndarray
    col_idx: np.ndarray
    block_data: np.ndarray
    block_offsets: np.ndarray
    norms: np.ndarray

    @classmethod
    def _make(cls, layout, row_ptr, col_idx, block_data, block_offsets=None, norms=None):
        row_ptr = np.asarray(row_ptr, dtype=_I64)
        col_idx = np.asarray(col_idx, dtype=_I64)
        block_data = np.asarray(block_data, dtype=np.float64)
        if block_offsets is None:
            rows = np.repeat(np.arange(layout.n_row_blocks, dtype=_I64), np.diff(row_ptr))
            sizes = (np.asarray(layout.row_block_sizes, dtype=_I64)[rows]
                     * np.asarray(layout.col_block_sizes, dtype=_I64)[col_idx]) if len(col_idx) else np.zeros(0, _I64)
            block_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(_I64)
        block_offsets = np.asarray(block_offsets, dtype=_I64)
        if norms is None:
            norms = _block_norms(block_data, block_offsets)
        return cls(layout, _frozen(row_ptr), _frozen(col_idx), _frozen(block_data),
                   _frozen(block_offsets), _frozen(np.asarray(norms, dtype=np.float64)))

    @classmethod
    def empty(cls, layout):
        return cls._make(layout, np.zeros(layout.n_row_blocks + 1, _I64), [], [])

    @classmethod
    def from_coo(cls, layout, rows, cols, data, offsets, norms=None):
        """Assemble from unsorted, duplicate-free block coordinates.

        ``data``/``offsets`` describe the blocks in the given coordinate order.
        """
        rows = np.asarray(rows, dtype=_I64)
        cols = np.asarray(cols, dtype=_I64)
        offsets = np.asarray(offsets, dtype=_I64)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        if len(rows) > 1:
            same = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if same.any():
                k = int(np.argmax(same))
                raise IntegrityError(f"duplicate block at ({rows[k]}, {cols[k]})")
        lengths = np.diff(offsets)[order]
        new_data = _gather_segments(np.asarray(data, dtype=np.float64), offsets[:-1][order], lengths)
        row_ptr = np.zeros(layout.n_row_blocks + 1, dtype=_I64)
        np.add.at(row_ptr, rows + 1, 1)
        row_ptr = np.cumsum(row_ptr)
        new_offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(_I64)
        if norms is not None:
            norms = np.asarray(norms)[order]
        return cls._make(layout, row_ptr, cols, new_data, new_offsets, norms)

    @property
    def n_blocks(self) -> int:
        return len(self.col_idx)

    @property
    def shape(self):
        return self.layout.shape

    def block_rows(self) -> np.ndarray:
        """Block-row index of every stored block."""
        return np.repeat(np.arange(self.layout.n_row_blocks, dtype=_I64), np.diff(self.row_ptr))

    def block_shape(self, b: int) -> tuple[int, int]:
        r = int(np.searchsorted(self.row_ptr, b, side="right") - 1)
        return self.layout.row_block_sizes[r], self.layout.col_block_sizes[int(self.col_idx[b])]

    def block(self, b: int) -> np.ndarray:
        """Read-only (m, n) view of stored block ``b``."""
        m, n = self.block_shape(b)
        lo = self.block_offsets[b]
        return self.block_data[lo:lo + m * n].reshape((m, n), order="F")

    def find(self, i: int, j: int):
        """Stored index of block (i, j), or None."""
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        k = lo + np.searchsorted(self.col_idx[lo:hi], j)
        if k < hi and self.col_idx[k] == j:
            return int(k)
        return None

    def iter_blocks(self):
        rows = self.block_rows()
        for b in range(self.n_blocks):
            yield int(rows[b]), int(self.col_idx[b]), self.block(b)

    def validate(self) -> None:
        """Check every structural invariant; raise IntegrityError on the first failure."""
        lay = self.layout
        rp, ci = self.row_ptr, self.col_idx
        if len(rp) != lay.n_row_blocks + 1:
            raise IntegrityError("row_ptr length does not match block-row count")
        if rp[0] != 0 or rp[-1] != len(ci) or np.any(np.diff(rp) < 0):
            raise IntegrityError("row_ptr must start at 0, be non-decreasing and end at n_blocks")
        if len(ci) and (ci.min() < 0 or ci.max() >= lay.n_col_blocks):
            raise IntegrityError("column index out of range")
        rows = self.block_rows()
        if len(ci) > 1:
            same_row = rows[1:] == rows[:-1]
            if np.any(same_row & (ci[1:] <= ci[:-1])):
                raise IntegrityError("column indices not strictly increasing within a block row")
        sizes = (np.asarray(lay.row_block_sizes, _I64)[rows] * np.asarray(lay.col_block_sizes, _I64)[ci]
                 if len(ci) else np.zeros(0, _I64))
        if len(self.block_offsets) != len(ci) + 1 or np.any(np.diff(self.block_offsets) != sizes) \
                or self.block_offsets[0] != 0:
            raise IntegrityError("block offsets inconsistent with layout")
        if len(self.block_data) != int(sizes.sum()):
            raise IntegrityError("block_data length does not match stored block sizes")
        if len(self.norms) != len(ci):
            raise IntegrityError("one norm per stored block required")
        fresh = _block_norms(self.block_data, self.block_offsets)
        if not np.all(np.abs(fresh - self.norms) <= 1e-14 * np.maximum(fresh, np.finfo(float).tiny)):
            raise IntegrityError("stored norms differ from recomputed Frobenius norms")

    def same_as(self, other: "BlockCsr") -> bool:
        """Bitwise equality of structure, data and norms."""
        return (self.layout == other.layout
                and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_idx, other.col_idx)
                and self.block_data.tobytes() == other.block_data.tobytes()
                and self.norms.tobytes() == other.norms.tobytes())


def build_from_triplets(layout: BlockLayout, entries: Iterable) -> BlockCsr:
    """Assemble a BlockCsr from ``(block_row, block_col, values)`` entries.

    ``values`` is an (m, n) array in natural orientation. Repeated coordinates
    are summed in input order; explicit zero blocks are kept.
    """
    acc: dict = {}
    rs, cs = layout.row_block_sizes, layout.col_block_sizes
    for i, j, values in entries:
        i, j = int(i), int(j)
        if not (0 <= i < layout.n_row_blocks and 0 <= j < layout.n_col_blocks):
            raise ConstructionError(f"block ({i}, {j}) outside the {layout.n_row_blocks}x{layout.n_col_blocks} block grid",
                                    (i, j))
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (rs[i], cs[j]):
            raise ConstructionError(f"block ({i}, {j}) has shape {v.shape}, layout expects ({rs[i]}, {cs[j]})",
                                    (i, j))
        if (i, j) in acc:
            acc[(i, j)] = acc[(i, j)] + v
        else:
            acc[(i, j)] = v.copy()
    keys = sorted(acc)
    row_ptr = np.zeros(layout.n_row_blocks + 1, dtype=_I64)
    for i, _ in keys:
        row_ptr[i + 1] += 1
    row_ptr = np.cumsum(row_ptr)
    data = np.concatenate([acc[k].ravel(order="F") for k in keys]) if keys else np.zeros(0)
    return BlockCsr._make(layout, row_ptr, [j for _, j in keys], data)


def to_dense(m: BlockCsr) -> np.ndarray:
    """Dense (row-major) copy of ``m``; unstored blocks are zero."""
    out = np.zeros(m.shape)
    ro, co = m.layout.row_offsets, m.layout.col_offsets
    for i, j, blk in m.iter_blocks():
        out[ro[i]:ro[i + 1], co[j]:co[j + 1]] = blk
    return out


def to_blocks(dense, layout: BlockLayout, keep_zero=False) -> list:
    """Split a dense matrix into ``(i, j, block)`` triplets, skipping all-zero blocks."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.shape != layout.shape:
        raise ParameterError(f"dense shape {dense.shape} does not match layout {layout.shape}")
    ro, co = layout.row_offsets, layout.col_offsets
    out = []
    for i in range(layout.n_row_blocks):
        for j in range(layout.n_col_blocks):
            blk = dense[ro[i]:ro[i + 1], co[j]:co[j + 1]]
            if keep_zero or np.any(blk != 0):
                out.append((i, j, blk.copy()))
    return out


def select_blocks(m: BlockCsr, keep: np.ndarray) -> BlockCsr:
    """Sub-matrix with only the stored blocks where ``keep`` is true (same layout)."""
    keep = np.asarray(keep, dtype=bool)
    rows = m.block_rows()[keep]
    row_ptr = np.zeros(m.layout.n_row_blocks + 1, dtype=_I64)
    np.add.at(row_ptr, rows + 1, 1)
    starts = m.block_offsets[:-1][keep]
    lengths = np.diff(m.block_offsets)[keep]
    data = _gather_segments(m.block_data, starts, lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(_I64)
    return BlockCsr._make(m.layout, np.cumsum(row_ptr), m.col_idx[keep], data, offsets, m.norms[keep])


def filter_blocks(m: BlockCsr, eps: float) -> BlockCsr:
    """Keep only blocks whose norm is strictly greater than ``eps``."""
    if not eps >= 0:
        raise ParameterError(f"filter threshold must be >= 0, got {eps}")
    return select_blocks(m, m.norms > eps)


@dataclass(frozen=True, eq=False)
class Permutation:
    """Bijection on 0..n-1; ``forward[i]`` is the new position of index ``i``."""

    forward: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        f = np.asarray(self.forward, dtype=_I64)
        if not np.array_equal(np.sort(f), np.arange(len(f))):
            raise ParameterError("permutation forward map is not a bijection")
        object.__setattr__(self, "forward", _frozen(f))

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n, dtype=_I64))

    @property
    def n(self) -> int:
        return len(self.forward)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(self.n, dtype=_I64)
        return inv

    def __eq__(self, other):
        if not isinstance(other, Permutation):
            return NotImplemented
        return np.array_equal(self.forward, other.forward)

    def __hash__(self):
        return hash(self.forward.tobytes())


def random_permutation(n: int, seed: int) -> Permutation:
    if n < 1:
        raise ParameterError("permutation size must be >= 1")
    if seed < 0:
        raise ParameterError("seed must be unsigned")
    return Permutation(np.random.default_rng(seed).permutation(n), seed)


# --- BSM1 ------------------------------------------------------------------

def panel_bytes(m: BlockCsr) -> bytes:
    """BSM1 body (everything after magic and version)."""
    lay = m.layout
    parts = [
        struct.pack("<QQQ", lay.n_row_blocks, lay.n_col_blocks, m.n_blocks),
        np.asarray(lay.row_block_sizes, dtype="<u4").tobytes(),
        np.asarray(lay.col_block_sizes, dtype="<u4").tobytes(),
        m.row_ptr.astype("<u8").tobytes(),
        m.col_idx.astype("<u8").tobytes(),
        m.block_data.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def panel_size(m: BlockCsr) -> int:
    lay = m.layout
    return 24 + 4 * (lay.n_row_blocks + lay.n_col_blocks) + 8 * (lay.n_row_blocks + 1) \
        + 8 * m.n_blocks + 8 * len(m.block_data)


class _Reader:
    def __init__(self, buf, base=0):
        self.buf = buf
        self.pos = 0
        self.base = base

    def take(self, nbytes, what):
        if self.pos + nbytes > len(self.buf):
            raise FormatError(f"truncated stream while reading {what}", self.base + self.pos)
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def array(self, dtype, count, what):
        count = int(count)
        item = np.dtype(dtype).itemsize
        if count > (len(self.buf) - self.pos) // item:
            raise FormatError(f"truncated stream while reading {what}", self.base + self.pos)
        return np.frombuffer(self.take(item * count, what), dtype=dtype)


def panel_from_bytes(buf: bytes, base_offset: int = 0) -> BlockCsr:
    r = _Reader(memoryview(buf), base_offset)
    nrb, ncb, nb = struct.unpack("<QQQ", r.take(24, "header counts"))
    rsz_at = r.base + r.pos
    rsz = r.array("<u4", nrb, "row block sizes")
    csz = r.array("<u4", ncb, "column block sizes")
    if np.any(rsz == 0) or np.any(csz == 0):
        raise FormatError("zero block size", rsz_at)
    layout = BlockLayout(tuple(rsz.tolist()), tuple(csz.tolist()))
    rp_at = r.base + r.pos
    row_ptr = r.array("<u8", nrb + 1, "row_ptr").astype(_I64)
    ci_at = r.base + r.pos
    col_idx = r.array("<u8", nb, "col_idx")
    if np.any(col_idx >= ncb):
        raise FormatError("column index out of range", ci_at)
    col_idx = col_idx.astype(_I64)
    if row_ptr[0] != 0 or row_ptr[-1] != nb or np.any(np.diff(row_ptr) < 0):
        raise FormatError("invalid row_ptr", rp_at)
    rows = np.repeat(np.arange(nrb, dtype=_I64), np.diff(row_ptr))
    total = int((rsz.astype(_I64)[rows] * csz.astype(_I64)[col_idx]).sum()) if nb else 0
    data_at = r.base + r.pos
    data = r.array("<f8", total, "block data").astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after block data", r.base + r.pos)
    m = BlockCsr._make(layout, row_ptr, col_idx, data)
    try:
        m.validate()
    except IntegrityError as exc:
        raise FormatError(f"invariant violation: {exc}", ci_at if "column" in str(exc) else data_at) from exc
    return m


def write_bsm(m: BlockCsr, destination) -> None:
    """Write ``m`` as BSM1 to a path or binary file object."""
    payload = BSM_MAGIC + struct.pack("<I", BSM_VERSION) + panel_bytes(m)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            fh.write(payload)
    else:
        destination.write(payload)


def read_bsm(source) -> BlockCsr:
    """Read BSM1 from a path, bytes or binary file object. Norms are recomputed."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        buf = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            buf = fh.read()
    else:
        buf = source.read()
    if len(buf) < 4:
        raise FormatError("truncated stream while reading magic", len(buf))
    if buf[:4] != BSM_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < 8:
        raise FormatError("truncated stream while reading version", 4)
    (version,) = struct.unpack("<I", buf[4:8])
    if version != BSM_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    return panel_from_bytes(buf[8:], base_offset=8)
