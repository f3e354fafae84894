"""Single-node C := C + A*B over blocked-CSR operands.

The work is split statically by A block row. Each worker walks its rows
with a recursive-bisection traversal, drops block pairs whose norm product
does not exceed the threshold, and groups the survivors into batches of
identical (m, n, k) that are executed by one dispatched kernel.

Accumulation order per C block is: kernel key first, then ascending inner
block index. That order depends only on the operands, never on the worker
count, the batch capacity or the traversal cutoff, so results are bitwise
reproducible across those settings.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import BlockCsr, BlockLayout
from .errors import ParameterError
from .kernels import MAX_GENERIC_DIM, KernelKey, KernelTable, default_table

DEFAULT_CUTOFF = 16
DEFAULT_BATCH_CAPACITY = 1024

_KEY_BASE = MAX_GENERIC_DIM + 1


def _key_code(m, n, k):
    return (m * _KEY_BASE + n) * _KEY_BASE + k


def _key_of(code) -> KernelKey:
    code = int(code)
    k = code % _KEY_BASE
    code //= _KEY_BASE
    return KernelKey(code // _KEY_BASE, code % _KEY_BASE, k)


def _as_range(r):
    if isinstance(r, range):
        if r.step != 1:
            raise ParameterError("only unit-step ranges are supported")
        return r.start, r.stop
    lo, hi = r
    return int(lo), int(hi)


def plan_traversal(row_range, col_range, cutoff: int = DEFAULT_CUTOFF) -> list:
    """Tiles ``((r0, r1), (c0, c1))`` covering rows x cols, depth first.

    The larger extent is halved (rows on a tie) until both extents are at
    most ``cutoff``. Inside a tile rows are the outer loop, columns inner.
    """
    r0, r1 = _as_range(row_range)
    c0, c1 = _as_range(col_range)
    if r1 <= r0 or c1 <= c0:
        raise ParameterError(f"empty traversal range rows={r0}..{r1} cols={c0}..{c1}")
    if cutoff < 1:
        raise ParameterError("cutoff must be >= 1")
    out = []

    def rec(r0, r1, c0, c1):
        nr, nc = r1 - r0, c1 - c0
        if nr <= cutoff and nc <= cutoff:
            out.append(((r0, r1), (c0, c1)))
        elif nr >= nc:
            mid = r0 + nr // 2
            rec(r0, mid, c0, c1)
            rec(mid, r1, c0, c1)
        else:
            mid = c0 + nc // 2
            rec(r0, r1, c0, mid)
            rec(r0, r1, mid, c1)

    rec(r0, r1, c0, c1)
    return out


@dataclass
class WorkerPartition:
    ranges: list
    weights: list

    def owner_of(self, row: int) -> int:
        for w, (lo, hi) in enumerate(self.ranges):
            if lo <= row < hi:
                return w
        raise IndexError(row)


def partition_rows(block_row_weights, workers: int) -> WorkerPartition:
    """Greedy contiguous split: each worker takes rows until it reaches total/workers."""
    if workers < 1:
        raise ParameterError("workers must be >= 1")
    weights = [int(w) for w in block_row_weights]
    n = len(weights)
    target = sum(weights) / workers
    ranges = []
    pos = 0
    for w in range(workers):
        start = pos
        if w == workers - 1:
            pos = n
        else:
            acc = 0
            while pos < n:
                acc += weights[pos]
                pos += 1
                if acc >= target:
                    break
        ranges.append((start, pos))
    return WorkerPartition(ranges, weights)


class BatchEntry(NamedTuple):
    a_block: int
    b_block: int
    c_slot: int
    key: KernelKey


@dataclass
class Batch:
    """Homogeneous stack of block products, held as parallel index arrays."""

    key: KernelKey
    a_idx: np.ndarray
    b_idx: np.ndarray
    slots: np.ndarray
    owner: int

    def __len__(self):
        return len(self.a_idx)

    def entries(self):
        for a, b, s in zip(self.a_idx.tolist(), self.b_idx.tolist(), self.slots.tolist()):
            yield BatchEntry(a, b, s, self.key)


@dataclass
class LocalMmStats:
    flops: int = 0
    executed: int = 0
    skipped: int = 0
    batches: int = 0
    specialized_batches: int = 0
    worker_busy: list = field(default_factory=list)
    worker_flops: list = field(default_factory=list)
    plan_time: float = 0.0
    batch_time: float = 0.0
    finalize_time: float = 0.0
    executed_log: np.ndarray | None = None
    skipped_log: np.ndarray | None = None

    @property
    def candidates(self) -> int:
        return self.executed + self.skipped

    @property
    def imbalance(self) -> float:
        """(max - mean) / mean of per-worker busy time."""
        return _imbalance(self.worker_busy)

    @property
    def flop_imbalance(self) -> float:
        return _imbalance(self.worker_flops)


def _imbalance(values):
    if not values:
        return 0.0
    mean = float(np.mean(values))
    if mean <= 0:
        return 0.0
    return (float(np.max(values)) - mean) / mean


def count_flops(stats: LocalMmStats) -> int:
    return int(stats.flops)


def _expand_ranges(lo, hi):
    lengths = hi - lo
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, np.int64), lengths
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return np.repeat(lo - starts, lengths) + np.arange(total, dtype=np.int64), lengths


class _Operands:
    """Read-only index helpers shared by all workers."""

    def __init__(self, a: BlockCsr, b: BlockCsr, table: KernelTable):
        self.a, self.b, self.table = a, b, table
        self.a_rows = a.block_rows()
        self.b_rows = b.block_rows()
        self.ncols = b.layout.n_col_blocks
        self.b_keys = self.b_rows * self.ncols + b.col_idx
        self.rsz = np.asarray(a.layout.row_block_sizes, np.int64)
        self.ksz = np.asarray(a.layout.col_block_sizes, np.int64)
        self.csz = np.asarray(b.layout.col_block_sizes, np.int64)
        # Upper bound on candidate pairs per A row: prefix sums over A blocks.
        per_block = np.diff(b.row_ptr)[a.col_idx] if a.n_blocks else np.zeros(0, np.int64)
        self.cand_prefix = np.concatenate([[0], np.cumsum(per_block)]).astype(np.int64)


@dataclass
class _WorkerPlan:
    owner: int
    rows: tuple
    a_idx: np.ndarray
    b_idx: np.ndarray
    i: np.ndarray
    j: np.ndarray
    codes: np.ndarray
    skipped: np.ndarray


# Above this many candidate pairs a traversal node is split before its
# candidates are materialized.
_CANDIDATE_CHUNK = 1 << 20


def _candidates(ops: _Operands, r0, r1, c0, c1):
    """All (A block, B block) pairs for rows r0..r1, cols c0..c1, in (i, k, j) order."""
    a = ops.a
    sel = np.arange(a.row_ptr[r0], a.row_ptr[r1], dtype=np.int64)
    ks = a.col_idx[sel]
    lo = np.searchsorted(ops.b_keys, ks * ops.ncols + c0)
    hi = np.searchsorted(ops.b_keys, ks * ops.ncols + c1)
    b_idx, lengths = _expand_ranges(lo, hi)
    return np.repeat(sel, lengths), b_idx


def _traverse(ops: _Operands, rows, cutoff, emit):
    """Walk the bisection tiles of ``rows`` x all columns, emitting candidates per tile.

    Same tile order as :func:`plan_traversal`, but subtrees without
    candidates are pruned and candidate arrays are generated once per
    sufficiently small node, then split down to tiles.
    """
    a_row_ptr = ops.a.row_ptr

    def split(a_idx, b_idx, r0, r1, c0, c1):
        if len(a_idx) == 0:
            return
        nr, nc = r1 - r0, c1 - c0
        if nr <= cutoff and nc <= cutoff:
            emit(a_idx, b_idx)
            return
        if nr >= nc:
            mid = r0 + nr // 2
            left = ops.a_rows[a_idx] < mid
            split(a_idx[left], b_idx[left], r0, mid, c0, c1)
            split(a_idx[~left], b_idx[~left], mid, r1, c0, c1)
        else:
            mid = c0 + nc // 2
            left = ops.b.col_idx[b_idx] < mid
            split(a_idx[left], b_idx[left], r0, r1, c0, mid)
            split(a_idx[~left], b_idx[~left], r0, r1, mid, c1)

    def node(r0, r1, c0, c1):
        bound = ops.cand_prefix[a_row_ptr[r1]] - ops.cand_prefix[a_row_ptr[r0]]
        if bound == 0:
            return
        nr, nc = r1 - r0, c1 - c0
        leaf = nr <= cutoff and nc <= cutoff
        if leaf or bound <= _CANDIDATE_CHUNK:
            split(*_candidates(ops, r0, r1, c0, c1), r0, r1, c0, c1)
        elif nr >= nc:
            mid = r0 + nr // 2
            node(r0, mid, c0, c1)
            node(mid, r1, c0, c1)
        else:
            mid = c0 + nc // 2
            node(r0, r1, c0, mid)
            node(r0, r1, mid, c1)

    node(rows[0], rows[1], 0, ops.ncols)


def _plan_worker(ops: _Operands, owner, rows, eps, cutoff, record) -> _WorkerPlan:
    r0, r1 = rows
    a, b = ops.a, ops.b
    parts = []
    skipped = []

    def emit(a_idx, b_idx):
        keep = a.norms[a_idx] * b.norms[b_idx] > eps
        parts.append((a_idx[keep], b_idx[keep]))
        if record and not keep.all():
            skipped.append((a_idx[~keep], b_idx[~keep]))
        elif not record:
            skipped.append(int(np.count_nonzero(~keep)))

    if r1 > r0 and ops.ncols > 0:
        _traverse(ops, rows, cutoff, emit)
    if parts:
        a_idx = np.concatenate([p[0] for p in parts])
        b_idx = np.concatenate([p[1] for p in parts])
    else:
        a_idx = b_idx = np.zeros(0, np.int64)
    i = ops.a_rows[a_idx]
    j = b.col_idx[b_idx]
    k = a.col_idx[a_idx]
    codes = _key_code(ops.rsz[i], ops.csz[j], ops.ksz[k])
    if __debug__ and len(i):
        assert i.min() >= r0 and i.max() < r1, "worker planned a C block outside its rows"
    if record:
        if skipped:
            sk = np.stack([np.concatenate([s[0] for s in skipped]), np.concatenate([s[1] for s in skipped])])
        else:
            sk = np.zeros((2, 0), np.int64)
    else:
        sk = np.asarray(sum(skipped))
    return _WorkerPlan(owner, rows, a_idx, b_idx, i, j, codes, sk)


def _stack(m: BlockCsr, idx, rows, cols):
    """Gather blocks ``idx`` (all rows x cols) as an (N, rows, cols) array."""
    offs = m.block_offsets[idx]
    flat = m.block_data[offs[:, None] + np.arange(rows * cols)]
    return flat.reshape(len(idx), cols, rows).transpose(0, 2, 1)


class _Store:
    """Per-worker C accumulators, one (S, m, n) array per block shape."""

    def __init__(self, c: BlockCsr | None, rows, plan: _WorkerPlan, ops: _Operands):
        ncols = ops.ncols
        self.ncols = ncols
        self.groups = {}
        if ncols == 0:
            return
        codes = plan.i * ncols + plan.j
        if c is not None and c.n_blocks:
            lo, hi = c.row_ptr[rows[0]], c.row_ptr[rows[1]]
            c_sel = np.arange(lo, hi, dtype=np.int64)
            c_codes = c.block_rows()[c_sel] * ncols + c.col_idx[c_sel]
        else:
            c_sel = np.zeros(0, np.int64)
            c_codes = np.zeros(0, np.int64)
        all_codes = np.union1d(codes, c_codes)
        ii, jj = all_codes // ncols, all_codes % ncols
        shape_code = ops.rsz[ii] * _KEY_BASE + ops.csz[jj]
        for sc in np.unique(shape_code):
            mask = shape_code == sc
            m, n = divmod(int(sc), _KEY_BASE)
            grp_codes = all_codes[mask]
            store = np.zeros((len(grp_codes), m, n))
            if len(c_codes):
                present = np.isin(c_codes, grp_codes)
                if present.any():
                    pos = np.searchsorted(grp_codes, c_codes[present])
                    store[pos] = _stack(c, c_sel[present], m, n)
            self.groups[(m, n)] = (grp_codes, store)

    def slots(self, m, n, codes):
        grp_codes, _ = self.groups[(m, n)]
        return np.searchsorted(grp_codes, codes)

    def array(self, m, n):
        return self.groups[(m, n)][1]


def _execute_worker(ops: _Operands, plan: _WorkerPlan, store: _Store, capacity, batch_log):
    t0 = time.perf_counter()
    a, b = ops.a, ops.b
    order = np.argsort(plan.codes, kind="stable")
    codes = plan.codes[order]
    a_idx, b_idx = plan.a_idx[order], plan.b_idx[order]
    ij = plan.i[order] * ops.ncols + plan.j[order]
    bounds = np.flatnonzero(np.diff(codes)) + 1
    starts = np.concatenate([[0], bounds]) if len(codes) else np.zeros(0, np.int64)
    ends = np.concatenate([bounds, [len(codes)]]) if len(codes) else np.zeros(0, np.int64)
    flops = 0
    nbatches = nspec = 0
    for s, e in zip(starts.tolist(), ends.tolist()):
        key = _key_of(codes[s])
        m, n, k = key
        kernel, specialized = ops.table.dispatch(key)
        c_arr = store.array(m, n)
        slots_all = store.slots(m, n, ij[s:e])
        for lo in range(s, e, capacity):
            hi = min(lo + capacity, e)
            batch = Batch(key, a_idx[lo:hi], b_idx[lo:hi], slots_all[lo - s:hi - s], plan.owner)
            prod = kernel(_stack(a, batch.a_idx, m, k), _stack(b, batch.b_idx, k, n))
            # add.at applies repeated slots sequentially, in batch order.
            np.add.at(c_arr, batch.slots, prod)
            nbatches += 1
            nspec += specialized
            if batch_log is not None:
                batch_log.append(batch)
        flops += key.flops * (e - s)
    return time.perf_counter() - t0, flops, nbatches, nspec


def _finalize(layout: BlockLayout, stores, ncols):
    rows, cols, chunks, sizes = [], [], [], []
    for store in stores:
        for (m, n), (codes, arr) in store.groups.items():
            if not len(codes):
                continue
            rows.append(codes // ncols)
            cols.append(codes % ncols)
            chunks.append(arr.transpose(0, 2, 1).reshape(-1))
            sizes.append(np.full(len(codes), m * n, np.int64))
    if not rows:
        return BlockCsr.empty(layout)
    sizes = np.concatenate(sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return BlockCsr.from_coo(layout, np.concatenate(rows), np.concatenate(cols), np.concatenate(chunks), offsets)


def multiply_local(a: BlockCsr, b: BlockCsr, eps: float = 0.0, workers: int = 1,
                   batch_capacity: int = DEFAULT_BATCH_CAPACITY, *, c: BlockCsr | None = None,
                   table: KernelTable | None = None, cutoff: int = DEFAULT_CUTOFF,
                   record: bool = False, batch_log: list | None = None):
    """Return ``(c + a*b, stats)``; ``c`` defaults to an empty matrix.

    A block pair is multiplied only if the product of the operand norms is
    strictly greater than ``eps``. C blocks are created on first
    contribution. With ``record=True`` the stats carry the executed and
    skipped ``(i, k, j)`` triples.
    """
    if not eps >= 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    if workers < 1 or batch_capacity < 1:
        raise ParameterError("workers and batch_capacity must be >= 1")
    if a.layout.col_block_sizes != b.layout.row_block_sizes:
        raise ParameterError("inner block layouts of A and B differ")
    out_layout = BlockLayout(a.layout.row_block_sizes, b.layout.col_block_sizes)
    if c is not None and c.layout != out_layout:
        raise ParameterError("C layout does not match A rows x B columns")
    table = table or default_table()
    ops = _Operands(a, b, table)
    part = partition_rows(np.diff(a.row_ptr), workers)
    stats = LocalMmStats()

    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        def run(fn, *iterables):
            return list(pool.map(fn, *iterables)) if pool else list(map(fn, *iterables))

        plans = run(lambda w: _plan_worker(ops, w, part.ranges[w], eps, cutoff, record), range(workers))
        table.prepare({_key_of(code) for p in plans for code in np.unique(p.codes)})
        stores = run(lambda p: _Store(c, p.rows, p, ops), plans)
        t1 = time.perf_counter()
        results = run(lambda p, s: _execute_worker(ops, p, s, batch_capacity, batch_log), plans, stores)
        t2 = time.perf_counter()
    finally:
        if pool:
            pool.shutdown()
    result = _finalize(out_layout, stores, ops.ncols)
    t3 = time.perf_counter()

    stats.plan_time = t1 - t0
    stats.batch_time = t2 - t1
    stats.finalize_time = t3 - t2
    stats.worker_busy = [r[0] for r in results]
    stats.worker_flops = [r[1] for r in results]
    stats.flops = int(sum(stats.worker_flops))
    stats.batches = sum(r[2] for r in results)
    stats.specialized_batches = sum(r[3] for r in results)
    stats.executed = int(sum(len(p.a_idx) for p in plans))
    if record:
        stats.skipped = int(sum(p.skipped.shape[1] for p in plans))
        stats.executed_log = np.concatenate(
            [np.stack([p.i, a.col_idx[p.a_idx], p.j], axis=1) for p in plans]) if plans else np.zeros((0, 3), np.int64)
        sk_a = np.concatenate([p.skipped[0] for p in plans])
        sk_b = np.concatenate([p.skipped[1] for p in plans])
        stats.skipped_log = np.stack([ops.a_rows[sk_a], a.col_idx[sk_a], b.col_idx[sk_b]], axis=1)
    else:
        stats.skipped = int(sum(int(p.skipped) for p in plans))
    return result, stats
