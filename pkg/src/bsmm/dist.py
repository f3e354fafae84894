"""Distributed multiplication over a q x q grid of simulated ranks.

Each rank runs in its own thread and owns one shard of every matrix. Ranks
only interact through a ``Transport`` that offers nonblocking send/receive
returning ``TransferHandle`` objects. The schedule is Cannon's algorithm
with C stationary: A panels travel left, B panels travel up, and each step
overlaps the transfer of the next panels with the local multiplication of
the current ones.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (BlockCsr, BlockLayout, Permutation, _gather_segments, panel_bytes, panel_from_bytes,
                   panel_size, random_permutation)
from .errors import FunneledViolation, IntegrityError, ParameterError, UsageError
from .local_mm import DEFAULT_BATCH_CAPACITY, multiply_local

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProcessGrid:
    q: int

    def __post_init__(self):
        if self.q < 1:
            raise ParameterError("grid side must be >= 1")

    @classmethod
    def from_ranks(cls, ranks: int) -> "ProcessGrid":
        q = math.isqrt(ranks) if ranks > 0 else 0
        if q < 1 or q * q != ranks:
            raise ParameterError(f"rank count must be a perfect square, got {ranks}")
        return cls(q)

    @property
    def size(self) -> int:
        return self.q * self.q

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.q)

    def rank_of(self, row: int, col: int) -> int:
        return (row % self.q) * self.q + col % self.q


# --- transport ---------------------------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    """Point-to-point link cost: ``latency + nbytes / bandwidth`` seconds."""

    latency: float = 0.0
    bandwidth: float = math.inf

    def transfer_time(self, nbytes: int) -> float:
        return self.latency + (nbytes / self.bandwidth if self.bandwidth != math.inf else 0.0)


class TransferHandle:
    """Pending send or receive. ``nbytes`` is known up front for sends, on arrival for receives."""

    def __init__(self, transport, kind, owner, peer, tag, nbytes=0):
        self.transport = transport
        self.kind = kind
        self.owner = owner
        self.peer = peer
        self.tag = tag
        self.nbytes = nbytes
        self.payload = None
        self.done = False
        self.consumed = False

    def _complete(self, payload=None):
        if self.done:
            raise UsageError(f"transfer {self.kind} {self.owner}<->{self.peer} {self.tag} completed twice")
        self.done = True
        if payload is not None:
            self.payload = payload
            self.nbytes = len(payload)

    def wait(self):
        self.transport._wait(self)
        return self.payload

    def __repr__(self):
        state = "consumed" if self.consumed else ("done" if self.done else "pending")
        return f"TransferHandle({self.kind}, {self.owner}->{self.peer}, tag={self.tag}, {self.nbytes}B, {state})"


class InProcessTransport:
    """Message channels between rank threads of one process.

    A message becomes visible to the receiver ``link.transfer_time(nbytes)``
    seconds after it was posted. Each rank is bound to the first thread that
    uses it and every later call from another thread is rejected.
    """

    def __init__(self, size: int, link: LinkModel | None = None):
        self.size = size
        self.link = link or LinkModel()
        self._cond = threading.Condition()
        self._mail: dict = {}
        self._owners: dict = {}
        self.aborted = False

    def _check_rank(self, rank):
        if not 0 <= rank < self.size:
            raise ParameterError(f"rank {rank} outside 0..{self.size - 1}")
        me = threading.get_ident()
        with self._cond:
            owner = self._owners.setdefault(rank, me)
        if owner != me:
            raise FunneledViolation(f"rank {rank} transport used from a non-coordinator thread")

    def _delay(self, src, dst, nbytes) -> float:
        return self.link.transfer_time(nbytes)

    def isend(self, src: int, dst: int, tag, payload: bytes) -> TransferHandle:
        self._check_rank(src)
        h = TransferHandle(self, "send", src, dst, tag, len(payload))
        ready = time.monotonic() + self._delay(src, dst, len(payload))
        with self._cond:
            key = (src, dst, tag)
            if key in self._mail:
                raise UsageError(f"duplicate message {key}")
            self._mail[key] = (bytes(payload), ready)
            self._cond.notify_all()
        h.ready_at = ready
        return h

    def irecv(self, dst: int, src: int, tag) -> TransferHandle:
        self._check_rank(dst)
        return TransferHandle(self, "recv", dst, src, tag)

    def abort(self):
        with self._cond:
            self.aborted = True
            self._cond.notify_all()

    def _wait(self, h: TransferHandle):
        self._check_rank(h.owner)
        if h.done:
            return
        if h.kind == "send":
            delay = h.ready_at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            h._complete()
            return
        key = (h.peer, h.owner, h.tag)
        with self._cond:
            while key not in self._mail:
                if self.aborted:
                    raise UsageError("transport aborted while waiting")
                self._cond.wait(0.5)
            payload, ready = self._mail.pop(key)
        delay = ready - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        h._complete(payload)


class DelayedTransport(InProcessTransport):
    """Test transport adding a fixed extra delivery delay per sending rank."""

    def __init__(self, size, link=None, send_delay=None):
        super().__init__(size, link)
        self.send_delay = dict(send_delay or {})

    def _delay(self, src, dst, nbytes):
        return super()._delay(src, dst, nbytes) + self.send_delay.get(src, 0.0)


def waitall(handles) -> float:
    """Block until every handle completes; return the blocking time in seconds."""
    handles = list(handles)
    for h in handles:
        if h.consumed:
            raise UsageError(f"{h!r} was already waited on")
    t0 = time.perf_counter()
    for h in handles:
        h.wait()
    for h in handles:
        h.consumed = True
    return time.perf_counter() - t0


# --- distributed matrices ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Shard:
    """Local sub-matrix plus the global block indices of its rows and columns."""

    matrix: BlockCsr
    rows: np.ndarray
    cols: np.ndarray


@dataclass(frozen=True, eq=False)
class DistMatrix:
    grid: ProcessGrid
    layout: BlockLayout
    row_perm: Permutation
    col_perm: Permutation
    shards: tuple

    @property
    def n_blocks(self) -> int:
        return sum(s.matrix.n_blocks for s in self.shards)


def _owned(perm: Permutation, q: int, cls: int) -> np.ndarray:
    # Local index order follows global order; the permutation only picks the owner.
    return np.flatnonzero(perm.forward % q == cls).astype(np.int64)


def _sub_layout(layout: BlockLayout, rows, cols) -> BlockLayout:
    rs, cs = layout.row_block_sizes, layout.col_block_sizes
    return BlockLayout(tuple(rs[i] for i in rows), tuple(cs[j] for j in cols))


def distribute(m: BlockCsr, grid: ProcessGrid, seed: int = 0, *, row_perm: Permutation | None = None,
               col_perm: Permutation | None = None) -> DistMatrix:
    """Route every block to rank (perm(row) mod q, perm(col) mod q).

    Rows and columns are both permuted with ``seed`` so that square operands
    distributed with one seed have aligned inner dimensions.
    """
    lay = m.layout
    q = grid.q
    row_perm = row_perm or random_permutation(max(lay.n_row_blocks, 1), seed)
    col_perm = col_perm or random_permutation(max(lay.n_col_blocks, 1), seed)
    if row_perm.n < lay.n_row_blocks or col_perm.n < lay.n_col_blocks:
        raise ParameterError("permutation shorter than the block grid")
    rows_g = m.block_rows()
    rank_of_block = (row_perm.forward[rows_g] % q) * q + col_perm.forward[m.col_idx] % q \
        if m.n_blocks else np.zeros(0, np.int64)
    lengths = np.diff(m.block_offsets)
    shards = []
    for rank in range(grid.size):
        r, c = grid.coords(rank)
        rows = _owned(row_perm, q, r)
        rows = rows[rows < lay.n_row_blocks]
        cols = _owned(col_perm, q, c)
        cols = cols[cols < lay.n_col_blocks]
        sel = np.flatnonzero(rank_of_block == rank)
        local_rows = np.searchsorted(rows, rows_g[sel])
        local_cols = np.searchsorted(cols, m.col_idx[sel])
        data = _gather_segments(m.block_data, m.block_offsets[sel], lengths[sel])
        offs = np.concatenate([[0], np.cumsum(lengths[sel])])
        local = BlockCsr.from_coo(_sub_layout(lay, rows, cols), local_rows, local_cols, data, offs,
                                  norms=m.norms[sel])
        shards.append(Shard(local, rows, cols))
    return DistMatrix(grid, lay, row_perm, col_perm, tuple(shards))


def gather(d: DistMatrix) -> BlockCsr:
    """Reassemble the global matrix from all shards."""
    rows, cols, chunks, lens, norms = [], [], [], [], []
    for s in d.shards:
        mat = s.matrix
        rows.append(s.rows[mat.block_rows()])
        cols.append(s.cols[mat.col_idx])
        chunks.append(mat.block_data)
        lens.append(np.diff(mat.block_offsets))
        norms.append(mat.norms)
    lens = np.concatenate(lens) if lens else np.zeros(0, np.int64)
    offsets = np.concatenate([[0], np.cumsum(lens)])
    try:
        return BlockCsr.from_coo(d.layout, np.concatenate(rows), np.concatenate(cols),
                                 np.concatenate(chunks) if chunks else np.zeros(0), offsets,
                                 norms=np.concatenate(norms) if norms else None)
    except IntegrityError as exc:
        raise IntegrityError(f"shards overlap: {exc}") from exc


# --- Cannon ------------------------------------------------------------------

@dataclass
class CommStats:
    rank: int
    bytes_sent: int = 0
    bytes_received: int = 0
    waitall_time: float = 0.0
    batch_time: float = 0.0
    other_time: float = 0.0
    total_time: float = 0.0
    flops: int = 0
    executed: int = 0
    skipped: int = 0
    imbalance: float = 0.0
    sends: list = field(default_factory=list)

    def _pct(self, t):
        return 100.0 * t / self.total_time if self.total_time > 0 else 0.0

    def to_dict(self) -> dict:
        return {"rank": self.rank, "bytes_sent": self.bytes_sent, "bytes_received": self.bytes_received,
                "waitall_pct": self._pct(self.waitall_time), "batch_pct": self._pct(self.batch_time),
                "other_pct": self._pct(self.other_time), "total_s": self.total_time}


def aggregate(stats) -> dict:
    """Averages over ranks, mirroring the per-system rows of a timing table."""
    rows = [s.to_dict() for s in stats]
    if not rows:
        return {"avg_waitall_pct": 0.0, "avg_batch_pct": 0.0}
    return {"avg_waitall_pct": float(np.mean([r["waitall_pct"] for r in rows])),
            "avg_batch_pct": float(np.mean([r["batch_pct"] for r in rows]))}


@dataclass
class _Panel:
    matrix: BlockCsr
    raw: bytes | None = None

    def payload(self) -> bytes:
        if self.raw is None:
            self.raw = panel_bytes(self.matrix)
        return self.raw


def _rank_main(rank, grid, a: DistMatrix, b: DistMatrix, transport, eps, workers, capacity, out, stats_out):
    q = grid.q
    r, c = grid.coords(rank)
    st = CommStats(rank)
    t0 = time.perf_counter()
    cur_a = _Panel(a.shards[rank].matrix)
    cur_b = _Panel(b.shards[rank].matrix)

    def post(panel, dst, tag):
        payload = panel.payload()
        h = transport.isend(rank, dst, tag, payload)
        st.bytes_sent += len(payload)
        st.sends.append((tag, dst, len(payload)))
        return h

    def settle(handles):
        st.waitall_time += waitall(handles)
        got = {}
        for h in handles:
            if h.kind == "recv":
                st.bytes_received += h.nbytes
                got[h.tag[0]] = _Panel(panel_from_bytes(h.payload), h.payload)
        return got

    # Alignment: rank (r, c) needs A panel (r, c + r) and B panel (r + c, c).
    handles = []
    if r % q:
        handles.append(post(cur_a, grid.rank_of(r, c - r), ("A", -1)))
        handles.append(transport.irecv(rank, grid.rank_of(r, c + r), ("A", -1)))
    if c % q:
        handles.append(post(cur_b, grid.rank_of(r - c, c), ("B", -1)))
        handles.append(transport.irecv(rank, grid.rank_of(r + c, c), ("B", -1)))
    got = settle(handles)
    cur_a = got.get("A", cur_a)
    cur_b = got.get("B", cur_b)

    acc = BlockCsr.empty(BlockLayout(a.shards[rank].matrix.layout.row_block_sizes,
                                     b.shards[rank].matrix.layout.col_block_sizes))
    busy = []
    for step in range(q):
        handles = []
        if q > 1:
            # Double buffering: next panels are in flight while this step computes.
            handles = [post(cur_a, grid.rank_of(r, c - 1), ("A", step)),
                       post(cur_b, grid.rank_of(r - 1, c), ("B", step)),
                       transport.irecv(rank, grid.rank_of(r, c + 1), ("A", step)),
                       transport.irecv(rank, grid.rank_of(r + 1, c), ("B", step))]
        acc, ls = multiply_local(cur_a.matrix, cur_b.matrix, eps, workers, capacity, c=acc)
        st.batch_time += ls.batch_time
        st.flops += ls.flops
        st.executed += ls.executed
        st.skipped += ls.skipped
        busy.append(ls.worker_busy)
        if handles:
            got = settle(handles)
            cur_a, cur_b = got["A"], got["B"]
    st.total_time = time.perf_counter() - t0
    st.other_time = st.total_time - st.waitall_time - st.batch_time
    per_worker = np.sum(np.asarray(busy), axis=0) if busy else np.zeros(0)
    if len(per_worker) and per_worker.mean() > 0:
        st.imbalance = float((per_worker.max() - per_worker.mean()) / per_worker.mean())
    out[rank] = acc
    stats_out[rank] = st


def cannon_multiply(a: DistMatrix, b: DistMatrix, eps: float = 0.0, workers: int = 1,
                    batch_capacity: int = DEFAULT_BATCH_CAPACITY, *, transport=None,
                    link: LinkModel | None = None):
    """Distributed ``C = A*B``; returns ``(c, per-rank CommStats)``.

    C stays where it is computed; only A and B panels are communicated.
    """
    if a.grid != b.grid:
        raise ParameterError(f"operands live on different grids ({a.grid.q}x{a.grid.q} vs {b.grid.q}x{b.grid.q})")
    if a.layout.col_block_sizes != b.layout.row_block_sizes:
        raise ParameterError("inner block layouts of A and B differ")
    if a.col_perm != b.row_perm:
        raise ParameterError("A column permutation differs from B row permutation; distribute both with one seed")
    if not eps >= 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    grid = a.grid
    transport = transport or InProcessTransport(grid.size, link)
    out = [None] * grid.size
    stats = [None] * grid.size
    errors = []

    def runner(rank):
        try:
            _rank_main(rank, grid, a, b, transport, eps, workers, batch_capacity, out, stats)
        except BaseException as exc:  # surfaced in the caller after join
            errors.append(exc)
            transport.abort()

    if grid.size == 1:
        runner(0)
    else:
        threads = [threading.Thread(target=runner, args=(rk,), name=f"rank-{rk}") for rk in range(grid.size)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise errors[0]
    shards = tuple(Shard(out[rk], a.shards[rk].rows, b.shards[rk].cols) for rk in range(grid.size))
    layout = BlockLayout(a.layout.row_block_sizes, b.layout.col_block_sizes)
    return DistMatrix(grid, layout, a.row_perm, b.col_perm, shards), stats


__all__ = ["ProcessGrid", "LinkModel", "TransferHandle", "InProcessTransport", "DelayedTransport",
           "waitall", "Shard", "DistMatrix", "distribute", "gather", "CommStats", "aggregate",
           "cannon_multiply", "panel_size"]
