import threading

import numpy as np
import pytest

from bsmm.core import BlockCsr, BlockLayout, Permutation, build_from_triplets, panel_bytes, to_dense
from bsmm.dist import (DelayedTransport, DistMatrix, InProcessTransport, LinkModel, ProcessGrid, Shard, aggregate,
                       cannon_multiply, distribute, gather, waitall)
from bsmm.errors import FunneledViolation, IntegrityError, ParameterError, UsageError
from bsmm.local_mm import multiply_local
from bsmm.matrix_gen import random_uniform

from oracles import close_to_dense, dense_product, max_scaled_error


def operands(n=24, sizes=(1, 5, 6), occ=0.3, seed=0):
    a = random_uniform(n, n, sizes, occ, seed)
    b = random_uniform(n, n, sizes, occ, seed + 1, row_sizes=a.layout.col_block_sizes,
                       col_sizes=a.layout.col_block_sizes)
    return a, b


def dist_pair(a, b, q, seed=3):
    grid = ProcessGrid(q)
    return distribute(a, grid, seed), distribute(b, grid, seed)


# --- grid / distribution --------------------------------------------------------

def test_grid():
    g = ProcessGrid.from_ranks(9)
    assert g.q == 3 and g.size == 9
    assert [g.coords(r) for r in range(4)] == [(0, 0), (0, 1), (0, 2), (1, 0)]
    assert g.rank_of(1, 2) == 5 and g.rank_of(-1, 3) == 6
    with pytest.raises(ParameterError):
        ProcessGrid.from_ranks(8)


def test_distribute_q1():
    m = random_uniform(7, 5, [1, 5], 0.5, 1)
    d = distribute(m, ProcessGrid(1), seed=4)
    assert len(d.shards) == 1
    assert d.shards[0].matrix.same_as(m)
    assert gather(d).same_as(m)


def test_identity_permutation_routing():
    lay = BlockLayout.square([2] * 6)
    m = build_from_triplets(lay, [(3, 5, np.ones((2, 2)))])
    d = distribute(m, ProcessGrid(2), row_perm=Permutation.identity(6), col_perm=Permutation.identity(6))
    counts = [s.matrix.n_blocks for s in d.shards]
    assert counts == [0, 0, 0, 1]
    s = d.shards[3]
    assert s.rows[s.matrix.block_rows()[0]] == 3 and s.cols[s.matrix.col_idx[0]] == 5


def test_shard_ownership_invariant():
    m = random_uniform(24, 24, [1, 5], 0.3, 12)
    d = distribute(m, ProcessGrid(3), seed=5)
    q = 3
    for rank, s in enumerate(d.shards):
        r, c = divmod(rank, q)
        s.matrix.validate()
        gr = s.rows[s.matrix.block_rows()]
        gc = s.cols[s.matrix.col_idx]
        assert np.all(d.row_perm.forward[gr] % q == r)
        assert np.all(d.col_perm.forward[gc] % q == c)


def test_distribute_balance_and_union():
    m = random_uniform(24, 24, [1, 5, 6], 0.3, 7)
    d = distribute(m, ProcessGrid(2), seed=7)
    counts = [s.matrix.n_blocks for s in d.shards]
    assert max(counts) <= 2 * min(counts)
    assert sum(counts) == m.n_blocks
    assert gather(d).same_as(m)


@pytest.mark.parametrize("q", [1, 2, 3, 4])
def test_gather_round_trip(q):
    m = random_uniform(17, 13, [1, 5, 13], 0.4, q)
    assert gather(distribute(m, ProcessGrid(q), seed=q)).same_as(m)


def test_gather_empty():
    lay = BlockLayout.square([3] * 5)
    out = gather(distribute(BlockCsr.empty(lay), ProcessGrid(2), seed=1))
    assert out.n_blocks == 0 and out.layout == lay


def test_gather_detects_overlap():
    m = random_uniform(6, 6, [2], 0.5, 1)
    d = distribute(m, ProcessGrid(1))
    dup = DistMatrix(d.grid, d.layout, d.row_perm, d.col_perm, d.shards + d.shards)
    with pytest.raises(IntegrityError):
        gather(dup)


# --- cannon ---------------------------------------------------------------------

def test_cannon_q1_bitwise_local():
    a, b = operands(seed=10)
    da, db = dist_pair(a, b, 1)
    c, stats = cannon_multiply(da, db)
    ref, _ = multiply_local(a, b)
    assert gather(c).same_as(ref)
    assert stats[0].bytes_sent == 0


def test_cannon_q2_dense_oracle():
    a, b = operands(seed=20)
    c, _ = cannon_multiply(*dist_pair(a, b, 2))
    out = gather(c)
    out.validate()
    assert close_to_dense(to_dense(out), a, b)


def test_cannon_p_invariance():
    a, b = operands(seed=30)
    ref, scale = dense_product(a, b)
    results = {}
    for q in (1, 2, 3, 4):
        c, stats = cannon_multiply(*dist_pair(a, b, q))
        results[q] = to_dense(gather(c))
        assert max_scaled_error(results[q], ref, scale) <= 1e-12
        assert sum(s.bytes_sent for s in stats) == sum(s.bytes_received for s in stats)
        assert c.n_blocks == gather(c).n_blocks
    for q in (2, 3, 4):
        assert max_scaled_error(results[q], results[1], scale) <= 1e-12


def test_cannon_workers_bitwise_at_fixed_p():
    a, b = operands(seed=40)
    da, db = dist_pair(a, b, 2)
    ref, _ = cannon_multiply(da, db, workers=1)
    for workers, cap in ((2, 1), (4, 64), (8, 1024)):
        c, _ = cannon_multiply(da, db, workers=workers, batch_capacity=cap)
        assert gather(c).same_as(gather(ref))


def expected_sent(da, db, q):
    """Bytes each rank ships under the alignment-then-shift schedule, recounted from the shards."""
    size_a = [len(panel_bytes(sh.matrix)) for sh in da.shards]
    size_b = [len(panel_bytes(sh.matrix)) for sh in db.shards]
    out = []
    for rank in range(q * q):
        r, c = divmod(rank, q)
        total = (size_a[rank] if r else 0) + (size_b[rank] if c else 0)
        if q > 1:
            for t in range(q):
                total += size_a[r * q + (c + r + t) % q] + size_b[((r + c + t) % q) * q + c]
        out.append(total)
    return out


@pytest.mark.parametrize("q", [1, 2, 3])
def test_bytes_sent_exact(q):
    a, b = operands(seed=50)
    da, db = dist_pair(a, b, q)
    _, stats = cannon_multiply(da, db)
    assert [s.bytes_sent for s in stats] == expected_sent(da, db, q)
    assert sum(s.bytes_sent for s in stats) == sum(s.bytes_received for s in stats)


def mean_sent(m, q):
    _, stats = cannon_multiply(*dist_pair(m, m, q, seed=1))
    return np.mean([s.bytes_sent for s in stats])


def test_comm_scaling_dense():
    m = random_uniform(32, 32, [5], 1.0, 2)
    ratio = mean_sent(m, 4) / mean_sent(m, 2)
    assert 0.4 <= ratio <= 0.65


def test_time_decomposition():
    a, b = operands(seed=60)
    _, stats = cannon_multiply(*dist_pair(a, b, 2), link=LinkModel(1e-4, 1e8))
    for s in stats:
        d = s.to_dict()
        assert abs(d["waitall_pct"] + d["batch_pct"] + d["other_pct"] - 100) <= 0.5
    agg = aggregate(stats)
    assert 0 <= agg["avg_waitall_pct"] <= 100


def test_cannon_errors():
    a, b = operands(seed=70)
    da = distribute(a, ProcessGrid(2), 1)
    with pytest.raises(ParameterError):
        cannon_multiply(da, distribute(b, ProcessGrid(3), 1))
    with pytest.raises(ParameterError):
        cannon_multiply(da, distribute(b, ProcessGrid(2), 2))
    with pytest.raises(ParameterError):
        cannon_multiply(da, distribute(b, ProcessGrid(2), 1), eps=-1)


# --- transport / waitall --------------------------------------------------------

def test_waitall_empty_and_precompleted():
    assert waitall([]) < 1e-3
    t = InProcessTransport(2)
    h = t.isend(0, 1, "x", b"abc")
    r = t.irecv(1, 0, "x")
    r.wait()
    h.wait()
    assert waitall([h, r]) < 1e-3
    assert r.payload == b"abc" and r.nbytes == 3


def test_waitall_injected_delay():
    t = DelayedTransport(2, send_delay={1: 0.05})
    t.isend(1, 0, "late", b"payload")
    r = t.irecv(0, 1, "late")
    elapsed = waitall([r])
    assert 0.045 <= elapsed <= 0.2


def test_waitall_double_consumption():
    t = InProcessTransport(2)
    h = t.isend(0, 1, 0, b"")
    waitall([h])
    with pytest.raises(UsageError):
        waitall([h])


def test_double_completion_is_error():
    t = InProcessTransport(2)
    h = t.isend(0, 1, 0, b"x")
    h.wait()
    with pytest.raises(UsageError):
        h._complete()


def test_funneled_violation():
    t = InProcessTransport(2)
    t.isend(0, 1, "a", b"")
    err = []

    def other():
        try:
            t.isend(0, 1, "b", b"")
        except FunneledViolation as exc:
            err.append(exc)

    th = threading.Thread(target=other)
    th.start()
    th.join()
    assert len(err) == 1


def test_shard_type():
    m = random_uniform(4, 4, [1], 1.0, 0)
    s = distribute(m, ProcessGrid(2), 0).shards[0]
    assert isinstance(s, Shard) and len(s.rows) == s.matrix.layout.n_row_blocks
