"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py``.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bsmm.cli import main as cli_main  # noqa: E402
from bsmm.core import to_dense  # noqa: E402
from bsmm.dist import ProcessGrid, cannon_multiply, distribute, gather  # noqa: E402
from bsmm.kernels import (SPECIALIZED_SIZES, KernelKey, KernelTable, gemm_acc, generic_kernel,  # noqa: E402
                          microbench)
from bsmm.local_mm import multiply_local  # noqa: E402
from bsmm.matrix_gen import PRESETS, generate, occupancy, random_uniform  # noqa: E402

from oracles import dense_product, max_scaled_error  # noqa: E402

TOL = 1e-12
SIZES = [1, 5, 6, 13, 23]


def _pair(rng, rows, inner, cols, occ, seed):
    a = random_uniform(rows, inner, SIZES, occ, seed)
    csz = rng.choice(SIZES, cols)
    b = random_uniform(inner, cols, SIZES, occ, seed + 1, row_sizes=a.layout.col_block_sizes, col_sizes=csz)
    return a, b


def criterion_1():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for case in range(120):
        occ = [0.05, 0.3, 1.0][case % 3]
        rows, inner, cols = (int(x) for x in rng.integers(1, 33, 3))
        if case % 10 == 0:
            rows = inner = cols = 32
        a, b = _pair(rng, rows, inner, cols, occ, 1000 + case)
        c, _ = multiply_local(a, b)
        ref, scale = dense_product(a, b)
        worst = max(worst, max_scaled_error(to_dense(c), ref, scale))
        cases += 1
    elapsed = time.perf_counter() - t0
    return worst <= TOL and elapsed < 120, f"{cases} cases, max scaled error {worst:.2e}, {elapsed:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    a = random_uniform(32, 32, SIZES, 0.3, 7)
    b = random_uniform(32, 32, SIZES, 0.3, 8, row_sizes=a.layout.col_block_sizes,
                       col_sizes=a.layout.col_block_sizes)
    ref, scale = dense_product(a, b)
    local, _ = multiply_local(a, b)
    dense = {}
    bitwise_p1 = False
    for q in (1, 2, 3, 4):
        grid = ProcessGrid(q)
        c, _ = cannon_multiply(distribute(a, grid, 5), distribute(b, grid, 5))
        g = gather(c)
        if q == 1:
            bitwise_p1 = g.same_as(local)
        dense[q] = to_dense(g)
    cross = max(max_scaled_error(dense[q], dense[1], scale) for q in (2, 3, 4))
    oracle = max(max_scaled_error(d, ref, scale) for d in dense.values())
    elapsed = time.perf_counter() - t0
    ok = bitwise_p1 and cross <= TOL and oracle <= TOL and elapsed < 120
    return ok, f"P=1 bitwise={bitwise_p1}, cross-P {cross:.2e}, vs dense {oracle:.2e}, {elapsed:.1f}s"


def criterion_3():
    a = random_uniform(24, 24, SIZES, 0.3, 17)
    b = random_uniform(24, 24, SIZES, 0.3, 18, row_sizes=a.layout.col_block_sizes,
                       col_sizes=a.layout.col_block_sizes)
    checked, ok = 0, True
    for q in (1, 2):
        grid = ProcessGrid(q)
        da, db = distribute(a, grid, 1), distribute(b, grid, 1)
        ref = None
        for workers in (1, 2, 4, 8):
            for cap in (1, 64, 1024):
                c = gather(cannon_multiply(da, db, 0.0, workers, cap)[0])
                if ref is None:
                    ref = c
                ok &= c.same_as(ref)
                checked += 1
    return ok, f"{checked} (P, workers, capacity) runs bit-identical per P"


def criterion_4():
    m = generate(PRESETS["h2o-dft-ls"], 0.005, 3)
    c0, _ = multiply_local(m, m)
    ok = True
    worst = 0.0
    sets = []
    for eps in (1e-8, 1e-5, 1e-2):
        ce, st = multiply_local(m, m, eps=eps, record=True)
        skipped = {}
        for i, _, j in st.skipped_log:
            skipped[(i, j)] = skipped.get((i, j), 0) + 1
        for i, j, blk in c0.iter_blocks():
            idx = ce.find(i, j)
            err = np.linalg.norm((ce.block(idx) if idx is not None else 0) - blk)
            bound = skipped.get((i, j), 0) * eps
            ok &= err <= bound * (1 + 1e-12) + 1e-300
            if bound:
                worst = max(worst, err / bound)
        sets.append({tuple(t) for t in st.executed_log})
    mono = all(hi <= lo for lo, hi in zip(sets, sets[1:]))
    return ok and mono, f"max err/bound {worst:.3f}, executed sets nested={mono}"


def criterion_5():
    t0 = time.perf_counter()
    m = random_uniform(32, 32, [5], 1.0, 2)
    sent = {}
    for q in (2, 4):
        grid = ProcessGrid(q)
        _, st = cannon_multiply(distribute(m, grid, 1), distribute(m, grid, 1))
        sent[q] = np.mean([s.bytes_sent for s in st])
    ratio = sent[4] / sent[2]
    elapsed = time.perf_counter() - t0
    return 0.4 <= ratio <= 0.65 and elapsed < 60, f"bytes ratio q=4/q=2 = {ratio:.3f}, {elapsed:.1f}s"


def criterion_6():
    rng = np.random.default_rng(6)
    table = KernelTable()
    sizes = list(SPECIALIZED_SIZES)
    same = 0
    for _ in range(50):
        key = KernelKey(*(int(rng.choice(sizes)) for _ in range(3)))
        fn, spec = table.dispatch(key)
        a = rng.standard_normal((4, key.m, key.k))
        b = rng.standard_normal((4, key.k, key.n))
        flat_c = rng.standard_normal(key.m * key.n)
        via_acc = gemm_acc(key, a[0].ravel(order="F"), b[0].ravel(order="F"), flat_c.copy(), table)
        expect = flat_c.reshape(key.n, key.m).T + generic_kernel(a[:1], b[:1])[0]
        same += int(spec and fn(a, b).tobytes() == generic_kernel(a, b).tobytes()
                    and via_acc.reshape(key.n, key.m).T.tobytes() == expect.tobytes())
    rep = microbench([(4, 4, 4), (6, 6, 6), (23, 23, 23)], 1 << 18, reps=2)
    flops_ok = all(e.flops == 2 * e.m * e.n * e.k * e.calls and e.calls == e.pairs * 2 for e in rep.keys)
    sz = [int(x) for x in rng.choice(SIZES, 10)]
    m = random_uniform(10, 10, SIZES, 0.4, 3, row_sizes=sz, col_sizes=sz)
    _, st = multiply_local(m, m, record=True)
    rs = m.layout.row_block_sizes
    replay = sum(2 * rs[i] * rs[k] * rs[j] for i, k, j in st.executed_log)
    flops_ok &= st.flops == replay
    return same == 50 and flops_ok, f"{same}/50 keys bit-identical, FLOP counters exact={flops_ok}"


def criterion_7():
    se = generate(PRESETS["s-e"], 0.1, 42)
    h2o = generate(PRESETS["h2o-dft-ls"], 0.1, 42)
    am = generate(PRESETS["amorph"], 0.05, 42)
    occ_se, occ_h2o = occupancy(se), occupancy(h2o)
    sizes_ok = (set(se.layout.row_block_sizes) == {6} and set(h2o.layout.row_block_sizes) == {23}
                and set(am.layout.row_block_sizes) == {5, 13})
    ok = 4e-4 <= occ_se <= 6e-4 and 0.07 <= occ_h2o <= 0.15 and sizes_ok
    return ok, f"s-e {occ_se:.3e}, h2o-dft-ls {occ_h2o:.4f}, block-size sets exact={sizes_ok}"


def _bench(tmp, name, preset, scale):
    rep = Path(tmp) / f"{name}.json"
    code = cli_main(["bench", "--preset", preset, "--scale", str(scale), "--ranks", "4", "--chain", "3",
                     "--reps", "2", "--eps", "1e-5", "--report", str(rep)])
    if code != 0:
        raise RuntimeError(f"bench {preset} exited with {code}")
    return json.loads(rep.read_text())


def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        se = _bench(tmp, "se", "s-e", 0.01)
        am = _bench(tmp, "am", "amorph", 0.005)
    worst = max(abs(r["waitall_pct"] + r["batch_pct"] + r["other_pct"] - 100)
                for rep in (se, am) for run in rep["runs"] for r in run["ranks"])
    w_se, w_am = se["average"]["avg_waitall_pct"], am["average"]["avg_waitall_pct"]
    return worst <= 0.5 and w_se > w_am, f"max |sum-100| {worst:.2e}%, waitall s-e {w_se:.1f}% > amorph {w_am:.1f}%"


CRITERIA = {
    1: ("dense-oracle correctness", criterion_1),
    2: ("distributed correctness", criterion_2),
    3: ("parallel determinism", criterion_3),
    4: ("filtering bound", criterion_4),
    5: ("communication scaling", criterion_5),
    6: ("kernel equivalence", criterion_6),
    7: ("occupancy table shapes", criterion_7),
    8: ("timing breakdown structure", criterion_8),
}


def report_line(n):
    name, fn = CRITERIA[n]
    ok, detail = fn()
    return ok, f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    ok, line = report_line(n)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_criterion_9_documented(capsys):
    readme = (Path(__file__).parent.parent / "README.md").read_text()
    ok = "Not reproduced" in readme
    with capsys.disabled():
        print(f"\ncriterion 9 (hardware-bound results): {'PASS' if ok else 'FAIL'} - "
              "substituted by criteria 1-8, listed in README")
    assert ok


if __name__ == "__main__":
    results = [report_line(n) for n in sorted(CRITERIA)]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
