"""Small dense multiply-accumulate kernels and their dispatch table.

Every kernel computes, for each entry of a stack, ``a @ b`` by summing the
k rank-1 terms in ascending order starting from +0.0, using separate
multiply and add roundings. Specialized kernels are generated, fixed-size
versions of the same loop, so their output is bitwise equal to the generic one.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .errors import ParameterError

log = logging.getLogger(__name__)

SPECIALIZED_SIZES = (4, 5, 6, 8, 9, 13, 16, 22, 23, 32)
MAX_GENERIC_DIM = 128


class KernelKey(NamedTuple):
    m: int
    n: int
    k: int

    @classmethod
    def of(cls, m, n, k) -> "KernelKey":
        key = cls(int(m), int(n), int(k))
        if min(key) < 1:
            raise ParameterError(f"kernel dimensions must be >= 1, got {key}")
        if max(key) > MAX_GENERIC_DIM:
            raise ParameterError(f"kernel dimensions above {MAX_GENERIC_DIM} unsupported, got {key}")
        return key

    @property
    def flops(self) -> int:
        return 2 * self.m * self.n * self.k


def generic_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Products of a stack: ``a`` is (N, m, k), ``b`` is (N, k, n)."""
    count, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((count, m, n))
    tmp = np.empty_like(out)
    for p in range(k):
        np.multiply(a[:, :, p, None], b[:, None, p, :], out=tmp)
        out += tmp
    return out


_TEMPLATE = """\
def {name}(a, b):
    if a.shape[1:] != ({m}, {k}) or b.shape[1:] != ({k}, {n}):
        raise ParameterError("stack shape does not match kernel {m}x{n}x{k}")
    out = zeros((a.shape[0], {m}, {n}))
    tmp = empty_like(out)
{body}    return out
"""
_TERM = "    multiply(a[:, :, {p}, None], b[:, None, {p}, :], out=tmp)\n    out += tmp\n"


def generate_kernel(key: KernelKey) -> Callable:
    """Emit and compile the unrolled fixed-size kernel for ``key``."""
    m, n, k = key
    name = f"smm_{m}x{n}x{k}"
    src = _TEMPLATE.format(name=name, m=m, n=n, k=k, body="".join(_TERM.format(p=p) for p in range(k)))
    scope = {"zeros": np.zeros, "empty_like": np.empty_like, "multiply": np.multiply,
             "ParameterError": ParameterError}
    exec(compile(src, f"<{name}>", "exec"), scope)
    fn = scope[name]
    fn.key = key
    return fn


class KernelTable:
    """Ahead-of-time specialized kernels for a fixed key set, generic fallback otherwise."""

    def __init__(self, sizes: Iterable[int] = SPECIALIZED_SIZES, keys: Iterable[KernelKey] | None = None):
        if keys is None:
            sizes = tuple(sorted(set(int(s) for s in sizes)))
            keys = [KernelKey(m, n, k) for m in sizes for n in sizes for k in sizes]
        self.specialized_keys = frozenset(KernelKey(*key) for key in keys)
        self._compiled: dict = {}
        self.fallback = generic_kernel

    def prepare(self, keys: Iterable[KernelKey]) -> None:
        """Generate code for every specialized key in ``keys`` before it is needed."""
        for key in keys:
            key = KernelKey(*key)
            if key in self.specialized_keys and key not in self._compiled:
                self._compiled[key] = generate_kernel(key)

    def dispatch(self, key: KernelKey) -> tuple[Callable, bool]:
        key = KernelKey(*key)
        if key in self.specialized_keys:
            fn = self._compiled.get(key)
            if fn is None:
                fn = self._compiled[key] = generate_kernel(key)
            return fn, True
        return self.fallback, False

    def __contains__(self, key):
        return KernelKey(*key) in self.specialized_keys


_default_table = None


def default_table() -> KernelTable:
    global _default_table
    if _default_table is None:
        _default_table = KernelTable()
    return _default_table


def dispatch(table: KernelTable, key: KernelKey) -> tuple[Callable, bool]:
    return table.dispatch(key)


def gemm_acc(key: KernelKey, a, b, c, table: KernelTable | None = None) -> np.ndarray:
    """``c := c + a*b`` on flat column-major buffers; ``c`` is updated in place."""
    key = KernelKey.of(*key)
    m, n, k = key
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if a.size != m * k or b.size != k * n or c.size != m * n:
        raise ParameterError(f"buffer lengths ({a.size}, {b.size}, {c.size}) do not match key {tuple(key)}")
    kernel, _ = (table or default_table()).dispatch(key)
    prod = kernel(a.reshape(1, k, m).transpose(0, 2, 1), b.reshape(1, n, k).transpose(0, 2, 1))
    cv = c.reshape(n, m).T
    cv += prod[0]
    return c


# --- microbenchmark ------------------------------------------------------------

def geometric_mean(values: Iterable[float]) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ParameterError("geometric mean of an empty set")
    if any(v <= 0 for v in vals):
        raise ParameterError("geometric mean needs positive values")
    return math.exp(math.fsum(math.log(v) for v in vals) / len(vals))


@dataclass
class KeyRate:
    m: int
    n: int
    k: int
    gflops: float
    pairs: int = 0
    calls: int = 0
    flops: int = 0
    seconds: float = 0.0


@dataclass
class MicrobenchReport:
    keys: list = field(default_factory=list)
    geomean_gflops: float = 0.0
    working_set_bytes: int = 0
    reps: int = 1

    def to_dict(self) -> dict:
        return {"keys": [asdict(e) for e in self.keys], "geomean_gflops": self.geomean_gflops,
                "working_set_bytes": self.working_set_bytes, "reps": self.reps}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "n", "k", "gflops"])
        for e in self.keys:
            w.writerow([e.m, e.n, e.k, repr(e.gflops)])
        return buf.getvalue()

    @classmethod
    def from_rates(cls, rates, working_set_bytes=0, reps=1) -> "MicrobenchReport":
        """Build a report from ``((m, n, k), gflops)`` pairs."""
        entries = [KeyRate(*key, gflops=float(g)) for key, g in rates]
        return cls(entries, geometric_mean(e.gflops for e in entries), working_set_bytes, reps)


def microbench(keys, working_set_bytes: int, reps: int = 1, table: KernelTable | None = None,
               lanes: int = 64, trials: int = 3, seed: int = 0) -> MicrobenchReport:
    """Stream distinct (A_i, B_i) pairs filling ``working_set_bytes`` through each kernel.

    Products accumulate into a small resident C stack of ``lanes`` blocks;
    the best of ``trials`` timings is reported.
    """
    if reps < 1:
        raise ParameterError("reps must be >= 1")
    keys = [KernelKey.of(*key) for key in keys]
    if not keys:
        raise ParameterError("no kernel keys given")
    table = table or default_table()
    table.prepare(keys)
    rng = np.random.default_rng(seed)
    entries = []
    for key in keys:
        m, n, k = key
        pair_bytes = 8 * (m * k + k * n)
        pairs = working_set_bytes // pair_bytes
        if pairs < 1:
            raise ParameterError(f"working set of {working_set_bytes} bytes cannot hold one {m}x{n}x{k} pair")
        a = rng.uniform(-1, 1, (pairs, m, k))
        b = rng.uniform(-1, 1, (pairs, k, n))
        c = np.zeros((lanes, m, n))
        kernel, _ = table.dispatch(key)
        best = math.inf
        for _ in range(trials):
            t0 = time.perf_counter()
            for _ in range(reps):
                for lo in range(0, pairs, lanes):
                    hi = min(lo + lanes, pairs)
                    c[:hi - lo] += kernel(a[lo:hi], b[lo:hi])
            best = min(best, time.perf_counter() - t0)
        calls = pairs * reps
        flops = key.flops * calls
        rate = flops / max(best, 1e-12) / 1e9
        log.debug("kernel %dx%dx%d: %d pairs, %.3f GFLOP/s", m, n, k, pairs, rate)
        entries.append(KeyRate(m, n, k, rate, pairs, calls, flops, best))
        del a, b
    return MicrobenchReport(entries, geometric_mean(e.gflops for e in entries), int(working_set_bytes), reps)
