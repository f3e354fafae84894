"""Multiplication runs, chains and the reports the CLI writes."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import jsonschema
import numpy as np

from .core import BlockCsr, filter_blocks
from .dist import (CommStats, DistMatrix, LinkModel, ProcessGrid, Shard, aggregate, cannon_multiply,
                   distribute)
from .errors import ParameterError
from .local_mm import DEFAULT_BATCH_CAPACITY, count_flops, multiply_local
from .matrix_gen import occupancy

log = logging.getLogger(__name__)

# Default simulated interconnect for benchmark runs.
DEFAULT_LATENCY_S = 20e-6
DEFAULT_BANDWIDTH_BPS = 1e9


@dataclass
class RunConfig:
    preset: str | None = None
    inputs: tuple = ()
    scale: float = 0.01
    eps: float = 0.0
    ranks: int = 1
    workers: int = 1
    batch_capacity: int = DEFAULT_BATCH_CAPACITY
    reps: int = 4
    chain: int | None = None
    seed: int = 42
    latency: float = DEFAULT_LATENCY_S
    bandwidth: float = DEFAULT_BANDWIDTH_BPS
    output: str | None = None
    report: str | None = None

    def validate(self):
        ProcessGrid.from_ranks(self.ranks)
        if self.reps < 1:
            raise ParameterError("repetitions must be >= 1")
        if not self.eps >= 0:
            raise ParameterError("eps must be >= 0")
        if self.workers < 1 or self.batch_capacity < 1:
            raise ParameterError("workers and batch capacity must be >= 1")
        if self.chain is not None and self.chain < 1:
            raise ParameterError("chain length must be >= 1")
        if not 0 < self.scale <= 1:
            raise ParameterError(f"scale must be in (0, 1], got {self.scale}")
        return self

    @property
    def link(self) -> LinkModel:
        return LinkModel(self.latency, self.bandwidth if self.bandwidth > 0 else math.inf)


@dataclass
class StepResult:
    c: object
    flops: int
    seconds: float
    stats: list
    executed: int = 0
    skipped: int = 0


def _merge(total: list | None, stats: list) -> list:
    if total is None:
        return [CommStats(s.rank) for s in stats]
    return total


def _accumulate(into: list, stats: list):
    for acc, s in zip(into, stats):
        acc.bytes_sent += s.bytes_sent
        acc.bytes_received += s.bytes_received
        acc.waitall_time += s.waitall_time
        acc.batch_time += s.batch_time
        acc.other_time += s.other_time
        acc.total_time += s.total_time
        acc.flops += s.flops
        acc.executed += s.executed
        acc.skipped += s.skipped
        acc.imbalance = max(acc.imbalance, s.imbalance)


def multiply_step(a, b, cfg: RunConfig) -> StepResult:
    """One timed multiplication; ``a``/``b`` are BlockCsr for P=1, DistMatrix otherwise."""
    if isinstance(a, BlockCsr):
        t0 = time.perf_counter()
        c, ls = multiply_local(a, b, cfg.eps, cfg.workers, cfg.batch_capacity)
        elapsed = time.perf_counter() - t0
        st = CommStats(0, batch_time=ls.batch_time, total_time=elapsed,
                       other_time=elapsed - ls.batch_time, flops=ls.flops,
                       executed=ls.executed, skipped=ls.skipped, imbalance=ls.imbalance)
        return StepResult(c, count_flops(ls), elapsed, [st], ls.executed, ls.skipped)
    t0 = time.perf_counter()
    c, stats = cannon_multiply(a, b, cfg.eps, cfg.workers, cfg.batch_capacity, link=cfg.link)
    elapsed = time.perf_counter() - t0
    return StepResult(c, sum(s.flops for s in stats), elapsed, stats,
                      sum(s.executed for s in stats), sum(s.skipped for s in stats))


def _filter(m, eps):
    if isinstance(m, BlockCsr):
        return filter_blocks(m, eps)
    shards = tuple(Shard(filter_blocks(s.matrix, eps), s.rows, s.cols) for s in m.shards)
    return DistMatrix(m.grid, m.layout, m.row_perm, m.col_perm, shards)


def _occupancy(m):
    if isinstance(m, BlockCsr):
        return occupancy(m)
    cells = m.layout.n_row_blocks * m.layout.n_col_blocks
    return m.n_blocks / cells if cells else 0.0


def prepare_operands(a: BlockCsr, b: BlockCsr, cfg: RunConfig):
    if cfg.ranks == 1:
        return a, b
    grid = ProcessGrid.from_ranks(cfg.ranks)
    return distribute(a, grid, cfg.seed), distribute(b, grid, cfg.seed)


def run_chain(a: BlockCsr, b: BlockCsr, cfg: RunConfig, chain: int) -> dict:
    """C1 = A*B, then C_t = C_(t-1)*B, filtering C after every step."""
    da, db = prepare_operands(a, b, cfg)
    cur = da
    total_time = 0.0
    flops = 0
    trajectory = []
    comm = None
    imbalance = 0.0
    for _ in range(chain):
        res = multiply_step(cur, db, cfg)
        total_time += res.seconds
        flops += res.flops
        comm = _merge(comm, res.stats)
        _accumulate(comm, res.stats)
        imbalance = max(imbalance, max(s.imbalance for s in res.stats))
        cur = _filter(res.c, cfg.eps)
        trajectory.append(_occupancy(cur))
    return run_record(total_time, flops, comm, imbalance, trajectory)


def worker_sweep(a: BlockCsr, b: BlockCsr, cfg: RunConfig, chain: int, workers) -> list:
    """One chain per worker count; time is the best of ``cfg.reps`` runs."""
    rows = []
    for w in workers:
        sub = replace(cfg, workers=int(w)).validate()
        runs = [run_chain(a, b, sub, chain) for _ in range(cfg.reps)]
        rows.append({"workers": int(w), "time_s": min(r["time_s"] for r in runs), "flops": runs[0]["flops"]})
    base = rows[0]["time_s"] if rows else 0.0
    for r in rows:
        r["speedup"] = base / r["time_s"] if r["time_s"] > 0 else 0.0
    return rows


def run_record(seconds, flops, comm, imbalance, trajectory) -> dict:
    ranks = [s.to_dict() for s in comm]
    agg = aggregate(comm)
    other = float(np.mean([r["other_pct"] for r in ranks])) if ranks else 0.0
    return {
        "time_s": seconds,
        "avg_waitall_pct": agg["avg_waitall_pct"],
        "avg_batch_pct": agg["avg_batch_pct"],
        "other_pct": other,
        "flops": int(flops),
        "gflops": flops / seconds / 1e9 if seconds > 0 else 0.0,
        "imbalance_pct": 100.0 * imbalance,
        "occupancy_trajectory": trajectory,
        "ranks": ranks,
        "aggregate": agg,
    }


def summarize(cfg: RunConfig, runs: list, extra: dict | None = None) -> dict:
    times = [r["time_s"] for r in runs]
    mean_t = float(np.mean(times))
    report = {
        "config": {k: v for k, v in asdict(cfg).items() if k not in ("output", "report")},
        "runs": runs,
        "average": {
            "time_s": mean_t,
            "spread": (max(times) - min(times)) / mean_t if mean_t > 0 else 0.0,
            "avg_waitall_pct": float(np.mean([r["avg_waitall_pct"] for r in runs])),
            "avg_batch_pct": float(np.mean([r["avg_batch_pct"] for r in runs])),
            "other_pct": float(np.mean([r["other_pct"] for r in runs])),
            "flops": runs[0]["flops"],
            "gflops": float(np.mean([r["gflops"] for r in runs])),
            "imbalance_pct": float(np.mean([r["imbalance_pct"] for r in runs])),
        },
    }
    report["config"]["inputs"] = list(cfg.inputs)
    if extra:
        report.update(extra)
    return report


_NUM = {"type": "number"}
_RANK_SCHEMA = {
    "type": "object",
    "required": ["rank", "bytes_sent", "bytes_received", "waitall_pct", "batch_pct", "other_pct", "total_s"],
    "properties": {"rank": {"type": "integer", "minimum": 0}, "bytes_sent": {"type": "integer", "minimum": 0},
                   "bytes_received": {"type": "integer", "minimum": 0}, "waitall_pct": _NUM,
                   "batch_pct": _NUM, "other_pct": _NUM, "total_s": {"type": "number", "minimum": 0}},
}
_RUN_SCHEMA = {
    "type": "object",
    "required": ["time_s", "avg_waitall_pct", "avg_batch_pct", "other_pct", "flops", "gflops",
                 "imbalance_pct", "occupancy_trajectory", "ranks", "aggregate"],
    "properties": {
        "time_s": {"type": "number", "minimum": 0},
        "flops": {"type": "integer", "minimum": 0},
        "occupancy_trajectory": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "ranks": {"type": "array", "minItems": 1, "items": _RANK_SCHEMA},
        "aggregate": {"type": "object", "required": ["avg_waitall_pct", "avg_batch_pct"]},
    },
}
BENCH_REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "runs", "average"],
    "properties": {
        "config": {"type": "object"},
        "runs": {"type": "array", "minItems": 1, "items": _RUN_SCHEMA},
        "average": {"type": "object", "required": ["time_s", "spread", "avg_waitall_pct", "avg_batch_pct",
                                                   "other_pct", "flops", "gflops", "imbalance_pct"]},
    },
}
MICROBENCH_SCHEMA = {
    "type": "object",
    "required": ["keys", "geomean_gflops", "working_set_bytes", "reps"],
    "properties": {
        "keys": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["m", "n", "k", "gflops"],
            "properties": {"m": {"type": "integer", "minimum": 1}, "n": {"type": "integer", "minimum": 1},
                           "k": {"type": "integer", "minimum": 1},
                           "gflops": {"type": "number", "exclusiveMinimum": 0}}}},
        "geomean_gflops": {"type": "number", "exclusiveMinimum": 0},
        "working_set_bytes": {"type": "integer", "minimum": 1},
        "reps": {"type": "integer", "minimum": 1},
    },
}


class ReportError(Exception):
    pass


def check_report(report: dict, schema=BENCH_REPORT_SCHEMA, tol_pct: float = 0.5) -> dict:
    """Validate against the schema plus the accounting identities; raise ReportError."""
    try:
        jsonschema.validate(report, schema)
    except jsonschema.ValidationError as exc:
        raise ReportError(f"report failed schema validation: {exc.message}") from exc
    if schema is BENCH_REPORT_SCHEMA:
        for run in report["runs"]:
            for r in run["ranks"]:
                total = r["waitall_pct"] + r["batch_pct"] + r["other_pct"]
                if r["total_s"] > 0 and abs(total - 100.0) > tol_pct:
                    raise ReportError(f"rank {r['rank']} percentages sum to {total:.3f}")
            if run["flops"] != report["runs"][0]["flops"]:
                raise ReportError("flop count differs between repetitions")
    return report


def runs_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "time_s", "avg_waitall_pct", "avg_batch_pct", "other_pct", "flops", "gflops",
                "imbalance_pct"])
    for i, r in enumerate(report["runs"]):
        w.writerow([i, r["time_s"], r["avg_waitall_pct"], r["avg_batch_pct"], r["other_pct"], r["flops"],
                    r["gflops"], r["imbalance_pct"]])
    return buf.getvalue()


def trajectory_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "step", "occupancy"])
    for i, r in enumerate(report["runs"]):
        for s, occ in enumerate(r["occupancy_trajectory"]):
            w.writerow([i, s + 1, occ])
    return buf.getvalue()


__all__ = ["RunConfig", "multiply_step", "run_chain", "run_record", "summarize", "check_report", "runs_csv",
           "trajectory_csv", "prepare_operands", "worker_sweep", "BENCH_REPORT_SCHEMA", "MICROBENCH_SCHEMA", "ReportError"]
