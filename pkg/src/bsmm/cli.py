"""Command-line harness: ``bsmm gen | multiply | bench | kernels``.

Exit codes: 0 success, 2 usage or parameter error, 1 internal or integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from . import __version__
from .bench import (MICROBENCH_SCHEMA, ReportError, RunConfig, check_report, prepare_operands, multiply_step,
                    run_chain, run_record, runs_csv, summarize, trajectory_csv, worker_sweep)
from .core import BlockCsr, read_bsm, write_bsm
from .dist import gather
from .errors import FormatError, IntegrityError, ParameterError
from .kernels import microbench
from .matrix_gen import generate, get_preset, occupancy

log = logging.getLogger("bsmm")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

_UNITS = {"": 1, "b": 1, "k": 10**3, "kb": 10**3, "kib": 2**10, "m": 10**6, "mb": 10**6, "mib": 2**20,
          "g": 10**9, "gb": 10**9, "gib": 2**30}


def parse_size(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"invalid size {text!r} (examples: 4096, 256MiB, 2GB)")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def parse_range(text: str) -> list:
    """``m0:m1:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            if step < 1 or lo < 1 or hi < lo:
                raise ValueError
            return list(range(lo, hi + 1, step))
        vals = [int(p) for p in text.split(",")]
        if min(vals) < 1:
            raise ValueError
        return vals
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size range {text!r}; expected m0:m1:step") from None


def _common(p, reps_default):
    p.add_argument("--preset", help="benchmark preset name (s-e, h2o-dft-ls, amorph)")
    p.add_argument("--scale", type=float, default=0.01, help="fraction of the full block-row count")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--eps", type=float, default=0.0, help="norm-product filtering threshold")
    p.add_argument("--ranks", type=int, default=1, help="simulated ranks P (perfect square)")
    p.add_argument("--workers", type=int, default=1, help="worker threads per rank")
    p.add_argument("--batch-capacity", type=int, default=1024)
    p.add_argument("--reps", type=int, default=reps_default)
    p.add_argument("--latency-us", type=float, default=20.0, help="simulated link latency")
    p.add_argument("--bandwidth-gbs", type=float, default=1.0, help="simulated link bandwidth, 0 = unlimited")
    p.add_argument("-o", "--output", help="output file")
    p.add_argument("--report", help="JSON report path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsmm", description="Block-sparse matrix multiplication harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a preset matrix as BSM1")
    g.add_argument("--preset", required=True)
    g.add_argument("--scale", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("-o", "--output", required=True)

    m = sub.add_parser("multiply", help="C = A*B from BSM1 files or a preset")
    m.add_argument("inputs", nargs="*", help="A.bsm B.bsm")
    _common(m, reps_default=1)

    b = sub.add_parser("bench", help="multiplication chain with post-step filtering")
    b.add_argument("inputs", nargs="*", help="optional A.bsm B.bsm instead of a preset")
    _common(b, reps_default=4)
    b.add_argument("--chain", type=int, help="chain length (default: preset value)")
    b.add_argument("--csv", help="per-run CSV path (default: next to --report)")
    b.add_argument("--worker-sweep", type=parse_range, metavar="W0:W1:STEP",
                   help="also time the chain for each worker count")

    k = sub.add_parser("kernels", help="small-GEMM kernel microbenchmark")
    k.add_argument("--sizes", type=parse_range, default=parse_range("4:32:4"), help="m0:m1:step, m=n=k")
    k.add_argument("--working-set", type=parse_size, default=parse_size("256MiB"))
    k.add_argument("--reps", type=int, default=1)
    k.add_argument("-o", "--output", help="CSV path")
    k.add_argument("--report", help="JSON path")
    return parser


def _config(args, chain=None) -> RunConfig:
    return RunConfig(preset=args.preset, inputs=tuple(args.inputs), scale=args.scale, eps=args.eps,
                     ranks=args.ranks, workers=args.workers, batch_capacity=args.batch_capacity,
                     reps=args.reps, chain=chain, seed=args.seed, latency=args.latency_us * 1e-6,
                     bandwidth=args.bandwidth_gbs * 1e9, output=args.output, report=args.report).validate()


def _operands(cfg: RunConfig):
    if cfg.inputs:
        if len(cfg.inputs) != 2:
            raise ParameterError("give exactly two input files (A and B)")
        return read_bsm(cfg.inputs[0]), read_bsm(cfg.inputs[1])
    if not cfg.preset:
        raise ParameterError("either two input files or --preset is required")
    a = generate(get_preset(cfg.preset), cfg.scale, cfg.seed)
    return a, a


def _summary(m: BlockCsr) -> dict:
    rows, cols = m.shape
    return {"rows": rows, "cols": cols, "block_rows": m.layout.n_row_blocks,
            "block_cols": m.layout.n_col_blocks, "blocks": m.n_blocks, "occupancy": occupancy(m)}


def _write_text(path, text):
    Path(path).write_text(text)


def cmd_gen(args) -> int:
    preset = get_preset(args.preset)
    m = generate(preset, args.scale, args.seed)
    write_bsm(m, args.output)
    print(json.dumps({"preset": preset.name, "scale": args.scale, "seed": args.seed, "output": args.output,
                      **_summary(m)}))
    return EXIT_OK


def cmd_multiply(args) -> int:
    cfg = _config(args)
    a, b = _operands(cfg)
    da, db = prepare_operands(a, b, cfg)
    runs = []
    c = None
    for _ in range(cfg.reps):
        res = multiply_step(da, db, cfg)
        c = res.c if isinstance(res.c, BlockCsr) else gather(res.c)
        runs.append(run_record(res.seconds, res.flops, res.stats,
                                max(s.imbalance for s in res.stats), [occupancy(c)]))
    report = check_report(summarize(cfg, runs, {"result": _summary(c)}))
    if cfg.output:
        write_bsm(c, cfg.output)
    if cfg.report:
        _write_text(cfg.report, json.dumps(report, indent=2))
    print(json.dumps({"output": cfg.output, **_summary(c), "flops": report["average"]["flops"],
                      "time_s": report["average"]["time_s"]}))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args, args.chain)
    a, b = _operands(cfg)
    chain = cfg.chain or (get_preset(cfg.preset).chain if cfg.preset else 1)
    runs = [run_chain(a, b, cfg, chain) for _ in range(cfg.reps)]
    extra = {"chain": chain}
    if args.worker_sweep:
        extra["worker_sweep"] = worker_sweep(a, b, cfg, chain, args.worker_sweep)
    report = check_report(summarize(cfg, runs, extra))
    if cfg.report:
        _write_text(cfg.report, json.dumps(report, indent=2))
        base = Path(cfg.report).with_suffix("")
        _write_text(args.csv or f"{base}.csv", runs_csv(report))
        _write_text(f"{base}.trajectory.csv", trajectory_csv(report))
    elif args.csv:
        _write_text(args.csv, runs_csv(report))
    print(json.dumps(report["average"]))
    return EXIT_OK


def cmd_kernels(args) -> int:
    if args.reps < 1:
        raise ParameterError("reps must be >= 1")
    keys = [(s, s, s) for s in args.sizes]
    rep = microbench(keys, args.working_set, args.reps)
    data = check_report(rep.to_dict(), MICROBENCH_SCHEMA)
    if args.report:
        _write_text(args.report, json.dumps(data, indent=2))
    if args.output:
        _write_text(args.output, rep.to_csv())
    print(json.dumps({"geomean_gflops": rep.geomean_gflops, "keys": len(rep.keys)}))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "multiply": cmd_multiply, "bench": cmd_bench, "kernels": cmd_kernels}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BSMM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ParameterError, FormatError) as exc:
        print(f"bsmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, ReportError) as exc:
        print(f"bsmm {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"bsmm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
