"""Command-line harness: benchmarks, strategy comparison, capture, and replay.

Exit codes: 0 success, 1 configuration error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys

from .bench import (
    BENCH_COLUMNS,
    COMPARE_COLUMNS,
    REPLAY_COLUMNS,
    HarnessParams,
    run_bench,
    run_capture,
    run_compare,
    run_replay,
)
from .core import (
    STRATEGY_GRID,
    STRATEGY_NONE,
    STRATEGY_POOL,
    STRATEGY_TOPK,
    ConfigInfeasibleError,
)
from .fmap import CaptureFormatError, read_capture

_STRATEGY_BY_FLAG = {
    "none": STRATEGY_NONE,
    "tome": STRATEGY_GRID,
    "importance": STRATEGY_POOL,
    "topk": STRATEGY_TOPK,
}

_BENCH_SCHEMA = "CSV columns: " + ",".join(BENCH_COLUMNS)
_COMPARE_SCHEMA = "CSV columns: " + ",".join(COMPARE_COLUMNS)
_REPLAY_SCHEMA = "CSV columns: " + ",".join(REPLAY_COLUMNS)


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dst-frac", type=float, default=0.25,
                   help="dst fraction k (default 0.25)")
    p.add_argument("--pool-factor", type=float, default=0.4,
                   help="pool headroom p (default 0.4)")
    p.add_argument("--prune-steps", type=int, default=6,
                   help="early steps that prune instead of merge (default 6)")
    p.add_argument("--steps", type=int, default=50,
                   help="sampling steps (default 50)")
    p.add_argument("--cfg-scale", type=float, default=7.5,
                   help="guidance weight w (default 7.5)")
    p.add_argument("--tokens", type=int, default=64,
                   help="token count; must be a perfect square with even side "
                        "(default 64)")
    p.add_argument("--channels", type=int, default=16,
                   help="token feature channels (default 16)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--format", choices=["csv"], default="csv",
                   help="report format (default csv)")


def _strategy_flag(p: argparse.ArgumentParser, default: list[str]) -> None:
    p.add_argument("--strategy", action="append", choices=sorted(_STRATEGY_BY_FLAG),
                   default=None,
                   help=f"strategy, repeatable (default: {' '.join(default)})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokmerge",
        description="Token-merging benchmark harness for the toy diffusion sampler.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser(
        "bench",
        help="FLOPs, latency, memory, and fidelity per (strategy, ratio) pair",
        epilog=_BENCH_SCHEMA,
    )
    _strategy_flag(b, ["tome", "importance"])
    b.add_argument("--ratio", action="append", type=float, default=None,
                   help="merge ratio, repeatable (default: 0.3 0.5 0.7)")
    b.add_argument("--seeds", type=int, default=1,
                   help="trajectories averaged for fidelity (default 1)")
    b.add_argument("--repeats", type=int, default=5,
                   help="timed runs per row (default 5)")
    b.add_argument("--condition", type=int, default=0,
                   help="class condition id (default 0)")
    _add_shared_flags(b)
    b.set_defaults(func=_cmd_bench)

    c = sub.add_parser(
        "compare",
        help="matched-seed deviation and cohesion stats across strategies",
        epilog=_COMPARE_SCHEMA,
    )
    _strategy_flag(c, ["tome", "importance", "topk"])
    c.add_argument("--ratio", type=float, default=0.7,
                   help="merge ratio (default 0.7)")
    c.add_argument("--seeds", type=int, default=32,
                   help="seeds in the grid (default 32)")
    c.add_argument("--conditions", type=int, default=4,
                   help="class conditions in the grid (default 4)")
    _add_shared_flags(c)
    c.set_defaults(func=_cmd_compare)

    cap = sub.add_parser(
        "capture",
        help="dump per-layer features and guidance maps of an unmerged run",
    )
    cap.add_argument("--condition", type=int, default=0,
                     help="class condition id (default 0)")
    _add_shared_flags(cap)
    cap.set_defaults(func=_cmd_capture)

    rep = sub.add_parser(
        "replay",
        help="apply strategies to captured records offline",
        epilog=_REPLAY_SCHEMA,
    )
    rep.add_argument("--input", required=True, help="FMAP file to replay")
    _strategy_flag(rep, ["importance"])
    rep.add_argument("--ratio", type=float, default=0.7,
                     help="merge ratio (default 0.7)")
    _add_shared_flags(rep)
    rep.set_defaults(func=_cmd_replay)
    return parser


def _params(args: argparse.Namespace) -> HarnessParams:
    return HarnessParams(
        tokens=args.tokens,
        channels=args.channels,
        steps=args.steps,
        cfg_scale=args.cfg_scale,
        dst_frac=args.dst_frac,
        pool_factor=args.pool_factor,
        prune_steps=args.prune_steps,
        seed=args.seed,
    )


def _strategies(args: argparse.Namespace, default: list[str]) -> list[str]:
    flags = args.strategy if args.strategy else default
    return [_STRATEGY_BY_FLAG[f] for f in flags]


def _write_rows(rows: list[dict], columns: list[str], out: str | None) -> None:
    def emit(fh):
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)

    if out is None:
        emit(sys.stdout)
    else:
        with open(out, "w", newline="") as fh:
            emit(fh)


def _cmd_bench(args: argparse.Namespace) -> int:
    ratios = args.ratio if args.ratio else [0.3, 0.5, 0.7]
    rows = run_bench(
        _strategies(args, ["tome", "importance"]),
        ratios,
        _params(args),
        n_seeds=args.seeds,
        repeats=args.repeats,
        condition=args.condition,
    )
    _write_rows(rows, BENCH_COLUMNS, args.out)
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    rows = run_compare(
        _strategies(args, ["tome", "importance", "topk"]),
        args.ratio,
        _params(args),
        n_seeds=args.seeds,
        n_conditions=args.conditions,
    )
    _write_rows(rows, COMPARE_COLUMNS, args.out)
    return 0


def _cmd_capture(args: argparse.Namespace) -> int:
    if args.out is None:
        raise ConfigInfeasibleError("capture needs --out PATH")
    n_records, n_bytes = run_capture(args.out, _params(args), condition=args.condition)
    print(f"wrote {n_records} records ({n_bytes} bytes) to {args.out}")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    records = read_capture(args.input)
    rows = run_replay(
        records,
        _strategies(args, ["importance"]),
        args.ratio,
        _params(args),
    )
    _write_rows(rows, REPLAY_COLUMNS, args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; that is a config error here.
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except CaptureFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigInfeasibleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())
