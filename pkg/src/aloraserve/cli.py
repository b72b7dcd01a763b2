"""Benchmark command line.

Subcommands mirror the driver functions: `sync` runs one batched pipeline,
`async` replays Poisson arrivals, `sweep` runs one mode across a parameter
range, `compare` runs both adapter modes and prints their ratios. Every run
ends with a self-check (timing identities, pool conservation); violations
print a diagnostic and exit nonzero.
"""

import argparse
import sys

from .bench import (
    BenchResult,
    LoadSpec,
    PipelineSpec,
    SweepSpec,
    compare_modes,
    run_async_load,
    run_sweep,
    run_sync_pipeline,
    self_check,
)
from .metrics import aggregate, export_metrics, format_aggregate_table


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pipeline", default="base_adapter",
                   choices=["base_adapter", "adapter_base", "base_adapter_base", "multi_adapter"])
    p.add_argument("--mode", default="alora", choices=["alora", "lora"])
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--gen-len", type=int, default=64)
    p.add_argument("--adapter-gen-len", type=int, default=16)
    p.add_argument("--n-adapters", type=int, default=1)
    p.add_argument("--block-size", type=int, default=4)
    p.add_argument("--pool-blocks", type=int, default=512)
    p.add_argument("--token-budget", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write per-request metrics to this file")
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.add_argument("--virtual-clock", action="store_true",
                   help="deterministic clock: one unit per computed token")
    p.add_argument("--trace", help="write the step trace (JSON lines) to this file")
    p.add_argument("--pool-dump", help="write the final block pool state (JSON lines) to this file")


def _spec(args) -> PipelineSpec:
    return PipelineSpec(
        pipeline=args.pipeline,
        mode=args.mode,
        prompt_len=args.prompt_len,
        gen_len=args.gen_len,
        adapter_gen_len=args.adapter_gen_len,
        n_adapters=args.n_adapters,
        batch=getattr(args, "batch", 1),
        seed=args.seed,
    )


def _engine_kw(args) -> dict:
    return {
        "pool_blocks": args.pool_blocks,
        "block_size": args.block_size,
        "token_budget": args.token_budget,
        "virtual_clock": args.virtual_clock,
    }


def _finish_run(args, result: BenchResult) -> int:
    if args.out:
        export_metrics(result.rows, args.out, fmt=args.format)
        print(f"wrote {len(result.rows)} request rows to {args.out}")
    if args.trace:
        result.engine.write_step_trace(args.trace)
        print(f"wrote step trace ({len(result.engine.trace)} steps) to {args.trace}")
    if args.pool_dump:
        result.engine.pool.write_dump(args.pool_dump)
        print(f"wrote pool dump to {args.pool_dump}")
    print(format_aggregate_table(aggregate(result.rows)))
    problems = self_check(result)
    if problems:
        print("self-check FAILED:", file=sys.stderr)
        for p in problems:
            print(f"  {p}", file=sys.stderr)
        return 2
    return 0


def _cmd_sync(args) -> int:
    result = run_sync_pipeline(_spec(args), **_engine_kw(args))
    return _finish_run(args, result)


def _cmd_async(args) -> int:
    load = LoadSpec(arrival_rate=args.arrival_rate, n_requests=args.n_requests, seed=args.seed)
    result = run_async_load(_spec(args), load, **_engine_kw(args))
    return _finish_run(args, result)


def _parse_values(raw: str, param: str):
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("empty --values")
    cast = float if param == "arrival_rate" else int
    return tuple(cast(v) for v in vals)


def _sweep_spec(args) -> SweepSpec:
    base = _spec(args)
    load = None
    if args.sweep_param in ("arrival_rate", "pool_blocks") or args.use_async:
        load = LoadSpec(arrival_rate=args.arrival_rate, n_requests=args.n_requests, seed=args.seed)
    return SweepSpec(
        param=args.sweep_param,
        values=_parse_values(args.values, args.sweep_param),
        base=base,
        load=load,
    )


def _cmd_sweep(args) -> int:
    sweep = _sweep_spec(args)
    results, batch, pool_blocks = run_sweep(
        sweep, pool_blocks=args.pool_blocks if args.pool_blocks else None,
        block_size=args.block_size, token_budget=args.token_budget,
        virtual_clock=args.virtual_clock,
    )
    all_rows = []
    rc = 0
    for value, result in results:
        all_rows.extend(result.rows)
        print(f"-- {sweep.param} = {value} (batch {batch}, pool {pool_blocks}) --")
        print(format_aggregate_table(aggregate(result.rows)))
        problems = self_check(result)
        if problems:
            rc = 2
            for p in problems:
                print(f"  self-check: {p}", file=sys.stderr)
    if args.out:
        export_metrics(all_rows, args.out, fmt=args.format)
        print(f"wrote {len(all_rows)} request rows to {args.out}")
    return rc


def _cmd_compare(args) -> int:
    sweep = _sweep_spec(args)
    report = compare_modes(
        sweep, pool_blocks=args.pool_blocks if args.pool_blocks else None,
        block_size=args.block_size, token_budget=args.token_budget,
        virtual_clock=args.virtual_clock,
    )
    print(report.to_table())
    if args.out:
        with open(args.out, "w") as f:
            f.write(report.to_csv())
        print(f"wrote comparison report to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aloraserve-bench",
                                 description="Benchmark cross-model KV-cache reuse pipelines.")
    sub = ap.add_subparsers(dest="command", required=True)

    p_sync = sub.add_parser("sync", help="one batched pipeline, phase by phase")
    _add_common(p_sync)
    p_sync.add_argument("--batch", type=int, default=1, help="concurrent pipeline instances")
    p_sync.set_defaults(fn=_cmd_sync)

    p_async = sub.add_parser("async", help="pipeline instances at Poisson arrival times")
    _add_common(p_async)
    p_async.add_argument("--arrival-rate", type=float, default=1.0)
    p_async.add_argument("--n-requests", type=int, default=50)
    p_async.set_defaults(fn=_cmd_async)

    for name, fn in (("sweep", _cmd_sweep), ("compare", _cmd_compare)):
        p = sub.add_parser(name, help=f"{name} over a parameter range")
        _add_common(p)
        p.add_argument("--sweep-param", default="prompt_len",
                       choices=["prompt_len", "gen_len", "adapter_gen_len", "arrival_rate", "pool_blocks"])
        p.add_argument("--values", required=True, help="comma-separated swept values")
        p.add_argument("--arrival-rate", type=float, default=1.0)
        p.add_argument("--n-requests", type=int, default=50)
        p.add_argument("--use-async", action="store_true",
                       help="drive the sweep through the async runner")
        # sweeps size the pool from the longest sequence unless told otherwise
        p.set_defaults(fn=fn, pool_blocks=0)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # pool_blocks 0 means "size automatically" for sweep/compare
    try:
        return args.fn(args)
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
