"""Command-line harness: workloads, microbenchmarks, export, recovery check."""

from __future__ import annotations

import argparse
import json
import sys

from . import bench
from .engine import Engine, EngineConfig
from .export import dump_reference, serialize_ipc
from .service import DataService


def _engine_config(args) -> EngineConfig:
    config = EngineConfig.from_file(args.config) if args.config else EngineConfig()
    if getattr(args, "threshold", None) is not None:
        config.cold_threshold = args.threshold
    if getattr(args, "group_size", None) is not None:
        config.group_size = args.group_size
    if getattr(args, "variant", None):
        config.variant = args.variant
    if getattr(args, "block_size_log2", None):
        config.block_size = 1 << args.block_size_log2
    if getattr(args, "log_path", None):
        config.wal_path = args.log_path
    if getattr(args, "flush_interval", None) is not None:
        config.wal_flush_interval = args.flush_interval
    if getattr(args, "wal_group", None) is not None:
        config.wal_group_size = args.wal_group
    return config


def _emit(args, report) -> None:
    text = json.dumps(report, indent=2, default=float)
    if args.out and args.out != "-":
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def cmd_oltp(args) -> int:
    spec = bench.WorkloadSpec(
        table_size=args.table_size, insert_pct=args.insert_pct,
        update_pct=args.update_pct, select_pct=args.select_pct,
        hot_skew=args.skew, workers=args.workers,
        duration=args.duration, seed=args.seed)
    report = bench.run_oltp(spec, _engine_config(args), transformer_on=not args.no_transformer)
    _emit(args, report)
    return 0


def cmd_transform(args) -> int:
    config = _engine_config(args)
    if args.variant == "snapshot":
        report = bench.run_snapshot_baseline(
            args.percent_empty, blocks=args.blocks,
            block_size=1 << args.block_size_log2, seed=args.seed)
    else:
        report = bench.run_transform_bench(
            args.percent_empty, variant=args.variant or config.variant,
            blocks=args.blocks, block_size=1 << args.block_size_log2,
            group_size=args.group_size or config.group_size, seed=args.seed)
    _emit(args, report)
    return 0


def cmd_groups(args) -> int:
    sizes = [int(x) for x in args.group_sizes.split(",")]
    empties = [float(x) for x in args.emptiness.split(",")]
    report = bench.run_group_sensitivity(
        sizes, empties, blocks=args.blocks,
        block_size=1 << args.block_size_log2, seed=args.seed)
    _emit(args, report)
    return 0


def cmd_export(args) -> int:
    if args.write_ipc or args.write_reference:
        config = _engine_config(args)
        engine = Engine(config)
        table = bench.build_corpus(engine, args.percent_empty, args.blocks, args.seed)
        bench.freeze_fraction(engine, table, args.percent_frozen / 100.0)
        report = {"blocks": args.blocks, "percent_frozen": args.percent_frozen}
        if args.write_reference:
            with open(args.write_reference, "w") as f:
                report["rows"] = dump_reference(engine.txns, table, f)
        if args.write_ipc:
            with open(args.write_ipc, "wb") as f:
                writer = serialize_ipc(engine.txns, table, f,
                                       dictionary=config.variant == "dictionary")
            report["direct_bytes"] = writer.bytes_direct
            report["staged_bytes"] = writer.bytes_staged
        _emit(args, report)
        return 0
    report = bench.run_export_bench(
        args.percent_frozen, protocol=args.protocol, blocks=args.blocks,
        block_size=1 << args.block_size_log2, seed=args.seed)
    _emit(args, report)
    return 0


def cmd_serve(args) -> int:
    config = _engine_config(args)
    engine = Engine(config)
    table = bench.build_corpus(engine, args.percent_empty, args.blocks, args.seed)
    bench.freeze_fraction(engine, table, args.percent_frozen / 100.0)
    host, _, port = args.listen.partition(":")
    service = DataService(engine.txns, {table.name: table})
    addr = service.start(host or "127.0.0.1", int(port or 0))
    print(json.dumps({"listening": list(addr), "table": table.name}), flush=True)
    try:
        import time
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        service.stop()
    return 0


def cmd_recover_check(args) -> int:
    import os
    import tempfile

    log_path = args.log_path or tempfile.mktemp(suffix=".wal")
    if os.path.exists(log_path):
        os.unlink(log_path)

    def make_engine():
        config = EngineConfig(wal_path=log_path, wal_fsync=not args.no_fsync)
        e = Engine(config)
        t = e.create_table("order_line", bench.default_schema())
        e.create_index("ol_pk", t, (0,))
        return e, t

    engine, table = make_engine()
    spec = bench.WorkloadSpec(table_size=args.table_size, duration=0, seed=args.seed)
    bench.preload(engine, table, spec)
    while engine.wal.flush_loop_step():
        pass
    import io
    dump_before = io.StringIO()
    rows_before = dump_reference(engine.txns, table, dump_before)
    engine.stop()

    engine2, table2 = make_engine()
    stats = engine2.recover()
    dump_after = io.StringIO()
    rows_after = dump_reference(engine2.txns, table2, dump_after)
    engine2.stop()

    ok = dump_before.getvalue() == dump_after.getvalue()
    _emit(args, {"recovered": stats, "rows_before": rows_before,
                 "rows_after": rows_after, "match": ok, "log": log_path})
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="icehouse",
        description="MVCC columnar engine workload and benchmark harness")
    p.add_argument("--config", help="flat key = value engine config file")
    p.add_argument("--out", help="write the JSON report here (default stdout)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--blocks", type=int, default=8)
        sp.add_argument("--block-size-log2", type=int, default=20)
        sp.add_argument("--group-size", type=int)
        sp.add_argument("--variant", choices=["gather", "dictionary", "snapshot"])
        sp.add_argument("--threshold", type=float)

    sp = sub.add_parser("oltp", help="mixed transactional workload")
    common(sp)
    sp.add_argument("--table-size", type=int, default=10_000)
    sp.add_argument("--insert-pct", type=int, default=30)
    sp.add_argument("--update-pct", type=int, default=40)
    sp.add_argument("--select-pct", type=int, default=30)
    sp.add_argument("--skew", type=float, default=0.8)
    sp.add_argument("--workers", type=int, default=2)
    sp.add_argument("--duration", type=float, default=2.0)
    sp.add_argument("--no-transformer", action="store_true")
    sp.add_argument("--log-path")
    sp.add_argument("--flush-interval", type=float)
    sp.add_argument("--wal-group", type=int)
    sp.set_defaults(func=cmd_oltp)

    sp = sub.add_parser("transform", help="one transformation pass benchmark")
    common(sp)
    sp.add_argument("--percent-empty", type=float, default=5.0)
    sp.set_defaults(func=cmd_transform, variant_default="gather")

    sp = sub.add_parser("groups", help="compaction group size sensitivity")
    common(sp)
    sp.add_argument("--group-sizes", default="1,10,50")
    sp.add_argument("--emptiness", default="1,5,50")
    sp.set_defaults(func=cmd_groups)

    sp = sub.add_parser("export", help="export throughput / IPC file emission")
    common(sp)
    sp.add_argument("--percent-frozen", type=float, default=100.0)
    sp.add_argument("--percent-empty", type=float, default=0.0)
    sp.add_argument("--protocol", choices=["ipc", "rowbase"], default="ipc")
    sp.add_argument("--write-ipc", help="write an Arrow IPC stream file")
    sp.add_argument("--write-reference", help="write a JSONL reference dump")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("serve", help="serve tables over TCP")
    common(sp)
    sp.add_argument("--listen", default="127.0.0.1:0")
    sp.add_argument("--percent-frozen", type=float, default=100.0)
    sp.add_argument("--percent-empty", type=float, default=0.0)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("recover-check", help="log, recover, compare dumps")
    common(sp)
    sp.add_argument("--table-size", type=int, default=1000)
    sp.add_argument("--log-path")
    sp.add_argument("--no-fsync", action="store_true")
    sp.set_defaults(func=cmd_recover_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.variant == "snapshot" and args.command != "transform":
        args.variant = None
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
