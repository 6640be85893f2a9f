"""Synthetic workloads and microbenchmarks, desk-scale reproductions.

Workloads model an append-heavy order-line style table (insert/update/
select mix with hot-key skew) plus an optional read-only item-style
table. Operation streams are deterministic per (seed, worker); metrics
go out as plain dicts so the CLI can emit JSON.
"""

from __future__ import annotations

import random
import statistics
import threading
import time
from dataclasses import dataclass, field

from .block import FROZEN
from .engine import Engine, EngineConfig
from .export import materialize_block, serialize_ipc
from .pruner import PrunerThread
from .service import DataService, fetch, serialize_rowbase
from .table import Column
from .txn import WriteWriteConflict


def default_schema() -> list[Column]:
    return [
        Column("ol_id", 8),
        Column("ol_qty", 4),
        Column("ol_amount", 8),
        Column("ol_info", 16, varlen=True, utf8=True),
    ]


@dataclass
class WorkloadSpec:
    table_size: int = 10_000
    insert_pct: int = 30
    update_pct: int = 40
    select_pct: int = 30
    hot_skew: float = 0.8          # fraction of key picks landing in the hot 10%
    workers: int = 2
    duration: float = 2.0
    seed: int = 1
    columns: list[Column] = field(default_factory=default_schema)

    def validate(self) -> None:
        if self.insert_pct + self.update_pct + self.select_pct != 100:
            raise ValueError("operation mix must sum to 100")
        if not (0.0 <= self.hot_skew <= 1.0):
            raise ValueError("hot_skew must be within [0, 1]")
        if self.workers < 1 or self.table_size < 0 or self.duration < 0:
            raise ValueError("bad workload spec")


def _payload(rng: random.Random, key: int) -> str:
    return f"line-{key}-{rng.randrange(1 << 20):05x}" + "x" * rng.randrange(0, 12)


def _value_for(col: Column, rng: random.Random, key: int):
    if col.varlen:
        return _payload(rng, key)
    if col.width == 16:
        return rng.randbytes(16)
    return rng.randrange(1 << min(40, col.width * 8 - 1))


def _row(rng: random.Random, key: int, columns=None) -> tuple:
    if columns is None:
        return (key, rng.randrange(1, 100), rng.randrange(1 << 40), _payload(rng, key))
    return (key,) + tuple(_value_for(c, rng, key) for c in columns[1:])


def preload(engine: Engine, table, spec: WorkloadSpec, batch: int = 1000) -> None:
    rng = random.Random(spec.seed)
    done = 0
    while done < spec.table_size:
        txn = engine.begin()
        for _ in range(min(batch, spec.table_size - done)):
            txn.insert(table, _row(rng, done, spec.columns))
            done += 1
        txn.commit()


class _Worker(threading.Thread):
    def __init__(self, engine, table, index, spec, wid, deadline, counters):
        super().__init__(daemon=True)
        self.engine, self.table, self.index = engine, table, index
        self.spec, self.wid, self.deadline = spec, wid, deadline
        self.counters = counters
        self.rng = random.Random((spec.seed << 16) ^ wid)
        self.next_key = spec.table_size + wid

    def _pick_key(self, upper: int) -> int:
        if upper <= 0:
            return 0
        if self.rng.random() < self.spec.hot_skew:
            hot = max(1, upper // 10)
            return upper - 1 - self.rng.randrange(hot)
        return self.rng.randrange(upper)

    def run(self):
        spec, engine, rng = self.spec, self.engine, self.rng
        commits = aborts = 0
        ins_cut = spec.insert_pct
        upd_cut = spec.insert_pct + spec.update_pct
        while time.monotonic() < self.deadline:
            roll = rng.randrange(100)
            txn = engine.begin()
            try:
                if roll < ins_cut:
                    txn.insert(self.table, _row(rng, self.next_key, spec.columns))
                    self.next_key += spec.workers
                elif roll < upd_cut:
                    slot = self.index.lookup((self._pick_key(spec.table_size),))
                    if slot is not None:
                        col = 1 + rng.randrange(len(spec.columns) - 1)
                        txn.update(slot, {col: _value_for(
                            spec.columns[col], rng, roll)})
                else:
                    slot = self.index.lookup((self._pick_key(spec.table_size),))
                    if slot is not None:
                        txn.select(slot)
                txn.commit()
                commits += 1
            except WriteWriteConflict:
                txn.abort()
                aborts += 1
        self.counters[self.wid] = (commits, aborts)


def run_oltp(spec: WorkloadSpec, config: EngineConfig | None = None,
             transformer_on: bool = True) -> dict:
    spec.validate()
    config = config or EngineConfig()
    engine = Engine(config)
    table = engine.create_table("order_line", spec.columns)
    index = engine.create_index("ol_pk", table, (0,))
    preload(engine, table, spec)

    report = {
        "spec": {"table_size": spec.table_size, "workers": spec.workers,
                 "duration": spec.duration, "seed": spec.seed,
                 "mix": [spec.insert_pct, spec.update_pct, spec.select_pct]},
        "transformer": transformer_on,
    }
    if spec.duration <= 0:
        report.update(throughput=0.0, commits=0, aborts=0, abort_rate=0.0,
                      census=engine.census(table), movements=0, blocks_freed=0)
        return report

    if transformer_on:
        engine.start()
    else:
        t = PrunerThread(engine.pruner, config.prune_interval)
        t.start()
        engine._threads.append(t)

    counters = {}
    deadline = time.monotonic() + spec.duration
    workers = [_Worker(engine, table, index, spec, w, deadline, counters)
               for w in range(spec.workers)]
    t0 = time.monotonic()
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    elapsed = time.monotonic() - t0
    engine.stop()

    commits = sum(c for c, _ in counters.values())
    aborts = sum(a for _, a in counters.values())
    stats = engine.transformer.stats
    report.update(
        throughput=commits / elapsed if elapsed else 0.0,
        commits=commits, aborts=aborts,
        abort_rate=aborts / (commits + aborts) if commits + aborts else 0.0,
        census=engine.census(table),
        movements=stats.movements,
        blocks_freed=stats.blocks_freed,
        gather_ms=_histogram(stats.gather_seconds),
    )
    return report


def _histogram(seconds: list) -> dict:
    if not seconds:
        return {"count": 0}
    ms = sorted(s * 1000 for s in seconds)
    return {
        "count": len(ms),
        "min": ms[0],
        "median": statistics.median(ms),
        "p95": ms[min(len(ms) - 1, int(0.95 * len(ms)))],
        "max": ms[-1],
        "mean": statistics.fmean(ms),
    }


def bulk_fill(engine: Engine, table, blocks: int, seed: int = 7,
              size_range: tuple = (13, 25)) -> int:
    """Vectorized preload: fills whole blocks directly (column writes,
    bitmaps, insert head), producing the same quiesced state a committed
    insert workload would. Schema must be (int64, int64, varlen)."""
    import numpy as np
    lay = table.layout
    per = lay.num_slots
    rng = np.random.default_rng(seed)
    key = 0
    for _ in range(blocks):
        with table.lock:
            blk = table._new_block()
        rows = per
        keys = np.arange(key, key + rows, dtype="<i8")
        key += rows
        np.frombuffer(blk.data, "<i8", count=rows,
                      offset=lay.column_offsets[1])[:] = keys
        np.frombuffer(blk.data, "<i8", count=rows,
                      offset=lay.column_offsets[2])[:] = keys * 3

        sizes = rng.integers(size_range[0], size_range[1], rows).astype(np.int64)
        values = rng.integers(97, 123, int(sizes.sum()), dtype=np.uint8)  # a..z
        starts = np.zeros(rows, np.int64)
        np.cumsum(sizes[:-1], out=starts[1:])
        ends = starts + sizes
        chunk = bytearray(values.tobytes())
        blk.heap.chunks.append(chunk)
        blk.heap.bytes_used += len(chunk)
        addr_base = 1 << 40                       # chunk index 0, biased
        emat = np.zeros((rows, 16), np.uint8)
        emat[:, :4] = sizes.astype("<u4").view(np.uint8).reshape(rows, 4)
        pref = np.minimum(starts[:, None] + np.arange(4), len(values) - 1)
        emat[:, 4:8] = values[pref]
        inline = sizes <= 12
        out_addr = (addr_base + starts[~inline]).astype("<u8")
        emat[~inline, 8:16] = out_addr.view(np.uint8).reshape(-1, 8)
        # inline rows carry their bytes in the envelope
        for k in range(4, 16):
            m = inline & (sizes >= k - 3)
            emat[m, k] = values[starts[m] + (k - 4)]
        np.frombuffer(blk.data, np.uint8, count=rows * 16,
                      offset=lay.column_offsets[3]).reshape(rows, 16)[:] = emat

        full = np.packbits(np.ones(rows, np.uint8), bitorder="little").tobytes()
        nbytes = (rows + 7) >> 3
        blk.data[lay.alloc_bitmap_offset:lay.alloc_bitmap_offset + nbytes] = full[:nbytes]
        for col in range(1, 4):
            off = lay.validity_offsets[col]
            blk.data[off:off + nbytes] = full[:nbytes]
        import struct
        struct.pack_into("<Q", blk.data, 24, rows)
    return key


# --- transformation bench ------------------------------------------------------

def build_corpus(engine: Engine, percent_empty: float, blocks: int,
                 seed: int = 7, varlen: bool = True) -> object:
    """Fill `blocks` blocks, then randomly delete to the target emptiness."""
    cols = [Column("k", 8), Column("s", 16, varlen=True, utf8=True)] if varlen \
        else [Column("k", 8), Column("v", 8)]
    table = engine.create_table("corpus", cols)
    rng = random.Random(seed)
    per = table.layout.num_slots
    total = per * blocks
    key = 0
    while key < total:
        txn = engine.begin()
        for _ in range(min(4096, total - key)):
            if varlen:
                txn.insert(table, (key, f"value-{key:012d}-{rng.randrange(1 << 16):04x}"))
            else:
                txn.insert(table, (key, key * 3))
            key += 1
        txn.commit()
    doomed = rng.sample(range(total), int(percent_empty / 100.0 * total))
    for i in range(0, len(doomed), 4096):
        txn = engine.begin()
        for k in doomed[i:i + 4096]:
            blk = table.blocks[k // per]
            txn.delete(blk.slot_tuple(k % per))
        txn.commit()
    engine.pruner.prune_pass()
    engine.pruner.prune_pass()
    return table


def run_transform_bench(percent_empty: float, variant: str = "gather",
                        blocks: int = 8, block_size: int = 1 << 20,
                        group_size: int = 32, seed: int = 7) -> dict:
    """One transformation pass over a fresh corpus; per-phase latencies."""
    config = EngineConfig(block_size=block_size, cold_threshold=0.0,
                          group_size=group_size, variant=variant)
    engine = Engine(config)
    table = build_corpus(engine, percent_empty, blocks, seed)

    tf = engine.transformer
    t0 = time.perf_counter()
    deadline = time.time() + 60
    while any(b.state != FROZEN for b in table.blocks) and time.time() < deadline:
        engine.pruner.prune_pass()
        tf.transform_pass()
    total = time.perf_counter() - t0
    frozen = sum(b.state == FROZEN for b in table.blocks)
    return {
        "variant": variant,
        "percent_empty": percent_empty,
        "blocks": blocks,
        "frozen": frozen,
        "pass_seconds": total,
        "movements": tf.stats.movements,
        "blocks_freed": tf.stats.blocks_freed,
        "gather_ms": _histogram(tf.stats.gather_seconds),
        "compaction_ms": _histogram(tf.stats.compaction_seconds),
    }


def run_snapshot_baseline(percent_empty: float, blocks: int = 8,
                          block_size: int = 1 << 20, seed: int = 7) -> dict:
    """Copy-everything baseline: per-block transactional snapshot into
    fresh Arrow buffers; every tuple counts as moved."""
    config = EngineConfig(block_size=block_size)
    engine = Engine(config)
    table = build_corpus(engine, percent_empty, blocks, seed)
    lat = []
    moved = 0
    for block in list(table.blocks):
        txn = engine.begin()
        t0 = time.perf_counter()
        batch = materialize_block(engine.txns, txn, block)
        lat.append(time.perf_counter() - t0)
        moved += batch.rows
        txn.abort()
    return {
        "variant": "snapshot",
        "percent_empty": percent_empty,
        "blocks": blocks,
        "movements": moved,
        "per_block_ms": _histogram(lat),
    }


# --- group-size sensitivity -------------------------------------------------------

def run_group_sensitivity(group_sizes, emptiness_levels, blocks: int = 500,
                          block_size: int = 1 << 14, seed: int = 7) -> dict:
    """Blocks freed and write-set size per (group size, emptiness) cell."""
    cells = []
    for empty in emptiness_levels:
        for size in group_sizes:
            config = EngineConfig(block_size=block_size, cold_threshold=0.0,
                                  group_size=size)
            engine = Engine(config)
            table = build_corpus(engine, empty, blocks, seed, varlen=False)
            tf = engine.transformer
            tf.scan_cold()
            groups = []
            with tf._lock:
                q = tf.cold_queue.get(table.table_id)
                while q:
                    g = []
                    while q and len(g) < size:
                        g.append(q.popleft())
                    groups.append(g)
            for g in groups:
                tf.execute_compaction(table, g)
            cells.append({
                "group_size": size,
                "percent_empty": empty,
                "blocks_freed": tf.stats.blocks_freed,
                "movements": tf.stats.movements,
                "mean_write_set": statistics.fmean(tf.stats.write_set_sizes)
                if tf.stats.write_set_sizes else 0.0,
            })
    return {"blocks": blocks, "slots_per_block": None, "cells": cells}


# --- export bench ---------------------------------------------------------------------

def freeze_fraction(engine: Engine, table, fraction: float) -> int:
    """Deterministically freeze the first `fraction` of a table's blocks."""
    want = int(round(fraction * len(table.blocks)))
    targets = list(table.blocks)[:want]
    for blk in targets:
        engine.transformer.execute_compaction(table, [blk])
    for _ in range(3):
        engine.pruner.prune_pass()
        for blk in targets:
            if blk.state != FROZEN:
                engine.transformer.gather(blk)
    return sum(b.state == FROZEN for b in table.blocks)


class _NullSink:
    def __init__(self):
        self.bytes = 0

    def write(self, data):
        self.bytes += len(data)


def run_export_bench(percent_frozen: float, protocol: str = "ipc",
                     blocks: int = 32, block_size: int = 1 << 20,
                     seed: int = 7, use_network: bool = True) -> dict:
    config = EngineConfig(block_size=block_size)
    engine = Engine(config)
    table = build_corpus(engine, 0.0, blocks, seed)
    frozen = freeze_fraction(engine, table, percent_frozen / 100.0)

    if use_network:
        service = DataService(engine.txns, {table.name: table})
        addr = service.start()
        sink = _NullSink()
        t0 = time.perf_counter()
        total, _ = fetch(addr, table.name, protocol, sink=sink)
        elapsed = time.perf_counter() - t0
        service.stop()
    else:
        sink = _NullSink()
        t0 = time.perf_counter()
        if protocol == "ipc":
            serialize_ipc(engine.txns, table, sink)
        else:
            serialize_rowbase(engine.txns, table, sink)
        elapsed = time.perf_counter() - t0
        total = sink.bytes

    return {
        "protocol": protocol,
        "percent_frozen": percent_frozen,
        "blocks": blocks,
        "frozen_blocks": frozen,
        "bytes": total,
        "seconds": elapsed,
        "mb_per_s": (total / (1 << 20)) / elapsed if elapsed else 0.0,
    }
