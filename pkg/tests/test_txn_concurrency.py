"""Randomized concurrent histories checked against a commit-order oracle.

The oracle is independent of the version-chain walk: every committed
write is logged as (commit_ts, slot, op, payload) and a read taken at
start S must equal the replay, in commit-ts order, of exactly the
committed writes with commit_ts < S.
"""

import random
import threading

from icehouse.block import BlockArena
from icehouse.pruner import VersionPruner
from icehouse.table import Column, Schema, Table
from icehouse.txn import (
    MSB, NOT_VISIBLE, AtomicCounter, TransactionEngine, WriteWriteConflict,
)


def make_engine(block_size=1 << 16):
    arena = BlockArena()
    engine = TransactionEngine(arena, AtomicCounter())
    schema = Schema([Column("k", 8), Column("v", 8)])
    table = Table("t", schema, arena, table_id=1, block_size=block_size)
    engine.tables[1] = table
    return engine, table


def replay_expected(history, slot, start_ts):
    """Sequential oracle: state of `slot` as of snapshot `start_ts`."""
    state = None
    for cts, s, op, payload in history:
        if s != slot or cts >= start_ts:
            continue
        if op == "insert":
            state = payload
        elif op == "update":
            state = (state[0], payload) if state else state
        elif op == "delete":
            state = None
    return state


def run_history(seed, txns_per_thread, threads, slots, with_pruner=False,
                delete_frac=0.1, abort_frac=0.1):
    engine, table = make_engine()
    pruner = VersionPruner(engine) if with_pruner else None

    committed = []              # (commit_ts, slot, op, payload) appended post-commit
    reads = []                  # (start_ts, slot, got, own)
    mapping = []                # pool index -> current slot
    poison_errors = []

    init = engine.begin()
    for i in range(slots):
        s = engine.insert(init, table, (i, 0))
        mapping.append(s)
    init_cts = engine.commit(init)
    for i, s in enumerate(mapping):
        committed.append((init_cts, s, "insert", (i, 0)))

    stop = threading.Event()
    if with_pruner:
        def prune_loop():
            while not stop.is_set():
                try:
                    pruner.prune_pass()
                except AssertionError as e:       # poisoned record dereference
                    poison_errors.append(e)
        pt = threading.Thread(target=prune_loop, daemon=True)
        pt.start()

    def worker(tid):
        rng = random.Random((seed << 8) | tid)
        local_reads, local_commits = [], []
        for _ in range(txns_per_thread):
            txn = engine.begin()
            writes = []                       # (slot, op, payload)
            own = {}
            ok = True
            for _ in range(rng.randrange(1, 5)):
                idx = rng.randrange(slots)
                slot = mapping[idx]
                roll = rng.random()
                try:
                    if roll < 0.45:
                        got = engine.select(txn, slot)
                        val = None if got is NOT_VISIBLE else tuple(got)
                        local_reads.append((txn.start, slot, val, own.get(slot, "miss")))
                    elif roll < 0.45 + delete_frac:
                        engine.delete(txn, slot)
                        new = engine.insert(txn, table, (idx, rng.randrange(1 << 30)))
                        writes.append((slot, "delete", None))
                        nv = engine.select(txn, new)
                        writes.append((new, "insert", tuple(nv)))
                        own[slot] = None
                        own[new] = tuple(nv)
                        if ok:
                            mapping[idx] = new    # future txns target the new slot
                    else:
                        payload = rng.randrange(1 << 30)
                        engine.update(txn, slot, {1: payload})
                        writes.append((slot, "update", payload))
                        cur = own.get(slot)
                        base = engine.select(txn, slot)
                        own[slot] = tuple(base)
                except WriteWriteConflict:
                    ok = False
                    break
            if not ok or rng.random() < abort_frac:
                engine.abort(txn)
                continue
            cts = engine.commit(txn)
            for slot, op, payload in writes:
                local_commits.append((cts, slot, op, payload))
        reads.extend(local_reads)
        committed.extend(local_commits)

    ts = [threading.Thread(target=worker, args=(t,)) for t in range(threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    stop.set()
    if with_pruner:
        pt.join(timeout=5)
        assert not poison_errors, poison_errors[0]

    history = sorted(committed, key=lambda e: e[0])
    violations = []
    for start, slot, got, own in reads:
        if own != "miss":                     # own uncommitted write: skip oracle
            expect = own
        else:
            expect = replay_expected(history, slot, start)
        if got != expect:
            violations.append((start, slot, got, expect))
    return engine, table, violations


class TestSnapshotIsolationOracle:
    def test_small_randomized_histories(self):
        for seed in range(8):
            _, _, violations = run_history(
                seed, txns_per_thread=40, threads=4, slots=16)
            assert not violations, violations[:3]

    def test_with_concurrent_pruner(self):
        for seed in range(4):
            _, _, violations = run_history(
                seed, txns_per_thread=40, threads=6, slots=8, with_pruner=True)
            assert not violations, violations[:3]


class TestAbortWindow:
    def test_readers_never_see_aborted_writes(self):
        """Tight loop on one slot: writers update+abort, readers must
        always reconstruct the committed seed value."""
        engine, table = make_engine()
        txn = engine.begin()
        slot = engine.insert(txn, table, (1, 42))
        engine.commit(txn)

        stop = threading.Event()
        errors = []

        def writer():
            while not stop.is_set():
                t = engine.begin()
                try:
                    engine.update(t, slot, {1: -99})
                except WriteWriteConflict:
                    pass
                engine.abort(t)

        def reader():
            while not stop.is_set():
                t = engine.begin()
                got = engine.select(t, slot)
                engine.abort(t)
                if got != (1, 42):
                    errors.append(got)
                    return

        ws = [threading.Thread(target=writer) for _ in range(2)]
        rs = [threading.Thread(target=reader) for _ in range(3)]
        for t in ws + rs:
            t.start()
        import time
        time.sleep(1.0)
        stop.set()
        for t in ws + rs:
            t.join(timeout=5)
        assert not errors, errors[:3]

    def test_no_reader_observes_msb_timestamps_as_committed(self):
        engine, table = make_engine()
        slot_count = 8
        init = engine.begin()
        slots = [engine.insert(init, table, (i, 0)) for i in range(slot_count)]
        engine.commit(init)

        dirty = set()
        dirty_lock = threading.Lock()
        observed = []
        stop = threading.Event()

        def writer(tid):
            rng = random.Random(tid)
            while not stop.is_set():
                t = engine.begin()
                v = -rng.randrange(1, 1 << 20)       # negatives never commit
                try:
                    engine.update(t, slots[rng.randrange(slot_count)], {1: v})
                    with dirty_lock:
                        dirty.add(v)
                except WriteWriteConflict:
                    pass
                engine.abort(t)

        def reader():
            rng = random.Random(99)
            while not stop.is_set():
                t = engine.begin()
                got = engine.select(t, slots[rng.randrange(slot_count)])
                engine.abort(t)
                if got is not NOT_VISIBLE and got[1] < 0:
                    observed.append(got)
                    return

        ts = [threading.Thread(target=writer, args=(i,)) for i in range(3)]
        ts += [threading.Thread(target=reader) for _ in range(2)]
        for t in ts:
            t.start()
        import time
        time.sleep(1.0)
        stop.set()
        for t in ts:
            t.join(timeout=5)
        assert not observed, observed[:3]


class TestChainStructure:
    def test_no_cycles_and_descending_timestamps(self):
        engine, table = run_history(3, 60, 4, 8)[0:2]
        blocks = table.blocks
        for block in blocks:
            for slot in range(block.insert_head):
                seen = set()
                rec = engine.records.get(block.chain_head_id(slot))
                last_ts = None
                while rec is not None:
                    assert id(rec) not in seen, "version chain cycle"
                    seen.add(id(rec))
                    ts = rec.read_ts()
                    if not ts & MSB:
                        if last_ts is not None:
                            assert ts <= last_ts, "chain not newest-to-oldest"
                        last_ts = ts
                    rec = rec.next
