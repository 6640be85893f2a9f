"""Hot/cold block transformation: detection, compaction, gathering.

Cold blocks are found from prune-pass observations (a block is cold
once no observation has touched it for the threshold). A transformation
pass then runs two phases per compaction group:

Phase 1 (transactional, microsecond-scale): shuffle tuples with
delete-insert pairs so the group becomes logically contiguous, set the
survivors COOLING *before* the group transaction commits, and hand
emptied blocks to the epoch queue for release.

Phase 2 (gathering): a block still COOLING whose version-link column
has fully drained (the pruner erased the compaction transaction's own
records, proving every overlapping transaction has ended) is flipped to
FREEZING, its variable-length values are gathered into contiguous
Arrow-layout buffers in slot order, entry payloads are rewritten to
reference the gathered buffer, and the block lands FROZEN. A user write
can preempt COOLING back to HOT at any point, which parks the block
until cold detection picks it up again.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import varlen as vl
from .ragged import scatter_entries
from .block import Block, COOLING, FREEZING, FROZEN, HOT, PRUNE_MARK, preempt_to_hot  # noqa: F401  (re-export)
from .table import Table
from .txn import NOT_VISIBLE, TransactionEngine, WriteWriteConflict

GATHERED = "frozen"
PREEMPTED = "preempted"
REQUEUED = "requeued"
RECOMPACT = "recompact"

_ID_MASK = PRUNE_MARK - 1


# --- compaction planning ----------------------------------------------------------

class PlanError(ValueError):
    pass


@dataclass
class CompactionPlan:
    slots_per_block: int
    total_tuples: int
    fill: list[int]                    # indices of F in the input group
    partial: int | None                # index of p
    empty: list[int]                   # indices of E
    movements: list[tuple[tuple[int, int], tuple[int, int]]]  # (src, dst) as (block idx, slot)

    @property
    def movement_count(self) -> int:
        return len(self.movements)

    def blocks_freed(self) -> int:
        return len(self.empty)


def _popcount(x: int) -> int:
    return bin(x).count("1")


def _iter_bits(x: int) -> list[int]:
    """Ascending positions of set bits; cost scales with the popcount,
    not the word width (gap masks are usually near-empty)."""
    out = []
    while x:
        low = x & -x
        out.append(low.bit_length() - 1)
        x ^= low
    return out


def _filled_slots(bitmap: int, n: int) -> list[int]:
    return _iter_bits(bitmap & ((1 << n) - 1))


def _gap_slots(bitmap: int, n: int) -> list[int]:
    return _iter_bits(~bitmap & ((1 << n) - 1))


def _build_movements(bitmaps, s, fill, partial, empty, r):
    gaps = []
    for f in fill:
        gaps.extend((f, slot) for slot in _gap_slots(bitmaps[f], s))
    if partial is not None:
        gaps.extend((partial, slot) for slot in _gap_slots(bitmaps[partial] & ((1 << r) - 1), r))
    sources = []
    if partial is not None:
        tail = bitmaps[partial] >> r << r
        sources.extend((partial, slot) for slot in _filled_slots(tail, s))
    for e in empty:
        sources.extend((e, slot) for slot in _filled_slots(bitmaps[e], s))
    if len(sources) != len(gaps):
        raise AssertionError(f"movement mismatch: {len(sources)} sources vs {len(gaps)} gaps")
    return list(zip(sources, gaps))


def plan_compaction(bitmaps: list[int], s: int) -> CompactionPlan:
    """Approximate plan: fullest blocks become F, next becomes p, rest empty.

    Within `t mod s` movements of optimal; ties on emptiness break
    toward the lower block index so plans are deterministic.
    """
    if not bitmaps:
        raise PlanError("empty compaction group")
    t = sum(_popcount(b) for b in bitmaps)
    nf, r = divmod(t, s)
    order = sorted(range(len(bitmaps)), key=lambda i: (s - _popcount(bitmaps[i]), i))
    fill = order[:nf]
    partial = order[nf] if r else None
    empty = order[nf + 1:] if r else order[nf:]
    movements = _build_movements(bitmaps, s, fill, partial, empty, r)
    return CompactionPlan(s, t, fill, partial, empty, movements)


def plan_compaction_optimal(bitmaps: list[int], s: int, max_group: int = 12) -> CompactionPlan:
    """Try every candidate partial block; minimal-movement plan (testing mode)."""
    if len(bitmaps) > max_group:
        raise PlanError(f"group of {len(bitmaps)} too large for exhaustive planning")
    if not bitmaps:
        raise PlanError("empty compaction group")
    t = sum(_popcount(b) for b in bitmaps)
    nf, r = divmod(t, s)
    fullness = lambda i: (s - _popcount(bitmaps[i]), i)

    if r == 0:
        order = sorted(range(len(bitmaps)), key=fullness)
        fill, empty = order[:nf], order[nf:]
        movements = _build_movements(bitmaps, s, fill, None, empty, 0)
        return CompactionPlan(s, t, fill, None, empty, movements)

    best = None
    for p in range(len(bitmaps)):
        others = sorted((i for i in range(len(bitmaps)) if i != p), key=fullness)
        fill = others[:nf]
        cost = (r - _popcount(bitmaps[p] & ((1 << r) - 1))
                + sum(s - _popcount(bitmaps[f]) for f in fill))
        if best is None or cost < best[0]:
            best = (cost, p, fill, others[nf:])
    _, p, fill, empty = best
    movements = _build_movements(bitmaps, s, fill, p, empty, r)
    return CompactionPlan(s, t, fill, p, empty, movements)


# --- cold detection -----------------------------------------------------------------

class AccessTable:
    """Per-block last-modified times fed by prune-pass observations."""

    def __init__(self, threshold: float):
        self.threshold = threshold
        self._last: dict[int, tuple[Block, float]] = {}
        self._lock = threading.Lock()

    def register(self, block: Block) -> None:
        with self._lock:
            self._last[block.base] = (block, time.monotonic())

    def forget(self, base: int) -> None:
        with self._lock:
            self._last.pop(base, None)

    def observe(self, observations) -> None:
        with self._lock:
            for slot, kind, pass_time, block in observations:
                self._last[block.base] = (block, pass_time)

    def touch(self, block: Block) -> None:
        with self._lock:
            self._last[block.base] = (block, time.monotonic())

    def idle_since(self, block: Block) -> float | None:
        with self._lock:
            entry = self._last.get(block.base)
        return entry[1] if entry else None

    def cold_blocks(self, now: float, threshold: float | None = None) -> list[Block]:
        limit = self.threshold if threshold is None else threshold
        with self._lock:
            return [blk for blk, t in self._last.values() if now - t >= limit]

    def entries(self) -> list[tuple[Block, float]]:
        with self._lock:
            return list(self._last.values())


@dataclass
class TransformStats:
    movements: int = 0
    blocks_freed: int = 0
    groups_committed: int = 0
    groups_aborted: int = 0
    gathered: int = 0
    preempted: int = 0
    requeued: int = 0
    gather_seconds: list = field(default_factory=list)
    compaction_seconds: list = field(default_factory=list)
    write_set_sizes: list = field(default_factory=list)


class BlockTransformer:
    """Owns the cold queue, compaction groups and the gather pipeline."""

    def __init__(self, engine: TransactionEngine, pruner, threshold: float = 0.010,
                 group_size: int = 32, variant: str = "gather"):
        if variant not in ("gather", "dictionary"):
            raise ValueError(f"unknown gather variant {variant!r}")
        self.engine = engine
        self.pruner = pruner
        self.access = AccessTable(threshold)
        self.group_size = group_size
        self.variant = variant
        self.cold_queue: dict[int, deque] = {}     # table id -> blocks awaiting compaction
        self.gather_queue: deque = deque()
        self._queued: set[int] = set()
        self._lock = threading.Lock()
        self.stats = TransformStats()
        pruner.observation_sink = self.observe

    # --- observation/cold path -------------------------------------------------

    def watch_table(self, table: Table) -> None:
        table.on_block_allocated = self.access.register
        for blk in table.blocks:
            self.access.register(blk)

    def observe(self, observations) -> list[Block]:
        self.access.observe(
            [o for o in observations if o[3].table is not None])
        return self.scan_cold()

    def scan_cold(self, now: float | None = None) -> list[Block]:
        now = time.monotonic() if now is None else now
        newly = []
        for block, last in self.access.entries():
            if block.state != HOT or block.table is None:
                continue
            threshold = getattr(block.table, "cold_threshold", None)
            if now - last < (self.access.threshold if threshold is None else threshold):
                continue
            with self._lock:
                if block.base in self._queued:
                    continue
                self._queued.add(block.base)
                self.cold_queue.setdefault(block.table.table_id, deque()).append(block)
            newly.append(block)
        return newly

    # --- phase 1: transactional compaction ------------------------------------------

    def execute_compaction(self, table: Table, group: list[Block]) -> bool:
        """One transaction moves tuples; survivors go COOLING before commit."""
        for blk in group:
            blk.seal()        # the insert cursor may never re-enter these
        bitmaps = [b.alloc_bitmap_int() for b in group]
        plan = plan_compaction(bitmaps, table.layout.num_slots)
        engine = self.engine
        txn = engine.begin()
        t0 = time.perf_counter()
        try:
            for (src_i, src_slot), (dst_i, dst_slot) in plan.movements:
                src = group[src_i].slot_tuple(src_slot)
                values = engine.select(txn, src)
                if values is NOT_VISIBLE:
                    raise WriteWriteConflict("source tuple vanished under the plan")
                engine.delete(txn, src)
                engine.insert_at(txn, table, group[dst_i], dst_slot, values)
        except (WriteWriteConflict, KeyError):
            # KeyError: a group member was released under us (stale queue
            # entry); treat exactly like a user conflict and retry later
            engine.abort(txn)
            self.stats.groups_aborted += 1
            self._requeue(group)
            return False

        survivors = [group[i] for i in plan.fill]
        if plan.partial is not None:
            survivors.append(group[plan.partial])
        for blk in survivors:
            blk.try_transition(HOT, COOLING)
        engine.commit(txn)
        self.stats.compaction_seconds.append(time.perf_counter() - t0)
        self.stats.groups_committed += 1
        self.stats.movements += plan.movement_count
        self.stats.write_set_sizes.append(len(txn.write_set))

        emptied = [group[i] for i in plan.empty]
        free_ts = engine.counter.next()
        for blk in emptied:
            self.pruner.defer(self._release_block(blk), free_ts)
        self.stats.blocks_freed += len(emptied)
        with self._lock:
            for blk in survivors:
                self.gather_queue.append(blk)
            for blk in emptied:
                self._queued.discard(blk.base)
        return True

    def _release_block(self, block: Block):
        def release():
            table = block.table
            if table is not None:
                table.remove_block(block)
            block.table = None       # late observations must not revive it
            self.access.forget(block.base)
            self.engine.arena.release(block.base)
        return release

    def _requeue(self, blocks) -> None:
        # preempted/aborted blocks re-enter via cold detection with a fresh epoch
        with self._lock:
            for blk in blocks:
                self._queued.discard(blk.base)
        for blk in blocks:
            self.access.touch(blk)

    # --- phase 2: gathering ---------------------------------------------------------------

    def gather(self, block: Block) -> str:
        if self.variant == "dictionary":
            return self.gather_dictionary(block)
        return self._gather(block, dictionary=False)

    def gather_dictionary(self, block: Block) -> str:
        return self._gather(block, dictionary=True)

    def _gather(self, block: Block, dictionary: bool) -> str:
        # cheap lock-free pre-checks, then the authoritative ones under
        # the block lock: a writer that preempted COOLING before we lock
        # fails the state check; one that installed a version first
        # fails the re-scan
        if block.state != COOLING:
            return PREEMPTED
        if block.has_any_version():
            return REQUEUED
        t0 = time.perf_counter()
        with block.lock:
            if block.state != COOLING:
                return PREEMPTED
            if block.has_any_version():
                return REQUEUED
            if not self._prefix_contiguous(block):
                # a delete pinned by an old transaction expired after
                # compaction and punched a hole: go around again
                block.set_state_locked(HOT)
                return RECOMPACT
            block.set_state_locked(FREEZING)

        # FREEZING: writers wait, readers proceed against the old storage
        try:
            layout = block.layout
            rows = self._contiguous_rows(block)
            null_counts = {}
            for col in range(1, layout.num_columns):
                bits = np.unpackbits(
                    np.frombuffer(block.validity_view(col), np.uint8), bitorder="little")[:rows]
                null_counts[col] = int(rows - bits.sum())
            gathered = {}
            for col in sorted(layout.varlen_column_ids):
                if dictionary:
                    gathered[col] = self._gather_column_dictionary(block, col, rows, null_counts[col])
                else:
                    gathered[col] = self._gather_column(block, col, rows, null_counts[col])
        except BaseException:
            # never strand the block FREEZING: writers spin on that state
            block.set_state(HOT)
            raise

        # one atomic cutover: payload rewrites, fresh heap, new gathered
        # buffers, FROZEN. Readers resolve in-place entries under this
        # same lock so they see either the old world or the new, never a mix.
        new_gathered = dict(block.gathered)
        new_gathered.update({c: g for c, (g, _) in gathered.items()})
        with block.lock:
            for col, (_, rewrite) in gathered.items():
                rewrite()
            old_chunks = block.heap.detach()
            block.gathered = new_gathered
            block.null_counts = null_counts
            block.set_state_locked(FROZEN)
        if old_chunks:
            self.pruner.defer(_poison_chunks(old_chunks), self.engine.counter.next())
        self.stats.gather_seconds.append(time.perf_counter() - t0)
        self.stats.gathered += 1
        return GATHERED

    @staticmethod
    def _prefix_contiguous(block: Block) -> bool:
        bits = np.unpackbits(
            np.frombuffer(block.alloc_bitmap_bytes(), np.uint8),
            bitorder="little")[:block.layout.num_slots]
        rows = int(bits.sum())
        return rows == 0 or bool(bits[:rows].all())

    def _contiguous_rows(self, block: Block) -> int:
        bits = np.unpackbits(
            np.frombuffer(block.alloc_bitmap_bytes(), np.uint8),
            bitorder="little")[:block.layout.num_slots]
        rows = int(bits.sum())
        if rows and not bits[:rows].all():
            raise AssertionError("gather requires a compacted (prefix-contiguous) block")
        return rows

    def _entry_fields(self, block: Block, col: int, rows: int):
        off = block.layout.column_offsets[col]
        mat = np.frombuffer(block.data, np.uint8, count=rows * 16, offset=off).reshape(rows, 16)
        sizes = mat[:, :4].copy().view("<u4").ravel().astype(np.int64)
        addrs = mat[:, 8:16].copy().view("<u8").ravel()
        valid = np.unpackbits(
            np.frombuffer(block.validity_view(col), np.uint8), bitorder="little")[:rows].astype(bool)
        return mat, sizes, addrs, valid

    def _gather_column(self, block: Block, col: int, rows: int, null_count: int):
        """Contiguous values + offsets for one varlen column, in slot order."""
        mat, sizes, addrs, valid = self._entry_fields(block, col, rows)
        eff = np.where(valid, sizes, 0)
        offsets = np.zeros(rows + 1, np.int64)
        np.cumsum(eff, out=offsets[1:])
        total = int(offsets[-1])
        if total >= 1 << 31:
            raise AssertionError("gathered column exceeds 32-bit offsets")
        values = bytearray(total)
        self._copy_values(block, mat, sizes, addrs, valid, offsets, values, rows)

        off32 = bytearray(offsets.astype("<i4").tobytes())
        gcol_values = values
        out_of_line = valid & (sizes > vl.INLINE_LIMIT)
        addr_base = np.uint64(vl.GATHERED_FLAG | ((col + 1) << 40))
        new_addrs = addr_base | offsets[:-1][out_of_line].astype(np.uint64)

        def rewrite():
            words = np.frombuffer(block.data, "<u8", count=rows * 2,
                                  offset=block.layout.column_offsets[col]).reshape(rows, 2)
            words[out_of_line, 1] = new_addrs

        from .block import GatheredColumn
        return GatheredColumn(gcol_values, off32, null_count), rewrite

    def _copy_values(self, block, mat, sizes, addrs, valid, offsets, values, rows):
        # sources may include the previous frozen generation's gathered
        # buffers (block was frozen, thawed by a write, now re-freezing)
        scatter_entries(values, offsets, mat.reshape(-1), sizes, addrs, valid,
                        block.heap.chunks, block.gathered)

    def _gather_column_dictionary(self, block: Block, col: int, rows: int, null_count: int):
        """Sorted distinct dictionary + per-slot codes (two scans)."""
        mat, sizes, addrs, valid = self._entry_fields(block, col, rows)
        values = []
        for i in range(rows):
            if not valid[i]:
                values.append(None)
                continue
            n = int(sizes[i])
            if n <= vl.INLINE_LIMIT:
                values.append(bytes(mat[i, 4:4 + n]))
            else:
                values.append(block.resolve_varlen(col, int(addrs[i]), n))
        distinct = sorted({v for v in values if v is not None})
        code_of = {v: i for i, v in enumerate(distinct)}

        dict_offsets = np.zeros(len(distinct) + 1, np.int64)
        np.cumsum([len(v) for v in distinct], out=dict_offsets[1:])
        dict_values = bytearray(b"".join(distinct))
        codes = np.zeros(rows, np.int32)
        new_addr = np.zeros(rows, np.uint64)
        out_of_line = np.zeros(rows, bool)
        for i, v in enumerate(values):
            if v is None:
                continue
            c = code_of[v]
            codes[i] = c
            if len(v) > vl.INLINE_LIMIT:
                out_of_line[i] = True
                new_addr[i] = vl.gathered_address(col, int(dict_offsets[c]))

        def rewrite():
            words = np.frombuffer(block.data, "<u8", count=rows * 2,
                                  offset=block.layout.column_offsets[col]).reshape(rows, 2)
            words[out_of_line, 1] = new_addr[out_of_line]

        from .block import GatheredColumn
        g = GatheredColumn(None, None, null_count,
                           dict_values=dict_values,
                           dict_offsets=bytearray(dict_offsets.astype("<i4").tobytes()),
                           codes=bytearray(codes.astype("<i4").tobytes()))
        return g, rewrite

    # --- the pass --------------------------------------------------------------------------

    def transform_pass(self) -> TransformStats:
        """Gather what is ready, then compact newly cold groups."""
        with self._lock:
            pending = list(self.gather_queue)
            self.gather_queue.clear()
        for block in pending:
            outcome = self.gather(block)
            if outcome == REQUEUED:
                with self._lock:
                    self.gather_queue.append(block)
                self.stats.requeued += 1
            elif outcome in (PREEMPTED, RECOMPACT):
                self.stats.preempted += 1
                self._requeue([block])
            else:
                with self._lock:
                    self._queued.discard(block.base)

        self.scan_cold()
        groups = []
        with self._lock:
            for table_id, queue in self.cold_queue.items():
                while queue:
                    group = []
                    while queue and len(group) < self.group_size:
                        group.append(queue.popleft())
                    if group:
                        groups.append(group)
        for group in groups:
            # version links mean transactions touched the block more
            # recently than the observation lag can see: such blocks are
            # not cold, whatever the access table says (mistaken-cold
            # identification; the chains drain once it goes truly idle)
            live = [b for b in group
                    if b.state == HOT and b.table is not None
                    and not b.has_any_version()]
            stale = [b for b in group if b not in live]
            if stale:
                self._requeue(stale)
            if not live:
                continue
            self.execute_compaction(live[0].table, live)
        return self.stats


def _poison_chunks(chunks):
    def poison():
        for c in chunks:
            c[:] = b"\xdd" * len(c)
        chunks.clear()
    return poison


class TransformerThread(threading.Thread):
    def __init__(self, transformer: BlockTransformer, interval: float = 0.010):
        super().__init__(name="icehouse-transformer", daemon=True)
        self.transformer = transformer
        self.interval = interval
        self._halt = threading.Event()

    def run(self):
        while not self._halt.is_set():
            self.transformer.transform_pass()
            self._halt.wait(self.interval)

    def stop(self):
        self._halt.set()
        self.join(timeout=30)
