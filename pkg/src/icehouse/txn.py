"""Delta-store MVCC transaction engine providing snapshot isolation.

Version chains hang off column 0 of each block: the word stores the id
of the newest undo record, records link newest-to-oldest, and every
record's timestamp is read through its owning transaction's shared
commit word (sign bit set = uncommitted). Readers copy the in-place
image first, then walk the chain applying before-images until they
reach a record at or below their start timestamp.

Write-write conflicts are first-writer-wins: the later writer gets
WriteWriteConflict and is expected to abort.
"""

from __future__ import annotations

import threading

from . import varlen as vl
from .block import Block, HOT, PRUNE_MARK, preempt_to_hot
from .layout import unpack_slot
from .table import Table

MSB = 1 << 63
TS_MASK = MSB - 1

UPDATE, INSERT, DELETE = 0, 1, 2
KIND_NAMES = {UPDATE: "update", INSERT: "insert", DELETE: "delete"}

ACTIVE, COMMITTED, ABORTED = 0, 1, 2

UNDO_SEGMENT_BYTES = 4096
_RECORD_OVERHEAD = 64


class WriteWriteConflict(Exception):
    """Another transaction owns or has more recently written the tuple."""


class _NotVisible:
    __slots__ = ()

    def __repr__(self):
        return "NOT_VISIBLE"

    def __bool__(self):
        return False


NOT_VISIBLE = _NotVisible()


class AtomicCounter:
    """Shared monotonic source for start and commit timestamps."""

    __slots__ = ("_value", "_lock")

    def __init__(self, start: int = 1):
        self._value = start
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            v = self._value
            self._value += 1
            return v

    def peek(self) -> int:
        """The next value that would be issued (exceeds everything issued)."""
        return self._value

    def advance_to(self, floor: int) -> None:
        with self._lock:
            if self._value < floor:
                self._value = floor


class UndoRecord:
    __slots__ = (
        "id", "kind", "slot", "block", "cols", "before", "before_valid",
        "next", "txn", "ts_override", "aborted", "reclaimed",
    )

    def __init__(self, rid: int, kind: int, slot: int, block: Block, txn: "TransactionContext",
                 cols: tuple = (), before: tuple = (), before_valid: tuple = ()):
        self.id = rid
        self.kind = kind
        self.slot = slot
        self.block = block
        self.cols = cols                 # layout column ids
        self.before = before             # raw bytes per col
        self.before_valid = before_valid
        self.next: UndoRecord | None = None
        self.txn = txn
        self.ts_override: int | None = None
        self.aborted = False
        self.reclaimed = False

    def read_ts(self) -> int:
        ts = self.ts_override
        return ts if ts is not None else self.txn.ts_word

    def nbytes(self) -> int:
        return _RECORD_OVERHEAD + sum(len(b) for b in self.before)


class UndoSegment:
    __slots__ = ("records", "bytes_used")

    def __init__(self):
        self.records: list[UndoRecord] = []
        self.bytes_used = 0

    def room_for(self, n: int) -> bool:
        return self.bytes_used + n <= UNDO_SEGMENT_BYTES or not self.records

    def add(self, rec: UndoRecord) -> None:
        self.records.append(rec)
        self.bytes_used += rec.nbytes()


class SegmentPool:
    """Free-list of undo segments; releasing poisons the records it held."""

    def __init__(self, cap: int = 1024):
        self._free: list[UndoSegment] = []
        self._lock = threading.Lock()
        self._cap = cap

    def acquire(self) -> UndoSegment:
        with self._lock:
            if self._free:
                return self._free.pop()
        return UndoSegment()

    def release(self, seg: UndoSegment) -> None:
        for rec in seg.records:
            rec.reclaimed = True
        seg.records = []
        seg.bytes_used = 0
        with self._lock:
            if len(self._free) < self._cap:
                self._free.append(seg)


class TransactionContext:
    __slots__ = (
        "engine", "start", "ts_word", "state", "commit_ts",
        "undo_segments", "write_set", "redo", "redo_bytes", "index_deltas",
    )

    def __init__(self, engine: "TransactionEngine", start: int):
        self.engine = engine
        self.start = start
        self.ts_word = start | MSB
        self.state = ACTIVE
        self.commit_ts: int | None = None
        self.undo_segments: list[UndoSegment] = []
        self.write_set: list[UndoRecord] = []
        self.redo: list[bytes] = []
        self.redo_bytes = 0
        self.index_deltas: list[tuple] = []

    # convenience wrappers

    def select(self, slot: int, cols=None):
        return self.engine.select(self, slot, cols)

    def insert(self, table: Table, values) -> int:
        return self.engine.insert(self, table, values)

    def update(self, slot: int, values: dict) -> None:
        self.engine.update(self, slot, values)

    def delete(self, slot: int) -> None:
        self.engine.delete(self, slot)

    def commit(self, callback=None) -> int:
        return self.engine.commit(self, callback)

    def abort(self) -> None:
        self.engine.abort(self)

    def final_ts(self) -> int:
        """Timestamp after which this txn's records are prunable."""
        if self.state == COMMITTED:
            return self.commit_ts
        return max((r.ts_override or 0) for r in self.write_set) if self.write_set else self.start


class TransactionEngine:
    """Transaction manager over a block arena.

    The WAL and pruner are attached by the engine facade; both are
    optional so the core can be exercised standalone.
    """

    def __init__(self, arena, counter: AtomicCounter | None = None):
        self.arena = arena
        self.counter = counter or AtomicCounter()
        self.records: dict[int, UndoRecord] = {}
        self.active: dict[int, TransactionContext] = {}
        self.commit_lock = threading.Lock()
        self.segment_pool = SegmentPool()
        self._record_ids = AtomicCounter()
        self.wal = None                 # set by engine facade
        self.completed_sink = None      # pruner queue callable
        self.indexes = None             # IndexRegistry
        self.tables: dict[int, Table] = {}

    # --- lifecycle -----------------------------------------------------------

    def begin(self) -> TransactionContext:
        with self.commit_lock:
            start = self.counter.next()
            txn = TransactionContext(self, start)
            self.active[start] = txn
        return txn

    def oldest_active_start(self) -> int:
        with self.commit_lock:
            if self.active:
                return min(self.active)
            return self.counter.peek()

    def commit(self, txn: TransactionContext, callback=None) -> int:
        assert txn.state == ACTIVE
        with self.commit_lock:
            cts = self.counter.next()
            txn.commit_ts = cts
            txn.ts_word = cts           # publishes every record of this txn
            txn.state = COMMITTED
            if self.wal is not None:
                self.wal.enqueue_committed(txn, callback)
            self.active.pop(txn.start, None)
        if self.wal is None and callback is not None:
            callback(cts)
        if self.indexes is not None and txn.index_deltas:
            self.indexes.apply(txn.index_deltas)
        if self.completed_sink is not None:
            self.completed_sink(txn)
        return cts

    def abort(self, txn: TransactionContext) -> None:
        assert txn.state == ACTIVE
        # restore newest-first, then "commit" the undo records with one
        # timestamp drawn after every restore: readers that copied a dirty
        # image before a restore still apply the record (their start
        # precedes the abort timestamp), and chains stay newest-to-oldest
        for rec in reversed(txn.write_set):
            self._restore(rec)
        abort_ts = self.counter.next()
        for rec in reversed(txn.write_set):
            rec.aborted = True
            rec.ts_override = abort_ts
        txn.state = ABORTED
        with self.commit_lock:
            self.active.pop(txn.start, None)
        if self.completed_sink is not None:
            self.completed_sink(txn)

    def _restore(self, rec: UndoRecord) -> None:
        block = rec.block
        _, offset = unpack_slot(rec.slot)
        if rec.kind == UPDATE:
            for col, raw, valid in zip(rec.cols, rec.before, rec.before_valid):
                block.write_attr(col, offset, raw)
            with block.lock:
                for col, valid in zip(rec.cols, rec.before_valid):
                    block.set_valid(col, offset, valid)
        elif rec.kind == INSERT:
            with block.lock:
                block._set_bit(block.layout.alloc_bitmap_offset, offset, False)
        # DELETE: nothing physical was changed

    # --- record plumbing --------------------------------------------------------

    def _reserve(self, txn: TransactionContext, kind: int, slot: int, block: Block,
                 cols=(), before=(), before_valid=()) -> UndoRecord:
        rec = UndoRecord(self._record_ids.next(), kind, slot, block, txn,
                         cols, before, before_valid)
        if not txn.undo_segments or not txn.undo_segments[-1].room_for(rec.nbytes()):
            txn.undo_segments.append(self.segment_pool.acquire())
        txn.undo_segments[-1].add(rec)
        return rec

    def _resolve_head(self, word: int) -> UndoRecord | None:
        rid = word & (PRUNE_MARK - 1)
        if rid == 0:
            return None
        rec = self.records.get(rid)
        if rec is None:
            raise RuntimeError("version chain head points at reclaimed record")
        return rec

    def _check_conflict(self, txn: TransactionContext, head: UndoRecord | None) -> None:
        if head is None:
            return
        ts = head.read_ts()
        if ts & MSB:
            if head.txn is not txn:
                raise WriteWriteConflict(f"slot owned by txn {ts & TS_MASK}")
        elif ts > txn.start:
            raise WriteWriteConflict(f"newer committed write at ts {ts}")

    # --- reads ---------------------------------------------------------------------

    def select(self, txn: TransactionContext, slot: int, cols=None):
        """Materialize the version of `slot` visible at txn.start.

        Returns a tuple of user-column values (None for nulls) or
        NOT_VISIBLE when the tuple does not exist in this snapshot.

        The in-place image, allocation/validity bits and chain head are
        read under the block lock, and out-of-line varlen values of the
        in-place image are resolved eagerly in the same critical section
        (a gather may atomically relocate value storage). Before-images
        taken from the chain resolve lazily: their records are unpruned,
        which pins the storage they reference.
        """
        base, offset = unpack_slot(slot)
        block = self.arena.get(base)
        table: Table = block.table
        user_cols = range(len(table.schema)) if cols is None else cols
        lay_cols = [c + 1 for c in user_cols]
        varlen_ids = block.layout.varlen_column_ids

        img = {}
        eager = {}
        with block.lock:
            alive = block.is_allocated(offset)
            valid = {}
            for col in lay_cols:
                raw = block.read_attr(col, offset)
                img[col] = raw
                valid[col] = block.is_valid(col, offset)
                # a dead slot's entry may reference storage a gather has
                # already reclaimed; values are only ever visible when the
                # allocation bit is set, which pins the current heap
                if alive and col in varlen_ids and valid[col]:
                    size = vl.entry_size(raw)
                    if size > vl.INLINE_LIMIT:
                        eager[col] = block.resolve_varlen(col, vl.entry_address(raw), size)
            head_word = block.version_word(offset)
        cur = self._resolve_head(head_word)

        my_word = txn.ts_word
        start = txn.start
        dead = False
        touched = set()
        while cur is not None:
            assert not cur.reclaimed, "reader dereferenced reclaimed undo record"
            ts = cur.read_ts()
            if ts == my_word and ts & MSB:
                # own uncommitted write: in-place state is what we wrote
                dead = cur.kind == DELETE and not cur.aborted
                break
            if ts > start:
                if cur.kind == UPDATE:
                    for col, raw, v in zip(cur.cols, cur.before, cur.before_valid):
                        if col in img:
                            img[col] = raw
                            valid[col] = v
                            touched.add(col)
                elif cur.kind == INSERT:
                    alive = False
                elif cur.kind == DELETE:
                    alive = True
                cur = cur.next
                continue
            # first record at or below our snapshot: its after-state holds
            if cur.kind == DELETE and not cur.aborted:
                dead = True
            break

        if dead or not alive:
            return NOT_VISIBLE

        out = []
        for c in user_cols:
            col = c + 1
            if not valid[col]:
                out.append(None)
                continue
            schema_col = table.schema.columns[c]
            raw = img[col]
            if not schema_col.varlen:
                from .table import decode_fixed
                out.append(decode_fixed(schema_col.width, raw,
                                        binary=(schema_col.width == 16)))
                continue
            size = vl.entry_size(raw)
            if size <= vl.INLINE_LIMIT:
                value = vl.entry_inline_value(raw)
            elif col in eager and col not in touched:
                value = eager[col]
            else:
                value = block.resolve_varlen(col, vl.entry_address(raw), size)
            out.append(value.decode("utf-8") if schema_col.utf8 else value)
        return tuple(out)

    def scan(self, txn: TransactionContext, table: Table):
        """Yield (slot, values) for every tuple visible to txn, in slot order."""
        with table.lock:
            blocks = list(table.blocks)
        for block in blocks:
            n = block.layout.num_slots
            bits = block.alloc_bitmap_int()
            words = block.version_column_array()
            chained = (words & (PRUNE_MARK - 1)) != 0
            for slot in range(n):
                if not (bits >> slot & 1) and not chained[slot]:
                    continue
                packed = block.slot_tuple(slot)
                vals = self.select(txn, packed)
                if vals is not NOT_VISIBLE:
                    yield packed, vals

    # --- writes -----------------------------------------------------------------------

    def insert(self, txn: TransactionContext, table: Table, values) -> int:
        assert txn.state == ACTIVE
        if len(values) != len(table.schema):
            raise ValueError("value count does not match schema")
        block, offset = table.insert_position()
        rec = self._reserve(txn, INSERT, 0, block)
        vals = dict(enumerate(values))
        while True:
            if block.state != HOT:
                preempt_to_hot(block)
            gen = block.heap.generation
            self._write_values(block, offset, table, vals)
            stolen = False
            with block.lock:
                if block.state != HOT or block.heap.generation != gen:
                    continue          # preempt or re-encode against the new heap
                if block.is_allocated(offset) or block.chain_head_id(offset) != 0:
                    # a compaction sealed this block and claimed the slot
                    # between our cursor bump and this install
                    stolen = True
                else:
                    rec.slot = block.slot_tuple(offset)
                    rec.block = block
                    block._set_bit(block.layout.alloc_bitmap_offset, offset, True)
                    self.records[rec.id] = rec
                    block.set_version_word(offset, rec.id)
                    break
            if stolen:
                block, offset = table.insert_position()
        slot = rec.slot
        txn.write_set.append(rec)
        self._log_write(txn, INSERT, table, slot, vals)
        if self.indexes is not None:
            self.indexes.record_insert(txn, table, slot, values)
        return slot

    def insert_at(self, txn: TransactionContext, table: Table, block: Block, offset: int, values) -> int:
        """Insert into a specific free slot (compaction's gap filling).

        The allocation bit only appears together with the undo record,
        inside the locked install, so no reader can ever see the slot
        allocated with half-written values.
        """
        assert txn.state == ACTIVE
        if block.is_allocated(offset):
            raise WriteWriteConflict(f"slot {offset} already allocated")
        slot = block.slot_tuple(offset)
        rec = self._reserve(txn, INSERT, slot, block)
        vals = dict(enumerate(values))
        while True:
            if block.state != HOT:
                preempt_to_hot(block)
            gen = block.heap.generation
            self._write_values(block, offset, table, vals)
            with block.lock:
                if block.state != HOT or block.heap.generation != gen:
                    continue
                if block.is_allocated(offset):
                    raise WriteWriteConflict(f"slot {offset} already allocated")
                block._set_bit(block.layout.alloc_bitmap_offset, offset, True)
                head = self._resolve_head(block.version_word(offset))
                rec.next = head
                self.records[rec.id] = rec
                block.set_version_word(offset, rec.id)
                break
        txn.write_set.append(rec)
        self._log_write(txn, INSERT, table, slot, vals)
        if self.indexes is not None:
            self.indexes.record_insert(txn, table, slot, values)
        return slot

    def update(self, txn: TransactionContext, slot: int, values: dict) -> None:
        """Write a subset of user columns; raises WriteWriteConflict."""
        assert txn.state == ACTIVE
        base, offset = unpack_slot(slot)
        block = self.arena.get(base)
        table: Table = block.table
        if self.select(txn, slot, cols=()) is NOT_VISIBLE:
            raise WriteWriteConflict("tuple not visible to this transaction")

        old_vals = None
        if self.indexes is not None and self.indexes.covers_update(table, values):
            old_vals = self.select(txn, slot)
        lay_cols = tuple(sorted(c + 1 for c in values))
        rec = self._reserve(txn, UPDATE, slot, block)
        while True:
            if block.state != HOT:
                preempt_to_hot(block)
            gen = block.heap.generation
            new_raw = self._encode_values(block, table, values)
            with block.lock:
                if block.state != HOT or block.heap.generation != gen:
                    continue
                head = self._resolve_head(block.version_word(offset))
                self._check_conflict(txn, head)
                rec.cols = lay_cols
                rec.before = tuple(block.read_attr(c, offset) for c in lay_cols)
                rec.before_valid = tuple(block.is_valid(c, offset) for c in lay_cols)
                rec.next = head
                self.records[rec.id] = rec
                block.set_version_word(offset, rec.id)
                for c in lay_cols:
                    block.set_valid(c, offset, values[c - 1] is not None)
                break
        for c in lay_cols:
            block.write_attr(c, offset, new_raw[c])
        txn.write_set.append(rec)
        self._log_write(txn, UPDATE, table, slot, values)
        if old_vals is not None:
            self.indexes.record_update(txn, table, slot, old_vals, values)

    def delete(self, txn: TransactionContext, slot: int) -> None:
        assert txn.state == ACTIVE
        base, offset = unpack_slot(slot)
        block = self.arena.get(base)
        table: Table = block.table
        old_vals = self.select(txn, slot)
        if old_vals is NOT_VISIBLE:
            raise WriteWriteConflict("tuple not visible to this transaction")

        rec = self._reserve(txn, DELETE, slot, block)
        while True:
            if block.state != HOT:
                preempt_to_hot(block)
            with block.lock:
                if block.state != HOT:
                    continue
                head = self._resolve_head(block.version_word(offset))
                self._check_conflict(txn, head)
                rec.next = head
                self.records[rec.id] = rec
                block.set_version_word(offset, rec.id)
                break
        txn.write_set.append(rec)
        self._log_write(txn, DELETE, table, slot, None)
        if self.indexes is not None:
            self.indexes.record_delete(txn, table, slot, old_vals)

    # --- helpers ---------------------------------------------------------------

    def _encode_values(self, block: Block, table: Table, values: dict) -> dict:
        """Encode user-column values to raw attr bytes (varlens go to the heap)."""
        raw = {}
        for user_col, value in values.items():
            lc = user_col + 1
            col = table.schema.columns[user_col]
            if value is None:
                raw[lc] = b"\x00" * col.width
            elif col.varlen:
                data = value.encode("utf-8") if isinstance(value, str) else bytes(value)
                if len(data) <= vl.INLINE_LIMIT:
                    raw[lc] = vl.make_varlen(data)
                else:
                    raw[lc] = vl.make_varlen(data, block.heap.store(data))
            else:
                raw[lc] = table.encode_value(user_col, value)
        return raw

    def _write_values(self, block: Block, offset: int, table: Table, values: dict) -> None:
        raw = self._encode_values(block, table, values)
        for user_col, value in values.items():
            lc = user_col + 1
            block.write_attr(lc, offset, raw[lc])
        with block.lock:
            for user_col, value in values.items():
                block.set_valid(user_col + 1, offset, value is not None)

    def _log_write(self, txn: TransactionContext, kind: int, table: Table, slot: int, values) -> None:
        if self.wal is None:
            return
        from . import wal as wal_mod
        payload = wal_mod.encode_data_record(kind, txn.start, table.table_id, slot, table, values)
        txn.redo.append(payload)
        txn.redo_bytes += len(payload)
        if txn.redo_bytes >= wal_mod.REDO_SEGMENT_BYTES:
            self.wal.enqueue_partial(txn)
