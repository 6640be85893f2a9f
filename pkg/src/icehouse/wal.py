"""Write-ahead redo logging, group flush, and startup recovery.

On-disk format, little-endian throughout. Each record is framed as

    u32 payload_length | u8 kind | payload | u32 crc32c(kind + payload)

Data records (kind 0/1/2 = update/insert/delete):

    u64 txn_id | u32 table_id | u64 tuple_slot | u16 ncols |
    ncols * ( u16 user_col | u8 valid | u32 len | bytes )

Commit records (kind 3):

    u64 txn_id | u64 commit_ts | u64 callback_id

There are no log sequence numbers: commit records reach the flush queue
inside the commit critical section, so their file order matches
commit-timestamp order. Data records may be flushed incrementally
before their transaction commits; recovery ignores any transaction
without a commit record, which also voids such early records.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import time

from .layout import unpack_slot
from .table import Table, encode_fixed

KIND_UPDATE, KIND_INSERT, KIND_DELETE, KIND_COMMIT = 0, 1, 2, 3

REDO_SEGMENT_BYTES = 4096

_U32 = struct.Struct("<I")
_FRAME_HEAD = struct.Struct("<IB")
_DATA_HEAD = struct.Struct("<QIQH")
_COL_HEAD = struct.Struct("<HBI")
_COMMIT = struct.Struct("<QQQ")


# --- CRC-32C (Castagnoli), table-driven ---------------------------------------

def _make_crc_table():
    poly = 0x82F63B78
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return tuple(table)


_CRC_TABLE = _make_crc_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    table = _CRC_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


# --- record encoding -------------------------------------------------------------

def _frame(kind: int, payload: bytes) -> bytes:
    return _FRAME_HEAD.pack(len(payload), kind) + payload + _U32.pack(
        crc32c(bytes([kind]) + payload))


def encode_data_record(kind: int, txn_id: int, table_id: int, slot: int,
                       table: Table, values) -> bytes:
    cols = sorted(values) if values else []
    parts = [_DATA_HEAD.pack(txn_id, table_id, slot, len(cols))]
    for c in cols:
        v = values[c]
        col = table.schema.columns[c]
        if v is None:
            parts.append(_COL_HEAD.pack(c, 0, 0))
        elif col.varlen:
            data = v.encode("utf-8") if isinstance(v, str) else bytes(v)
            parts.append(_COL_HEAD.pack(c, 1, len(data)))
            parts.append(data)
        else:
            data = encode_fixed(col.width, v)
            parts.append(_COL_HEAD.pack(c, 1, len(data)))
            parts.append(data)
    return _frame(kind, b"".join(parts))


def encode_commit_record(txn_id: int, commit_ts: int, callback_id: int) -> bytes:
    return _frame(KIND_COMMIT, _COMMIT.pack(txn_id, commit_ts, callback_id))


def iter_records(data: bytes):
    """Yield (kind, payload) for every intact record; stop at a torn tail."""
    pos, n = 0, len(data)
    while pos + 5 <= n:
        length, kind = _FRAME_HEAD.unpack_from(data, pos)
        end = pos + 5 + length + 4
        if end > n:
            return
        payload = data[pos + 5:pos + 5 + length]
        (crc,) = _U32.unpack_from(data, pos + 5 + length)
        if crc != crc32c(bytes([kind]) + payload):
            return
        yield kind, payload
        pos = end


# --- the log manager -----------------------------------------------------------------

class LogHalted(RuntimeError):
    """The serializer hit an I/O failure; the engine stops accepting commits."""


class _QueueItem:
    __slots__ = ("chunks", "commit_record", "callback", "commit_ts")

    def __init__(self, chunks, commit_record=None, callback=None, commit_ts=None):
        self.chunks = chunks
        self.commit_record = commit_record
        self.callback = callback
        self.commit_ts = commit_ts


class WriteAheadLog:
    def __init__(self, path: str, group_size: int = 64, flush_interval: float = 0.005,
                 fsync: bool = True):
        self.path = path
        self.group_size = group_size
        self.flush_interval = flush_interval
        self.fsync = fsync
        self.queue: queue.SimpleQueue = queue.SimpleQueue()
        self.failed = False
        self.bytes_written = 0
        self.durable_offset = 0
        self._file = open(path, "ab")
        self._callback_ids = 0
        self._lock = threading.Lock()
        self._thread: _FlushThread | None = None

    # producers -----------------------------------------------------------

    def enqueue_partial(self, txn) -> None:
        if txn.redo:
            chunks, txn.redo, txn.redo_bytes = txn.redo, [], 0
            self.queue.put(_QueueItem(chunks))

    def enqueue_committed(self, txn, callback=None) -> None:
        """Called inside the commit critical section; queue order = commit order."""
        if self.failed:
            raise LogHalted("log serializer failed; commits are halted")
        self._callback_ids += 1
        commit_rec = encode_commit_record(txn.start, txn.commit_ts, self._callback_ids)
        chunks, txn.redo, txn.redo_bytes = txn.redo, [], 0
        self.queue.put(_QueueItem(chunks, commit_rec, callback, txn.commit_ts))

    # serializer ------------------------------------------------------------

    def flush_loop_step(self, max_items: int | None = None) -> int:
        """Drain queued buffers, write them, barrier once, fire callbacks."""
        items = []
        limit = max_items or self.group_size
        while len(items) < limit:
            try:
                items.append(self.queue.get_nowait())
            except queue.Empty:
                break
        if not items:
            return 0
        written = 0
        callbacks = []
        try:
            for item in items:
                for chunk in item.chunks:
                    self._file.write(chunk)
                    written += len(chunk)
                if item.commit_record is not None:
                    self._file.write(item.commit_record)
                    written += len(item.commit_record)
                if item.callback is not None:
                    callbacks.append((item.callback, item.commit_ts))
            self._file.flush()
            if self.fsync:
                os.fsync(self._file.fileno())
        except (OSError, ValueError):
            self.failed = True
            raise LogHalted("log write failed")
        self.bytes_written += written
        self.durable_offset = self._file.tell()
        for cb, cts in callbacks:
            cb(cts)
        return written

    def start(self) -> None:
        self._thread = _FlushThread(self)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is not None:
            self._thread.halt()
            self._thread = None
        while self.flush_loop_step():
            pass
        self._file.flush()
        if self.fsync:
            os.fsync(self._file.fileno())
        self._file.close()


class _FlushThread(threading.Thread):
    def __init__(self, wal: WriteAheadLog):
        super().__init__(name="icehouse-wal", daemon=True)
        self.wal = wal
        self._halt = threading.Event()

    def run(self):
        interval = self.wal.flush_interval
        while not self._halt.is_set():
            deadline = time.monotonic() + interval
            while (self.wal.queue.qsize() < self.wal.group_size
                   and time.monotonic() < deadline and not self._halt.is_set()):
                time.sleep(interval / 10)
            try:
                self.wal.flush_loop_step()
            except LogHalted:
                return

    def halt(self):
        self._halt.set()
        self.join(timeout=10)


# --- recovery -----------------------------------------------------------------------

def recover(path: str, engine, tables_by_id: dict[int, Table]) -> dict:
    """Rebuild table contents from the log; blocks come back HOT, chains empty."""
    with open(path, "rb") as f:
        data = f.read()

    committed: dict[int, int] = {}
    for kind, payload in iter_records(data):
        if kind == KIND_COMMIT:
            txn_id, commit_ts, _cb = _COMMIT.unpack(payload)
            committed[txn_id] = commit_ts

    per_txn: dict[int, list] = {t: [] for t in committed}
    for kind, payload in iter_records(data):
        if kind == KIND_COMMIT:
            continue
        txn_id, table_id, slot, ncols = _DATA_HEAD.unpack_from(payload, 0)
        if txn_id not in committed:
            continue
        pos = _DATA_HEAD.size
        cols = {}
        for _ in range(ncols):
            c, valid, ln = _COL_HEAD.unpack_from(payload, pos)
            pos += _COL_HEAD.size
            cols[c] = payload[pos:pos + ln] if valid else None
            pos += ln
        per_txn[txn_id].append((kind, table_id, slot, cols))

    max_ts = 0
    replayed = 0
    for txn_id, cts in sorted(committed.items(), key=lambda kv: kv[1]):
        max_ts = max(max_ts, cts, txn_id)
        for kind, table_id, slot, cols in per_txn[txn_id]:
            table = tables_by_id[table_id]
            _apply(engine, table, kind, slot, cols)
            replayed += 1

    for table in tables_by_id.values():
        _rebuild_table_indexes(engine, table)
    engine.counter.advance_to(max_ts + 1)
    return {"committed_txns": len(committed), "records_replayed": replayed}


def _apply(engine, table: Table, kind: int, slot: int, cols: dict) -> None:
    base, offset = unpack_slot(slot)
    arena = engine.arena
    if base in arena:
        block = arena.get(base)
    else:
        block = arena.ensure(base, table.layout)
        block.table = table
        with table.lock:
            table.blocks.append(block)
            table.blocks.sort(key=lambda b: b.base)
    if kind == KIND_DELETE:
        with block.lock:
            block._set_bit(block.layout.alloc_bitmap_offset, offset, False)
        return
    values = {c: _decode_col(table, c, raw) for c, raw in cols.items()}
    engine._write_values(block, offset, table, values)
    if kind == KIND_INSERT:
        with block.lock:
            block._set_bit(block.layout.alloc_bitmap_offset, offset, True)
            head = block.insert_head
            if offset >= head:
                struct.pack_into("<Q", block.data, 24, offset + 1)


def _decode_col(table: Table, c: int, raw):
    if raw is None:
        return None
    col = table.schema.columns[c]
    if col.varlen:
        return raw.decode("utf-8") if col.utf8 else raw
    if col.width == 16:
        return raw
    return int.from_bytes(raw, "little", signed=True)


def _rebuild_table_indexes(engine, table: Table) -> None:
    if engine.indexes is None:
        return
    indexes = engine.indexes.for_table(table)
    if not indexes:
        return
    txn = engine.begin()
    try:
        for slot, values in engine.scan(txn, table):
            for ix in indexes:
                ix.map[ix.key_of(values)] = slot
    finally:
        engine.abort(txn)
