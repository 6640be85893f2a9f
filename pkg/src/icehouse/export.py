"""Record-batch export: zero-copy for frozen blocks, transactional otherwise.

A frozen block exports by reference: validity bitmaps, column regions,
gathered offsets/values (or dictionary codes) are sliced straight out
of block storage under the reader-counter protocol and written to the
sink unchanged. Any other state materializes a per-block snapshot: the
block bytes are copied under its lock, slots with live version chains
are repaired through select(), and fresh buffers are compressed down to
the visible rows.

The reference dump is JSON lines, one object per visible tuple in slot
order: 8-byte integers as decimal strings (lossless for consumers
without 64-bit numbers), binary as {"$hex": "..."}, UTF-8 as plain
strings, nulls explicit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .arrow_ipc import ColumnData, FieldType, IpcStreamWriter
from .block import Block, PRUNE_MARK
from .ragged import scatter_entries
from .table import Table
from .txn import NOT_VISIBLE, TransactionEngine

_ID_MASK = PRUNE_MARK - 1

ZERO_COPY = "zero-copy"
MATERIALIZED = "materialized"


def export_fields(table: Table, dictionary: bool = False) -> list[FieldType]:
    """Arrow schema for a table; the version-link column is not exported."""
    fields = []
    dict_id = 0
    for col in table.schema.columns:
        if col.varlen:
            kind = "utf8" if col.utf8 else "binary"
            if dictionary:
                fields.append(FieldType(col.name, kind, dictionary_id=dict_id))
                dict_id += 1
            else:
                fields.append(FieldType(col.name, kind))
        elif col.width == 16:
            fields.append(FieldType(col.name, "fsb", bits=16))
        else:
            fields.append(FieldType(col.name, "int", bits=col.width * 8))
    return fields


@dataclass
class ColumnExport:
    null_count: int
    validity: object
    data_parts: list = field(default_factory=list)
    offsets: object = None
    codes: object = None                    # dictionary-encoded column
    dict_values: object = None              # values buffer of the block dictionary
    dict_offsets: object = None
    dict_count: int = 0


@dataclass
class ExportBatch:
    rows: int
    columns: list[ColumnExport]
    provenance: str
    block: Block | None = None
    _release: object = None

    def release(self):
        if self._release is not None:
            self._release()
            self._release = None


def export_block(engine: TransactionEngine, txn, block: Block) -> ExportBatch:
    """Spec entry point: zero-copy when FROZEN, else a transactional snapshot."""
    if block.enter_frozen_read():
        return _export_frozen(block)
    return materialize_block(engine, txn, block)


# --- frozen path ----------------------------------------------------------------

def _export_frozen(block: Block) -> ExportBatch:
    table: Table = block.table
    rows = block.allocated_count()
    vbytes = (rows + 7) >> 3
    cols = []
    for user_col, col in enumerate(table.schema.columns):
        lc = user_col + 1
        validity = block.validity_view(lc)[:vbytes]
        nulls = block.null_counts.get(lc, 0)
        if col.varlen:
            g = block.gathered.get(lc)
            if g is None:
                raise RuntimeError("frozen block lacks gathered buffers")
            if g.is_dictionary:
                cols.append(ColumnExport(
                    nulls, validity,
                    codes=memoryview(g.codes)[:rows * 4],
                    dict_values=memoryview(g.dict_values),
                    dict_offsets=memoryview(g.dict_offsets),
                    dict_count=len(g.dict_offsets) // 4 - 1))
            else:
                cols.append(ColumnExport(
                    nulls, validity,
                    offsets=memoryview(g.offsets)[:(rows + 1) * 4],
                    data_parts=[memoryview(g.values)]))
        else:
            cols.append(ColumnExport(nulls, validity, data_parts=[block.column_view(lc, rows)]))
    return ExportBatch(rows, cols, ZERO_COPY, block, block.exit_frozen_read)


# --- materialized path ---------------------------------------------------------------

def materialize_block(engine: TransactionEngine, txn, block: Block) -> ExportBatch:
    """Copy a consistent snapshot and repair chained slots through select()."""
    table: Table = block.table
    lay = block.layout
    n = lay.num_slots
    with block.lock:
        # refs captured under the same lock as the snapshot: a concurrent
        # gather swaps entries, heap and gathered buffers atomically, so
        # this set is mutually consistent; epoch reclamation cannot touch
        # the old chunks while this transaction lives
        chunks = block.heap.chunks
        gathered = dict(block.gathered)
        snap = bytes(block.data)

    words = np.frombuffer(snap, "<u8", count=n, offset=lay.column_offsets[0])
    chained = (words & _ID_MASK) != 0
    alloc = np.unpackbits(
        np.frombuffer(snap, np.uint8, count=(n + 7) >> 3, offset=lay.alloc_bitmap_offset),
        bitorder="little")[:n].astype(bool)

    repaired: dict[int, tuple | None] = {}
    for slot in np.flatnonzero(chained):
        vals = engine.select(txn, block.slot_tuple(int(slot)))
        repaired[int(slot)] = None if vals is NOT_VISIBLE else vals

    visible = alloc | chained
    for slot, vals in repaired.items():
        visible[slot] = vals is not None
    rows_idx = np.flatnonzero(visible)
    rows = len(rows_idx)
    out_pos = {int(s): i for i, s in enumerate(rows_idx) if int(s) in repaired}

    cols = []
    for user_col, col in enumerate(table.schema.columns):
        lc = user_col + 1
        valid = np.unpackbits(
            np.frombuffer(snap, np.uint8, count=(n + 7) >> 3, offset=lay.validity_offsets[lc]),
            bitorder="little")[:n].astype(bool)
        for slot, vals in repaired.items():
            if vals is not None:
                valid[slot] = vals[user_col] is not None
        col_valid = valid[rows_idx]
        validity = np.packbits(col_valid, bitorder="little").tobytes()
        nulls = int(rows - col_valid.sum())
        if not col.varlen:
            w = col.width
            mat = np.frombuffer(snap, np.uint8, count=n * w,
                                offset=lay.column_offsets[lc]).reshape(n, w)
            out = bytearray(mat[rows_idx].tobytes())
            for slot, vals in repaired.items():
                if vals is None or vals[user_col] is None:
                    continue
                pos = out_pos[slot]
                out[pos * w:(pos + 1) * w] = table.encode_value(user_col, vals[user_col])
            cols.append(ColumnExport(nulls, validity, data_parts=[out]))
            continue

        # varlen: gather values in row order; repaired values come from a patch buffer
        mat = np.frombuffer(snap, np.uint8, count=n * 16,
                            offset=lay.column_offsets[lc]).reshape(n, 16)
        sizes = mat[:, :4].copy().view("<u4").ravel().astype(np.int64)[rows_idx]
        addrs = mat[:, 8:16].copy().view("<u8").ravel()[rows_idx]
        emat = mat[rows_idx].reshape(-1).copy()
        patch = bytearray()
        patch_rows = {}
        for slot, vals in repaired.items():
            if vals is None:
                continue
            pos = out_pos[slot]
            v = vals[user_col]
            if v is None:
                sizes[pos] = 0
                continue
            data = v.encode("utf-8") if isinstance(v, str) else bytes(v)
            patch_rows[pos] = (len(patch), len(data))
            patch.extend(data)
            sizes[pos] = len(data)
        vmask = col_valid.copy()
        eff = np.where(vmask, sizes, 0)
        offsets = np.zeros(rows + 1, np.int64)
        np.cumsum(eff, out=offsets[1:])
        values = bytearray(int(offsets[-1]))
        _copy_ragged(emat, sizes, addrs, vmask, offsets, values, chunks, gathered,
                     patch, patch_rows)
        cols.append(ColumnExport(
            nulls, validity,
            offsets=offsets.astype("<i4").tobytes(),
            data_parts=[values]))
    return ExportBatch(rows, cols, MATERIALIZED, block)


def _copy_ragged(emat, sizes, addrs, valid, offsets, values, chunks, gathered,
                 patch=b"", patch_rows=None):
    scatter_entries(values, offsets, emat, sizes, addrs, valid, chunks, gathered,
                    patch, patch_rows)


# --- streaming a whole table ----------------------------------------------------------

def iter_table_batches(engine: TransactionEngine, table: Table):
    """One export transaction per block (per-block snapshot granularity)."""
    with table.lock:
        blocks = list(table.blocks)
    for block in blocks:
        txn = engine.begin()
        try:
            yield export_block(engine, txn, block)
        finally:
            engine.abort(txn)


def serialize_ipc(engine: TransactionEngine, table: Table, sink,
                  dictionary: bool = False) -> IpcStreamWriter:
    """Write the whole table as an Arrow IPC stream; returns the writer
    so callers can read the zero-copy instrumentation counters."""
    fields = export_fields(table, dictionary)
    writer = IpcStreamWriter(sink, fields)
    writer.write_schema()
    if dictionary:
        _serialize_dictionary_mode(engine, table, writer, fields)
    else:
        for batch in iter_table_batches(engine, table):
            try:
                cols = [_column_data(c) for c in batch.columns]
                writer.write_batch(batch.rows, cols, direct=batch.provenance == ZERO_COPY)
            finally:
                batch.release()
    writer.close()
    return writer


def _column_data(c: ColumnExport) -> ColumnData:
    if c.codes is not None:
        return ColumnData(c.validity, [c.codes], None, c.null_count)
    return ColumnData(c.validity, list(c.data_parts), c.offsets, c.null_count)


def _dict_values_list(c: ColumnExport) -> list[bytes]:
    offs = np.frombuffer(c.dict_offsets, "<i4")
    buf = bytes(c.dict_values)
    return [buf[offs[i]:offs[i + 1]] for i in range(len(offs) - 1)]


def _serialize_dictionary_mode(engine, table, writer, fields) -> None:
    """Merge per-block dictionaries into one per column, remapping codes."""
    dict_cols = [i for i, f in enumerate(fields) if f.is_dictionary]
    merged: dict[int, list[bytes]] = {i: [] for i in dict_cols}
    seen: dict[int, set] = {i: set() for i in dict_cols}

    def batches():
        return iter_table_batches(engine, table)

    for batch in batches():
        try:
            for i in dict_cols:
                c = batch.columns[i]
                vals = (_dict_values_list(c) if c.codes is not None
                        else _varlen_values(c))
                for v in vals:
                    if v not in seen[i]:
                        seen[i].add(v)
                        merged[i].append(v)
        finally:
            batch.release()

    lookup = {}
    for i in dict_cols:
        merged[i].sort()
        lookup[i] = {v: j for j, v in enumerate(merged[i])}
        values = b"".join(merged[i])
        offsets = np.zeros(len(merged[i]) + 1, np.int64)
        np.cumsum([len(v) for v in merged[i]], out=offsets[1:])
        writer.write_dictionary(
            fields[i].dictionary_id, len(merged[i]), 0,
            [_full_validity(len(merged[i])), offsets.astype("<i4").tobytes(), values],
            direct=False)

    for batch in batches():
        try:
            cols = []
            direct = batch.provenance == ZERO_COPY
            for i, c in enumerate(batch.columns):
                if i not in dict_cols:
                    cols.append(_column_data(c))
                    continue
                if c.codes is not None:
                    block_vals = _dict_values_list(c)
                    mapping = np.array([lookup[i][v] for v in block_vals], np.int32)
                    identity = bool((mapping == np.arange(len(mapping), dtype=np.int32)).all()) \
                        and len(mapping) == len(merged[i])
                    if identity:
                        cols.append(ColumnData(c.validity, [c.codes], None, c.null_count))
                    else:
                        old = np.frombuffer(c.codes, "<i4")
                        remapped = mapping[old] if len(mapping) else np.zeros(0, np.int32)
                        cols.append(ColumnData(c.validity, [remapped.astype("<i4").tobytes()],
                                               None, c.null_count))
                        direct = False
                else:
                    codes = _encode_against(c, lookup[i])
                    cols.append(ColumnData(c.validity, [codes], None, c.null_count))
            writer.write_batch(batch.rows, cols, direct=direct)
        finally:
            batch.release()


def _full_validity(n: int) -> bytes:
    return b"\xff" * ((n + 7) >> 3)


def _varlen_values(c: ColumnExport) -> list[bytes]:
    offs = np.frombuffer(c.offsets, "<i4")
    buf = b"".join(bytes(p) for p in c.data_parts)
    valid = np.unpackbits(np.frombuffer(c.validity, np.uint8), bitorder="little")
    return [buf[offs[i]:offs[i + 1]] for i in range(len(offs) - 1) if valid[i]]


def _encode_against(c: ColumnExport, lookup: dict) -> bytes:
    offs = np.frombuffer(c.offsets, "<i4")
    buf = b"".join(bytes(p) for p in c.data_parts)
    valid = np.unpackbits(np.frombuffer(c.validity, np.uint8), bitorder="little")
    codes = np.zeros(len(offs) - 1, np.int32)
    for i in range(len(offs) - 1):
        if valid[i]:
            codes[i] = lookup[buf[offs[i]:offs[i + 1]]]
    return codes.astype("<i4").tobytes()


# --- reference dump -------------------------------------------------------------------

def canonical_value(col, value):
    if value is None:
        return None
    if col.varlen:
        if col.utf8:
            return value
        return {"$hex": bytes(value).hex()}
    if col.width == 16:
        return {"$hex": bytes(value).hex()}
    if col.width == 8:
        return str(value)
    return value


def dump_reference(engine: TransactionEngine, table: Table, sink) -> int:
    """Transactional scan to JSON lines in slot order; returns row count."""
    txn = engine.begin()
    count = 0
    try:
        names = [c.name for c in table.schema.columns]
        for _, values in engine.scan(txn, table):
            obj = {name: canonical_value(col, v)
                   for name, col, v in zip(names, table.schema.columns, values)}
            sink.write(json.dumps(obj, separators=(",", ":")) + "\n")
            count += 1
    finally:
        engine.abort(txn)
    return count
