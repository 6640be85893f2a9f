"""Arrow IPC stream emission (schema, dictionary and record batch messages).

The writer keeps two byte counters: `bytes_direct` counts body buffer
parts handed to the sink exactly as given (for frozen blocks these are
memoryviews into block storage, so nothing is staged), `bytes_staged`
counts metadata, padding and any materialized buffers. The zero-copy
property of the frozen export path is asserted against these counters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .flatbuf import Builder

MSG_SCHEMA, MSG_DICTIONARY_BATCH, MSG_RECORD_BATCH = 1, 2, 3
TYPE_INT, TYPE_BINARY, TYPE_UTF8, TYPE_FSB = 2, 4, 5, 15
METADATA_V5 = 4

CONTINUATION = b"\xff\xff\xff\xff"
EOS = b"\xff\xff\xff\xff\x00\x00\x00\x00"


@dataclass(frozen=True)
class FieldType:
    """Logical type of one exported column."""
    name: str
    kind: str                   # int | fsb | binary | utf8
    bits: int = 0               # int bit width or fsb byte width
    dictionary_id: int = -1     # >= 0 when dictionary-encoded

    @property
    def is_dictionary(self) -> bool:
        return self.dictionary_id >= 0

    @property
    def is_varlen(self) -> bool:
        return self.kind in ("binary", "utf8")


@dataclass
class ColumnData:
    """Buffers for one column of one batch; parts may be any bytes-like."""
    validity: object
    data_parts: list = field(default_factory=list)
    offsets: object = None      # varlen only
    null_count: int = 0


def _type_int(b: Builder, bits: int, signed: bool = True) -> int:
    b.start_table(2)
    b.field_scalar(0, "<i", 4, bits)
    b.field_scalar(1, "<B", 1, 1 if signed else 0)
    return b.end_table()


def _emit_field(b: Builder, ft: FieldType) -> int:
    if ft.kind == "int":
        type_off, type_id = _type_int(b, ft.bits), TYPE_INT
    elif ft.kind == "fsb":
        b.start_table(1)
        b.field_scalar(0, "<i", 4, ft.bits)
        type_off, type_id = b.end_table(), TYPE_FSB
    elif ft.kind == "binary":
        b.start_table(0)
        type_off, type_id = b.end_table(), TYPE_BINARY
    elif ft.kind == "utf8":
        b.start_table(0)
        type_off, type_id = b.end_table(), TYPE_UTF8
    else:
        raise ValueError(f"unknown field kind {ft.kind!r}")

    dict_off = 0
    if ft.is_dictionary:
        idx_type = _type_int(b, 32, signed=True)
        b.start_table(4)
        b.field_scalar(0, "<q", 8, ft.dictionary_id, default=None)
        b.field_offset(1, idx_type)
        dict_off = b.end_table()

    name_off = b.create_string(ft.name)
    b.start_vector(4, 0, 4)
    children = b.end_vector(0)
    b.start_table(7)
    b.field_offset(0, name_off)
    b.field_scalar(1, "<B", 1, 1)        # nullable
    b.field_scalar(2, "<B", 1, type_id)
    b.field_offset(3, type_off)
    b.field_offset(4, dict_off)
    b.field_offset(5, children)
    return b.end_table()


def _message(b: Builder, header_type: int, header_off: int, body_len: int) -> bytes:
    b.start_table(5)
    b.field_scalar(0, "<h", 2, METADATA_V5)
    b.field_scalar(1, "<B", 1, header_type)
    b.field_offset(2, header_off)
    b.field_scalar(3, "<q", 8, body_len)
    return b.finish(b.end_table())


def _encapsulate(fb: bytes) -> bytes:
    pad = -(len(fb) + 8) % 8
    return CONTINUATION + struct.pack("<i", len(fb) + pad) + fb + bytes(pad)


def schema_message(fields: list[FieldType]) -> bytes:
    b = Builder()
    offs = [_emit_field(b, ft) for ft in fields]
    b.start_vector(4, len(offs), 4)
    for off in reversed(offs):
        b.uoffset(off)
    fvec = b.end_vector(len(offs))
    b.start_table(4)
    b.field_offset(1, fvec)
    schema = b.end_table()
    return _encapsulate(_message(b, MSG_SCHEMA, schema, 0))


def _record_batch_table(b: Builder, rows: int, nodes, buffers) -> int:
    b.start_vector(16, len(buffers), 8)
    for off, ln in reversed(buffers):
        b.push("<q", ln, 8)
        b.push("<q", off, 8)
    bvec = b.end_vector(len(buffers))
    b.start_vector(16, len(nodes), 8)
    for length, nulls in reversed(nodes):
        b.push("<q", nulls, 8)
        b.push("<q", length, 8)
    nvec = b.end_vector(len(nodes))
    b.start_table(5)
    b.field_scalar(0, "<q", 8, rows)
    b.field_offset(1, nvec)
    b.field_offset(2, bvec)
    return b.end_table()


def _layout_body(parts):
    """-> (buffer table entries, padded segments, body length)."""
    buffers, segments, pos = [], [], 0
    for part in parts:
        n = len(part)
        buffers.append((pos, n))
        pad = -n % 8
        segments.append((part, pad))
        pos += n + pad
    return buffers, segments, pos


def record_batch_message(rows: int, nodes, parts) -> tuple[bytes, list, int]:
    buffers, segments, body_len = _layout_body(parts)
    b = Builder()
    rb = _record_batch_table(b, rows, nodes, buffers)
    return _encapsulate(_message(b, MSG_RECORD_BATCH, rb, body_len)), segments, body_len


def dictionary_batch_message(dict_id: int, length: int, nodes, parts) -> tuple[bytes, list, int]:
    buffers, segments, body_len = _layout_body(parts)
    b = Builder()
    rb = _record_batch_table(b, length, nodes, buffers)
    b.start_table(3)
    b.field_scalar(0, "<q", 8, dict_id, default=None)
    b.field_offset(1, rb)
    db = b.end_table()
    return _encapsulate(_message(b, MSG_DICTIONARY_BATCH, db, body_len)), segments, body_len


_PAD = bytes(8)


class IpcStreamWriter:
    """Streams one schema + any dictionaries + record batches to a sink."""

    def __init__(self, sink, fields: list[FieldType]):
        self.sink = sink
        self.fields = fields
        self.bytes_direct = 0
        self.bytes_staged = 0
        self._wrote_schema = False

    def _stage(self, data) -> None:
        self.sink.write(data)
        self.bytes_staged += len(data)

    def write_schema(self) -> None:
        if not self._wrote_schema:
            self._stage(schema_message(self.fields))
            self._wrote_schema = True

    def write_dictionary(self, dict_id: int, length: int, null_count: int, parts,
                         direct: bool = True) -> None:
        self.write_schema()
        meta, segments, _ = dictionary_batch_message(
            dict_id, length, [(length, null_count)], parts)
        self._stage(meta)
        self._write_segments(segments, direct)

    def write_batch(self, rows: int, columns: list[ColumnData], direct: bool) -> None:
        """direct=True counts body parts as zero-copy writes."""
        self.write_schema()
        nodes, parts = [], []
        for col in columns:
            nodes.append((rows, col.null_count))
            parts.append(col.validity)
            if col.offsets is not None:
                parts.append(col.offsets)
            parts.extend(col.data_parts)
        meta, segments, _ = record_batch_message(rows, nodes, parts)
        self._stage(meta)
        self._write_segments(segments, direct)

    def _write_segments(self, segments, direct: bool) -> None:
        for part, pad in segments:
            self.sink.write(part)
            if direct:
                self.bytes_direct += len(part)
            else:
                self.bytes_staged += len(part)
            if pad:
                self._stage(_PAD[:pad])

    def close(self) -> None:
        self.write_schema()
        self._stage(EOS)
