"""Minimal back-to-front FlatBuffers builder.

Covers exactly what the IPC metadata messages need: tables with vtables,
scalar fields, child-table/string/vector offsets, and struct vectors.
Buffers grow from the tail; all stored offsets are the canonical
"distance from buffer end" form, converted to relative offsets when
written.
"""

from __future__ import annotations

import struct


class Builder:
    def __init__(self, initial: int = 1024):
        self.buf = bytearray(initial)
        self.head = len(self.buf)
        self.minalign = 1
        self._vtable: list[int] | None = None
        self._object_end = 0

    def offset(self) -> int:
        return len(self.buf) - self.head

    def _grow(self, needed: int) -> None:
        old = self.buf
        used = len(old) - self.head
        size = len(old)
        while size - used < needed + 64:
            size *= 2
        new = bytearray(size)
        if used:
            new[size - used:] = old[self.head:]
        self.buf = new
        self.head = size - used

    def pad(self, n: int) -> None:
        if n:
            self.head -= n
            self.buf[self.head:self.head + n] = bytes(n)

    def prep(self, size: int, additional: int) -> None:
        if size > self.minalign:
            self.minalign = size
        align = -(self.offset() + additional) & (size - 1)
        if self.head < align + size + additional:
            self._grow(align + size + additional)
        self.pad(align)

    def push(self, fmt: str, value, size: int) -> None:
        self.prep(size, 0)
        self.head -= size
        struct.pack_into(fmt, self.buf, self.head, value)

    def push_bytes(self, data) -> None:
        n = len(data)
        self.head -= n
        self.buf[self.head:self.head + n] = data

    def uoffset(self, target: int) -> None:
        self.prep(4, 0)
        assert target <= self.offset()
        self.head -= 4
        struct.pack_into("<I", self.buf, self.head, self.offset() - target)

    def create_string(self, s: str) -> int:
        data = s.encode("utf-8")
        self.prep(4, len(data) + 1)
        self.pad(1)                       # NUL terminator
        self.push_bytes(data)
        self.head -= 4
        struct.pack_into("<I", self.buf, self.head, len(data))
        return self.offset()

    def start_vector(self, elem_size: int, count: int, alignment: int) -> None:
        self.prep(4, elem_size * count)
        self.prep(alignment, elem_size * count)

    def end_vector(self, count: int) -> int:
        self.head -= 4
        struct.pack_into("<I", self.buf, self.head, count)
        return self.offset()

    # --- tables ----------------------------------------------------------

    def start_table(self, nfields: int) -> None:
        assert self._vtable is None
        self._vtable = [0] * nfields
        self._object_end = self.offset()

    def field_scalar(self, idx: int, fmt: str, size: int, value, default=0) -> None:
        if value != default:
            self.push(fmt, value, size)
            self._vtable[idx] = self.offset()

    def field_offset(self, idx: int, target: int) -> None:
        if target:
            self.uoffset(target)
            self._vtable[idx] = self.offset()

    def field_struct(self, idx: int) -> None:
        # struct must have just been written inline at the current head
        self._vtable[idx] = self.offset()

    def end_table(self) -> int:
        vtable = self._vtable
        self._vtable = None
        self.push("<i", 0, 4)             # soffset placeholder
        table_off = self.offset()
        n = len(vtable)
        while n and vtable[n - 1] == 0:
            n -= 1
        for j in range(n - 1, -1, -1):
            o = vtable[j]
            self.push("<H", (table_off - o) if o else 0, 2)
        self.push("<H", table_off - self._object_end, 2)
        self.push("<H", (n + 2) * 2, 2)
        vt_off = self.offset()
        struct.pack_into("<i", self.buf, len(self.buf) - table_off, vt_off - table_off)
        return table_off

    def finish(self, root: int) -> bytes:
        self.prep(self.minalign, 4)
        self.uoffset(root)
        return bytes(self.buf[self.head:])
