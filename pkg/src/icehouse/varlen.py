"""16-byte variable-length value envelopes and the per-block value heap.

Envelope layout (little-endian):

    [0:4)  u32 size
    [4:8)  prefix: first 4 bytes of the value, zero padded
    [8:16) payload: the value bytes themselves when size <= 12
           (continuing from the prefix region), else a u64 address

Addresses are resolved by the owning block: either into one of its heap
chunks or, after gathering, into a frozen column's contiguous buffer.
"""

from __future__ import annotations

import struct
import threading

ENTRY_WIDTH = 16
INLINE_LIMIT = 12
MAX_VARLEN = (1 << 31) - 1

# u64 address encoding
GATHERED_FLAG = 1 << 63
_CHUNK_SHIFT = 40
_OFFSET_MASK = (1 << _CHUNK_SHIFT) - 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def make_varlen(value: bytes, address: int = 0) -> bytes:
    """Encode a value into the fixed 16-byte envelope.

    Values of 12 bytes or fewer are stored entirely inline; longer ones
    need `address` pointing at the stored bytes.
    """
    n = len(value)
    if n > MAX_VARLEN:
        raise ValueError("varlen value too large")
    if n <= INLINE_LIMIT:
        return _U32.pack(n) + value + b"\x00" * (12 - n)
    if address == 0:
        raise ValueError("out-of-line varlen entry needs a storage address")
    return _U32.pack(n) + value[:4] + _U64.pack(address)


def entry_size(entry: bytes | memoryview) -> int:
    return _U32.unpack_from(entry, 0)[0]


def entry_is_inline(entry: bytes | memoryview) -> bool:
    return _U32.unpack_from(entry, 0)[0] <= INLINE_LIMIT


def entry_prefix(entry: bytes | memoryview) -> bytes:
    return bytes(entry[4:8])


def entry_address(entry: bytes | memoryview) -> int:
    return _U64.unpack_from(entry, 8)[0]


def entry_inline_value(entry: bytes | memoryview) -> bytes:
    return bytes(entry[4:4 + _U32.unpack_from(entry, 0)[0]])


def heap_address(chunk: int, offset: int) -> int:
    # chunk is stored biased by one so a valid address is never zero
    return ((chunk + 1) << _CHUNK_SHIFT) | offset


def gathered_address(col: int, offset: int) -> int:
    return GATHERED_FLAG | ((col + 1) << _CHUNK_SHIFT) | offset


def split_address(addr: int) -> tuple[bool, int, int]:
    """-> (is_gathered, chunk_or_col, offset)"""
    return (bool(addr & GATHERED_FLAG),
            ((addr >> _CHUNK_SHIFT) & 0x7FFFFF) - 1,
            addr & _OFFSET_MASK)


class VarlenHeap:
    """Append-only chunked storage for one block's out-of-line values.

    Values are never moved; space is reclaimed wholesale when the block
    is gathered (the old chunk list is handed to the deferred-action
    queue) or freed.
    """

    __slots__ = ("chunk_size", "chunks", "_fill", "_lock", "bytes_used", "generation")

    def __init__(self, chunk_size: int = 1 << 16):
        self.chunk_size = chunk_size
        self.chunks: list[bytearray] = []
        self._fill = 0
        self._lock = threading.Lock()
        self.bytes_used = 0
        self.generation = 0

    def store(self, value: bytes) -> int:
        """Copy `value` into the heap and return its address."""
        n = len(value)
        with self._lock:
            if n >= self.chunk_size:
                # oversized values get a dedicated chunk
                self.chunks.append(bytearray(value))
                self.bytes_used += n
                return heap_address(len(self.chunks) - 1, 0)
            if not self.chunks or self._fill + n > self.chunk_size:
                self.chunks.append(bytearray(self.chunk_size))
                self._fill = 0
            chunk_idx = len(self.chunks) - 1
            off = self._fill
            self._fill += n
            self.bytes_used += n
        self.chunks[chunk_idx][off:off + n] = value
        return heap_address(chunk_idx, off)

    def read(self, addr: int, size: int) -> bytes:
        chunk = ((addr >> _CHUNK_SHIFT) & 0x7FFFFF) - 1
        off = addr & _OFFSET_MASK
        return bytes(self.chunks[chunk][off:off + size])

    def view(self, addr: int, size: int) -> memoryview:
        chunk = ((addr >> _CHUNK_SHIFT) & 0x7FFFFF) - 1
        off = addr & _OFFSET_MASK
        return memoryview(self.chunks[chunk])[off:off + size]

    def detach(self) -> list[bytearray]:
        """Swap out the chunk list (for deferred reclamation after gather).

        Bumps the generation so in-flight writers that allocated against
        the old chunks re-encode before installing their entries.
        """
        with self._lock:
            old = self.chunks
            self.chunks = []
            self._fill = 0
            self.bytes_used = 0
            self.generation += 1
        return old
