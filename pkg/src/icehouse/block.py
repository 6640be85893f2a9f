"""Physical 1 MiB blocks, their header words, bitmaps, and the arena.

A block is one contiguous bytearray laid out per its table's
BlockLayout. The header holds four 8-byte words: layout id, state,
reader counter, insert head. State transitions, bitmap updates and
version-word swaps are short critical sections on the per-block lock,
standing in for single-word atomic read-modify-writes.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

from .layout import BLOCK_SIZE_LOG2, BlockLayout, pack_slot
from .varlen import VarlenHeap

# block states
HOT = 0
COOLING = 1
FREEZING = 2
FROZEN = 3

STATE_NAMES = {HOT: "HOT", COOLING: "COOLING", FREEZING: "FREEZING", FROZEN: "FROZEN"}

# header word offsets
_H_LAYOUT = 0
_H_STATE = 8
_H_READERS = 16
_H_INSERT = 24

# version-word bit the pruner uses to mark a chain it already truncated
# this pass; masked off whenever the word is read as a record id
PRUNE_MARK = 1 << 63
_ID_MASK = PRUNE_MARK - 1

_U64 = struct.Struct("<Q")


class GatheredColumn:
    """Arrow-ready buffers for one varlen column of a frozen block."""

    __slots__ = ("values", "offsets", "null_count", "dict_values", "dict_offsets", "codes")

    def __init__(self, values, offsets, null_count, dict_values=None, dict_offsets=None, codes=None):
        self.values = values            # bytearray
        self.offsets = offsets          # bytearray of little-endian int32, len rows+1
        self.null_count = null_count
        self.dict_values = dict_values  # dictionary variant only
        self.dict_offsets = dict_offsets
        self.codes = codes              # bytearray of int32 codes

    @property
    def is_dictionary(self) -> bool:
        return self.codes is not None


class Block:
    __slots__ = (
        "base", "layout", "data", "lock", "heap", "gathered",
        "null_counts", "table", "__weakref__",
    )

    def __init__(self, base: int, layout: BlockLayout):
        self.base = base
        self.layout = layout
        self.data = bytearray(layout.block_size)
        self.lock = threading.Lock()
        self.heap = VarlenHeap()
        self.gathered: dict[int, GatheredColumn] = {}
        self.null_counts: dict[int, int] = {}
        self.table = None
        _U64.pack_into(self.data, _H_LAYOUT, layout.layout_id)

    # --- header words -----------------------------------------------------

    @property
    def state(self) -> int:
        return _U64.unpack_from(self.data, _H_STATE)[0]

    def try_transition(self, expect: int, new: int) -> bool:
        with self.lock:
            if _U64.unpack_from(self.data, _H_STATE)[0] != expect:
                return False
            _U64.pack_into(self.data, _H_STATE, new)
            return True

    def set_state(self, new: int) -> None:
        with self.lock:
            _U64.pack_into(self.data, _H_STATE, new)

    def set_state_locked(self, new: int) -> None:
        """State write for callers already inside `self.lock`."""
        _U64.pack_into(self.data, _H_STATE, new)

    @property
    def reader_count(self) -> int:
        return _U64.unpack_from(self.data, _H_READERS)[0]

    def enter_frozen_read(self) -> bool:
        """Register as an in-place reader; only valid while FROZEN."""
        with self.lock:
            if _U64.unpack_from(self.data, _H_STATE)[0] != FROZEN:
                return False
            _U64.pack_into(self.data, _H_READERS, _U64.unpack_from(self.data, _H_READERS)[0] + 1)
            return True

    def exit_frozen_read(self) -> None:
        with self.lock:
            n = _U64.unpack_from(self.data, _H_READERS)[0]
            assert n > 0
            _U64.pack_into(self.data, _H_READERS, n - 1)

    @property
    def insert_head(self) -> int:
        return _U64.unpack_from(self.data, _H_INSERT)[0]

    def bump_insert_head(self) -> int | None:
        """Reserve the next never-used slot; None once the block is exhausted."""
        with self.lock:
            head = _U64.unpack_from(self.data, _H_INSERT)[0]
            if head >= self.layout.num_slots:
                return None
            _U64.pack_into(self.data, _H_INSERT, head + 1)
            return head

    def seal(self) -> None:
        """Exhaust the insert cursor: compaction owns this block's gaps now."""
        with self.lock:
            _U64.pack_into(self.data, _H_INSERT, self.layout.num_slots)

    # --- allocation bitmap --------------------------------------------------

    def _bit(self, bitmap_off: int, slot: int) -> bool:
        return bool(self.data[bitmap_off + (slot >> 3)] >> (slot & 7) & 1)

    def _set_bit(self, bitmap_off: int, slot: int, value: bool) -> None:
        idx = bitmap_off + (slot >> 3)
        if value:
            self.data[idx] |= 1 << (slot & 7)
        else:
            self.data[idx] &= ~(1 << (slot & 7)) & 0xFF

    def is_allocated(self, slot: int) -> bool:
        return self._bit(self.layout.alloc_bitmap_offset, slot)

    def claim_slot(self) -> int | None:
        """Claim the lowest unallocated slot, or None when full."""
        lay = self.layout
        with self.lock:
            n = lay.num_slots
            word = int.from_bytes(
                self.data[lay.alloc_bitmap_offset:lay.alloc_bitmap_offset + ((n + 7) >> 3)], "little")
            free = ~word & ((1 << n) - 1)
            if free == 0:
                return None
            slot = (free & -free).bit_length() - 1
            self._set_bit(lay.alloc_bitmap_offset, slot, True)
            return slot

    def claim_specific(self, slot: int) -> bool:
        with self.lock:
            if self._bit(self.layout.alloc_bitmap_offset, slot):
                return False
            self._set_bit(self.layout.alloc_bitmap_offset, slot, True)
            return True

    def free_slot(self, slot: int) -> None:
        with self.lock:
            self._set_bit(self.layout.alloc_bitmap_offset, slot, False)

    def allocated_count(self) -> int:
        bm = self.alloc_bitmap_bytes()
        return int(np.unpackbits(np.frombuffer(bm, np.uint8), bitorder="little")[:self.layout.num_slots].sum())

    def alloc_bitmap_bytes(self) -> bytes:
        off = self.layout.alloc_bitmap_offset
        return bytes(self.data[off:off + ((self.layout.num_slots + 7) >> 3)])

    def alloc_bitmap_int(self) -> int:
        return int.from_bytes(self.alloc_bitmap_bytes(), "little")

    # --- validity bitmaps ----------------------------------------------------

    def is_valid(self, col: int, slot: int) -> bool:
        return self._bit(self.layout.validity_offsets[col], slot)

    def set_valid(self, col: int, slot: int, value: bool) -> None:
        self._set_bit(self.layout.validity_offsets[col], slot, value)

    def validity_view(self, col: int) -> memoryview:
        off = self.layout.validity_offsets[col]
        return memoryview(self.data)[off:off + ((self.layout.num_slots + 7) >> 3)]

    # --- version-link column ---------------------------------------------------

    def _version_off(self, slot: int) -> int:
        return self.layout.column_offsets[0] + slot * 8

    def version_word(self, slot: int) -> int:
        return _U64.unpack_from(self.data, self._version_off(slot))[0]

    def chain_head_id(self, slot: int) -> int:
        return self.version_word(slot) & _ID_MASK

    def set_version_word(self, slot: int, value: int) -> None:
        _U64.pack_into(self.data, self._version_off(slot), value)

    def version_column_array(self) -> np.ndarray:
        off = self.layout.column_offsets[0]
        return np.frombuffer(self.data, "<u8", count=self.layout.num_slots, offset=off)

    def has_any_version(self) -> bool:
        return bool(((self.version_column_array() & _ID_MASK) != 0).any())

    # --- column access ----------------------------------------------------------

    def column_offset(self, col: int, slot: int) -> int:
        return self.layout.column_offsets[col] + slot * self.layout.attr_sizes[col]

    def read_attr(self, col: int, slot: int) -> bytes:
        off = self.column_offset(col, slot)
        return bytes(self.data[off:off + self.layout.attr_sizes[col]])

    def write_attr(self, col: int, slot: int, raw: bytes) -> None:
        off = self.column_offset(col, slot)
        self.data[off:off + self.layout.attr_sizes[col]] = raw

    def column_view(self, col: int, rows: int | None = None) -> memoryview:
        n = self.layout.num_slots if rows is None else rows
        off = self.layout.column_offsets[col]
        return memoryview(self.data)[off:off + n * self.layout.attr_sizes[col]]

    def resolve_varlen(self, col: int, addr: int, size: int) -> bytes:
        from .varlen import GATHERED_FLAG, split_address
        if addr & GATHERED_FLAG:
            _, gcol, off = split_address(addr)
            g = self.gathered.get(gcol)
            if g is None:
                raise RuntimeError(f"dangling gathered address on column {gcol}")
            buf = g.dict_values if g.is_dictionary else g.values
            return bytes(buf[off:off + size])
        return self.heap.read(addr, size)

    def slot_tuple(self, slot: int) -> int:
        return pack_slot(self.base, slot)

    def __repr__(self):
        return f"<Block base={self.base:#x} state={STATE_NAMES[self.state]} slots={self.layout.num_slots}>"


def preempt_to_hot(block: Block, spin_sleep: float = 0.0001) -> None:
    """Force a block back to HOT ahead of a write.

    COOLING flips straight to HOT (the transformer notices and backs
    off). FREEZING means the gatherer holds the block exclusively: wait
    for it to finish, then take FROZEN to HOT and drain lingering
    in-place readers before returning.
    """
    import time
    while True:
        st = block.state
        if st == HOT:
            return
        if st == COOLING:
            if block.try_transition(COOLING, HOT):
                return
            continue
        if st == FROZEN:
            if block.try_transition(FROZEN, HOT):
                while block.reader_count > 0:
                    time.sleep(spin_sleep)
                return
            continue
        # FREEZING: exclusive lock held by the gatherer
        time.sleep(spin_sleep)


class BlockArena:
    """Registry of live blocks keyed by their 1 MiB-aligned base address."""

    def __init__(self, block_size_log2: int = BLOCK_SIZE_LOG2):
        self._blocks: dict[int, Block] = {}
        self._next_id = 1
        self._lock = threading.Lock()
        self._shift = block_size_log2
        self.freed_count = 0

    def allocate(self, layout: BlockLayout) -> Block:
        with self._lock:
            base = self._next_id << self._shift
            self._next_id += 1
            blk = Block(base, layout)
            self._blocks[base] = blk
        return blk

    def ensure(self, base: int, layout: BlockLayout) -> Block:
        """Recreate a block at a known base (recovery replay)."""
        with self._lock:
            blk = self._blocks.get(base)
            if blk is None:
                blk = Block(base, layout)
                self._blocks[base] = blk
                self._next_id = max(self._next_id, (base >> self._shift) + 1)
            return blk

    def get(self, base: int) -> Block:
        return self._blocks[base]

    def release(self, base: int) -> None:
        with self._lock:
            self._blocks.pop(base, None)
            self.freed_count += 1

    def __contains__(self, base: int) -> bool:
        return base in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)
