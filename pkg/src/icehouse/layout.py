"""Per-table block geometry and the packed physiological tuple identifier.

A table's layout is computed once from its attribute widths and reused
for every block: the slot count is the maximum that fits the block
budget, and every region (header, allocation bitmap, per-column validity
bitmaps, column buffers) starts on an 8-byte boundary so column words
can be read and written as aligned machine words.
"""

from __future__ import annotations

from dataclasses import dataclass, field

BLOCK_SIZE_LOG2 = 20
BLOCK_SIZE = 1 << BLOCK_SIZE_LOG2
SLOT_MASK = BLOCK_SIZE - 1
HEADER_BYTES = 64
VERSION_COLUMN = 0
VERSION_WIDTH = 8
VARLEN_WIDTH = 16

SUPPORTED_WIDTHS = (1, 2, 4, 8, 16)


class LayoutError(ValueError):
    pass


def _pad8(n: int) -> int:
    return (n + 7) & ~7


def _bitmap_bytes(num_slots: int) -> int:
    return _pad8((num_slots + 7) >> 3)


@dataclass(frozen=True)
class BlockLayout:
    """Precomputed geometry shared by every block of one table.

    Column 0 is always the 8-byte version-link column; user columns
    follow in declaration order. Offsets are byte offsets from the
    start of the block.
    """

    attr_sizes: tuple[int, ...]
    num_slots: int
    alloc_bitmap_offset: int
    validity_offsets: tuple[int, ...]
    column_offsets: tuple[int, ...]
    varlen_column_ids: frozenset[int]
    block_size: int = BLOCK_SIZE
    layout_id: int = field(default=0, compare=False)

    @property
    def num_columns(self) -> int:
        return len(self.attr_sizes)

    @property
    def bitmap_bytes(self) -> int:
        return (self.num_slots + 7) >> 3

    def total_bytes(self) -> int:
        last = self.column_offsets[-1] + _pad8(self.num_slots * self.attr_sizes[-1])
        return last


def layout_footprint(attr_sizes: tuple[int, ...], num_slots: int) -> int:
    """Bytes consumed by a block holding `num_slots` slots of these columns."""
    total = HEADER_BYTES
    total += _bitmap_bytes(num_slots)                       # allocation bitmap
    total += len(attr_sizes) * _bitmap_bytes(num_slots)     # validity bitmaps
    for width in attr_sizes:
        total += _pad8(num_slots * width)
    return total


def compute_layout(
    attr_sizes: list[int] | tuple[int, ...],
    varlen_column_ids: set[int] | frozenset[int] = frozenset(),
    block_size: int = BLOCK_SIZE,
) -> BlockLayout:
    """Build the maximal-slot layout for the given user column widths.

    `attr_sizes` are the user columns only; the version-link column is
    prepended here. `varlen_column_ids` index into the *returned*
    layout (so they must account for the prepended column 0; user
    column i is layout column i + 1).
    """
    if not attr_sizes:
        raise LayoutError("table needs at least one user column")
    for w in attr_sizes:
        if w not in SUPPORTED_WIDTHS:
            raise LayoutError(f"unsupported attribute width {w}")
    for c in varlen_column_ids:
        if c == VERSION_COLUMN:
            raise LayoutError("version column cannot be varlen")

    sizes = (VERSION_WIDTH,) + tuple(attr_sizes)
    for c in varlen_column_ids:
        if not (0 < c < len(sizes)) or sizes[c] != VARLEN_WIDTH:
            raise LayoutError(f"varlen column {c} must have width {VARLEN_WIDTH}")

    # The footprint is monotone in the slot count; bisect for the largest
    # count that fits, then verify maximality explicitly.
    lo, hi = 1, min(block_size, 1 << BLOCK_SIZE_LOG2) - 1
    if layout_footprint(sizes, lo) > block_size:
        raise LayoutError("block size too small for one slot")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if layout_footprint(sizes, mid) <= block_size:
            lo = mid
        else:
            hi = mid - 1
    num_slots = lo
    assert layout_footprint(sizes, num_slots) <= block_size
    assert layout_footprint(sizes, num_slots + 1) > block_size or num_slots == (1 << BLOCK_SIZE_LOG2) - 1

    pos = HEADER_BYTES
    alloc_off = pos
    pos += _bitmap_bytes(num_slots)
    validity = []
    for _ in sizes:
        validity.append(pos)
        pos += _bitmap_bytes(num_slots)
    columns = []
    for width in sizes:
        columns.append(pos)
        pos += _pad8(num_slots * width)
    assert pos <= block_size

    return BlockLayout(
        attr_sizes=sizes,
        num_slots=num_slots,
        alloc_bitmap_offset=alloc_off,
        validity_offsets=tuple(validity),
        column_offsets=tuple(columns),
        varlen_column_ids=frozenset(varlen_column_ids),
        block_size=block_size,
    )


# --- TupleSlot -------------------------------------------------------------
#
# Blocks live at 1 MiB-aligned bases, so the low 20 bits of a base are
# zero and a slot offset can be OR-ed straight in.

def pack_slot(base: int, offset: int) -> int:
    if base & SLOT_MASK:
        raise ValueError(f"block base {base:#x} is not {BLOCK_SIZE}-aligned")
    if not (0 <= offset < BLOCK_SIZE):
        raise ValueError(f"slot offset {offset} out of range")
    return base | offset


def unpack_slot(slot: int) -> tuple[int, int]:
    return slot & ~SLOT_MASK, slot & SLOT_MASK


def column_address(base: int, layout: BlockLayout, col: int, slot: int) -> int:
    """Address of one attribute: pure arithmetic on the precomputed layout."""
    if not (0 <= col < layout.num_columns):
        raise IndexError(f"column {col} out of range")
    if not (0 <= slot < layout.num_slots):
        raise IndexError(f"slot {slot} out of range")
    return base + layout.column_offsets[col] + slot * layout.attr_sizes[col]
