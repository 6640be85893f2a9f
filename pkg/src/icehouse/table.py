"""Tables: a schema, an ordered set of blocks, and the insert cursor.

User columns are indexed from 0 in every public API; physically they sit
one past the version-link column, so layout column = user column + 1.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from . import varlen as vl
from .block import Block, BlockArena
from .layout import BlockLayout, compute_layout

FIXED_WIDTHS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class Column:
    name: str
    width: int
    varlen: bool = False
    utf8: bool = False

    def __post_init__(self):
        if self.varlen and self.width != 16:
            raise ValueError("varlen columns have physical width 16")
        if self.width not in FIXED_WIDTHS:
            raise ValueError(f"unsupported width {self.width}")


class Schema:
    def __init__(self, columns: list[Column]):
        if not columns:
            raise ValueError("schema needs at least one column")
        self.columns = list(columns)
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")

    def __len__(self):
        return len(self.columns)

    def __iter__(self):
        return iter(self.columns)

    def user_widths(self) -> list[int]:
        return [c.width for c in self.columns]

    def varlen_layout_ids(self) -> set[int]:
        return {i + 1 for i, c in enumerate(self.columns) if c.varlen}


def encode_fixed(width: int, value: int | bytes) -> bytes:
    if isinstance(value, bytes):
        if len(value) != width:
            raise ValueError(f"fixed binary value must be exactly {width} bytes")
        return value
    return int(value).to_bytes(width, "little", signed=True)


def decode_fixed(width: int, raw: bytes, binary: bool) -> int | bytes:
    if binary:
        return bytes(raw)
    return int.from_bytes(raw, "little", signed=True)


class Table:
    """One table: layout shared by all its blocks, insert cursor at the tail.

    Inserts never reuse freed slots; gaps are reclaimed by compaction
    (the transformation pass), which is also the only place blocks are
    released.
    """

    def __init__(self, name: str, schema: Schema, arena: BlockArena, table_id: int = 0,
                 block_size: int | None = None):
        self.name = name
        self.schema = schema
        self.table_id = table_id
        self.arena = arena
        kwargs = {"block_size": block_size} if block_size else {}
        layout = compute_layout(schema.user_widths(), schema.varlen_layout_ids(), **kwargs)
        object.__setattr__(layout, "layout_id", table_id)
        self.layout: BlockLayout = layout
        self.lock = threading.Lock()
        self.blocks: list[Block] = []
        self._insert_block: Block | None = None
        self.on_block_allocated = None   # hook: transformer access table seeding

    # --- block management ---------------------------------------------------

    def _new_block(self) -> Block:
        blk = self.arena.allocate(self.layout)
        blk.table = self
        self.blocks.append(blk)
        if self.on_block_allocated is not None:
            self.on_block_allocated(blk)
        return blk

    def insert_position(self) -> tuple[Block, int]:
        """Reserve a fresh slot at the insert cursor, growing the table as needed."""
        with self.lock:
            blk = self._insert_block
            if blk is not None:
                slot = blk.bump_insert_head()
                if slot is not None:
                    return blk, slot
            blk = self._new_block()
            self._insert_block = blk
            slot = blk.bump_insert_head()
            assert slot is not None
            return blk, slot

    def remove_block(self, block: Block) -> None:
        with self.lock:
            try:
                self.blocks.remove(block)
            except ValueError:
                return
            if self._insert_block is block:
                self._insert_block = None

    def insert_block(self) -> Block | None:
        return self._insert_block

    # --- value mapping -------------------------------------------------------

    def layout_col(self, user_col: int) -> int:
        return user_col + 1

    def is_varlen(self, user_col: int) -> bool:
        return self.schema.columns[user_col].varlen

    def encode_value(self, user_col: int, value) -> bytes:
        col = self.schema.columns[user_col]
        if col.varlen:
            raise TypeError("varlen values are encoded at the block heap")
        return encode_fixed(col.width, value)

    def decode_value(self, block: Block, user_col: int, raw: bytes, valid: bool):
        if not valid:
            return None
        col = self.schema.columns[user_col]
        if not col.varlen:
            return decode_fixed(col.width, raw, binary=(col.width == 16))
        size = vl.entry_size(raw)
        if size <= vl.INLINE_LIMIT:
            value = vl.entry_inline_value(raw)
        else:
            value = block.resolve_varlen(self.layout_col(user_col), vl.entry_address(raw), size)
        if col.utf8:
            return value.decode("utf-8")
        return value

    def state_census(self) -> dict[int, int]:
        counts = {0: 0, 1: 0, 2: 0, 3: 0}
        with self.lock:
            blocks = list(self.blocks)
        for b in blocks:
            counts[b.state] += 1
        return counts
