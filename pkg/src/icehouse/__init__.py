"""icehouse: an embeddable in-memory MVCC storage engine that runs OLTP
on relaxed Arrow-compatible columnar blocks and freezes cold blocks, in
place, into canonical Arrow layout for zero-copy export."""

from .block import (BlockArena, COOLING, FREEZING, FROZEN, HOT,
                    preempt_to_hot)
from .engine import Engine, EngineConfig
from .layout import (BlockLayout, LayoutError, column_address, compute_layout,
                     pack_slot, unpack_slot)
from .table import Column, Schema, Table
from .txn import NOT_VISIBLE, TransactionContext, WriteWriteConflict
from .varlen import make_varlen

__all__ = [
    "BlockArena", "BlockLayout", "Column", "Engine", "EngineConfig",
    "LayoutError", "NOT_VISIBLE", "Schema", "Table", "TransactionContext",
    "WriteWriteConflict", "column_address", "compute_layout", "make_varlen",
    "pack_slot", "unpack_slot", "preempt_to_hot",
    "HOT", "COOLING", "FREEZING", "FROZEN",
]

__version__ = "0.1.0"
