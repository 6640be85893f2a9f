"""Engine facade: wires storage, transactions, pruning, logging and
transformation together and owns the background threads.

Most tests drive the single-step APIs (prune_pass, transform_pass,
flush_loop_step) directly for determinism; `start()` spins up the
real background threads for workload runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import wal as wal_mod
from .block import BlockArena
from .index import IndexRegistry
from .pruner import PrunerThread, VersionPruner
from .table import Column, Schema, Table
from .transformer import BlockTransformer, TransformerThread
from .txn import TransactionContext, TransactionEngine


@dataclass
class EngineConfig:
    block_size: int = 1 << 20
    prune_interval: float = 0.010
    pruner_threads: int = 1
    cold_threshold: float = 0.010
    group_size: int = 32
    variant: str = "gather"                # gather | dictionary
    transformer_threads: int = 1
    transform_interval: float = 0.010
    wal_path: str | None = None
    wal_fsync: bool = True
    wal_group_size: int = 64
    wal_flush_interval: float = 0.005
    table_thresholds: dict = field(default_factory=dict)   # table name -> seconds

    @classmethod
    def from_file(cls, path: str) -> "EngineConfig":
        """Flat key = value config file (strings, numbers, booleans)."""
        cfg = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip().strip('"')
                if not hasattr(cfg, key):
                    raise KeyError(f"unknown config key {key!r}")
                cur = getattr(cfg, key)
                if isinstance(cur, bool):
                    value = raw.lower() in ("1", "true", "yes", "on")
                elif isinstance(cur, int):
                    value = int(raw)
                elif isinstance(cur, float):
                    value = float(raw)
                else:
                    value = raw
                setattr(cfg, key, value)
        return cfg


class Engine:
    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self.arena = BlockArena()
        self.txns = TransactionEngine(self.arena)
        self.indexes = IndexRegistry()
        self.txns.indexes = self.indexes
        self.pruner = VersionPruner(self.txns)
        self.transformer = BlockTransformer(
            self.txns, self.pruner,
            threshold=self.config.cold_threshold,
            group_size=self.config.group_size,
            variant=self.config.variant)
        self.tables: dict[str, Table] = {}
        self.wal: wal_mod.WriteAheadLog | None = None
        if self.config.wal_path:
            self.wal = wal_mod.WriteAheadLog(
                self.config.wal_path,
                group_size=self.config.wal_group_size,
                flush_interval=self.config.wal_flush_interval,
                fsync=self.config.wal_fsync)
            self.txns.wal = self.wal
        self._threads: list = []
        self._next_table_id = 1

    # --- catalog ------------------------------------------------------------

    def create_table(self, name: str, columns: list[Column]) -> Table:
        if name in self.tables:
            raise ValueError(f"table {name!r} already exists")
        table = Table(name, Schema(columns), self.arena,
                      table_id=self._next_table_id,
                      block_size=self.config.block_size)
        if name in self.config.table_thresholds:
            table.cold_threshold = self.config.table_thresholds[name]
        self._next_table_id += 1
        self.tables[name] = table
        self.txns.tables[table.table_id] = table
        self.transformer.watch_table(table)
        return table

    def create_index(self, name: str, table: Table, key_cols) :
        return self.indexes.create(name, table, key_cols)

    # --- transactions ----------------------------------------------------------

    def begin(self) -> TransactionContext:
        return self.txns.begin()

    # --- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        if self.wal is not None:
            self.wal.start()
        t = PrunerThread(self.pruner, self.config.prune_interval,
                         partitions=self.config.pruner_threads)
        t.start()
        self._threads.append(t)
        for _ in range(max(1, self.config.transformer_threads)):
            t = TransformerThread(self.transformer, self.config.transform_interval)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        for t in self._threads:
            t.stop()
        self._threads = []
        if self.wal is not None:
            self.wal.stop()
            self.wal = None
            self.txns.wal = None

    def quiesce(self, passes: int = 3) -> None:
        """Run prune+transform to steady state (single-step mode)."""
        for _ in range(passes):
            self.pruner.prune_pass()
            self.transformer.transform_pass()

    def recover(self) -> dict:
        """Replay the WAL into this (fresh, schema-registered) engine."""
        assert self.config.wal_path
        return wal_mod.recover(self.config.wal_path, self.txns, self.txns.tables)

    def census(self, table: Table) -> dict[str, float]:
        counts = table.state_census()
        total = sum(counts.values()) or 1
        from .block import STATE_NAMES
        return {STATE_NAMES[k]: 100.0 * v / total for k, v in counts.items()}
