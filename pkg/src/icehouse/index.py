"""Key -> TupleSlot hash index registry.

Index contents are updated when a transaction commits (deltas are
buffered in the transaction and applied after the commit word is
published), so uncommitted writes are never observable through an
index. Compaction's delete-insert pairs flow through the same path,
which is what keeps lookups correct across tuple moves.
"""

from __future__ import annotations

import threading

_ADD, _DEL = 0, 1


class HashIndex:
    def __init__(self, name: str, table, key_cols: tuple[int, ...]):
        self.name = name
        self.table = table
        self.key_cols = key_cols
        self.map: dict = {}
        self.lock = threading.Lock()

    def key_of(self, values) -> tuple:
        return tuple(values[c] for c in self.key_cols)

    def lookup(self, key) -> int | None:
        if not isinstance(key, tuple):
            key = (key,)
        with self.lock:
            return self.map.get(key)

    def __len__(self):
        return len(self.map)


class IndexRegistry:
    def __init__(self):
        self._by_table: dict[int, list[HashIndex]] = {}

    def create(self, name: str, table, key_cols) -> HashIndex:
        idx = HashIndex(name, table, tuple(key_cols))
        self._by_table.setdefault(table.table_id, []).append(idx)
        return idx

    def for_table(self, table) -> list[HashIndex]:
        return self._by_table.get(table.table_id, ())

    def covers_update(self, table, values: dict) -> bool:
        changed = set(values)
        return any(changed.intersection(ix.key_cols) for ix in self.for_table(table))

    # delta recording (buffered on the transaction, applied at commit)

    def record_insert(self, txn, table, slot: int, values) -> None:
        for ix in self.for_table(table):
            txn.index_deltas.append((_ADD, ix, ix.key_of(values), slot))

    def record_delete(self, txn, table, slot: int, values) -> None:
        for ix in self.for_table(table):
            txn.index_deltas.append((_DEL, ix, ix.key_of(values), slot))

    def record_update(self, txn, table, slot: int, old_values, values: dict) -> None:
        for ix in self.for_table(table):
            if not set(values).intersection(ix.key_cols):
                continue
            new_vals = list(old_values)
            for c, v in values.items():
                new_vals[c] = v
            txn.index_deltas.append((_DEL, ix, ix.key_of(old_values), slot))
            txn.index_deltas.append((_ADD, ix, ix.key_of(new_vals), slot))

    @staticmethod
    def apply(deltas) -> None:
        for op, ix, key, slot in deltas:
            with ix.lock:
                if op == _ADD:
                    ix.map[key] = slot
                elif ix.map.get(key) == slot:
                    del ix.map[key]
