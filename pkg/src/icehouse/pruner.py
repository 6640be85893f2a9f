"""Two-phase background pruning of invisible version chains.

Phase one truncates: for every completed transaction whose final
timestamp precedes the oldest active start, each affected chain is cut
once (a mark bit on the chain head lets concurrent pruner partitions
and shared chains back off). Phase two reclaims: truncated batches are
tagged with an unlink epoch and their memory is poisoned and freed only
once the oldest active transaction began after that epoch. Arbitrary
deferred actions share the same epoch-gated queue.

The pruner also emits (slot, kind, pass-timestamp) observations, which
the block transformer uses for cold detection.
"""

from __future__ import annotations

import heapq
import threading
import time
from dataclasses import dataclass, field

from .block import PRUNE_MARK
from .layout import unpack_slot
from .txn import DELETE, TransactionEngine, TransactionContext

_ID_MASK = PRUNE_MARK - 1


@dataclass(order=True)
class _EpochItem:
    ts: int
    seq: int
    kind: str = field(compare=False)          # "batch" | "action"
    payload: object = field(compare=False)


@dataclass
class PruneStats:
    truncated_chains: int = 0
    reclaimed_batches: int = 0
    reclaimed_records: int = 0
    actions_run: int = 0
    observations: list = field(default_factory=list)


class VersionPruner:
    def __init__(self, engine: TransactionEngine, observation_sink=None):
        self.engine = engine
        self.completed: list[TransactionContext] = []
        self._completed_lock = threading.Lock()
        self._epoch_queue: list[_EpochItem] = []
        self._epoch_lock = threading.Lock()
        self._seq = 0
        self.observation_sink = observation_sink
        self.pass_count = 0
        engine.completed_sink = self.on_complete

    # --- intake ----------------------------------------------------------

    def on_complete(self, txn: TransactionContext) -> None:
        if not txn.write_set:
            return
        with self._completed_lock:
            self.completed.append(txn)

    def defer(self, action, ts: int) -> None:
        """Run `action` once every transaction alive at `ts` has finished."""
        with self._epoch_lock:
            self._seq += 1
            heapq.heappush(self._epoch_queue, _EpochItem(ts, self._seq, "action", action))

    # --- the pass ----------------------------------------------------------

    def prune_pass(self, partitions: int = 1) -> PruneStats:
        stats = PruneStats()
        pass_time = time.monotonic()
        oldest = self.engine.oldest_active_start()

        with self._completed_lock:
            ready, pending = [], []
            for txn in self.completed:
                (ready if txn.final_ts() < oldest else pending).append(txn)
            self.completed = pending

        marked: list[tuple] = []
        if partitions <= 1 or len(ready) < 2:
            for txn in ready:
                self._truncate_txn(txn, oldest, marked, stats, pass_time)
        else:
            shards = [[] for _ in range(partitions)]
            for txn in ready:
                shards[txn.start % partitions].append(txn)
            shard_stats = [PruneStats() for _ in range(partitions)]
            threads = [
                threading.Thread(
                    target=lambda s=shard, st=sst: [
                        self._truncate_txn(t, oldest, marked, st, pass_time) for t in s
                    ])
                for shard, sst in zip(shards, shard_stats)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            for sst in shard_stats:
                stats.truncated_chains += sst.truncated_chains
                stats.observations.extend(sst.observations)

        if ready:
            unlink_epoch = self.engine.counter.next()
            with self._epoch_lock:
                self._seq += 1
                heapq.heappush(self._epoch_queue,
                               _EpochItem(unlink_epoch, self._seq, "batch", ready))

        # epoch-gated reclamation and deferred actions, oldest first
        while True:
            with self._epoch_lock:
                if not self._epoch_queue or self._epoch_queue[0].ts >= oldest:
                    break
                item = heapq.heappop(self._epoch_queue)
            if item.kind == "batch":
                stats.reclaimed_batches += 1
                for txn in item.payload:
                    stats.reclaimed_records += len(txn.write_set)
                    self._reclaim_txn(txn)
            else:
                item.payload()
                stats.actions_run += 1

        for block, slot in marked:
            with block.lock:
                word = block.version_word(slot)
                if word & PRUNE_MARK:
                    block.set_version_word(slot, word & _ID_MASK)

        self.pass_count += 1
        if self.observation_sink is not None and stats.observations:
            self.observation_sink(stats.observations)
        return stats

    def _truncate_txn(self, txn, oldest, marked, stats, pass_time) -> None:
        for rec in txn.write_set:
            base, offset = unpack_slot(rec.slot)
            block = rec.block
            stats.observations.append((rec.slot, rec.kind, pass_time, block))
            with block.lock:
                word = block.version_word(offset)
                if word & PRUNE_MARK:
                    continue                      # another pruner got here this pass
                head = self.engine.records.get(word & _ID_MASK)
                if head is None:
                    continue
                if head.read_ts() < oldest:
                    # entire chain is invisible to every live transaction
                    if head.kind == DELETE and not head.aborted:
                        block._set_bit(block.layout.alloc_bitmap_offset, offset, False)
                    block.set_version_word(offset, 0)
                    stats.truncated_chains += 1
                    continue
                cur = head
                moved = False
                while cur.next is not None and cur.next.read_ts() >= oldest:
                    cur = cur.next
                if cur.next is not None:
                    cur.next = None
                    moved = True
                block.set_version_word(offset, word | PRUNE_MARK)
                marked.append((block, offset))
                if moved:
                    stats.truncated_chains += 1

    def _reclaim_txn(self, txn: TransactionContext) -> None:
        records = self.engine.records
        for rec in txn.write_set:
            records.pop(rec.id, None)
        for seg in txn.undo_segments:
            self.engine.segment_pool.release(seg)
        txn.undo_segments = []


class PrunerThread(threading.Thread):
    """Drives prune passes on a fixed cadence (default 10 ms)."""

    def __init__(self, pruner: VersionPruner, interval: float = 0.010, partitions: int = 1):
        super().__init__(name="icehouse-pruner", daemon=True)
        self.pruner = pruner
        self.interval = interval
        self.partitions = partitions
        self._halt = threading.Event()

    def run(self):
        while not self._halt.is_set():
            self.pruner.prune_pass(self.partitions)
            self._halt.wait(self.interval)

    def stop(self):
        self._halt.set()
        self.join(timeout=10)
