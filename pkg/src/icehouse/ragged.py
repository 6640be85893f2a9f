"""Variable-width row scatter shared by gathering and materialization.

Rows i are copied from (buffers[bids[i]], soff[i], sizes[i]) to
out[doff[i]:...]. Consecutive rows whose sources are adjacent in the
same buffer coalesce into single copies; mostly-contiguous blocks (the
common case after append-order inserts) degenerate to a handful of
memcpy-sized moves. Heavily fragmented inputs fall back to a vectorized
byte gather.

Zero-size rows must be filtered out by the caller.
"""

from __future__ import annotations

import numpy as np

_GATHERED_FLAG = 1 << 63
_OFFSET_MASK = (1 << 40) - 1
_INLINE_LIMIT = 12


def scatter_entries(out, offsets, emat_flat, sizes, addrs, valid,
                    chunks, gathered, patch=b"", patch_rows=None) -> None:
    """Scatter per-row varlen values into `out` at `offsets`.

    Sources unify into one buffer list: the 16-byte-entry matrix itself
    (inline values start 4 bytes into each entry), the block's heap
    chunks (biased chunk index in address bits 40+), gathered buffers of
    a previously frozen generation (flag bit 63, column id in bits 40+),
    and an optional patch buffer for repaired rows.
    """
    rows = len(sizes)
    if rows == 0 or offsets[-1] == 0:
        return
    buffers = [emat_flat] + list(chunks)
    gmap = {}
    for c, g in gathered.items():
        gmap[c] = len(buffers)
        buffers.append(g.dict_values if g.is_dictionary else g.values)

    inline = sizes <= _INLINE_LIMIT
    is_gathered = (addrs & np.uint64(_GATHERED_FLAG)) != 0
    bids = np.where(inline, 0, (addrs >> np.uint64(40)).astype(np.int64) & 0x7FFFFF)
    soff = np.where(inline, np.arange(rows, dtype=np.int64) * 16 + 4,
                    (addrs & np.uint64(_OFFSET_MASK)).astype(np.int64))
    for c, bid in gmap.items():
        m = is_gathered & ~inline & (bids == c + 1)
        bids = np.where(m, bid, bids)

    if patch_rows:
        buffers.append(patch)
        pid = len(buffers) - 1
        for pos, (p0, _ln) in patch_rows.items():
            bids[pos] = pid
            soff[pos] = p0

    vr = np.flatnonzero(valid & (sizes > 0))
    if len(vr) == 0:
        return
    scatter(out, buffers, bids[vr], soff[vr], sizes[vr], offsets[:-1][vr])


def scatter(out, buffers: list, bids: np.ndarray, soff: np.ndarray,
            sizes: np.ndarray, doff: np.ndarray) -> None:
    nv = len(bids)
    if nv == 0:
        return
    breaks = np.flatnonzero((bids[1:] != bids[:-1])
                            | (soff[1:] != soff[:-1] + sizes[:-1])
                            | (doff[1:] != doff[:-1] + sizes[:-1]))
    run_starts = np.concatenate(([0], breaks + 1))
    run_ends = np.concatenate((breaks + 1, [nv]))

    if len(run_starts) <= max(64, nv // 4):
        mvs = [memoryview(b) for b in buffers]
        dst = memoryview(out)
        ends = np.cumsum(sizes)
        # native ints up front: the loop below is the hot path
        starts_l = run_starts.tolist()
        run_len = (ends[run_ends - 1] - np.where(run_starts > 0, ends[run_starts - 1], 0)).tolist()
        soff_l = soff[run_starts].tolist()
        doff_l = doff[run_starts].tolist()
        bids_l = bids[run_starts].tolist()
        for s0, d0, bid, length in zip(soff_l, doff_l, bids_l, run_len):
            dst[d0:d0 + length] = mvs[bid][s0:s0 + length]
        return

    outarr = np.frombuffer(out, np.uint8)
    for bid in np.unique(bids):
        m = bids == bid
        srcbuf = np.frombuffer(buffers[int(bid)], np.uint8)
        s, z, d = soff[m], sizes[m], doff[m]
        total = int(z.sum())
        if total == 0:
            continue
        starts_out = np.zeros(len(z), np.int64)
        np.cumsum(z[:-1], out=starts_out[1:])
        idx = np.repeat(s - starts_out, z) + np.arange(total, dtype=np.int64)
        pos = np.repeat(d - starts_out, z) + np.arange(total, dtype=np.int64)
        outarr[pos] = srcbuf[idx]
