"""Minimal TCP data service: Arrow IPC stream or row-oriented baseline.

Request frame: u32 length + JSON {"table": name, "protocol": "ipc" |
"rowbase"}. Response: one status byte (0 ok, 1 error); on success the
payload streams until the connection closes (the IPC stream carries its
own end marker), on error a u32-length-prefixed UTF-8 message follows.

Row baseline encoding, per row:

    u32 payload_length | null bitmap (ceil(ncols/8), LSB first) |
    fields in schema order: fixed-width little-endian raw bytes,
    varlens as u32 length + bytes (nulls: zeroed fixed / length 0)

This is the deliberately row-oriented comparison point: every tuple is
re-assembled field by field, which is exactly the serialization work
the frozen IPC path avoids.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading

import numpy as np

from .export import iter_table_batches, serialize_ipc
from .ragged import scatter as ragged_scatter
from .table import Table

_U32 = struct.Struct("<I")


class SocketSink:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.bytes_sent = 0

    def write(self, data) -> None:
        self.sock.sendall(data)
        self.bytes_sent += len(data)


# --- row baseline ------------------------------------------------------------------

def rowbase_encode_batch(table: Table, batch) -> bytearray:
    """Vectorized row-stream assembly for one exported batch."""
    rows = batch.rows
    cols = table.schema.columns
    ncols = len(cols)
    nm_bytes = (ncols + 7) >> 3
    if rows == 0:
        return bytearray()

    valid_bits = np.zeros((rows, ncols), np.uint8)
    field_sizes = np.zeros((rows, ncols), np.int64)
    col_data = []
    for i, (col, ce) in enumerate(zip(cols, batch.columns)):
        vb = np.unpackbits(np.frombuffer(ce.validity, np.uint8),
                           bitorder="little")[:rows]
        valid_bits[:, i] = vb
        if ce.codes is not None:
            # dictionary-encoded frozen column: decode sizes via the dictionary
            codes = np.frombuffer(ce.codes, "<i4")[:rows]
            doffs = np.frombuffer(ce.dict_offsets, "<i4")
            starts = doffs[:-1][codes].astype(np.int64)
            lens = (doffs[1:] - doffs[:-1])[codes].astype(np.int64)
            field_sizes[:, i] = 4 + lens * vb
            col_data.append(("varlen_dict", starts, lens, ce.dict_values))
        elif col.varlen:
            offs = np.frombuffer(ce.offsets, "<i4").astype(np.int64)
            lens = offs[1:] - offs[:-1]
            field_sizes[:, i] = 4 + lens
            buf = ce.data_parts[0] if len(ce.data_parts) == 1 else bytearray(
                b"".join(bytes(p) for p in ce.data_parts))
            col_data.append(("varlen", offs[:-1], lens, buf))
        else:
            w = col.width
            field_sizes[:, i] = w
            col_data.append(("fixed", np.frombuffer(
                ce.data_parts[0], np.uint8, count=rows * w).reshape(rows, w), None, None))

    payload = nm_bytes + field_sizes.sum(axis=1)
    totals = payload + 4
    out = bytearray(int(totals.sum()))
    oarr = np.frombuffer(out, np.uint8)
    row_start = np.zeros(rows, np.int64)
    np.cumsum(totals[:-1], out=row_start[1:])

    lens_le = payload.astype("<u4").view(np.uint8).reshape(rows, 4)
    oarr[row_start[:, None] + np.arange(4)] = lens_le
    nullmaps = np.packbits(valid_bits, axis=1, bitorder="little")
    oarr[row_start[:, None] + 4 + np.arange(nm_bytes)] = nullmaps[:, :nm_bytes]

    cursor = row_start + 4 + nm_bytes
    for i, (kind, a, b, c) in enumerate(col_data):
        if kind == "fixed":
            w = a.shape[1]
            oarr[cursor[:, None] + np.arange(w)] = a
            cursor = cursor + w
            continue
        starts, lens, buf = a, b, c
        eff = lens * valid_bits[:, i]
        le = eff.astype("<u4").view(np.uint8).reshape(rows, 4)
        oarr[cursor[:, None] + np.arange(4)] = le
        doff = cursor + 4
        vr = np.flatnonzero(eff > 0)
        if len(vr):
            ragged_scatter(out, [buf], np.zeros(len(vr), np.int64),
                           starts[vr], eff[vr], doff[vr])
        cursor = doff + eff
    return out


def rowbase_decode(data: bytes, table: Table) -> list[tuple]:
    """Reference decoder for the row baseline (tests and validation)."""
    cols = table.schema.columns
    nm_bytes = (len(cols) + 7) >> 3
    rows, pos, n = [], 0, len(data)
    while pos + 4 <= n:
        (ln,) = _U32.unpack_from(data, pos)
        pos += 4
        end = pos + ln
        nm = data[pos:pos + nm_bytes]
        cur = pos + nm_bytes
        vals = []
        for i, col in enumerate(cols):
            valid = nm[i >> 3] >> (i & 7) & 1
            if col.varlen:
                (vlen,) = _U32.unpack_from(data, cur)
                cur += 4
                raw = data[cur:cur + vlen]
                cur += vlen
                if not valid:
                    vals.append(None)
                else:
                    vals.append(raw.decode("utf-8") if col.utf8 else raw)
            else:
                raw = data[cur:cur + col.width]
                cur += col.width
                if not valid:
                    vals.append(None)
                elif col.width == 16:
                    vals.append(raw)
                else:
                    vals.append(int.from_bytes(raw, "little", signed=True))
        rows.append(tuple(vals))
        pos = end
    return rows


def serialize_rowbase(engine, table: Table, sink) -> int:
    total = 0
    for batch in iter_table_batches(engine, table):
        try:
            data = rowbase_encode_batch(table, batch)
        finally:
            batch.release()
        sink.write(data)
        total += len(data)
    return total


# --- the service ------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        try:
            head = _recv_exact(sock, 4)
            if head is None:
                return
            (ln,) = _U32.unpack(head)
            req = json.loads(_recv_exact(sock, ln))
            table = self.server.tables.get(req.get("table"))
            protocol = req.get("protocol", "ipc")
            if table is None or protocol not in ("ipc", "rowbase"):
                msg = f"unknown table {req.get('table')!r}" if table is None \
                    else f"unknown protocol {protocol!r}"
                sock.sendall(b"\x01" + _U32.pack(len(msg)) + msg.encode())
                return
            sock.sendall(b"\x00")
            sink = SocketSink(sock)
            if protocol == "ipc":
                writer = serialize_ipc(self.server.engine, table, sink,
                                       dictionary=bool(req.get("dictionary", False)))
                self.server.last_writer = writer
            else:
                serialize_rowbase(self.server.engine, table, sink)
        except (BrokenPipeError, ConnectionResetError):
            pass


def _recv_exact(sock, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf += part
    return buf


class DataService:
    """Serves every registered table over TCP; one thread per connection."""

    def __init__(self, engine, tables: dict[str, Table]):
        self.engine = engine
        self.tables = tables
        self._server = None
        self._thread = None

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        srv = socketserver.ThreadingTCPServer((host, port), _Handler, bind_and_activate=True)
        srv.daemon_threads = True
        srv.engine = self.engine
        srv.tables = self.tables
        srv.last_writer = None
        self._server = srv
        self._thread = threading.Thread(target=srv.serve_forever, daemon=True,
                                        name="icehouse-service")
        self._thread.start()
        return srv.server_address

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None


def fetch(address: tuple[str, int], table: str, protocol: str = "ipc",
          dictionary: bool = False, sink=None) -> tuple[int, bytes | None]:
    """Fetch a table; returns (bytes received, payload or None if sink given)."""
    req = json.dumps({"table": table, "protocol": protocol,
                      "dictionary": dictionary}).encode()
    with socket.create_connection(address) as sock:
        sock.sendall(_U32.pack(len(req)) + req)
        status = _recv_exact(sock, 1)
        if status is None:
            raise ConnectionError("service closed the connection")
        if status == b"\x01":
            (ln,) = _U32.unpack(_recv_exact(sock, 4))
            raise RuntimeError(_recv_exact(sock, ln).decode())
        total = 0
        chunks = [] if sink is None else None
        while True:
            part = sock.recv(1 << 20)
            if not part:
                break
            total += len(part)
            if sink is None:
                chunks.append(part)
            else:
                sink.write(part)
        return total, (b"".join(chunks) if sink is None else None)
