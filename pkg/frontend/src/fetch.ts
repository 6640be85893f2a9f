/**
 * Client side of the engine's TCP data service: a u32-length-prefixed
 * JSON request, one status byte back, then the payload streams until
 * the server closes the connection.
 */

import * as net from "node:net";

export class ServiceError extends Error {}

export interface FetchTarget {
  host: string;
  port: number;
  table: string;
}

export function parseAddress(source: string): FetchTarget | null {
  // host:port/table
  const m = /^([^:/]+):(\d+)\/(.+)$/.exec(source);
  if (!m) {
    return null;
  }
  return { host: m[1], port: Number(m[2]), table: m[3] };
}

export function fetchTable(target: FetchTarget, protocol = "ipc"): Promise<Buffer> {
  return new Promise((resolve, reject) => {
    const sock = net.createConnection(target.port, target.host);
    const chunks: Buffer[] = [];
    let status: number | null = null;
    sock.on("connect", () => {
      const req = Buffer.from(JSON.stringify({ table: target.table, protocol }));
      const head = Buffer.alloc(4);
      head.writeUInt32LE(req.length, 0);
      sock.write(Buffer.concat([head, req]));
    });
    sock.on("data", (data: Buffer) => {
      if (status === null) {
        status = data[0];
        data = data.subarray(1);
      }
      if (data.length) {
        chunks.push(data);
      }
    });
    sock.on("error", (err) => reject(new ServiceError(`connection failed: ${err.message}`)));
    sock.on("close", () => {
      const body = Buffer.concat(chunks);
      if (status === 1) {
        const len = body.readUInt32LE(0);
        reject(new ServiceError(body.subarray(4, 4 + len).toString("utf-8")));
      } else if (status === 0) {
        resolve(body);
      } else {
        reject(new ServiceError("service closed the connection before responding"));
      }
    });
  });
}
