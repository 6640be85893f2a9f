/**
 * Decodes an engine export with the standard Arrow reader and checks
 * schema plus row multiset against a JSONL reference dump.
 */

import * as fs from "node:fs";
import { tableFromIPC, Table } from "apache-arrow";

import { CanonicalValue, canonicalKey, canonicalize } from "./canonical.js";
import { ServiceError, fetchTable, parseAddress } from "./fetch.js";

export class DecodeError extends Error {}

export interface ValidationReport {
  ok: boolean;
  rows: number;
  referenceRows: number;
  schema: string[];
  divergence?: string;
}

export function decodeStream(payload: Uint8Array): Table {
  try {
    return tableFromIPC(payload);
  } catch (err) {
    throw new DecodeError(`Arrow decode failed: ${(err as Error).message}`);
  }
}

export function tableRows(table: Table): Record<string, CanonicalValue>[] {
  const names = table.schema.fields.map((f) => f.name);
  const rows: Record<string, CanonicalValue>[] = [];
  for (let i = 0; i < table.numRows; i++) {
    const row: Record<string, CanonicalValue> = {};
    for (const name of names) {
      row[name] = canonicalize(table.getChild(name)!.get(i));
    }
    rows.push(row);
  }
  return rows;
}

export function loadReference(path: string): Record<string, CanonicalValue>[] {
  const rows: Record<string, CanonicalValue>[] = [];
  for (const line of fs.readFileSync(path, "utf-8").split("\n")) {
    if (line.trim()) {
      rows.push(JSON.parse(line));
    }
  }
  return rows;
}

export function compare(
  decoded: Record<string, CanonicalValue>[],
  reference: Record<string, CanonicalValue>[],
  schema: string[],
): ValidationReport {
  const report: ValidationReport = {
    ok: false,
    rows: decoded.length,
    referenceRows: reference.length,
    schema,
  };
  if (reference.length && Object.keys(reference[0]).join(",") !== schema.join(",")) {
    report.divergence =
      `schema mismatch: stream has [${schema}], reference has ` +
      `[${Object.keys(reference[0])}]`;
    return report;
  }
  if (decoded.length !== reference.length) {
    report.divergence = `row count: stream ${decoded.length} vs reference ${reference.length}`;
    return report;
  }
  const got = decoded.map((r) => canonicalKey(r, schema)).sort();
  const want = reference.map((r) => canonicalKey(r, schema)).sort();
  for (let i = 0; i < got.length; i++) {
    if (got[i] !== want[i]) {
      report.divergence = `row ${i} (sorted): stream ${got[i]} vs reference ${want[i]}`;
      return report;
    }
  }
  report.ok = true;
  return report;
}

export async function validate(source: string, referencePath: string,
                               protocol = "ipc"): Promise<ValidationReport> {
  const target = parseAddress(source);
  let payload: Uint8Array;
  if (target) {
    payload = await fetchTable(target, protocol);
  } else {
    try {
      payload = fs.readFileSync(source);
    } catch (err) {
      throw new ServiceError(`cannot read ${source}: ${(err as Error).message}`);
    }
  }
  const table = decodeStream(payload);
  const schema = table.schema.fields.map((f) => f.name);
  return compare(tableRows(table), loadReference(referencePath), schema);
}
