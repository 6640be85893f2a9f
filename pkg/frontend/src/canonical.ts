/**
 * Canonical value forms shared with the engine's reference dumps:
 * 64-bit integers as decimal strings, binary as {"$hex": "..."},
 * UTF-8 as plain strings, nulls explicit.
 */

export type CanonicalValue = null | number | string | { $hex: string };

export function canonicalize(value: unknown): CanonicalValue {
  if (value === null || value === undefined) {
    return null;
  }
  if (typeof value === "bigint") {
    return value.toString();
  }
  if (typeof value === "number" || typeof value === "string") {
    return value;
  }
  if (value instanceof Uint8Array) {
    return { $hex: Buffer.from(value).toString("hex") };
  }
  throw new TypeError(`unsupported decoded value: ${typeof value}`);
}

export function canonicalKey(row: Record<string, CanonicalValue>, names: string[]): string {
  // one stable string per row so multisets compare by sorting
  return JSON.stringify(names.map((n) => {
    const v = row[n];
    return v !== null && typeof v === "object" ? ["$hex", v.$hex] : v;
  }));
}
