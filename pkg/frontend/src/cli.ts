#!/usr/bin/env node
/**
 * icehouse-validate --source <file | host:port/table> --reference <dump.jsonl>
 *
 * Exit 0 when the decoded stream matches the reference, 1 on content
 * mismatch, 2 on network/decode failures.
 */

import { DecodeError, validate } from "./validate.js";
import { ServiceError } from "./fetch.js";

function arg(name: string): string | undefined {
  const i = process.argv.indexOf(`--${name}`);
  return i >= 0 ? process.argv[i + 1] : undefined;
}

async function main(): Promise<number> {
  const source = arg("source");
  const reference = arg("reference");
  const protocol = arg("protocol") ?? "ipc";
  if (!source || !reference) {
    console.error("usage: icehouse-validate --source <file|host:port/table> --reference <dump.jsonl> [--protocol ipc]");
    return 2;
  }
  try {
    const report = await validate(source, reference, protocol);
    console.log(JSON.stringify(report));
    return report.ok ? 0 : 1;
  } catch (err) {
    if (err instanceof ServiceError || err instanceof DecodeError) {
      console.error(JSON.stringify({ ok: false, error: err.constructor.name, message: err.message }));
      return 2;
    }
    throw err;
  }
}

main().then((code) => process.exit(code));
