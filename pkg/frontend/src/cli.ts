#!/usr/bin/env node
/**
 * Standalone exporter command: `mood-export <spec.json>`.
 *
 * Exit codes mirror the primary engine: 2 for usage/config problems,
 * 3 for data/format problems.
 */

import { readFileSync } from 'node:fs'

import { BackboneError, DatasetError, ExportError, exportFeatures, parseExportSpec } from './export.js'
import { FormatError } from './moodfd.js'

async function main(): Promise<number> {
  const args = process.argv.slice(2)
  if (args.length !== 1 || args[0] === '--help' || args[0] === '-h') {
    console.error('usage: mood-export <spec.json>')
    return args.length === 1 ? 0 : 2
  }
  let raw: unknown
  try {
    raw = JSON.parse(readFileSync(args[0], 'utf-8'))
  } catch (err) {
    console.error(`mood-export: cannot read spec: ${String(err)}`)
    return 3
  }
  try {
    const spec = parseExportSpec(raw)
    const result = await exportFeatures(spec)
    console.log(
      `exported ${result.rows} rows x ${result.dim} dims -> ${spec.outputs.features}`,
    )
    return 0
  } catch (err) {
    console.error(`mood-export: ${String(err)}`)
    if (err instanceof ExportError || err instanceof BackboneError) return 2
    if (err instanceof DatasetError || err instanceof FormatError) return 3
    return 1
  }
}

main().then((code) => {
  process.exitCode = code
})
