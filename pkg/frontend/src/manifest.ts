/**
 * RunManifest JSON, schema-compatible with the primary engine's manifests.
 * Timestamp-free so identical exports produce identical manifests.
 */

import { createHash } from 'node:crypto'
import { readFileSync } from 'node:fs'

import { writeFileAtomic } from './moodfd.js'

export interface RunManifest {
  schema_version: number
  stage: string
  config_digest: string
  seed: number
  inputs: string[]
  outputs: string[]
  extra?: Record<string, unknown>
}

export function sha256Hex(data: Buffer | string): string {
  return createHash('sha256').update(data).digest('hex')
}

export function fileDigest(path: string): string {
  return sha256Hex(readFileSync(path))
}

/** Canonical-JSON digest matching the primary's config_digest convention. */
export function configDigest(config: unknown): string {
  return sha256Hex(canonicalJson(config))
}

function canonicalJson(value: unknown): string {
  if (value === null || typeof value !== 'object') return JSON.stringify(value)
  if (Array.isArray(value)) return `[${value.map(canonicalJson).join(',')}]`
  const entries = Object.entries(value as Record<string, unknown>)
    .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
    .map(([k, v]) => `${JSON.stringify(k)}:${canonicalJson(v)}`)
  return `{${entries.join(',')}}`
}

export function writeManifest(path: string, manifest: RunManifest): void {
  const doc: Record<string, unknown> = {
    schema_version: manifest.schema_version,
    stage: manifest.stage,
    config_digest: manifest.config_digest,
    seed: manifest.seed,
    inputs: manifest.inputs,
    outputs: manifest.outputs,
  }
  if (manifest.extra && Object.keys(manifest.extra).length > 0) doc.extra = manifest.extra
  const keys = Object.keys(doc).sort()
  const sorted: Record<string, unknown> = {}
  for (const k of keys) sorted[k] = doc[k]
  writeFileAtomic(path, JSON.stringify(sorted, null, 2) + '\n')
}
