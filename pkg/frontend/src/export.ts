/**
 * Feature export: run a backbone over a dataset and emit MOODFD dumps plus
 * a provenance manifest the primary engine consumes directly.
 */

import { z } from 'zod'

import { BackboneError, loadBackbone } from './backbone.js'
import { DatasetError, loadDataset } from './datasets.js'
import { RunManifest, configDigest, fileDigest, writeManifest } from './manifest.js'
import { writeMoodfd } from './moodfd.js'

export class ExportError extends Error {}

const syntheticDatasetSchema = z.object({
  classes: z.number().int().positive(),
  perClass: z.number().int().positive(),
  side: z.number().int().positive(),
  channels: z.number().int().positive(),
  seed: z.number().int().nonnegative(),
})

export const exportSpecSchema = z
  .object({
    model: z.object({
      kind: z.enum(['tfjs-graph', 'tfjs-layers', 'synthetic']),
      source: z.string().optional(),
      id: z.string().optional(),
      dim: z.number().int().positive().optional(),
      classCount: z.number().int().positive().optional(),
      seed: z.number().int().nonnegative().optional(),
    }),
    dataset: z.object({
      name: z.enum(['cifar10', 'cifar100', 'raw-u8', 'synthetic']),
      split: z.enum(['train', 'test']).optional(),
      root: z.string().optional(),
      synthetic: syntheticDatasetSchema.optional(),
    }),
    layer: z.literal('pooled_final').default('pooled_final'),
    batchSize: z.number().int().positive().default(64),
    /** when set, the export aborts unless the backbone emits this many dims */
    expectedDim: z.number().int().positive().optional(),
    outputs: z.object({
      features: z.string(),
      logits: z.string().optional(),
      manifest: z.string(),
    }),
  })
  .strict()

export type ExportSpec = z.infer<typeof exportSpecSchema>

export function parseExportSpec(raw: unknown): ExportSpec {
  const parsed = exportSpecSchema.safeParse(raw)
  if (!parsed.success) {
    throw new ExportError(`invalid export spec: ${parsed.error.issues
      .map((i) => `${i.path.join('.')}: ${i.message}`)
      .join('; ')}`)
  }
  return parsed.data
}

export interface ExportResult {
  manifest: RunManifest
  rows: number
  dim: number
}

export async function exportFeatures(spec: ExportSpec): Promise<ExportResult> {
  const dataset = loadDataset(spec.dataset)
  const backbone = await loadBackbone(spec.model)
  try {
    const featureRows: Float32Array[] = []
    const logitRows: Float32Array[] = []
    const labels = new Int32Array(dataset.count)
    let dim = 0
    let classCount = 0
    let row = 0
    for (const batch of dataset.batches(spec.batchSize)) {
      const out = await backbone.run(
        batch.pixels, batch.count, dataset.height, dataset.width, dataset.channels,
      )
      if (dim === 0) {
        dim = out.dim
        if (spec.expectedDim !== undefined && dim !== spec.expectedDim) {
          throw new ExportError(
            `backbone emits ${dim}-dimensional features but the spec expects ${spec.expectedDim}; aborting`,
          )
        }
      } else if (out.dim !== dim) {
        throw new ExportError(`backbone changed output dimension from ${dim} to ${out.dim}`)
      }
      featureRows.push(out.features)
      if (out.logits && out.classCount) {
        classCount = out.classCount
        logitRows.push(out.logits)
      }
      labels.set(batch.labels, row)
      row += batch.count
    }

    const features = concat(featureRows, row * dim)
    writeMoodfd(spec.outputs.features, { values: features, rows: row, cols: dim, labels })
    const outputs = [spec.outputs.features]
    const extra: Record<string, unknown> = {
      model_id: backbone.id,
      layer: spec.layer,
      dim,
      rows: row,
      dataset: dataset.name,
      split: spec.dataset.split ?? 'test',
      features_digest: fileDigest(spec.outputs.features),
    }
    if (spec.outputs.logits) {
      if (logitRows.length === 0) {
        throw new ExportError('spec requests a logits dump but the backbone has no classifier head')
      }
      const logits = concat(logitRows, row * classCount)
      writeMoodfd(spec.outputs.logits, { values: logits, rows: row, cols: classCount, labels })
      outputs.push(spec.outputs.logits)
      extra.logits_digest = fileDigest(spec.outputs.logits)
      extra.class_count = classCount
    }

    const manifest: RunManifest = {
      schema_version: 1,
      stage: 'extract',
      config_digest: configDigest(spec),
      seed: spec.model.seed ?? 0,
      inputs: spec.dataset.root ? [spec.dataset.root] : [],
      outputs,
      extra,
    }
    writeManifest(spec.outputs.manifest, manifest)
    return { manifest, rows: row, dim }
  } finally {
    backbone.close()
  }
}

function concat(parts: Float32Array[], total: number): Float32Array {
  const out = new Float32Array(total)
  let offset = 0
  for (const part of parts) {
    out.set(part, offset)
    offset += part.length
  }
  if (offset !== total) throw new ExportError(`expected ${total} values, accumulated ${offset}`)
  return out
}

export { BackboneError, DatasetError }
