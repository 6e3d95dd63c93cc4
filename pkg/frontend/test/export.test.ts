import { mkdtempSync, readFileSync } from 'node:fs'
import { tmpdir } from 'node:os'
import { join } from 'node:path'
import { describe, expect, it } from 'vitest'

import { ExportError, exportFeatures, parseExportSpec } from '../src/export.js'
import { readMoodfd } from '../src/moodfd.js'

function specFor(dir: string, overrides: Record<string, unknown> = {}) {
  return parseExportSpec({
    model: { kind: 'synthetic', dim: 12, classCount: 4, seed: 3, id: 'toy-rp' },
    dataset: {
      name: 'synthetic',
      synthetic: { classes: 3, perClass: 6, side: 8, channels: 1, seed: 5 },
    },
    batchSize: 4,
    outputs: {
      features: join(dir, 'features.moodfd'),
      logits: join(dir, 'logits.moodfd'),
      manifest: join(dir, 'manifest.json'),
    },
    ...overrides,
  })
}

describe('exportFeatures', () => {
  it('writes parseable MOODFD dumps with canonical row order and labels', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'export-'))
    const spec = specFor(dir)
    const result = await exportFeatures(spec)
    expect(result.rows).toBe(18)
    expect(result.dim).toBe(12)

    const features = readMoodfd(spec.outputs.features)
    expect([features.rows, features.cols]).toEqual([18, 12])
    expect(Array.from(features.labels!)).toEqual(
      [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2],
    )
    const logits = readMoodfd(spec.outputs.logits!)
    expect([logits.rows, logits.cols]).toEqual([18, 4])

    const manifest = JSON.parse(readFileSync(spec.outputs.manifest, 'utf-8'))
    expect(manifest.stage).toBe('extract')
    expect(manifest.extra.model_id).toBe('toy-rp')
    expect(manifest.extra.layer).toBe('pooled_final')
    expect(manifest.extra.dim).toBe(12)
    expect(manifest.extra.rows).toBe(18)
    expect(manifest.outputs).toContain(spec.outputs.features)
  })

  it('re-export with an identical spec reproduces the content digest', async () => {
    const dirA = mkdtempSync(join(tmpdir(), 'export-a-'))
    const dirB = mkdtempSync(join(tmpdir(), 'export-b-'))
    await exportFeatures(specFor(dirA))
    await exportFeatures(specFor(dirB))
    const a = JSON.parse(readFileSync(join(dirA, 'manifest.json'), 'utf-8'))
    const b = JSON.parse(readFileSync(join(dirB, 'manifest.json'), 'utf-8'))
    expect(a.extra.features_digest).toBe(b.extra.features_digest)
    expect(a.extra.logits_digest).toBe(b.extra.logits_digest)
    expect(Buffer.compare(
      readFileSync(join(dirA, 'features.moodfd')),
      readFileSync(join(dirB, 'features.moodfd')),
    )).toBe(0)
  })

  it('batch size does not change the exported bytes', async () => {
    const dirA = mkdtempSync(join(tmpdir(), 'export-bs-'))
    const dirB = mkdtempSync(join(tmpdir(), 'export-bs2-'))
    await exportFeatures(specFor(dirA, { batchSize: 4 }))
    await exportFeatures(specFor(dirB, { batchSize: 18 }))
    expect(Buffer.compare(
      readFileSync(join(dirA, 'features.moodfd')),
      readFileSync(join(dirB, 'features.moodfd')),
    )).toBe(0)
  })

  it('aborts when the emitted dimension contradicts the spec', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'export-dim-'))
    await expect(exportFeatures(specFor(dir, { expectedDim: 99 }))).rejects.toThrow(ExportError)
  })

  it('rejects a logits request when the backbone has no head', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'export-nohead-'))
    const spec = parseExportSpec({
      model: { kind: 'synthetic', dim: 8, seed: 1 },
      dataset: { name: 'synthetic', synthetic: { classes: 2, perClass: 3, side: 8, channels: 1, seed: 2 } },
      outputs: {
        features: join(dir, 'f.moodfd'),
        logits: join(dir, 'l.moodfd'),
        manifest: join(dir, 'm.json'),
      },
    })
    await expect(exportFeatures(spec)).rejects.toThrow(ExportError)
  })
})

describe('parseExportSpec', () => {
  it('rejects unknown keys and missing outputs', () => {
    expect(() => parseExportSpec({ bogus: 1 })).toThrow(ExportError)
    expect(() =>
      parseExportSpec({
        model: { kind: 'synthetic' },
        dataset: { name: 'synthetic', synthetic: { classes: 1, perClass: 1, side: 4, channels: 1, seed: 0 } },
        outputs: { features: 'f.moodfd' },
      }),
    ).toThrow(ExportError)
  })

  it('rejects unresolvable dataset and model kinds', () => {
    expect(() =>
      parseExportSpec({
        model: { kind: 'pytorch' },
        dataset: { name: 'cifar10', root: '/tmp' },
        outputs: { features: 'f', manifest: 'm' },
      }),
    ).toThrow(ExportError)
  })
})
