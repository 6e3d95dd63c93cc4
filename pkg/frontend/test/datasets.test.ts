import { mkdtempSync, writeFileSync } from 'node:fs'
import { tmpdir } from 'node:os'
import { join } from 'node:path'
import { describe, expect, it } from 'vitest'

import { DatasetError, loadDataset, syntheticDataset } from '../src/datasets.js'

/** Two handcrafted CIFAR-10 records: label byte + 3072 plane bytes. */
function makeCifar10Dir(): string {
  const dir = mkdtempSync(join(tmpdir(), 'cifar10-'))
  const record = (label: number, r: number, g: number, b: number) => {
    const buf = Buffer.alloc(1 + 3072)
    buf[0] = label
    buf.fill(r, 1, 1 + 1024)
    buf.fill(g, 1 + 1024, 1 + 2048)
    buf.fill(b, 1 + 2048, 1 + 3072)
    return buf
  }
  writeFileSync(join(dir, 'test_batch.bin'), Buffer.concat([record(3, 255, 0, 128), record(7, 0, 255, 64)]))
  return dir
}

describe('cifar10 loader', () => {
  it('decodes planes into HWC pixels in canonical order', () => {
    const root = makeCifar10Dir()
    const ds = loadDataset({ name: 'cifar10', split: 'test', root })
    expect([ds.count, ds.height, ds.width, ds.channels]).toEqual([2, 32, 32, 3])
    const batch = ds.batches(8).next().value!
    expect(Array.from(batch.labels)).toEqual([3, 7])
    // first image, first pixel: R=255, G=0, B=128
    expect(batch.pixels[0]).toBeCloseTo(1.0, 6)
    expect(batch.pixels[1]).toBeCloseTo(0.0, 6)
    expect(batch.pixels[2]).toBeCloseTo(128 / 255, 6)
    // second image, first pixel: R=0, G=255, B=64
    const offset = 32 * 32 * 3
    expect(batch.pixels[offset]).toBeCloseTo(0.0, 6)
    expect(batch.pixels[offset + 1]).toBeCloseTo(1.0, 6)
  })

  it('fails cleanly on missing files and bad sizes', () => {
    expect(() => loadDataset({ name: 'cifar10', root: '/nonexistent-root' })).toThrow(DatasetError)
    const dir = mkdtempSync(join(tmpdir(), 'cifar10-bad-'))
    writeFileSync(join(dir, 'test_batch.bin'), Buffer.alloc(100))
    expect(() => loadDataset({ name: 'cifar10', split: 'test', root: dir })).toThrow(DatasetError)
  })
})

describe('cifar100 loader', () => {
  it('uses the fine label of each record', () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar100-'))
    const buf = Buffer.alloc(2 + 3072)
    buf[0] = 11 // coarse
    buf[1] = 42 // fine
    writeFileSync(join(dir, 'test.bin'), buf)
    const ds = loadDataset({ name: 'cifar100', split: 'test', root: dir })
    expect(Array.from(ds.batches(4).next().value!.labels)).toEqual([42])
  })
})

describe('raw-u8 loader', () => {
  it('reads meta + images + labels', () => {
    const dir = mkdtempSync(join(tmpdir(), 'rawu8-'))
    writeFileSync(join(dir, 'meta.json'), JSON.stringify({ count: 2, height: 2, width: 2, channels: 1 }))
    writeFileSync(join(dir, 'images.u8'), Buffer.from([0, 51, 102, 153, 204, 255, 0, 255]))
    const labels = Buffer.alloc(8)
    labels.writeInt32LE(5, 0)
    labels.writeInt32LE(9, 4)
    writeFileSync(join(dir, 'labels.i32'), labels)
    const ds = loadDataset({ name: 'raw-u8', root: dir })
    const batch = ds.batches(10).next().value!
    expect(Array.from(batch.labels)).toEqual([5, 9])
    expect(batch.pixels[1]).toBeCloseTo(0.2, 6)
  })

  it('rejects inconsistent payload sizes', () => {
    const dir = mkdtempSync(join(tmpdir(), 'rawu8-bad-'))
    writeFileSync(join(dir, 'meta.json'), JSON.stringify({ count: 3, height: 2, width: 2, channels: 1 }))
    writeFileSync(join(dir, 'images.u8'), Buffer.alloc(4))
    writeFileSync(join(dir, 'labels.i32'), Buffer.alloc(12))
    expect(() => loadDataset({ name: 'raw-u8', root: dir })).toThrow(DatasetError)
  })
})

describe('synthetic dataset', () => {
  it('is deterministic and batches preserve canonical order', () => {
    const spec = { classes: 2, perClass: 5, side: 8, channels: 1, seed: 7 }
    const a = syntheticDataset(spec)
    const b = syntheticDataset(spec)
    const batchA = a.batches(100).next().value!
    const batchB = b.batches(100).next().value!
    expect(Array.from(batchA.pixels)).toEqual(Array.from(batchB.pixels))
    expect(Array.from(batchA.labels)).toEqual([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    let total = 0
    for (const batch of a.batches(3)) total += batch.count
    expect(total).toBe(10)
  })
})
