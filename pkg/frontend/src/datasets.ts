/**
 * Dataset readers. Each loader yields images as CHW-flattened Float32Array
 * batches in [0, 1] plus integer labels, in the dataset's canonical order.
 *
 * Supported sources:
 *  - cifar10 / cifar100: the original binary-batch files on local disk
 *  - raw-u8: a generic pre-converted layout (meta.json + images.u8 +
 *    labels.i32) for datasets without a simple binary format (e.g. SVHN)
 *  - synthetic: deterministic seeded textures for offline tests
 */

import { existsSync, readFileSync } from 'node:fs'
import { join } from 'node:path'

export class DatasetError extends Error {}

export interface ImageBatch {
  /** HWC-flattened pixels in [0,1], length count * height * width * channels */
  pixels: Float32Array
  labels: Int32Array
  count: number
}

export interface Dataset {
  readonly name: string
  readonly count: number
  readonly height: number
  readonly width: number
  readonly channels: number
  batches(batchSize: number): Generator<ImageBatch>
}

class MemoryDataset implements Dataset {
  constructor(
    readonly name: string,
    readonly height: number,
    readonly width: number,
    readonly channels: number,
    private readonly pixels: Float32Array,
    private readonly labels: Int32Array,
  ) {}

  get count(): number {
    return this.labels.length
  }

  *batches(batchSize: number): Generator<ImageBatch> {
    const stride = this.height * this.width * this.channels
    for (let start = 0; start < this.count; start += batchSize) {
      const n = Math.min(batchSize, this.count - start)
      yield {
        pixels: this.pixels.subarray(start * stride, (start + n) * stride),
        labels: this.labels.subarray(start, start + n),
        count: n,
      }
    }
  }
}

/** CIFAR binary record: label byte(s) then 3072 bytes of RGB planes. */
function loadCifarFile(
  path: string,
  labelBytes: number,
  fineLabelOffset: number,
): { pixels: Float32Array; labels: Int32Array } {
  const blob = readFileSync(path)
  const record = labelBytes + 3072
  if (blob.length === 0 || blob.length % record !== 0) {
    throw new DatasetError(`${path}: size ${blob.length} is not a multiple of ${record}`)
  }
  const count = blob.length / record
  const pixels = new Float32Array(count * 3072)
  const labels = new Int32Array(count)
  for (let i = 0; i < count; i++) {
    const base = i * record
    labels[i] = blob[base + fineLabelOffset]
    // planes (R then G then B) -> interleaved HWC
    for (let p = 0; p < 1024; p++) {
      const out = i * 3072 + p * 3
      pixels[out] = blob[base + labelBytes + p] / 255
      pixels[out + 1] = blob[base + labelBytes + 1024 + p] / 255
      pixels[out + 2] = blob[base + labelBytes + 2048 + p] / 255
    }
  }
  return { pixels, labels }
}

function cifarFiles(root: string, name: 'cifar10' | 'cifar100', split: string): string[] {
  if (name === 'cifar10') {
    const dir = join(root, 'cifar-10-batches-bin')
    const base = existsSync(dir) ? dir : root
    if (split === 'test') return [join(base, 'test_batch.bin')]
    return [1, 2, 3, 4, 5].map((i) => join(base, `data_batch_${i}.bin`))
  }
  const dir = join(root, 'cifar-100-binary')
  const base = existsSync(dir) ? dir : root
  return [join(base, split === 'test' ? 'test.bin' : 'train.bin')]
}

function loadCifar(root: string, name: 'cifar10' | 'cifar100', split: string): MemoryDataset {
  const labelBytes = name === 'cifar10' ? 1 : 2
  const fineOffset = name === 'cifar10' ? 0 : 1
  const parts = cifarFiles(root, name, split).map((path) => {
    if (!existsSync(path)) throw new DatasetError(`${name}: missing file ${path}`)
    return loadCifarFile(path, labelBytes, fineOffset)
  })
  const total = parts.reduce((acc, p) => acc + p.labels.length, 0)
  const pixels = new Float32Array(total * 3072)
  const labels = new Int32Array(total)
  let offset = 0
  for (const part of parts) {
    pixels.set(part.pixels, offset * 3072)
    labels.set(part.labels, offset)
    offset += part.labels.length
  }
  return new MemoryDataset(name, 32, 32, 3, pixels, labels)
}

interface RawMeta {
  count: number
  height: number
  width: number
  channels: number
}

/** Generic layout: <root>/meta.json + images.u8 (HWC rows) + labels.i32. */
function loadRawU8(root: string): MemoryDataset {
  const metaPath = join(root, 'meta.json')
  if (!existsSync(metaPath)) throw new DatasetError(`raw-u8: missing ${metaPath}`)
  const meta = JSON.parse(readFileSync(metaPath, 'utf-8')) as RawMeta
  const { count, height, width, channels } = meta
  if (!(count > 0 && height > 0 && width > 0 && channels > 0)) {
    throw new DatasetError(`raw-u8: bad meta.json in ${root}`)
  }
  const stride = height * width * channels
  const imageBlob = readFileSync(join(root, 'images.u8'))
  if (imageBlob.length !== count * stride) {
    throw new DatasetError(
      `raw-u8: images.u8 holds ${imageBlob.length} bytes, expected ${count * stride}`,
    )
  }
  const labelBlob = readFileSync(join(root, 'labels.i32'))
  if (labelBlob.length !== count * 4) {
    throw new DatasetError(`raw-u8: labels.i32 holds ${labelBlob.length} bytes, expected ${count * 4}`)
  }
  const pixels = new Float32Array(count * stride)
  for (let i = 0; i < pixels.length; i++) pixels[i] = imageBlob[i] / 255
  const aligned = Buffer.allocUnsafe(labelBlob.length)
  labelBlob.copy(aligned)
  const labels = new Int32Array(aligned.buffer, aligned.byteOffset, count)
  return new MemoryDataset('raw-u8', height, width, channels, pixels, labels)
}

/** Deterministic small-state PRNG for the synthetic test dataset. */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export interface SyntheticSpec {
  classes: number
  perClass: number
  side: number
  channels: number
  seed: number
}

export function syntheticDataset(spec: SyntheticSpec): Dataset {
  const { classes, perClass, side, channels, seed } = spec
  if (!(classes > 0 && perClass > 0 && side > 0 && channels > 0)) {
    throw new DatasetError('synthetic: all dimensions must be positive')
  }
  const rand = mulberry32(seed)
  const count = classes * perClass
  const stride = side * side * channels
  const pixels = new Float32Array(count * stride)
  const labels = new Int32Array(count)
  let row = 0
  for (let c = 0; c < classes; c++) {
    const freq = 1 + (c % Math.max(1, Math.floor(side / 2) - 1))
    for (let j = 0; j < perClass; j++) {
      const phase = rand() * 2 * Math.PI
      for (let y = 0; y < side; y++) {
        for (let x = 0; x < side; x++) {
          const wave = 0.5 + 0.4 * Math.sin((2 * Math.PI * freq * (x + y)) / side + phase)
          for (let ch = 0; ch < channels; ch++) {
            const noisy = wave + (rand() - 0.5) * 0.2
            pixels[row * stride + (y * side + x) * channels + ch] = Math.min(1, Math.max(0, noisy))
          }
        }
      }
      labels[row] = c
      row++
    }
  }
  return new MemoryDataset('synthetic', side, side, channels, pixels, labels)
}

export interface DatasetSpec {
  name: 'cifar10' | 'cifar100' | 'raw-u8' | 'synthetic'
  split?: 'train' | 'test'
  root?: string
  synthetic?: SyntheticSpec
}

export function loadDataset(spec: DatasetSpec): Dataset {
  switch (spec.name) {
    case 'cifar10':
    case 'cifar100': {
      if (!spec.root) throw new DatasetError(`${spec.name}: a root path is required`)
      return loadCifar(spec.root, spec.name, spec.split ?? 'test')
    }
    case 'raw-u8': {
      if (!spec.root) throw new DatasetError('raw-u8: a root path is required')
      return loadRawU8(spec.root)
    }
    case 'synthetic': {
      if (!spec.synthetic) throw new DatasetError('synthetic: parameters are required')
      return syntheticDataset(spec.synthetic)
    }
    default:
      throw new DatasetError(`unknown dataset ${(spec as { name: string }).name}`)
  }
}
