/**
 * Backbones map image batches to pooled feature rows (and, when the model
 * has a classifier head, logits). The tfjs implementation loads a local
 * GraphModel/LayersModel directory; rank-4 outputs are global-average-pooled
 * so "the final block, pooled" is what lands in the feature file.
 */

import { readFileSync } from 'node:fs'
import { join } from 'node:path'

export class BackboneError extends Error {}

export interface BackboneOutput {
  /** row-major (count x dim) feature matrix */
  features: Float32Array
  dim: number
  /** row-major (count x classCount) logits, when the model provides them */
  logits?: Float32Array
  classCount?: number
}

export interface Backbone {
  readonly id: string
  run(pixels: Float32Array, count: number, height: number, width: number, channels: number): Promise<BackboneOutput>
  close(): void
}

export interface BackboneSpec {
  kind: 'tfjs-graph' | 'tfjs-layers' | 'synthetic'
  /** model directory for tfjs kinds; free-form identifier otherwise */
  source?: string
  id?: string
  /** synthetic only */
  dim?: number
  classCount?: number
  seed?: number
}

/** Deterministic random-projection feature extractor for offline tests. */
class SyntheticBackbone implements Backbone {
  readonly id: string
  private readonly dim: number
  private readonly classCount: number
  private readonly seed: number
  private projection: Float32Array | null = null
  private head: Float32Array | null = null
  private inputSize = 0

  constructor(spec: BackboneSpec) {
    this.dim = spec.dim ?? 16
    this.classCount = spec.classCount ?? 0
    this.seed = spec.seed ?? 0
    this.id = spec.id ?? `synthetic-backbone-d${this.dim}`
  }

  private ensureWeights(inputSize: number): void {
    if (this.projection && this.inputSize === inputSize) return
    this.inputSize = inputSize
    let state = (this.seed + 0x9e3779b9) >>> 0
    const next = () => {
      state = (state + 0x6d2b79f5) >>> 0
      let t = state
      t = Math.imul(t ^ (t >>> 15), t | 1)
      t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
      return ((t ^ (t >>> 14)) >>> 0) / 4294967296 - 0.5
    }
    this.projection = new Float32Array(inputSize * this.dim)
    for (let i = 0; i < this.projection.length; i++) this.projection[i] = next() * 0.2
    if (this.classCount > 0) {
      this.head = new Float32Array(this.dim * this.classCount)
      for (let i = 0; i < this.head.length; i++) this.head[i] = next() * 0.5
    }
  }

  async run(pixels: Float32Array, count: number, height: number, width: number, channels: number): Promise<BackboneOutput> {
    const inputSize = height * width * channels
    this.ensureWeights(inputSize)
    const features = new Float32Array(count * this.dim)
    for (let i = 0; i < count; i++) {
      for (let d = 0; d < this.dim; d++) {
        let acc = 0
        for (let j = 0; j < inputSize; j++) {
          acc += pixels[i * inputSize + j] * this.projection![j * this.dim + d]
        }
        features[i * this.dim + d] = Math.tanh(acc)
      }
    }
    let logits: Float32Array | undefined
    if (this.head) {
      logits = new Float32Array(count * this.classCount)
      for (let i = 0; i < count; i++) {
        for (let k = 0; k < this.classCount; k++) {
          let acc = 0
          for (let d = 0; d < this.dim; d++) {
            acc += features[i * this.dim + d] * this.head[d * this.classCount + k]
          }
          logits[i * this.classCount + k] = acc
        }
      }
    }
    return { features, dim: this.dim, logits, classCount: this.classCount || undefined }
  }

  close(): void {}
}

type Tf = typeof import('@tensorflow/tfjs')

/** tf.io handler reading model.json + weight shards from a local directory. */
function directoryIoHandler(tf: Tf, dir: string) {
  return {
    load: async () => {
      const modelJson = JSON.parse(readFileSync(join(dir, 'model.json'), 'utf-8'))
      const manifest = modelJson.weightsManifest ?? []
      const specs: unknown[] = []
      const buffers: Buffer[] = []
      for (const group of manifest) {
        specs.push(...group.weights)
        for (const path of group.paths) buffers.push(readFileSync(join(dir, path)))
      }
      const weightData = Buffer.concat(buffers)
      return {
        modelTopology: modelJson.modelTopology,
        format: modelJson.format,
        generatedBy: modelJson.generatedBy,
        convertedBy: modelJson.convertedBy,
        weightSpecs: specs,
        weightData: weightData.buffer.slice(
          weightData.byteOffset,
          weightData.byteOffset + weightData.byteLength,
        ),
        signature: modelJson.signature,
        userDefinedMetadata: modelJson.userDefinedMetadata,
      }
    },
  }
}

class TfjsBackbone implements Backbone {
  readonly id: string

  private constructor(
    private readonly tf: Tf,
    private readonly model: { predict(x: unknown): unknown; dispose?: () => void },
    id: string,
  ) {
    this.id = id
  }

  static async load(spec: BackboneSpec): Promise<TfjsBackbone> {
    if (!spec.source) throw new BackboneError(`${spec.kind}: a model directory is required`)
    let tf: Tf
    try {
      tf = await import('@tensorflow/tfjs')
    } catch (err) {
      throw new BackboneError(`@tensorflow/tfjs is not installed: ${String(err)}`)
    }
    const handler = directoryIoHandler(tf, spec.source)
    try {
      const model =
        spec.kind === 'tfjs-graph'
          ? await tf.loadGraphModel(handler as never)
          : await tf.loadLayersModel(handler as never)
      return new TfjsBackbone(tf, model as never, spec.id ?? spec.source)
    } catch (err) {
      throw new BackboneError(`failed to load ${spec.kind} model from ${spec.source}: ${String(err)}`)
    }
  }

  async run(pixels: Float32Array, count: number, height: number, width: number, channels: number): Promise<BackboneOutput> {
    const tf = this.tf
    const out = tf.tidy(() => {
      const input = tf.tensor4d(pixels, [count, height, width, channels])
      let result = this.model.predict(input) as InstanceType<Tf['Tensor']>
      if (Array.isArray(result)) result = result[0]
      if (result.rank === 4) {
        result = tf.mean(result as never, [1, 2]) as never // global average pool
      }
      if (result.rank !== 2) {
        throw new BackboneError(`model output has rank ${result.rank}; expected 2 or 4`)
      }
      return result as never
    }) as { dataSync(): Float32Array; shape: number[]; dispose(): void }
    const features = Float32Array.from(out.dataSync())
    const dim = out.shape[1]
    out.dispose()
    return { features, dim }
  }

  close(): void {
    this.model.dispose?.()
  }
}

export async function loadBackbone(spec: BackboneSpec): Promise<Backbone> {
  switch (spec.kind) {
    case 'synthetic':
      return new SyntheticBackbone(spec)
    case 'tfjs-graph':
    case 'tfjs-layers':
      return TfjsBackbone.load(spec)
    default:
      throw new BackboneError(`unknown backbone kind ${(spec as { kind: string }).kind}`)
  }
}
