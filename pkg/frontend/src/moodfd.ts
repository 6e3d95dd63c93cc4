/**
 * MOODFD binary feature-dump format, byte-compatible with the primary
 * scoring engine. Little-endian throughout:
 *
 *   bytes 0-7    ASCII magic "MOODFD1\n"
 *   bytes 8-11   u32 version = 1
 *   byte  12     u8 dtype code (1 = float32, 2 = float64)
 *   byte  13     u8 has_labels (0/1)
 *   bytes 14-15  u16 reserved = 0
 *   bytes 16-23  u64 n_rows
 *   bytes 24-31  u64 n_cols
 *   payload      n_rows * n_cols values, row-major
 *   labels       n_rows i32, present iff has_labels = 1
 */

import { readFileSync, renameSync, rmSync, writeFileSync } from 'node:fs'
import { dirname, join } from 'node:path'

export const MOODFD_MAGIC = 'MOODFD1\n'
export const MOODFD_VERSION = 1
const HEADER_LEN = 32

export type MoodfdDtype = 'float32' | 'float64'

export interface FeatureDump {
  /** row-major matrix, length rows * cols */
  values: Float32Array | Float64Array
  rows: number
  cols: number
  labels?: Int32Array
}

export class FormatError extends Error {}

function dtypeOf(values: Float32Array | Float64Array): MoodfdDtype {
  return values instanceof Float64Array ? 'float64' : 'float32'
}

export function encodeMoodfd(dump: FeatureDump): Buffer {
  const { rows, cols, values, labels } = dump
  if (rows < 1 || cols < 1 || values.length !== rows * cols) {
    throw new FormatError(`matrix of ${values.length} values does not fill ${rows}x${cols}`)
  }
  for (const v of values) {
    if (!Number.isFinite(v)) throw new FormatError('refusing to dump non-finite values')
  }
  if (labels && labels.length !== rows) {
    throw new FormatError(`expected ${rows} labels, got ${labels.length}`)
  }
  const dtype = dtypeOf(values)
  const itemSize = dtype === 'float64' ? 8 : 4
  const total = HEADER_LEN + rows * cols * itemSize + (labels ? rows * 4 : 0)
  const buf = Buffer.alloc(total)
  buf.write(MOODFD_MAGIC, 0, 'ascii')
  buf.writeUInt32LE(MOODFD_VERSION, 8)
  buf.writeUInt8(dtype === 'float64' ? 2 : 1, 12)
  buf.writeUInt8(labels ? 1 : 0, 13)
  buf.writeUInt16LE(0, 14)
  buf.writeBigUInt64LE(BigInt(rows), 16)
  buf.writeBigUInt64LE(BigInt(cols), 24)
  Buffer.from(values.buffer, values.byteOffset, values.byteLength).copy(buf, HEADER_LEN)
  if (labels) {
    Buffer.from(labels.buffer, labels.byteOffset, labels.byteLength).copy(
      buf,
      HEADER_LEN + rows * cols * itemSize,
    )
  }
  return buf
}

export function decodeMoodfd(blob: Buffer): FeatureDump {
  if (blob.length < HEADER_LEN) throw new FormatError('file shorter than the 32-byte header')
  if (blob.toString('ascii', 0, 8) !== MOODFD_MAGIC) throw new FormatError('bad magic bytes')
  const version = blob.readUInt32LE(8)
  if (version !== MOODFD_VERSION) throw new FormatError(`unsupported version ${version}`)
  const code = blob.readUInt8(12)
  if (code !== 1 && code !== 2) throw new FormatError(`unsupported dtype code ${code}`)
  const hasLabels = blob.readUInt8(13)
  if (hasLabels !== 0 && hasLabels !== 1) {
    throw new FormatError(`has_labels flag must be 0 or 1, got ${hasLabels}`)
  }
  if (blob.readUInt16LE(14) !== 0) throw new FormatError('reserved field must be 0')
  const rows = Number(blob.readBigUInt64LE(16))
  const cols = Number(blob.readBigUInt64LE(24))
  if (rows < 1 || cols < 1) throw new FormatError(`empty matrix (${rows} x ${cols})`)
  const itemSize = code === 2 ? 8 : 4
  const dataLen = rows * cols * itemSize
  const labelLen = hasLabels ? rows * 4 : 0
  if (blob.length !== HEADER_LEN + dataLen + labelLen) {
    throw new FormatError(
      `expected ${HEADER_LEN + dataLen + labelLen} bytes, found ${blob.length}`,
    )
  }
  // copy out of the file buffer so the typed arrays own aligned memory
  const payload = Buffer.allocUnsafe(dataLen)
  blob.copy(payload, 0, HEADER_LEN, HEADER_LEN + dataLen)
  const values =
    code === 2
      ? new Float64Array(payload.buffer, payload.byteOffset, rows * cols)
      : new Float32Array(payload.buffer, payload.byteOffset, rows * cols)
  for (const v of values) {
    if (!Number.isFinite(v)) throw new FormatError('payload contains non-finite values')
  }
  let labels: Int32Array | undefined
  if (hasLabels) {
    const raw = Buffer.allocUnsafe(labelLen)
    blob.copy(raw, 0, HEADER_LEN + dataLen)
    labels = new Int32Array(raw.buffer, raw.byteOffset, rows)
    for (const l of labels) {
      if (l < 0) throw new FormatError('labels must be >= 0')
    }
  }
  return { values, rows, cols, labels }
}

/** Atomic write: temp file in the target directory, then rename. */
export function writeFileAtomic(path: string, data: Buffer | string): void {
  const tmp = join(dirname(path), `.${process.pid}.${Date.now()}.tmp`)
  try {
    writeFileSync(tmp, data)
    renameSync(tmp, path)
  } catch (err) {
    rmSync(tmp, { force: true })
    throw err
  }
}

export function writeMoodfd(path: string, dump: FeatureDump): void {
  writeFileAtomic(path, encodeMoodfd(dump))
}

export function readMoodfd(path: string): FeatureDump {
  return decodeMoodfd(readFileSync(path))
}
