export { decodeMoodfd, encodeMoodfd, readMoodfd, writeMoodfd, FormatError } from './moodfd.js'
export type { FeatureDump } from './moodfd.js'
export { loadDataset, syntheticDataset, DatasetError } from './datasets.js'
export type { Dataset, DatasetSpec, ImageBatch } from './datasets.js'
export { loadBackbone, BackboneError } from './backbone.js'
export type { Backbone, BackboneOutput, BackboneSpec } from './backbone.js'
export { exportFeatures, parseExportSpec, ExportError } from './export.js'
export type { ExportSpec, ExportResult } from './export.js'
export { configDigest, fileDigest, writeManifest } from './manifest.js'
export type { RunManifest } from './manifest.js'
