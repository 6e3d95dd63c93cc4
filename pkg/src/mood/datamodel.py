"""Core data containers, the MOODFD feature-dump format, and synthetic data.

MOODFD is the interchange format between feature producers (the toy encoder
here, or any external backbone) and the scoring/evaluation side. Layout,
little-endian throughout:

    bytes 0-7    ASCII magic "MOODFD1\\n"
    bytes 8-11   u32 version (= 1)
    byte  12     u8 dtype code (1 = float32, 2 = float64)
    byte  13     u8 has_labels (0 or 1)
    bytes 14-15  u16 reserved (= 0)
    bytes 16-23  u64 n_rows
    bytes 24-31  u64 n_cols
    payload      n_rows * n_cols values, row-major, in the declared dtype
    labels       n_rows i32 values, present iff has_labels = 1

Any byte string either parses to a valid :class:`FeatureSet` or raises
:class:`~mood.errors.FormatError`; a partially-decoded result is never
returned.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ValidationError

MAGIC = b"MOODFD1\n"
FORMAT_VERSION = 1
HEADER_LEN = 32
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {"float32": 1, "float64": 2}

STAGES = (
    "gen", "pretrain", "intermediate_ft", "finetune", "extract", "fit", "score", "eval",
    "confusion",
)

MANIFEST_SCHEMA_VERSION = 1


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file + rename, never truncating."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class FeatureSet:
    """A matrix of per-sample feature vectors with optional integer labels."""

    features: np.ndarray
    labels: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if feats.dtype not in (np.float32, np.float64):
            feats = feats.astype(np.float64)
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain non-finite values")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int32)
            if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
                raise ValidationError(
                    f"labels must be a vector of length {feats.shape[0]}, got shape {labels.shape}"
                )
            if np.any(labels < 0):
                raise ValidationError("labels must be >= 0")
            object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_cols(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ImageDataset:
    """A stack of H x W x C images in [0, 1] with class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 4:
            raise ValidationError(f"images must have shape (n, h, w, c), got {images.shape}")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise ValidationError("image values must be finite and in [0, 1]")
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels.shape != (images.shape[0],):
            raise ValidationError("labels must have one entry per image")
        if self.class_count < 1:
            raise ValidationError("class_count must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValidationError("labels must lie in [0, class_count)")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class RunManifest:
    """Provenance record written next to every pipeline output.

    Deliberately timestamp-free so repeated runs of a deterministic stage
    produce byte-identical manifests.
    """

    stage: str
    config_digest: str
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "stage": self.stage,
            "config_digest": self.config_digest,
            "seed": int(self.seed),
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
        }
        if self.extra:
            doc["extra"] = self.extra
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        try:
            return cls(
                stage=doc["stage"],
                config_digest=doc["config_digest"],
                seed=doc["seed"],
                inputs=list(doc.get("inputs", [])),
                outputs=list(doc.get("outputs", [])),
                schema_version=doc.get("schema_version", MANIFEST_SCHEMA_VERSION),
                extra=doc.get("extra", {}),
            )
        except KeyError as exc:
            raise FormatError(f"manifest missing field {exc}") from exc

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, self.to_json().encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())


def config_digest(config: dict) -> str:
    """Hex digest of a canonical JSON rendering of a stage configuration."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_feature_dump(fs: FeatureSet, path: str | Path) -> None:
    """Serialize ``fs`` to ``path`` in the MOODFD format (atomic write)."""
    feats = fs.features
    if not np.all(np.isfinite(feats)):
        raise ValidationError("refusing to dump non-finite feature values")
    kind = "float32" if feats.dtype == np.float32 else "float64"
    code = _CODE_FOR_KIND[kind]
    has_labels = 1 if fs.labels is not None else 0
    header = MAGIC + struct.pack(
        "<IBBHQQ", FORMAT_VERSION, code, has_labels, 0, feats.shape[0], feats.shape[1]
    )
    parts = [header, np.ascontiguousarray(feats, dtype=_DTYPE_CODES[code]).tobytes()]
    if has_labels:
        parts.append(np.ascontiguousarray(fs.labels, dtype="<i4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_feature_dump(path: str | Path) -> FeatureSet:
    """Parse a MOODFD file, rejecting anything malformed."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_LEN:
        raise FormatError(f"{path}: file shorter than the {HEADER_LEN}-byte header")
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, code, has_labels, reserved, n_rows, n_cols = struct.unpack(
        "<IBBHQQ", blob[8:HEADER_LEN]
    )
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unsupported dtype code {code}")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: has_labels flag must be 0 or 1, got {has_labels}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved field must be 0")
    if n_rows < 1 or n_cols < 1:
        raise FormatError(f"{path}: empty matrix ({n_rows} x {n_cols})")
    dtype = _DTYPE_CODES[code]
    data_len = n_rows * n_cols * dtype.itemsize
    label_len = n_rows * 4 if has_labels else 0
    if len(blob) != HEADER_LEN + data_len + label_len:
        raise FormatError(
            f"{path}: expected {HEADER_LEN + data_len + label_len} bytes, found {len(blob)}"
        )
    feats = np.frombuffer(blob, dtype=dtype, count=n_rows * n_cols, offset=HEADER_LEN)
    feats = feats.reshape(n_rows, n_cols).astype(dtype.base, copy=True)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i4", count=n_rows, offset=HEADER_LEN + data_len)
        labels = labels.astype(np.int32, copy=True)
    try:
        return FeatureSet(features=feats, labels=labels, source=str(path))
    except ValidationError as exc:
        raise FormatError(f"{path}: payload violates FeatureSet invariants: {exc}") from exc


_ORIENTATIONS = ((1, 0), (0, 1), (1, 1))
DEFAULT_PATCH_SIZE = 4


def _frequency_bands(side: int) -> tuple[list[int], list[int]]:
    """Disjoint low/high bands of integer cycle counts, excluding DC and Nyquist."""
    usable = list(range(1, side // 2))
    if not usable:
        raise ConfigError(f"side {side} too small for a sinusoidal texture")
    half = max(1, len(usable) // 2)
    return usable[:half], usable[half:]


def class_texture(class_index: int, side: int, ood: bool) -> tuple[int, int]:
    """(fx, fy) integer cycle counts of the texture assigned to a class."""
    low, high = _frequency_bands(side)
    band = high if ood else low
    if not band:
        raise ConfigError(f"side {side} is too small to host a disjoint OOD frequency band")
    if class_index >= 3 * len(band):
        raise ConfigError(
            f"side {side} supports at most {3 * len(band)} distinct "
            f"{'OOD' if ood else 'ID'} class textures"
        )
    freq = band[class_index % len(band)]
    ox, oy = _ORIENTATIONS[(class_index // len(band)) % len(_ORIENTATIONS)]
    return freq * ox, freq * oy


def generate_synthetic(
    class_count: int,
    per_class: int,
    side: int,
    channels: int,
    ood: bool,
    seed: int,
) -> ImageDataset:
    """Deterministic sinusoidal-texture dataset.

    Each class is one fixed (frequency, orientation) sinusoid with a random
    per-image phase plus uniform noise of amplitude 0.1. With ``ood=True``
    the textures come from a frequency band disjoint from the ID band, so
    the two populations have non-overlapping dominant spatial frequencies.
    """
    if class_count < 1 or per_class < 1 or side < 1 or channels < 1:
        raise ConfigError("class_count, per_class, side and channels must be positive")
    if side % DEFAULT_PATCH_SIZE != 0:
        raise ConfigError(f"side must be divisible by the default patch size {DEFAULT_PATCH_SIZE}")
    rng = np.random.Generator(np.random.PCG64(seed))
    coords = np.arange(side, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((class_count * per_class, side, side, channels), dtype=np.float32)
    labels = np.empty(class_count * per_class, dtype=np.int32)
    row = 0
    for c in range(class_count):
        fx, fy = class_texture(c, side, ood)
        for _ in range(per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = 0.5 + 0.4 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) / side + phase)
            noise = rng.uniform(-0.1, 0.1, size=(side, side, channels))
            img = np.clip(wave[:, :, None] + noise, 0.0, 1.0)
            images[row] = img.astype(np.float32)
            labels[row] = c
            row += 1
    return ImageDataset(images=images, labels=labels, class_count=class_count)


def save_dataset(ds: ImageDataset, path: str | Path) -> None:
    """Persist a dataset as a compressed npz archive."""
    import io

    buf = io.BytesIO()
    np.savez_compressed(buf, images=ds.images, labels=ds.labels, class_count=ds.class_count)
    atomic_write_bytes(path, buf.getvalue())


def load_dataset(path: str | Path) -> ImageDataset:
    try:
        with np.load(Path(path)) as archive:
            return ImageDataset(
                images=archive["images"],
                labels=archive["labels"],
                class_count=int(archive["class_count"]),
            )
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a valid dataset archive: {exc}") from exc


def dominant_frequency(image: np.ndarray) -> tuple[int, int]:
    """Canonical (fx, fy) of the strongest non-DC bin of the 2-D spectrum.

    Used to verify that ID and OOD synthetic populations occupy disjoint
    frequency bands.
    """
    plane = np.asarray(image, dtype=np.float64)
    if plane.ndim == 3:
        plane = plane.mean(axis=2)
    side = plane.shape[0]
    spectrum = np.abs(np.fft.fft2(plane))
    spectrum[0, 0] = 0.0
    ky, kx = np.unravel_index(int(np.argmax(spectrum)), spectrum.shape)
    fx = min(kx, side - kx)
    fy = min(ky, side - ky)
    return int(fx), int(fy)
