"""Volume file I/O, dataset manifests, and synthetic volumes with planted signal.

Volume file format ("VOL1"):
    bytes 0..3   magic b"VOL1"
    bytes 4..15  D, H, W as little-endian uint32
    bytes 16..   D*H*W little-endian float32 voxels, C order

Manifests are CSV files with columns subject_id,path,label; paths are
resolved relative to the manifest's directory.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

VOLUME_MAGIC = b"VOL1"
# Guard against absurd headers before allocating: 512^3 voxels is far beyond
# anything this desk-scale pipeline handles.
MAX_VOXELS = 512 ** 3


class VolumeIOError(ValueError):
    """Base class for volume file problems."""


class BadMagicError(VolumeIOError):
    pass


class TruncatedVolumeError(VolumeIOError):
    pass


class ShapeOverflowError(VolumeIOError):
    pass


@dataclass
class Volume:
    """A 3D scalar field with its manifest identity."""

    data: np.ndarray
    subject_id: str = ""
    label: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite voxels")


def write_volume(path: str | Path, volume: Volume | np.ndarray) -> None:
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    if data.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {data.shape}")
    d, h, w = data.shape
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<III", d, h, w))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 4 or header[:4] != VOLUME_MAGIC:
            raise BadMagicError(f"{path}: not a VOL1 file")
        if len(header) < 16:
            raise TruncatedVolumeError(f"{path}: header truncated at {len(header)} bytes")
        d, h, w = struct.unpack("<III", header[4:16])
        count = d * h * w
        if count == 0 or count > MAX_VOXELS:
            raise ShapeOverflowError(f"{path}: declared shape {(d, h, w)} is out of range")
        raw = f.read(4 * count)
        if len(raw) < 4 * count:
            raise TruncatedVolumeError(
                f"{path}: expected {4 * count} voxel bytes, found {len(raw)}"
            )
    return np.frombuffer(raw, dtype="<f4").reshape(d, h, w).astype(np.float32)


@dataclass
class VolumeDataset:
    """In-memory dataset: stacked volumes plus labels and subject ids."""

    volumes: np.ndarray  # [N, D, H, W] float32
    labels: np.ndarray  # [N] int64 in {0,1}
    subject_ids: list[str]

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.subject_ids) != len(self.labels) or len(self.labels) != len(self.volumes):
            raise ValueError("dataset arrays disagree on subject count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(self.volumes.shape[1:])

    def subset(self, indices: Sequence[int]) -> "VolumeDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return VolumeDataset(self.volumes[idx], self.labels[idx], [self.subject_ids[i] for i in idx])


@dataclass
class SynthConfig:
    """Planted-signal generator settings.

    Label-1 volumes get their mean shifted by -effect_size inside the signal
    patches, mimicking a regional density decrease.
    """

    volume_shape: tuple[int, int, int] = (32, 32, 32)
    patch_shape: tuple[int, int, int] = (16, 16, 16)
    signal_patches: tuple[int, ...] = (0, 7)
    effect_size: float = 0.5
    noise_sigma: float = 0.1
    subjects_per_class: tuple[int, int] = (120, 120)
    seed: int = 0

    def __post_init__(self):
        if self.effect_size < 0 or self.noise_sigma < 0:
            raise ValueError("effect_size and noise_sigma must be non-negative")
        counts = [vs // ps for vs, ps in zip(self.volume_shape, self.patch_shape)]
        total = counts[0] * counts[1] * counts[2]
        for idx in self.signal_patches:
            if not 0 <= idx < total:
                raise ValueError(f"signal patch index {idx} out of range for {total} patches")


def base_field(shape: tuple[int, int, int]) -> np.ndarray:
    """Smooth anatomy-like background: a separable low-frequency cosine bump.

    b(i; n) = cos(pi * ((i + 0.5)/n - 0.5)) per axis, product over axes,
    rescaled into [0.2, 0.8].
    """
    axes = []
    for n in shape:
        u = (np.arange(n, dtype=np.float64) + 0.5) / n
        axes.append(np.cos(np.pi * (u - 0.5)))
    bump = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return (0.2 + 0.6 * bump).astype(np.float32)


def _patch_slices(volume_shape, patch_shape):
    counts = [vs // ps for vs, ps in zip(volume_shape, patch_shape)]
    slices = []
    for iz in range(counts[0]):
        for iy in range(counts[1]):
            for ix in range(counts[2]):
                slices.append((
                    slice(iz * patch_shape[0], (iz + 1) * patch_shape[0]),
                    slice(iy * patch_shape[1], (iy + 1) * patch_shape[1]),
                    slice(ix * patch_shape[2], (ix + 1) * patch_shape[2]),
                ))
    return slices


def generate_synthetic(config: SynthConfig) -> VolumeDataset:
    """Deterministic per seed; with effect_size 0 both classes share one distribution."""
    n0, n1 = config.subjects_per_class
    if n0 <= 0 or n1 <= 0:
        raise ValueError("both classes need at least one subject")
    for vs, ps in zip(config.volume_shape, config.patch_shape):
        if vs % ps != 0:
            raise ValueError(f"patch shape {config.patch_shape} does not divide volume {config.volume_shape}")
    rng = np.random.default_rng(config.seed)
    background = base_field(config.volume_shape)
    slices = _patch_slices(config.volume_shape, config.patch_shape)
    n = n0 + n1
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    volumes = np.empty((n, *config.volume_shape), dtype=np.float32)
    for i in range(n):
        vol = background + config.noise_sigma * rng.standard_normal(config.volume_shape).astype(np.float32)
        if labels[i] == 1:
            for p in config.signal_patches:
                vol[slices[p]] -= config.effect_size
        volumes[i] = vol
    ids = [f"s{i:04d}" for i in range(n)]
    return VolumeDataset(volumes, labels, ids)


def write_dataset(directory: str | Path, dataset: VolumeDataset) -> Path:
    """Write one .vol file per subject plus manifest.csv; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "path", "label"])
        for i, sid in enumerate(dataset.subject_ids):
            fname = f"{sid}.vol"
            write_volume(directory / fname, dataset.volumes[i])
            writer.writerow([sid, fname, int(dataset.labels[i])])
    return manifest


@dataclass
class ManifestEntry:
    subject_id: str
    path: Path
    label: int


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse and validate a manifest; volume files are read later, on demand."""
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is not None:
            missing = {"subject_id", "path", "label"} - set(reader.fieldnames)
            if missing:
                raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        for row in reader:
            sid = row["subject_id"].strip()
            if sid in seen:
                raise ValueError(f"{path}: duplicate subject_id {sid!r}")
            seen.add(sid)
            raw_label = row["label"].strip()
            if raw_label not in ("0", "1"):
                raise ValueError(f"{path}: label for {sid!r} must be 0 or 1, got {raw_label!r}")
            vol_path = Path(row["path"].strip())
            if not vol_path.is_absolute():
                vol_path = path.parent / vol_path
            entries.append(ManifestEntry(sid, vol_path, int(raw_label)))
    return entries


def load_dataset(manifest_path: str | Path) -> VolumeDataset:
    entries = load_manifest(manifest_path)
    if not entries:
        return VolumeDataset(np.zeros((0, 1, 1, 1), dtype=np.float32), np.zeros(0, dtype=np.int64), [])
    volumes = []
    shape = None
    for e in entries:
        vol = read_volume(e.path)
        if shape is None:
            shape = vol.shape
        elif vol.shape != shape:
            raise ValueError(f"{e.path}: shape {vol.shape} differs from manifest's first volume {shape}")
        volumes.append(vol)
    return VolumeDataset(np.stack(volumes), np.array([e.label for e in entries]), [e.subject_id for e in entries])


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "path", "label"])
        for e in entries:
            rel = os.path.relpath(os.path.abspath(e.path), os.path.abspath(path.parent))
            writer.writerow([e.subject_id, rel, e.label])
