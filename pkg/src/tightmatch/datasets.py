"""Synthetic domain-shift generators and simple file loaders."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .divergence import SampleSet

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801


class DatasetError(Exception):
    pass


@dataclass
class ShiftSpec:
    kind: str  # rotation | translation | class-conditional-shift
    magnitude: float = 0.0
    noise: float = 0.0
    direction: tuple | None = None  # translation direction, defaults to +e1

    def __post_init__(self):
        if self.kind not in ("rotation", "translation", "class-conditional-shift"):
            raise DatasetError(f"unknown shift kind {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise DatasetError("magnitude must be finite")
        if self.noise < 0:
            raise DatasetError("noise must be >= 0")


def gen_two_moons(n: int, noise: float, seed: int) -> SampleSet:
    """Two interleaved unit half-circles with n/2 points per class.

    Class 0 sweeps the upper arc centered on the origin, class 1 the
    lower arc centered on (1, 0.5), the classic layout.
    """
    if n < 2 or n % 2 != 0:
        raise DatasetError(f"n must be even and >= 2, got {n}")
    if noise < 0:
        raise DatasetError("noise must be >= 0")
    half = n // 2
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    feats = np.vstack([upper, lower])
    if noise > 0:
        feats = feats + rng.normal(0.0, noise, size=feats.shape)
    labels = np.concatenate([np.zeros(half, dtype=np.int64),
                             np.ones(half, dtype=np.int64)])
    return SampleSet(feats, labels)


def apply_shift(s: SampleSet, spec: ShiftSpec, seed: int = 0) -> SampleSet:
    """Rotate, translate or class-shift a sample set; labels are preserved."""
    feats = s.features
    if spec.kind == "rotation":
        if s.dim != 2:
            raise DatasetError(f"rotation needs 2-d features, got d={s.dim}")
        theta = np.deg2rad(spec.magnitude)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        shifted = feats @ rot.T
    elif spec.kind == "translation":
        direction = np.asarray(spec.direction if spec.direction is not None
                               else [1.0] + [0.0] * (s.dim - 1), dtype=np.float64)
        if direction.shape != (s.dim,):
            raise DatasetError("translation direction dimension mismatch")
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise DatasetError("translation direction must be nonzero")
        shifted = feats + spec.magnitude * direction / norm
    else:  # class-conditional-shift
        if s.labels is None:
            raise DatasetError("class-conditional shift needs labels")
        rng = np.random.default_rng(seed)
        shifted = feats.copy()
        for c in np.unique(s.labels):
            offset = rng.normal(size=s.dim)
            offset *= spec.magnitude / np.linalg.norm(offset)
            shifted[s.labels == c] += offset
    if spec.noise > 0:
        rng = np.random.default_rng(seed + 1)
        shifted = shifted + rng.normal(0.0, spec.noise, size=shifted.shape)
    labels = None if s.labels is None else s.labels.copy()
    return SampleSet(shifted, labels, domain_tag=s.domain_tag)


def load_csv(path) -> SampleSet:
    """One sample per row, comma-separated, last column an integer label."""
    rows = []
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise DatasetError(f"{path}: row {lineno}: need features plus a label")
            try:
                rows.append([float(c) for c in cells[:-1]])
                labels.append(int(cells[-1]))
            except ValueError as err:
                raise DatasetError(f"{path}: row {lineno}: non-numeric cell ({err})") from None
            if len(rows[-1]) != len(rows[0]):
                raise DatasetError(f"{path}: row {lineno}: column count changed")
    if not rows:
        raise DatasetError(f"{path}: empty file")
    return SampleSet(np.array(rows), np.array(labels, dtype=np.int64))


def _read_exact(fh, nbytes, path, what):
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise DatasetError(f"{path}: truncated while reading {what} at byte offset {fh.tell() - len(buf)}")
    return buf


def load_idx(image_path, label_path) -> SampleSet:
    """Classic big-endian IDX3/IDX1 digit files; pixels scaled to [0, 1]."""
    with open(image_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, image_path, "header"))
        if magic != IDX3_MAGIC:
            raise DatasetError(f"{image_path}: bad IDX3 magic 0x{magic:08x}, expected 0x{IDX3_MAGIC:08x}")
        pixels = np.frombuffer(
            _read_exact(fh, count * rows * cols, image_path, "pixel data"), dtype=np.uint8)
    with open(label_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, label_path, "header"))
        if magic != IDX1_MAGIC:
            raise DatasetError(f"{label_path}: bad IDX1 magic 0x{magic:08x}, expected 0x{IDX1_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, label_count, label_path, "labels"), dtype=np.uint8)
    if count != label_count:
        raise DatasetError(f"image count {count} != label count {label_count}")
    feats = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return SampleSet(feats, labels.astype(np.int64))


def write_idx(s: SampleSet, image_path, label_path, rows: int, cols: int):
    """Inverse of load_idx for round-trip checks; features must be in [0, 1]."""
    if rows * cols != s.dim:
        raise DatasetError(f"{rows}x{cols} does not match feature dim {s.dim}")
    if s.labels is None:
        raise DatasetError("labels required to write IDX1")
    pixels = np.rint(s.features * 255.0).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX3_MAGIC, s.n, rows, cols))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX1_MAGIC, s.n))
        fh.write(s.labels.astype(np.uint8).tobytes())


def standardize(s: SampleSet, stats=None):
    """Per-feature zero mean / unit variance; zero-variance features are
    centered only. Pass the source stats when standardizing the target."""
    if stats is None:
        if s.n < 2:
            raise DatasetError("need >= 2 samples to compute stats")
        mean = s.features.mean(axis=0)
        std = s.features.std(axis=0)
        stats = (mean, std)
    mean, std = stats
    scale = np.where(std > 0, std, 1.0)
    labels = None if s.labels is None else s.labels.copy()
    return SampleSet((s.features - mean) / scale, labels, domain_tag=s.domain_tag), stats
