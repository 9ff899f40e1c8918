"""Synthetic multimodal phantoms, preprocessing, and bit-exact volume IO.

A phantom is an ellipsoidal foreground ("brain") containing strictly nested
ellipsoidal lesion shells. Voxel intensity in modality m is the class mean
from an intensity table plus Gaussian noise, applied inside the foreground
only; background stays exactly zero. The default table gives every adjacent
class pair a contrast gap in exactly one modality and makes it iso-intense
in the others, so no single modality can separate all classes.

Volumes are stored in a little-endian binary format (magic "HFTV"): a
float32 intensities file and a uint8 labels file per sample, listed in a
plain-text manifest as `<sample-id> <intensities-path> <labels-path>`.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

VOLUME_MAGIC = b"HFTV"
VOLUME_VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2


class VolumeError(Exception):
    """Volume file is malformed, truncated, or from an unsupported version."""


class DataError(Exception):
    """Phantom configuration or preprocessing is invalid."""


@dataclass
class VolumeSample:
    """Aligned multimodal intensities with labels and a foreground mask."""

    modalities: np.ndarray  # (N, W, H, D) float32
    labels: np.ndarray      # (W, H, D) uint8 class indices
    foreground: np.ndarray  # (W, H, D) bool
    spacing: tuple[float, float, float]

    def validate(self) -> None:
        if self.modalities.ndim != 4:
            raise DataError(f"modalities must be (N, W, H, D), got "
                            f"{self.modalities.shape}")
        extents = self.modalities.shape[1:]
        if self.labels.shape != extents or self.foreground.shape != extents:
            raise DataError("labels/foreground extents disagree with modalities")
        if np.any((self.labels > 0) & ~self.foreground):
            raise DataError("labels are nonzero outside the foreground")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.modalities.shape[1:])


def build_intensity_table(num_classes: int, n: int, base: float = 1.0,
                          contrast: float = 0.6) -> np.ndarray:
    """Default per-class per-modality means.

    Background is zero. Class c >= 2 raises modality (c-2) mod n by
    `contrast` relative to class c-1, so each adjacent lesion pair differs
    in exactly one modality and matches in all others.
    """
    table = np.zeros((num_classes, n), dtype=np.float64)
    for c in range(1, num_classes):
        row = np.full(n, base)
        for j in range(2, c + 1):
            row[(j - 2) % n] += contrast
        table[c] = row
    return table


@dataclass
class PhantomConfig:
    """Geometry, contrast, and noise settings for one synthetic sample."""

    n: int = 2
    extents: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 5
    sigma: float = 0.1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    table: np.ndarray | None = None
    fg_semiaxis_frac: tuple[float, float] = (0.55, 0.7)
    lesion_frac: tuple[float, float] = (0.55, 0.7)
    shrink: tuple[float, float] = (0.74, 0.82)
    jitter_frac: float = 0.25

    def resolved_table(self) -> np.ndarray:
        if self.table is None:
            return build_intensity_table(self.num_classes, self.n)
        return np.asarray(self.table, dtype=np.float64)

    def validate(self) -> None:
        if self.n < 1:
            raise DataError("phantom needs at least one modality")
        if any(v < 16 or v % 16 for v in self.extents):
            raise DataError(f"extents {self.extents} must be multiples of 16")
        if self.num_classes < 3:
            raise DataError("phantom needs background, tissue, and a lesion class")
        if self.sigma < 0:
            raise DataError("noise sigma must be nonnegative")
        table = self.resolved_table()
        if table.shape != (self.num_classes, self.n):
            raise DataError(f"intensity table shape {table.shape} != "
                            f"({self.num_classes}, {self.n})")
        if np.any(table[0] != 0):
            raise DataError("background intensity row must be zero")
        # Separability rule: every adjacent class pair needs one modality
        # with a mean gap of at least 3 sigma (and above zero).
        floor = max(3.0 * self.sigma, 1e-9)
        for c in range(self.num_classes - 1):
            gap = np.abs(table[c + 1] - table[c]).max()
            if gap < floor:
                raise DataError(
                    f"classes {c} and {c + 1} are not separable: "
                    f"best modality gap {gap:.4f} < {floor:.4f}")


def _ellipsoid_mask(extents, center, semiaxes) -> np.ndarray:
    grids = np.indices(extents, dtype=np.float64)
    q = np.zeros(extents, dtype=np.float64)
    for g, c, a in zip(grids, center, semiaxes):
        q += ((g - c) / a) ** 2
    return q <= 1.0


def _nested_inside(outer_center, outer_axes, center, axes) -> bool:
    # Sufficient containment test for axis-aligned ellipsoids: center offset
    # measured in the outer ellipsoid's norm plus the largest axis ratio.
    off = math.sqrt(sum(((c2 - c1) / a) ** 2
                        for c1, a, c2 in zip(outer_center, outer_axes, center)))
    ratio = max(b / a for a, b in zip(outer_axes, axes))
    return off + ratio <= 1.0


def generate_phantom(config: PhantomConfig) -> VolumeSample:
    """Deterministic phantom from the config seed.

    Label c means: 0 background, 1 tissue, then one class per lesion shell
    from outermost to innermost; inner shells overwrite outer ones, so the
    class-c-and-above masks are strictly nested.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    extents = config.extents
    half = [v / 2.0 for v in extents]

    fg_center = half
    fg_axes = [rng.uniform(*config.fg_semiaxis_frac) * h for h in half]

    def place(outer_center, outer_axes, frac_range):
        frac = rng.uniform(*frac_range)
        axes = [frac * a for a in outer_axes]
        center = [c + rng.uniform(-1.0, 1.0) * config.jitter_frac * (a - b)
                  for c, a, b in zip(outer_center, outer_axes, axes)]
        if not _nested_inside(outer_center, outer_axes, center, axes):
            raise DataError("lesion shell cannot be nested within placement ranges")
        return center, axes

    num_shells = config.num_classes - 2
    shells = []
    center, axes = fg_center, fg_axes
    for s in range(num_shells):
        frac_range = config.lesion_frac if s == 0 else config.shrink
        center, axes = place(center, axes, frac_range)
        shells.append((center, axes))

    foreground = _ellipsoid_mask(extents, fg_center, fg_axes)
    labels = np.zeros(extents, dtype=np.uint8)
    labels[foreground] = 1
    prev = foreground
    for s, (center, axes) in enumerate(shells):
        mask = _ellipsoid_mask(extents, center, axes) & foreground
        if not mask.any() or not (prev & ~mask).any():
            raise DataError(
                f"lesion shell {s + 1} degenerates on a {extents} grid")
        labels[mask] = 2 + s
        prev = mask

    table = config.resolved_table()
    intensities = table[labels].transpose(3, 0, 1, 2)  # (N, W, H, D)
    noise = rng.normal(0.0, config.sigma, size=intensities.shape)
    intensities = intensities + noise * foreground[None]
    sample = VolumeSample(
        modalities=intensities.astype(np.float32),
        labels=labels,
        foreground=foreground,
        spacing=tuple(float(s) for s in config.spacing),
    )
    sample.validate()
    return sample


def zscore_normalize(sample: VolumeSample) -> VolumeSample:
    """Standardize each modality over the foreground; background stays 0."""
    fg = sample.foreground
    if not fg.any():
        raise DataError("cannot normalize a sample with empty foreground")
    out = np.zeros_like(sample.modalities)
    for m in range(sample.modalities.shape[0]):
        vals = sample.modalities[m][fg].astype(np.float64)
        sd = vals.std()
        if sd < 1e-8:
            raise DataError(f"modality {m} is constant over the foreground")
        out[m][fg] = ((vals - vals.mean()) / sd).astype(np.float32)
    return replace(sample, modalities=out,
                   labels=sample.labels.copy(),
                   foreground=sample.foreground.copy())


# ---------------------------------------------------------------------------
# volume files and manifests
# ---------------------------------------------------------------------------

def _write_array(path, arr: np.ndarray, dtype_code: int,
                 spacing: Sequence[float]) -> None:
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<BBB", VOLUME_VERSION, dtype_code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<3f", *spacing))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise VolumeError(f"volume file truncated while reading {what}")
    return buf


def _read_array(path, expect_code: int) -> tuple[np.ndarray, tuple[float, ...]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != VOLUME_MAGIC:
            raise VolumeError(
                f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
        version, code, rank = struct.unpack("<BBB", _read_exact(fh, 3, "header"))
        if version != VOLUME_VERSION:
            raise VolumeError(f"unsupported volume version {version}")
        if code != expect_code:
            raise VolumeError(f"dtype code {code}, expected {expect_code}")
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
        spacing = struct.unpack("<3f", _read_exact(fh, 12, "spacing"))
        np_dtype = "<f4" if code == DTYPE_F32 else np.uint8
        count = int(math.prod(shape))
        itemsize = np.dtype(np_dtype).itemsize
        payload = _read_exact(fh, count * itemsize, "payload")
        if fh.read(1):
            raise VolumeError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return arr, spacing


def volume_paths(stem) -> tuple[str, str]:
    return f"{stem}.img.hftv", f"{stem}.lab.hftv"


def write_volume(sample: VolumeSample, stem) -> tuple[str, str]:
    """Write `<stem>.img.hftv` (f32 intensities) and `<stem>.lab.hftv`
    (u8 labels); returns the two paths for the manifest."""
    sample.validate()
    img_path, lab_path = volume_paths(stem)
    _write_array(img_path, sample.modalities.astype("<f4", copy=False),
                 DTYPE_F32, sample.spacing)
    _write_array(lab_path, sample.labels, DTYPE_U8, sample.spacing)
    return img_path, lab_path


def load_sample(img_path, lab_path) -> VolumeSample:
    modalities, spacing = _read_array(img_path, DTYPE_F32)
    labels, lab_spacing = _read_array(lab_path, DTYPE_U8)
    if modalities.ndim != 4 or labels.ndim != 3:
        raise VolumeError("intensities must be rank 4 and labels rank 3")
    if tuple(modalities.shape[1:]) != labels.shape:
        raise VolumeError("intensities and labels extents disagree")
    if spacing != lab_spacing:
        raise VolumeError("intensities and labels spacing disagree")
    # Tissue class covers the whole brain region, so labels > 0 is exactly
    # the stored sample's foreground.
    return VolumeSample(
        modalities=modalities.astype(np.float32, copy=False),
        labels=labels.astype(np.uint8, copy=False),
        foreground=labels > 0,
        spacing=tuple(float(s) for s in spacing),
    )


def read_volume(stem) -> VolumeSample:
    img_path, lab_path = volume_paths(stem)
    return load_sample(img_path, lab_path)


def write_manifest(entries: Sequence[tuple[str, str, str]], path) -> None:
    """One `<sample-id> <intensities-path> <labels-path>` line per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, img, lab in entries:
            fh.write(f"{sample_id} {img} {lab}\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Entries with paths resolved relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise VolumeError(f"manifest line {lineno} is not "
                                  f"'<id> <intensities> <labels>': {raw!r}")
            entries.append((parts[0], resolve(parts[1]), resolve(parts[2])))
    return entries


def load_dataset(manifest_path) -> list[tuple[str, VolumeSample]]:
    return [(sample_id, load_sample(img, lab))
            for sample_id, img, lab in read_manifest(manifest_path)]


# ---------------------------------------------------------------------------
# splitting and padding
# ---------------------------------------------------------------------------

def kfold_split(n: int, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Deterministic k-fold partition; fold sizes differ by at most one."""
    if not 2 <= k <= n:
        raise DataError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds = []
    start = 0
    for size in sizes:
        folds.append(sorted(int(i) for i in perm[start:start + size]))
        start += size
    out = []
    for i, val in enumerate(folds):
        train = sorted(idx for j, f in enumerate(folds) if j != i for idx in f)
        out.append((train, val))
    return out


def pad_to_multiple(sample: VolumeSample, m: int = 16
                    ) -> tuple[VolumeSample, tuple[int, int, int]]:
    """Zero-pad each axis at the high side up to the next multiple of m."""
    extents = sample.extents
    target = tuple(-(-v // m) * m for v in extents)
    if target == extents:
        return sample, extents
    pad = [(0, t - v) for t, v in zip(target, extents)]
    return replace(
        sample,
        modalities=np.pad(sample.modalities, [(0, 0)] + pad),
        labels=np.pad(sample.labels, pad),
        foreground=np.pad(sample.foreground, pad),
    ), extents


def crop_to_extents(sample: VolumeSample,
                    extents: tuple[int, int, int]) -> VolumeSample:
    """Inverse of pad_to_multiple."""
    w, h, d = extents
    return replace(
        sample,
        modalities=sample.modalities[:, :w, :h, :d].copy(),
        labels=sample.labels[:w, :h, :d].copy(),
        foreground=sample.foreground[:w, :h, :d].copy(),
    )
