"""Volumes, the DVOL file format, synthetic phantoms and the dataset manifest."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KNOWN_MODALITIES = ("CT", "T1", "T2", "FLAIR", "T1CE", "SYNTH_A", "SYNTH_B", "SYNTH_C")
SPLITS = ("train", "val", "test")

DVOL_MAGIC = b"DVOL"
DVOL_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Malformed DVOL or manifest content."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModalityTag(str):
    """Modality name, stored upper-case so comparisons ignore case."""

    def __new__(cls, name):
        name = str(name).strip()
        if not name:
            raise ValueError("modality tag must be nonempty")
        return super().__new__(cls, name.upper())


@dataclass
class Volume:
    voxels: np.ndarray  # (D, H, W) float32, D slowest
    modality: ModalityTag

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        self.modality = ModalityTag(self.modality)

    @property
    def dims(self):
        return self.voxels.shape

    @property
    def intensity_range(self):
        return float(self.voxels.min()), float(self.voxels.max())

    def with_voxels(self, voxels):
        return Volume(voxels, self.modality)


def normalize(voxels):
    """Min-max scale to [0, 1]; constant inputs map to zeros."""
    v = np.asarray(voxels, dtype=np.float32)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def save_volume(path, volume):
    d, h, w = volume.dims
    name = str(volume.modality).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DVOL_MAGIC, DVOL_VERSION, d, h, w))
        f.write(struct.pack("<H", len(name)))
        f.write(name)
        f.write(volume.voxels.astype("<f4").tobytes())


def read_dvol(path):
    """Parse a DVOL file without touching intensities."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 2:
        raise FormatError(f"{path}: truncated header", len(raw))
    magic, version, d, h, w = _HEADER.unpack_from(raw, 0)
    if magic != DVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != DVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if 0 in (d, h, w):
        raise FormatError(f"{path}: zero dimension {(d, h, w)}", 8)
    pos = _HEADER.size
    (name_len,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if len(raw) < pos + name_len:
        raise FormatError(f"{path}: truncated modality string", len(raw))
    try:
        modality = raw[pos : pos + name_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: modality is not UTF-8", pos) from exc
    if not modality.strip():
        raise FormatError(f"{path}: empty modality string", _HEADER.size)
    pos += name_len
    count = d * h * w
    if len(raw) - pos != 4 * count:
        raise FormatError(
            f"{path}: payload holds {len(raw) - pos} bytes, expected {4 * count}", pos
        )
    voxels = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(d, h, w)
    return Volume(voxels.astype(np.float32), modality)


def load_volume(path, normalize_intensities=True):
    vol = read_dvol(path)
    if normalize_intensities:
        vol.voxels = normalize(vol.voxels)
    return vol


# -- synthetic phantoms ----------------------------------------------------

_GAMMA = {"CT": 1.0, "T1": 0.5, "T1CE": 2.0}
_INVERTED = {"SYNTH_B", "T2", "FLAIR"}


def _modality_transform(base, modality):
    m = ModalityTag(modality)
    if m == "SYNTH_A":
        return base
    if m == "SYNTH_B":
        return 1.0 - base
    if m == "SYNTH_C":
        return np.sqrt(base)
    if m in _GAMMA:
        return base ** _GAMMA[m]
    if m in _INVERTED:
        return (1.0 - base) ** (2.0 if m == "FLAIR" else 1.0)
    # user-supplied names get a stable gamma in [0.5, 2]
    gamma = 0.5 * 4.0 ** ((zlib.crc32(m.encode()) % 1000) / 999.0)
    return base**gamma


def synth_volume(seed, modality, dims=(32, 32, 32)):
    """Ellipsoid phantom; returns ``(Volume, labels)``.

    The geometry and base intensities depend on ``seed`` only; ``modality``
    applies a monotone intensity transform, so one seed gives identical label
    volumes across modalities.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"synth_volume needs 3 dims of at least 8 voxels, got {dims}")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 5))
    background = rng.uniform(0.05, 0.2)
    levels = rng.permutation(np.linspace(0.4, 1.0, 4))[:count]
    grids = np.meshgrid(*(np.arange(n) + 0.5 for n in dims), indexing="ij")

    base = np.full(dims, background)
    labels = np.zeros(dims, dtype=np.int32)
    for k in range(count):
        center = rng.uniform(0.25, 0.75, size=3) * dims
        radii = rng.uniform(0.1, 0.3, size=3) * dims
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)) <= 1.0
        base[inside] = levels[k]
        labels[inside] = k + 1
    # gentle shading so patches are not piecewise constant
    shade = 0.05 * np.sin(2 * np.pi * grids[0] / dims[0] + rng.uniform(0, 2 * np.pi))
    base = np.clip(base + shade * (labels > 0), 0.0, 1.0)
    voxels = normalize(_modality_transform(base, modality))
    return Volume(voxels, modality), labels


def random_crop(volume, size, rng, labels=None):
    """Uniformly placed contiguous sub-volume (and matching label crop)."""
    size = tuple(int(s) for s in size)
    if any(s > n or s < 1 for s, n in zip(size, volume.dims)):
        raise ValueError(f"crop {size} does not fit volume {volume.dims}")
    offsets = [int(rng.integers(0, n - s + 1)) for s, n in zip(size, volume.dims)]
    sl = tuple(slice(o, o + s) for o, s in zip(offsets, size))
    cropped = volume.with_voxels(volume.voxels[sl])
    if labels is None:
        return cropped
    return cropped, np.ascontiguousarray(labels[sl])


# -- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    modality: ModalityTag
    split: str


class Manifest:
    def __init__(self, entries, root="."):
        self.entries = list(entries)
        self.root = Path(root)
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise FormatError(f"duplicate manifest path {e.path!r}")
            if e.split not in SPLITS:
                raise FormatError(f"unknown split {e.split!r} for {e.path!r}")
            seen.add(e.path)

    @classmethod
    def parse(cls, text, root="."):
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"manifest line {lineno}: expected 3 tab-separated fields")
            path, modality, split = fields
            try:
                tag = ModalityTag(modality)
            except ValueError as exc:
                raise FormatError(f"manifest line {lineno}: {exc}") from None
            if split not in SPLITS:
                raise FormatError(f"manifest line {lineno}: unknown split {split!r}")
            entries.append(ManifestEntry(path, tag, split))
        return cls(entries, root)

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), root=path.parent)

    def dump(self):
        lines = ["# path\tmodality\tsplit"]
        lines += [f"{e.path}\t{e.modality}\t{e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dump(), encoding="utf-8")

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def modalities(self, split=None):
        entries = self.entries if split is None else self.split(split)
        return sorted({e.modality for e in entries})

    def __len__(self):
        return len(self.entries)


def label_path(path):
    """Label volumes live next to their image: ``x.dvol`` -> ``x.label.dvol``."""
    p = Path(path)
    return p.with_name(p.stem + ".label" + p.suffix)


def synth_corpus(out_dir, count, modalities, dims=(40, 40, 40), seed=0, val_fraction=0.2,
                 test_fraction=0.0):
    """Write ``count`` phantoms per modality plus labels and a manifest.

    Phantom ``i`` shares its geometry across modalities. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val = int(round(count * val_fraction))
    n_test = int(round(count * test_fraction))
    entries = []
    for i in range(count):
        split = "val" if i < n_val else "test" if i < n_val + n_test else "train"
        for m in modalities:
            tag = ModalityTag(m)
            vol, labels = synth_volume(seed * 1_000_003 + i, tag, dims)
            name = f"{tag.lower()}_{i:04d}.dvol"
            save_volume(out_dir / name, vol)
            save_volume(out_dir / label_path(name), Volume(labels.astype(np.float32), "LABEL"))
            entries.append(ManifestEntry(name, tag, split))
    manifest = Manifest(entries, out_dir)
    path = out_dir / "manifest.tsv"
    manifest.save(path)
    return path


def load_labels(path):
    lp = label_path(path)
    if not os.path.exists(lp):
        raise FileNotFoundError(f"missing label volume {lp}")
    return read_dvol(lp).voxels.astype(np.int32)
