"""Corpus directory layout shared by the phantom generator and the implanter.

A corpus is::

    <root>/slices/NNNN.volj + .volb   # 1 x H x W int16 HU planes
    <root>/masks/NNNN.volj  + .volb   # 1 x H x W int16 labels {0 bg, 1 liver, 2 lesion}
    <root>/manifest.json

Slice intensities are stored as HU under the default liver window, so a
reader recovers the [0, 1] image with :func:`lesionlab.volumes.window_normalize`.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataFormatError, UsageError
from .volumes import (
    Volume,
    load_volume,
    save_volume,
    window_denormalize,
    window_normalize,
)

MANIFEST = "manifest.json"
EIGHT_CONN = np.ones((3, 3), dtype=bool)

BACKGROUND, LIVER, LESION = 0, 1, 2


def dump_json(obj, path):
    """Canonical JSON serialization: sorted keys, trailing newline."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing JSON file: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"malformed JSON in {path}: {exc}") from exc


def slice_path(root, index: int) -> Path:
    return Path(root) / "slices" / f"{index:04d}.volj"


def mask_path(root, index: int) -> Path:
    return Path(root) / "masks" / f"{index:04d}.volj"


def write_entry(root, index: int, image01: np.ndarray, label: np.ndarray):
    """Store one slice/mask pair; the image is quantized to HU on disk."""
    root = Path(root)
    (root / "slices").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    hu = window_denormalize(image01)
    save_volume(Volume((1,) + hu.shape, (1.0, 1.0, 1.0), hu[None]), slice_path(root, index))
    save_volume(
        Volume((1,) + label.shape, (1.0, 1.0, 1.0), label.astype(np.int16)[None]),
        mask_path(root, index),
    )


def read_image(root, index: int) -> np.ndarray:
    vol = load_volume(slice_path(root, index))
    return window_normalize(vol.hu[0])


def read_label(root, index: int) -> np.ndarray:
    vol = load_volume(mask_path(root, index))
    label = vol.hu[0]
    bad = set(np.unique(label)) - {BACKGROUND, LIVER, LESION}
    if bad:
        raise DataFormatError(
            f"mask {mask_path(root, index)} holds unexpected labels {sorted(bad)}"
        )
    return label.astype(np.uint8)


def lesion_components(label: np.ndarray):
    """8-connected lesion components; returns (component map, count)."""
    return ndimage.label(label == LESION, structure=EIGHT_CONN)


class Corpus:
    """Read-only view over a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        slices_dir = self.root / "slices"
        if not slices_dir.is_dir():
            raise DataFormatError(f"not a corpus directory (no slices/): {self.root}")
        self.indices = sorted(
            int(p.stem) for p in slices_dir.glob("*.volj")
        )
        if not self.indices:
            raise DataFormatError(f"corpus at {self.root} holds no slices")

    def __len__(self):
        return len(self.indices)

    def image(self, index: int) -> np.ndarray:
        return read_image(self.root, index)

    def label(self, index: int) -> np.ndarray:
        return read_label(self.root, index)

    def manifest(self):
        return load_json(self.root / MANIFEST)

    def lesion_count(self, index: int) -> int:
        return lesion_components(self.label(index))[1]

    def total_lesions(self) -> int:
        return sum(self.lesion_count(i) for i in self.indices)

    def content_hash(self) -> str:
        """SHA-256 over all slice and mask bytes, in index order."""
        digest = hashlib.sha256()
        for index in self.indices:
            for p in (slice_path(self.root, index), mask_path(self.root, index)):
                digest.update(p.read_bytes())
                digest.update(p.with_suffix(".volb").read_bytes())
        return digest.hexdigest()


def copy_entries(src_root, dst_root, indices):
    """Materialize a sub-corpus by copying slice/mask files verbatim."""
    src_root, dst_root = Path(src_root), Path(dst_root)
    (dst_root / "slices").mkdir(parents=True, exist_ok=True)
    (dst_root / "masks").mkdir(parents=True, exist_ok=True)
    if not indices:
        raise UsageError("cannot materialize an empty corpus")
    for index in indices:
        for getter in (slice_path, mask_path):
            src = getter(src_root, index)
            dst = getter(dst_root, index)
            dst.write_bytes(src.read_bytes())
            dst.with_suffix(".volb").write_bytes(src.with_suffix(".volb").read_bytes())
