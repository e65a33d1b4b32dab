"""CT-like volume storage, intensity windowing, and patch extraction.

On-disk container: ``<name>.volj`` is a small JSON header (dims, spacing,
dtype, blob file name) next to ``<name>.volb`` holding the raw little-endian
blob. Volumes store signed 16-bit HU values; the same container with dtype
``f64le`` carries float tensors such as serialized training pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataFormatError, UsageError

DTYPES = {"i16le": "<i2", "f64le": "<f8"}

# Display window for liver parenchyma, in HU. Applied wherever a slice is
# normalized to [0, 1] and not otherwise specified.
DEFAULT_WINDOW_CENTER = 100.0
DEFAULT_WINDOW_WIDTH = 400.0


@dataclass
class Volume:
    """(z, y, x) stack of signed 16-bit HU values with voxel spacing in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    hu: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"volume dims must all be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"voxel spacing must be > 0, got {self.spacing}")
        self.hu = np.asarray(self.hu, dtype=np.int16).reshape(self.dims)


def _header_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".volj" else path.with_suffix(".volj")


def save_tensor_file(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype="i16le"):
    """Write a 3-D array as a .volj/.volb pair; returns the header path."""
    if dtype not in DTYPES:
        raise ConfigError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    header = _header_path(path)
    blob = header.with_suffix(".volb")
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise UsageError(f"tensor files are 3-D, got shape {arr.shape}")
    arr.astype(DTYPES[dtype]).tofile(blob)
    doc = {
        "dims": [int(d) for d in arr.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "blob": blob.name,
    }
    with open(header, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    return header


def load_tensor_file(path):
    """Read a .volj/.volb pair; returns (array, spacing, dtype)."""
    header = _header_path(path)
    if not header.exists():
        raise DataFormatError(f"volume header not found: {header}")
    with open(header) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"malformed volume header {header}: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "blob"):
        if key not in doc:
            raise DataFormatError(f"volume header {header} missing key {key!r}")
    if doc["dtype"] not in DTYPES:
        raise DataFormatError(f"volume header {header} has unknown dtype {doc['dtype']!r}")
    blob = header.parent / doc["blob"]
    if not blob.exists():
        raise DataFormatError(f"volume blob not found: {blob}")
    arr = np.fromfile(blob, dtype=DTYPES[doc["dtype"]])
    dims = tuple(int(d) for d in doc["dims"])
    expected = int(np.prod(dims))
    if arr.size != expected:
        raise DataFormatError(
            f"volume blob {blob} holds {arr.size} values but header dims "
            f"{dims} require {expected}"
        )
    return arr.reshape(dims), tuple(float(s) for s in doc["spacing"]), doc["dtype"]


def save_volume(volume: Volume, path):
    return save_tensor_file(path, volume.hu, volume.spacing, dtype="i16le")


def load_volume(path) -> Volume:
    arr, spacing, dtype = load_tensor_file(path)
    if dtype != "i16le":
        raise DataFormatError(f"{path}: expected an i16le volume, found {dtype}")
    return Volume(dims=arr.shape, spacing=spacing, hu=arr)


# ---------------------------------------------------------------------------
# windowing and slice access
# ---------------------------------------------------------------------------


def window_normalize(hu, center: float = DEFAULT_WINDOW_CENTER,
                     width: float = DEFAULT_WINDOW_WIDTH) -> np.ndarray:
    """Map HU values through a display window onto [0, 1]."""
    if width <= 0:
        raise ConfigError(f"window width must be > 0, got {width}")
    lo = center - width / 2.0
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / width, 0.0, 1.0)


def window_denormalize(values, center: float = DEFAULT_WINDOW_CENTER,
                       width: float = DEFAULT_WINDOW_WIDTH) -> np.ndarray:
    """Inverse of :func:`window_normalize` (up to the clamp), rounded to int16."""
    if width <= 0:
        raise ConfigError(f"window width must be > 0, got {width}")
    lo = center - width / 2.0
    hu = np.rint(np.asarray(values, dtype=np.float64) * width + lo)
    return hu.astype(np.int16)


def extract_slice(volume: Volume, z: int, center: float = DEFAULT_WINDOW_CENTER,
                  width: float = DEFAULT_WINDOW_WIDTH):
    """Return (windowed [0,1] slice, raw int16 plane) at index ``z``."""
    if not 0 <= z < volume.dims[0]:
        raise UsageError(f"slice index {z} out of range for {volume.dims[0]} slices")
    plane = volume.hu[z]
    return window_normalize(plane, center, width), plane


def resample_grid(h, w, out_size):
    rows = (np.arange(out_size) + 0.5) * (h / out_size) - 0.5
    cols = (np.arange(out_size) + 0.5) * (w / out_size) - 0.5
    return np.meshgrid(rows, cols, indexing="ij")


def crop_patch(image: np.ndarray, mask: np.ndarray, bbox, margin: int = 0,
               out_size: int = 64):
    """Crop ``bbox`` expanded by ``margin``, resample to ``out_size`` square.

    The intensity patch is resampled bilinearly; the mask uses nearest
    neighbour and is re-thresholded so the output stays strictly {0, 1}.
    ``bbox`` is (row0, col0, row1, col1), half-open.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise UsageError(f"image {image.shape} and mask {mask.shape} differ")
    if out_size < 8:
        raise ConfigError(f"out_size must be >= 8, got {out_size}")
    r0, c0, r1, c1 = (int(v) for v in bbox)
    if r1 <= r0 or c1 <= c0:
        raise UsageError(f"empty bbox {bbox}")
    h, w = image.shape
    r0 = max(0, r0 - margin)
    c0 = max(0, c0 - margin)
    r1 = min(h, r1 + margin)
    c1 = min(w, c1 + margin)
    if r1 <= r0 or c1 <= c0:
        raise UsageError(f"bbox {bbox} lies outside the image")

    rows, cols = resample_grid(r1 - r0, c1 - c0, out_size)
    coords = np.stack([rows + r0, cols + c0])
    patch = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    mask_rs = ndimage.map_coordinates(mask.astype(np.float64), coords, order=0,
                                      mode="constant", cval=0.0)
    return patch, (mask_rs >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM export (display only)
# ---------------------------------------------------------------------------


def write_pgm(path, image):
    """8-bit binary PGM for quick visual inspection; lossy by design."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise UsageError(f"PGM export expects a 2-D image, got shape {arr.shape}")
    hi = arr.max()
    if hi > 1.0:
        arr = arr / hi  # label masks and similar small-integer images
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
