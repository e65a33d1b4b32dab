"""Procedural liver-slice phantoms with exact ground truth.

Each slice holds one smooth liver blob (an ellipse with low-frequency radial
perturbation) and a handful of darker, perturbed-disk lesions strictly inside
it, plus band-limited noise. Generation is deterministic in (seed, index), so
a corpus can be regenerated bit-identically from its manifest.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import corpus as corpus_io
from .corpus import LESION, LIVER
from .errors import ConfigError

BACKGROUND_LEVEL = 0.12
# Minimum separation between the per-slice liver level and any lesion level,
# so the darker-lesion property survives blur and noise.
INTENSITY_GAP = 0.08
EDGE_SOFTEN_SIGMA = 0.7
PLACEMENT_ATTEMPTS = 40


@dataclass
class PhantomSpec:
    image_size: int = 128
    liver_area_fraction: tuple[float, float] = (0.25, 0.45)
    lesions_per_slice: tuple[int, int] = (0, 3)
    lesion_radius_px: tuple[float, float] = (3.0, 12.0)
    liver_intensity: tuple[float, float] = (0.55, 0.03)
    lesion_intensity: tuple[float, float] = (0.35, 0.05)
    noise_sd: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        for name in ("liver_area_fraction", "lesions_per_slice", "lesion_radius_px"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range [{lo}, {hi}] is not ordered")
        if self.lesions_per_slice[0] < 0:
            raise ConfigError("lesions_per_slice cannot be negative")
        for name in ("liver_intensity", "lesion_intensity"):
            mean = getattr(self, name)[0]
            if not 0.0 < mean < 1.0:
                raise ConfigError(f"{name} mean must lie in (0, 1), got {mean}")
        if self.noise_sd < 0:
            raise ConfigError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = list(value)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        fields = dict(doc)
        for key in ("liver_area_fraction", "lesions_per_slice", "lesion_radius_px",
                    "liver_intensity", "lesion_intensity"):
            if key in fields:
                fields[key] = tuple(fields[key])
        return cls(**fields)


def _blob_mask(size, cy, cx, a, b, phi, amps, phases, base_k=2):
    """Rasterize an ellipse whose radius is modulated by cosine harmonics."""
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    dy, dx = rows - cy, cols - cx
    u = np.cos(phi) * dx + np.sin(phi) * dy
    v = -np.sin(phi) * dx + np.cos(phi) * dy
    un, vn = u / a, v / b
    rho = np.hypot(un, vn)
    theta = np.arctan2(vn, un)
    limit = np.ones_like(rho)
    for k, (amp, phase) in enumerate(zip(amps, phases), start=base_k):
        limit += amp * np.cos(k * theta + phase)
    return rho <= limit


def _liver_mask(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    lo, hi = spec.liver_area_fraction
    pad = min(0.02, (hi - lo) / 4.0)
    frac = rng.uniform(lo + pad, hi - pad) if hi > lo else lo
    aspect = rng.uniform(0.75, 1.25)
    phi = rng.uniform(0.0, np.pi)
    amps = rng.uniform(0.0, 0.05, 4)
    phases = rng.uniform(0.0, 2 * np.pi, 4)

    target_area = frac * size * size
    a = np.sqrt(target_area * aspect / np.pi)
    b = target_area / (np.pi * a)

    reach = max(a, b) * (1.0 + amps.sum()) * 1.1 + 2.0
    if reach > size / 2.0 - 1.0:
        shrink = (size / 2.0 - 1.0) / reach
        a, b = a * shrink, b * shrink
        reach = size / 2.0 - 1.0
    wiggle = max(size / 2.0 - reach, 0.0)
    cy = size / 2.0 + rng.uniform(-wiggle, wiggle)
    cx = size / 2.0 + rng.uniform(-wiggle, wiggle)

    mask = _blob_mask(size, cy, cx, a, b, phi, amps, phases)
    measured = mask.sum()
    if measured > 0:
        fix = np.sqrt(target_area / measured)
        mask = _blob_mask(size, cy, cx, a * fix, b * fix, phi, amps, phases)
    return mask


def _place_lesions(spec, rng, liver):
    """Rejection-sample perturbed disks fully inside the liver, no touching."""
    lo, hi = spec.lesions_per_slice
    requested = int(rng.integers(lo, hi, endpoint=True)) if hi > lo else int(lo)
    size = spec.image_size
    taken = np.zeros_like(liver)
    supports = []
    # 1-px erosion keeps lesions off the liver boundary
    interior = ndimage.binary_erosion(liver, structure=corpus_io.EIGHT_CONN)
    liver_idx = np.argwhere(interior)
    if len(liver_idx) == 0:
        return supports
    for _ in range(requested):
        radius = rng.uniform(*spec.lesion_radius_px)
        amps = rng.uniform(0.0, 0.15, 3)
        phases = rng.uniform(0.0, 2 * np.pi, 3)
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cy, cx = liver_idx[rng.integers(len(liver_idx))]
            support = _blob_mask(size, float(cy), float(cx), radius, radius,
                                 0.0, amps, phases)
            if not support.any():
                continue
            if not (support <= interior).all():
                continue
            # 1-px clearance keeps components distinct under 8-connectivity
            grown = ndimage.binary_dilation(support, structure=corpus_io.EIGHT_CONN)
            if (grown & taken).any():
                continue
            supports.append(support)
            taken |= support
            break
    return supports


def gen_slice(spec: PhantomSpec, index: int):
    """Generate (image in [0,1], label mask) deterministically for one index."""
    rng = np.random.default_rng([spec.seed, int(index)])
    liver = _liver_mask(spec, rng)
    supports = _place_lesions(spec, rng, liver)

    liver_level = float(np.clip(rng.normal(*spec.liver_intensity), 0.30, 0.85))
    img = np.full((spec.image_size, spec.image_size), BACKGROUND_LEVEL)
    img[liver] = liver_level
    lesion_total = np.zeros_like(liver)
    for support in supports:
        level = min(rng.normal(*spec.lesion_intensity), liver_level - INTENSITY_GAP)
        img[support] = max(level, 0.05)
        lesion_total |= support

    img = ndimage.gaussian_filter(img, EDGE_SOFTEN_SIGMA, mode="nearest")
    if spec.noise_sd > 0:
        noise = ndimage.gaussian_filter(
            rng.normal(0.0, 1.0, img.shape), 1.0, mode="nearest"
        )
        sd = noise.std()
        if sd > 0:
            img += noise * (spec.noise_sd / sd)
    img = np.clip(img, 0.0, 1.0)

    label = np.zeros(img.shape, dtype=np.uint8)
    label[liver] = LIVER
    label[lesion_total] = LESION
    return img, label


def gen_corpus(spec: PhantomSpec, n_slices: int, out_dir, jobs: int = 1) -> dict:
    """Write ``n_slices`` phantom slices plus a manifest; returns the manifest."""
    if n_slices < 1:
        raise ConfigError(f"n_slices must be >= 1, got {n_slices}")
    out_dir = Path(out_dir)

    def build(index):
        img, label = gen_slice(spec, index)
        corpus_io.write_entry(out_dir, index, img, label)
        _, n_lesions = corpus_io.lesion_components(label)
        return {
            "index": index,
            "lesion_count": int(n_lesions),
            "lesion_area": int((label == LESION).sum()),
            "liver_area": int((label == LIVER).sum()),
        }

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            stats = list(pool.map(build, range(n_slices)))
    else:
        stats = [build(i) for i in range(n_slices)]

    manifest = {
        "kind": "phantom-corpus",
        "spec": spec.to_dict(),
        "n_slices": n_slices,
        "slices": stats,
        "total_lesions": int(sum(s["lesion_count"] for s in stats)),
    }
    corpus_io.dump_json(manifest, out_dir / corpus_io.MANIFEST)
    return manifest
