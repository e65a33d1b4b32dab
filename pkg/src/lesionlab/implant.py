"""Stochastic lesion implantation into liver slices.

The augmentation loop: draw a random pose (rotation, scale, placement,
intensity shift) for a source lesion, warp its mask and edge channels, ask a
synthesizer for the appearance, and feather-blend the result into the slice
while relabeling the covered liver pixels as lesion. Placement is rejection
sampled so implants always land on liver and never overlap existing lesions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import corpus as corpus_io
from .corpus import Corpus, LESION, LIVER
from .errors import (
    ConfigError,
    ContainmentError,
    DegenerateResult,
    PlacementFailure,
    UsageError,
)
from .pairs import LesionPair, compose_conditional
from .volumes import resample_grid

log = logging.getLogger(__name__)

SAMPLE_ATTEMPTS = 50
FEATHER_SIGMA = 1.0
CANVAS_PAD = 4  # blend canvas margin; must cover the 3-sigma feather reach
MEAN_CLAMP = (0.05, 0.95)
SYNTH_MARGIN_FRACTION = 0.25


@dataclass
class AugmentRanges:
    rotation: tuple[float, float] = (0.0, 2.0 * np.pi)
    scale: tuple[float, float] = (0.5, 1.5)
    mean_shift: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("rotation", "scale", "mean_shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range [{lo}, {hi}] is not ordered")
        if self.scale[0] <= 0:
            raise ConfigError(f"scale must stay positive, got {self.scale}")


@dataclass
class ImplantSpec:
    rotation: float
    scale: float
    center: tuple[int, int]
    mean_shift: float
    source_pair_id: tuple

    def to_dict(self) -> dict:
        return {
            "rotation": float(self.rotation),
            "scale": float(self.scale),
            "center": [int(self.center[0]), int(self.center[1])],
            "mean_shift": float(self.mean_shift),
            "source_pair_id": list(self.source_pair_id),
        }

    @classmethod
    def from_dict(cls, doc) -> "ImplantSpec":
        return cls(doc["rotation"], doc["scale"], tuple(doc["center"]),
                   doc["mean_shift"], tuple(doc["source_pair_id"]))


@dataclass
class AugmentedSlice:
    image: np.ndarray
    label: np.ndarray
    implanted: list[ImplantSpec] = field(default_factory=list)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _warp(mask: np.ndarray, rotation: float, scale: float, companion=None,
          pad: int = 1):
    """Rotate+scale a binary mask about its centroid by inverse mapping.

    Returns (warped mask, warped companion or None). The canvas is the
    transformed support bounding box expanded by ``pad``; the mask is
    bilinearly resampled and re-thresholded at 0.5, the companion channel is
    nearest-neighbour resampled so thin structures survive.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be > 0, got {scale}")
    mask = np.asarray(mask)
    pts = np.argwhere(mask > 0).astype(np.float64)
    if len(pts) == 0:
        raise DegenerateResult("cannot transform an empty mask")
    centroid = pts.mean(axis=0)
    cos_t, sin_t = np.cos(rotation), np.sin(rotation)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])

    forward = (rot @ ((pts - centroid).T * scale)).T
    lo = np.floor(forward.min(axis=0)).astype(int) - pad
    hi = np.ceil(forward.max(axis=0)).astype(int) + pad
    out_h, out_w = int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1)

    # The canvas anchor keeps the centroid's sub-pixel phase, so the identity
    # transform samples at exact integer coordinates and reproduces the mask.
    phase = centroid - np.floor(centroid)
    rows, cols = np.mgrid[0:out_h, 0:out_w]
    rel = np.stack([rows + lo[0] - phase[0], cols + lo[1] - phase[1]])
    rel = rel.reshape(2, -1)
    src = (rot.T @ rel) / scale + centroid[:, None]
    coords = src.reshape(2, out_h, out_w)

    sampled = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1,
                                      mode="constant", cval=0.0)
    warped = (sampled >= 0.5).astype(np.uint8)
    if not warped.any():
        raise DegenerateResult(
            f"transformed support vanished (scale {scale}, rotation {rotation})"
        )
    warped_companion = None
    if companion is not None:
        comp = ndimage.map_coordinates(np.asarray(companion, dtype=np.float64),
                                       coords, order=0, mode="constant", cval=0.0)
        warped_companion = ((comp >= 0.5) & (warped > 0)).astype(np.uint8)
    return warped, warped_companion, lo


def _tight_crop(mask: np.ndarray, *others):
    rows = np.any(mask, axis=1).nonzero()[0]
    cols = np.any(mask, axis=0).nonzero()[0]
    sel = np.s_[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return (mask[sel],) + tuple(o[sel] for o in others)


def transform_mask(mask: np.ndarray, rotation: float, scale: float) -> np.ndarray:
    """Warped binary mask on a canvas sized to fit the transformed support."""
    warped, _, _ = _warp(mask, rotation, scale)
    return _tight_crop(warped)[0]


# ---------------------------------------------------------------------------
# placement sampling
# ---------------------------------------------------------------------------


def _placed_support(warped: np.ndarray, center, image_shape):
    """Slice-frame coordinates of a warped support centred at ``center``.

    Returns (rows, cols, offset) or None when the placement leaves the image.
    """
    pts = np.argwhere(warped > 0)
    centroid = pts.mean(axis=0)
    # floor(x + 0.5) rounding commutes with integer translation, unlike rint
    offset = np.floor(
        np.asarray(center, dtype=np.float64) - centroid + 0.5
    ).astype(int)
    rows = pts[:, 0] + offset[0]
    cols = pts[:, 1] + offset[1]
    h, w = image_shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
        return None
    return rows, cols, offset


def sample_spec(rng: np.random.Generator, liver_mask: np.ndarray,
                lesion_mask: np.ndarray, ranges: AugmentRanges,
                source_pair_id: tuple = ()) -> ImplantSpec:
    """Rejection-sample one implant pose with full liver containment.

    Draws rotation, scale, mean shift, and a uniformly random liver pixel as
    target centre; accepts when every pixel of the transformed support lands
    on liver (so no background spill and no overlap with existing lesions,
    which are labelled 2 and therefore absent from ``liver_mask``).
    """
    liver_mask = np.asarray(liver_mask) > 0
    liver_idx = np.argwhere(liver_mask)
    if len(liver_idx) == 0:
        raise UsageError("liver region is empty; nothing to implant into")
    for _ in range(SAMPLE_ATTEMPTS):
        rotation = rng.uniform(*ranges.rotation)
        scale = rng.uniform(*ranges.scale)
        mean_shift = rng.uniform(*ranges.mean_shift)
        center = tuple(int(v) for v in liver_idx[rng.integers(len(liver_idx))])
        try:
            warped, _, _ = _warp(lesion_mask, rotation, scale)
        except DegenerateResult:
            continue
        placed = _placed_support(warped, center, liver_mask.shape)
        if placed is None:
            continue
        rows, cols, _ = placed
        if liver_mask[rows, cols].all():
            return ImplantSpec(rotation, scale, center, mean_shift,
                               tuple(source_pair_id))
    raise PlacementFailure(
        f"no admissible placement found in {SAMPLE_ATTEMPTS} attempts"
    )


# ---------------------------------------------------------------------------
# implantation
# ---------------------------------------------------------------------------


def _forward_extent(mask, rotation, scale):
    """Bounding-box size of the transformed support, without resampling."""
    pts = np.argwhere(np.asarray(mask) > 0).astype(np.float64)
    if len(pts) == 0:
        raise DegenerateResult("cannot transform an empty mask")
    centroid = pts.mean(axis=0)
    cos_t, sin_t = np.cos(rotation), np.sin(rotation)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    fwd = (rot @ ((pts - centroid).T * scale)).T
    size = np.ceil(fwd.max(axis=0)) - np.floor(fwd.min(axis=0)) + 1
    return int(size[0]), int(size[1])


def implant(slice_image: np.ndarray, label: np.ndarray, spec: ImplantSpec,
            synthesizer, pair: LesionPair) -> AugmentedSlice:
    """Blend one synthesized lesion into a slice and update its label.

    ``synthesizer`` maps a ConditionalMap to an appearance patch; any
    stochasticity must already be bound into the callable. Pixels outside the
    feather ring of the implant are bit-identical to the input.
    """
    slice_image = np.asarray(slice_image, dtype=np.float64)
    label = np.asarray(label)
    patch_size = pair.source.size

    # Canvas pad covers both the synthesis frame margin and the feather reach.
    ext_h, ext_w = _forward_extent(pair.source.shape_mask, spec.rotation,
                                   spec.scale)
    margin = int(round(SYNTH_MARGIN_FRACTION * max(ext_h, ext_w)))
    warped_mask, warped_edges, _ = _warp(
        pair.source.shape_mask, spec.rotation, spec.scale,
        companion=pair.source.edge_mask, pad=margin + CANVAS_PAD,
    )
    placed = _placed_support(warped_mask, spec.center, slice_image.shape)
    if placed is None:
        raise ContainmentError("implant support does not fit inside the image")
    rows, cols, offset = placed
    if not (label[rows, cols] == LIVER).all():
        raise ContainmentError(
            "implant support is not fully contained in liver-labelled pixels"
        )

    # Synthesis runs in the same frame convention the training pairs used:
    # support bbox plus a 25% margin, resampled to the patch size.
    crop_rows = np.any(warped_mask, axis=1).nonzero()[0]
    crop_cols = np.any(warped_mask, axis=0).nonzero()[0]
    fr0 = max(0, crop_rows[0] - margin)
    fc0 = max(0, crop_cols[0] - margin)
    fr1 = min(warped_mask.shape[0], crop_rows[-1] + 1 + margin)
    fc1 = min(warped_mask.shape[1], crop_cols[-1] + 1 + margin)
    frame = np.s_[fr0:fr1, fc0:fc1]
    grid = np.stack(resample_grid(fr1 - fr0, fc1 - fc0, patch_size))
    mask_rs = ndimage.map_coordinates(warped_mask[frame].astype(np.float64),
                                      grid, order=0, mode="constant", cval=0.0)
    edges_rs = ndimage.map_coordinates(warped_edges[frame].astype(np.float64),
                                       grid, order=0, mode="constant", cval=0.0)
    mask_rs = (mask_rs >= 0.5).astype(np.uint8)
    if not mask_rs.any():
        raise DegenerateResult("synthesis frame lost the lesion support")
    mean = float(np.clip(pair.source.mean + spec.mean_shift, *MEAN_CLAMP))
    cmap = compose_conditional(mask_rs, mean, (edges_rs >= 0.5).astype(np.uint8))
    appearance = np.asarray(synthesizer(cmap), dtype=np.float64)
    if appearance.shape != (patch_size, patch_size):
        raise ContainmentError(
            f"synthesizer returned shape {appearance.shape}, "
            f"expected {(patch_size, patch_size)}"
        )

    # Resample the appearance back onto the warped canvas frame.
    fh, fw = fr1 - fr0, fc1 - fc0
    rows_g = (np.arange(fh) + 0.5) * (patch_size / fh) - 0.5
    cols_g = (np.arange(fw) + 0.5) * (patch_size / fw) - 0.5
    back_grid = np.stack(np.meshgrid(rows_g, cols_g, indexing="ij"))
    canvas_patch = np.zeros_like(warped_mask, dtype=np.float64)
    canvas_patch[frame] = ndimage.map_coordinates(appearance, back_grid,
                                                  order=1, mode="nearest")

    alpha = ndimage.gaussian_filter(warped_mask.astype(np.float64),
                                    FEATHER_SIGMA, mode="constant", truncate=3.0)

    out_image = slice_image.copy()
    out_label = label.copy()
    ch, cw = warped_mask.shape
    h, w = slice_image.shape
    win_r0, win_c0 = offset[0], offset[1]
    dst_rows = slice(max(0, win_r0), min(h, win_r0 + ch))
    dst_cols = slice(max(0, win_c0), min(w, win_c0 + cw))
    src_rows = slice(dst_rows.start - win_r0, dst_rows.stop - win_r0)
    src_cols = slice(dst_cols.start - win_c0, dst_cols.stop - win_c0)

    a = alpha[src_rows, src_cols]
    p = canvas_patch[src_rows, src_cols]
    window = out_image[dst_rows, dst_cols]
    touched = a > 0
    window[touched] = np.clip(
        a[touched] * p[touched] + (1.0 - a[touched]) * window[touched], 0.0, 1.0
    )
    out_image[dst_rows, dst_cols] = window
    out_label[rows, cols] = LESION
    return AugmentedSlice(out_image, out_label, [spec])


# ---------------------------------------------------------------------------
# corpus-level augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    """Slice selection and per-slice lesion budget for corpus augmentation."""

    pairs: list
    target_count: int | None = None  # None: match the corpus real-lesion count
    lesions_per_slice: tuple[int, int] = (1, 3)
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    max_rounds_factor: int = 20

    def __post_init__(self):
        lo, hi = self.lesions_per_slice
        if lo > hi or lo < 0:
            raise ConfigError(f"lesions_per_slice range [{lo}, {hi}] invalid")
        if self.target_count is not None and self.target_count < 0:
            raise ConfigError("target_count must be >= 0")


def augment_corpus(corpus: Corpus, synthesizer, rng: np.random.Generator,
                   policy: AugmentPolicy, out_dir) -> dict:
    """Implant synthetic lesions across a corpus until the target is reached.

    Slices are picked at random among liver-bearing ones and receive 1-3
    implants per visit (policy-configurable); the loop stops at the target
    synthetic-lesion count or after a bounded number of rounds, whichever
    comes first. Writes the augmented corpus plus ``augment_manifest.json``
    and returns the manifest.
    """
    out_dir = Path(out_dir)
    if policy.target_count is None:
        target = corpus.total_lesions()
    else:
        target = policy.target_count
    bound_synth = lambda cmap: synthesizer(cmap, rng)  # noqa: E731

    real_lesions = {i: corpus.lesion_count(i) for i in corpus.indices}
    labels = {}
    images = {}
    implants: dict[int, list[ImplantSpec]] = {i: [] for i in corpus.indices}

    def label_of(i):
        if i not in labels:
            labels[i] = corpus.label(i)
        return labels[i]

    def image_of(i):
        if i not in images:
            images[i] = corpus.image(i)
        return images[i]

    eligible = [i for i in corpus.indices if (label_of(i) == LIVER).any()]
    if target > 0 and not eligible:
        raise UsageError("corpus has no liver-bearing slices to implant into")

    placed = skipped = rounds = 0
    max_rounds = policy.max_rounds_factor * max(target, 1)
    lo, hi = policy.lesions_per_slice
    while placed < target and rounds < max_rounds:
        rounds += 1
        index = eligible[rng.integers(len(eligible))]
        budget = int(rng.integers(lo, hi, endpoint=True)) if hi > lo else lo
        budget = min(budget, target - placed)
        for _ in range(budget):
            pair = policy.pairs[rng.integers(len(policy.pairs))]
            try:
                spec = sample_spec(rng, label_of(index) == LIVER,
                                   pair.source.shape_mask, policy.ranges,
                                   source_pair_id=pair.provenance)
            except PlacementFailure:
                skipped += 1
                continue
            result = implant(image_of(index), label_of(index), spec,
                             bound_synth, pair)
            images[index], labels[index] = result.image, result.label
            implants[index].append(spec)
            placed += 1
            if placed >= target:
                break

    if placed < target:
        log.warning("augmentation reached %d of %d implants (%d skips)",
                    placed, target, skipped)

    # Untouched slices are copied verbatim; touched ones are re-quantized.
    untouched = [i for i in corpus.indices if not implants[i]]
    if untouched:
        corpus_io.copy_entries(corpus.root, out_dir, untouched)
    for index in corpus.indices:
        if implants[index]:
            corpus_io.write_entry(out_dir, index, images[index], labels[index])

    slice_stats = []
    for index in corpus.indices:
        label = label_of(index) if index in labels else corpus.label(index)
        _, n_lesions = corpus_io.lesion_components(label)
        slice_stats.append({
            "index": index,
            "lesion_count": int(n_lesions),
            "real_lesions": real_lesions[index],
            "implants": [s.to_dict() for s in implants[index]],
            "lesion_area": int((label == LESION).sum()),
            "liver_area": int((label == LIVER).sum()),
        })
    manifest = {
        "kind": "augmented-corpus",
        "source": str(corpus.root),
        "target_count": int(target),
        "placed": int(placed),
        "skipped": int(skipped),
        "slices": slice_stats,
        "total_lesions": int(sum(s["lesion_count"] for s in slice_stats)),
    }
    corpus_io.dump_json(manifest, out_dir / "augment_manifest.json")
    corpus_io.dump_json(
        {
            "kind": "augmented-corpus",
            "n_slices": len(corpus.indices),
            "slices": [{k: s[k] for k in
                        ("index", "lesion_count", "lesion_area", "liver_area")}
                       for s in slice_stats],
            "total_lesions": manifest["total_lesions"],
        },
        out_dir / corpus_io.MANIFEST,
    )
    return manifest
