"""Conditional lesion maps and the paired training dataset.

A conditional map compresses a lesion patch into three planes: its binary
shape mask, the mask times the mean interior intensity, and the strong-edge
mask. Pairing each map with the real patch it came from gives the
source/target samples the translation network trains on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import corpus as corpus_io
from .edges import canny
from .errors import ConfigError, DataFormatError, UsageError
from .volumes import crop_patch, load_tensor_file, save_tensor_file

log = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 64
MIN_COMPONENT_AREA = 9
BBOX_MARGIN_FRACTION = 0.25
PAIR_INDEX = "pairs.json"


@dataclass
class ConditionalMap:
    """3 x S x S conditioning planes: shape, mean-intensity fill, edges."""

    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ConfigError(
                f"conditional map must be 3xHxW, got {self.channels.shape}"
            )

    @property
    def shape_mask(self) -> np.ndarray:
        return self.channels[0]

    @property
    def mean_fill(self) -> np.ndarray:
        return self.channels[1]

    @property
    def edge_mask(self) -> np.ndarray:
        return self.channels[2]

    @property
    def size(self) -> int:
        return self.channels.shape[1]

    @property
    def mean(self) -> float:
        inside = self.shape_mask > 0
        return float(self.mean_fill[inside][0]) if inside.any() else 0.0


@dataclass
class LesionPair:
    source: ConditionalMap
    target: np.ndarray
    provenance: tuple  # (corpus id, slice index, lesion index)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.shape != self.source.shape_mask.shape:
            raise ConfigError(
                f"pair source {self.source.shape_mask.shape} and target "
                f"{self.target.shape} sizes differ"
            )


def mean_intensity(patch: np.ndarray, mask: np.ndarray) -> float:
    """Arithmetic mean of patch values under a nonempty binary mask."""
    patch = np.asarray(patch, dtype=np.float64)
    mask = np.asarray(mask)
    if patch.shape != mask.shape:
        raise UsageError(f"patch {patch.shape} and mask {mask.shape} differ")
    selected = patch[mask > 0]
    if selected.size == 0:
        raise UsageError("mean_intensity over an empty mask")
    return float(selected.mean())


def compose_conditional(mask: np.ndarray, mean: float, edges: np.ndarray) -> ConditionalMap:
    """Assemble the three planes; edge pixels outside the mask are dropped."""
    mask = (np.asarray(mask) > 0).astype(np.float64)
    edges = (np.asarray(edges) > 0).astype(np.float64)
    if mask.shape != edges.shape:
        raise ConfigError(f"mask {mask.shape} and edges {edges.shape} differ")
    if not 0.0 < mean < 1.0:
        raise ConfigError(f"mean intensity must lie in (0, 1), got {mean}")
    return ConditionalMap(np.stack([mask, mask * mean, edges * mask]))


def render_sketch(cmap: ConditionalMap) -> np.ndarray:
    """Single-image visualization: mean fill inside the mask, edges at 1.0."""
    sketch = cmap.mean_fill.copy()
    sketch[cmap.edge_mask > 0] = 1.0
    return sketch


def _component_bbox(component: np.ndarray):
    rows = np.any(component, axis=1).nonzero()[0]
    cols = np.any(component, axis=0).nonzero()[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def pairs_from_slice(image: np.ndarray, label: np.ndarray, patch_size: int,
                     provenance_prefix: tuple) -> list[LesionPair]:
    """One pair per sufficiently large 8-connected lesion component."""
    components, count = corpus_io.lesion_components(label)
    out = []
    for comp_id in range(1, count + 1):
        component = components == comp_id
        if component.sum() < MIN_COMPONENT_AREA:
            continue
        r0, c0, r1, c1 = _component_bbox(component)
        margin = int(round(BBOX_MARGIN_FRACTION * max(r1 - r0, c1 - c0)))
        patch, mask_rs = crop_patch(image, component, (r0, c0, r1, c1),
                                    margin=margin, out_size=patch_size)
        if not mask_rs.any():
            continue
        mean = mean_intensity(patch, mask_rs)
        if not 0.0 < mean < 1.0:
            log.warning("skipping degenerate component with mean %.3f", mean)
            continue
        edge_mask = canny(patch)
        cmap = compose_conditional(mask_rs, mean, edge_mask)
        out.append(LesionPair(cmap, patch, provenance_prefix + (comp_id - 1,)))
    return out


def build_pairs(corpus: corpus_io.Corpus, patch_size: int = DEFAULT_PATCH_SIZE,
                indices=None) -> list[LesionPair]:
    """Extract all lesion pairs from a corpus, in deterministic slice order."""
    if patch_size < 8:
        raise ConfigError(f"patch_size must be >= 8, got {patch_size}")
    corpus_id = corpus.root.name
    pairs: list[LesionPair] = []
    for index in (corpus.indices if indices is None else sorted(indices)):
        label = corpus.label(index)
        if not (label == corpus_io.LESION).any():
            continue
        image = corpus.image(index)
        pairs.extend(pairs_from_slice(image, label, patch_size, (corpus_id, index)))
    if not pairs:
        log.warning("corpus %s yielded no lesion pairs", corpus.root)
    return pairs


# ---------------------------------------------------------------------------
# on-disk pair dataset
# ---------------------------------------------------------------------------


def save_pairs(pairs: list[LesionPair], out_dir):
    """Serialize pairs as 4-channel f64 tensors plus a provenance index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, pair in enumerate(pairs):
        stacked = np.concatenate([pair.source.channels, pair.target[None]])
        name = f"pair_{i:05d}"
        save_tensor_file(out_dir / name, stacked, dtype="f64le")
        index.append({
            "file": f"{name}.volj",
            "provenance": list(pair.provenance),
            "mean": pair.source.mean,
        })
    corpus_io.dump_json({"kind": "lesion-pairs", "pairs": index}, out_dir / PAIR_INDEX)


def load_pairs(path) -> list[LesionPair]:
    path = Path(path)
    doc = corpus_io.load_json(path / PAIR_INDEX)
    if doc.get("kind") != "lesion-pairs":
        raise DataFormatError(f"{path} is not a pair dataset")
    pairs = []
    for entry in doc["pairs"]:
        stacked, _, dtype = load_tensor_file(path / entry["file"])
        if dtype != "f64le" or stacked.shape[0] != 4:
            raise DataFormatError(f"pair tensor {entry['file']} has wrong layout")
        cmap = ConditionalMap(stacked[:3])
        pairs.append(LesionPair(cmap, stacked[3], tuple(entry["provenance"])))
    return pairs
