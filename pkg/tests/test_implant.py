import numpy as np
import pytest

from lesionlab.corpus import Corpus
from lesionlab.errors import (
    ConfigError,
    ContainmentError,
    DegenerateResult,
    PlacementFailure,
    UsageError,
)
from lesionlab.implant import (
    AugmentPolicy,
    AugmentRanges,
    ImplantSpec,
    augment_corpus,
    implant,
    sample_spec,
    transform_mask,
)
from lesionlab.pairs import LesionPair, build_pairs, compose_conditional
from lesionlab.phantom import PhantomSpec, gen_corpus
from lesionlab.synthesis import ProceduralSynthesizer


def disk_mask(size, radius, center=None):
    cy, cx = center or (size / 2 - 0.5, size / 2 - 0.5)
    rr, cc = np.mgrid[0:size, 0:size]
    return ((rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2).astype(np.uint8)


def square_pair(size=64, half=10, mean=0.35):
    mask = np.zeros((size, size), dtype=np.uint8)
    lo, hi = size // 2 - half, size // 2 + half
    mask[lo:hi, lo:hi] = 1
    target = np.full((size, size), 0.55)
    target[mask > 0] = mean
    cmap = compose_conditional(mask, mean, np.zeros_like(mask))
    return LesionPair(cmap, target, ("t", 0, 0))


class TestTransformMask:
    def test_identity_transform(self):
        mask = disk_mask(20, 8)
        mask = mask[np.any(mask, axis=1)][:, np.any(mask, axis=0)]  # tight bbox
        out = transform_mask(mask, 0.0, 1.0)
        np.testing.assert_array_equal(out, mask)

    def test_quarter_turn_of_square(self):
        mask = np.ones((9, 13), dtype=np.uint8)
        out = transform_mask(mask, np.pi / 2, 1.0)
        assert out.shape == (13, 9)
        assert out.all()

    def test_scale_area_ratio(self):
        mask = disk_mask(24, 5)
        out = transform_mask(mask, 0.0, 1.4)
        ratio = out.sum() / mask.sum()
        assert abs(ratio - 1.96) / 1.96 < 0.10

    def test_rotation_preserves_area_approximately(self):
        mask = disk_mask(30, 7)
        for angle in (0.3, 1.1, 2.5):
            out = transform_mask(mask, angle, 1.0)
            assert abs(out.sum() - mask.sum()) / mask.sum() < 0.08

    def test_empty_mask_rejected(self):
        with pytest.raises(DegenerateResult):
            transform_mask(np.zeros((8, 8), dtype=np.uint8), 0.0, 1.0)

    def test_extreme_shrink_degenerates(self):
        # thin ring: at tiny scale every sample lands in the hole or outside
        rr, cc = np.mgrid[0:16, 0:16]
        dist = np.hypot(rr - 7.5, cc - 7.5)
        ring = ((dist >= 5.5) & (dist <= 6.5)).astype(np.uint8)
        with pytest.raises(DegenerateResult):
            transform_mask(ring, 0.0, 0.05)

    def test_invalid_scale(self):
        with pytest.raises(ConfigError):
            transform_mask(disk_mask(8, 2), 0.0, 0.0)


class TestSampleSpec:
    def test_unconstrained_placement_accepts(self):
        rng = np.random.default_rng(0)
        liver = np.ones((96, 96), dtype=bool)
        lesion = disk_mask(16, 4)
        spec = sample_spec(rng, liver, lesion, AugmentRanges(), ("p", 0, 0))
        assert 0.5 <= spec.scale <= 1.5
        assert -0.1 <= spec.mean_shift <= 0.1
        assert 0 <= spec.center[0] < 96 and 0 <= spec.center[1] < 96

    def test_oversized_lesion_fails(self):
        rng = np.random.default_rng(1)
        liver = np.zeros((64, 64), dtype=bool)
        liver[30:34, 30:34] = True
        lesion = disk_mask(40, 18)
        with pytest.raises(PlacementFailure):
            sample_spec(rng, liver, lesion,
                        AugmentRanges(scale=(1.0, 1.0)), ("p", 0, 0))

    def test_empty_liver_rejected(self):
        with pytest.raises(UsageError):
            sample_spec(np.random.default_rng(0), np.zeros((8, 8), dtype=bool),
                        disk_mask(8, 2), AugmentRanges())

    def test_accepted_specs_satisfy_containment(self):
        # exhaustive post-check of every accepted spec on a fixed phantom
        from lesionlab.phantom import gen_slice

        phantom_spec = PhantomSpec(image_size=96, seed=77,
                                   lesions_per_slice=(0, 0))
        _, label = gen_slice(phantom_spec, 0)
        liver = label == 1
        lesion = disk_mask(24, 6)
        rng = np.random.default_rng(5)
        accepted = 0
        for _ in range(200):
            try:
                spec = sample_spec(rng, liver, lesion, AugmentRanges(), ())
            except PlacementFailure:
                continue
            accepted += 1
            warped = transform_mask(lesion, spec.rotation, spec.scale)
            pts = np.argwhere(warped > 0)
            offset = np.floor(spec.center - pts.mean(axis=0) + 0.5).astype(int)
            rows, cols = pts[:, 0] + offset[0], pts[:, 1] + offset[1]
            assert liver[rows, cols].all()
        assert accepted > 100

    def test_range_validation(self):
        with pytest.raises(ConfigError):
            AugmentRanges(scale=(1.5, 0.5))


def echo_synthesizer(pair):
    """Returns the pair's own target regardless of the conditional map."""
    return lambda cmap: pair.target


class TestImplant:
    def _slice_with_liver(self, size=128):
        label = np.zeros((size, size), dtype=np.uint8)
        label[16:-16, 16:-16] = 1
        image = np.where(label == 1, 0.55, 0.12)
        return image, label

    def test_near_identity_implant_touches_only_feather_ring(self):
        image, label = self._slice_with_liver()
        pair = square_pair()
        spec = ImplantSpec(0.0, 1.0, (64, 64), 0.0, ("t", 0, 0))
        result = implant(image, label, spec, echo_synthesizer(pair), pair)

        from scipy import ndimage

        support = np.zeros_like(label, dtype=bool)
        support[result.label == 2] = True
        ring = ndimage.binary_dilation(support, iterations=3)
        outside = ~ring
        np.testing.assert_array_equal(result.image[outside], image[outside])
        assert (result.image != image).any()

    def test_label_count_increases_by_mask_area(self):
        image, label = self._slice_with_liver()
        pair = square_pair()
        spec = ImplantSpec(0.0, 1.0, (64, 64), 0.0, ("t", 0, 0))
        warped = transform_mask(pair.source.shape_mask, spec.rotation, spec.scale)
        result = implant(image, label, spec, echo_synthesizer(pair), pair)
        assert (result.label == 2).sum() == warped.sum()

    def test_liver_pixels_become_lesion_pixels_only(self):
        image, label = self._slice_with_liver()
        pair = square_pair()
        spec = ImplantSpec(0.4, 1.2, (60, 70), 0.05, ("t", 0, 0))
        result = implant(image, label, spec, echo_synthesizer(pair), pair)
        newly_lesion = (result.label == 2) & (label != 2)
        assert (label[newly_lesion] == 1).all()
        assert result.image.min() >= 0.0 and result.image.max() <= 1.0

    def test_pixel_accounting(self):
        image, label = self._slice_with_liver()
        pair = square_pair(half=6)
        rng = np.random.default_rng(3)
        liver_before = (label == 1).sum()
        total = label.size
        current_img, current_label = image, label
        implanted_area = 0
        for _ in range(3):
            spec = sample_spec(rng, current_label == 1, pair.source.shape_mask,
                               AugmentRanges(), ("t", 0, 0))
            result = implant(current_img, current_label, spec,
                             echo_synthesizer(pair), pair)
            current_img, current_label = result.image, result.label
        implanted_area = (current_label == 2).sum()
        assert (current_label == 1).sum() == liver_before - implanted_area
        counts = [(current_label == v).sum() for v in (0, 1, 2)]
        assert sum(counts) == total
        assert current_img.min() >= 0.0 and current_img.max() <= 1.0

    def test_containment_violation_raises(self):
        image, label = self._slice_with_liver()
        pair = square_pair()
        spec = ImplantSpec(0.0, 1.0, (17, 17), 0.0, ("t", 0, 0))  # hangs off liver
        with pytest.raises(ContainmentError):
            implant(image, label, spec, echo_synthesizer(pair), pair)


@pytest.fixture(scope="module")
def phantom_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("implant_corpus") / "c"
    spec = PhantomSpec(image_size=64, lesion_radius_px=(3.0, 6.0),
                       lesions_per_slice=(1, 2), seed=21)
    gen_corpus(spec, 12, root)
    return Corpus(root)


class TestAugmentCorpus:
    def test_target_zero_copies_corpus(self, phantom_corpus, tmp_path):
        policy = AugmentPolicy(pairs=build_pairs(phantom_corpus), target_count=0)
        manifest = augment_corpus(phantom_corpus, ProceduralSynthesizer(),
                                  np.random.default_rng(0), policy,
                                  tmp_path / "aug")
        assert manifest["placed"] == 0
        out = Corpus(tmp_path / "aug")
        assert out.content_hash() == phantom_corpus.content_hash()

    def test_reaches_real_count_and_manifest_recounts(self, phantom_corpus, tmp_path):
        pairs = build_pairs(phantom_corpus)
        policy = AugmentPolicy(pairs=pairs)
        manifest = augment_corpus(phantom_corpus, ProceduralSynthesizer(),
                                  np.random.default_rng(1), policy,
                                  tmp_path / "aug")
        real = phantom_corpus.total_lesions()
        assert manifest["target_count"] == real
        assert manifest["placed"] <= real
        assert manifest["placed"] > 0
        out = Corpus(tmp_path / "aug")
        # per-slice recount: real components + implants >= component count
        # (adjacent implants can merge under 8-connectivity, so <=)
        for entry in manifest["slices"]:
            expected_max = entry["real_lesions"] + len(entry["implants"])
            assert out.lesion_count(entry["index"]) <= expected_max
        total_implants = sum(len(e["implants"]) for e in manifest["slices"])
        assert total_implants == manifest["placed"]

    def test_deterministic_manifests(self, phantom_corpus, tmp_path):
        pairs = build_pairs(phantom_corpus)
        for name in ("a", "b"):
            augment_corpus(phantom_corpus, ProceduralSynthesizer(),
                           np.random.default_rng(7),
                           AugmentPolicy(pairs=pairs, target_count=5),
                           tmp_path / name)
        assert (tmp_path / "a" / "augment_manifest.json").read_bytes() == \
            (tmp_path / "b" / "augment_manifest.json").read_bytes()
        assert Corpus(tmp_path / "a").content_hash() == \
            Corpus(tmp_path / "b").content_hash()

    def test_spec_serialization_round_trip(self):
        spec = ImplantSpec(1.2, 0.8, (10, 20), -0.05, ("c", 3, 1))
        assert ImplantSpec.from_dict(spec.to_dict()) == spec
