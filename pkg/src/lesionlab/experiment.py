"""Five-arm training-set comparison with Dice reporting.

Arms share one phantom corpus and one held-out test split:

* ``RealOnly``            - raw training slices;
* ``SynthOnlyNeural``     - slices bearing real lesions removed, synthetic
  lesions implanted into the remaining lesion-free slices up to the real
  count, appearance from the neural backend;
* ``SynthOnlyProcedural`` - same, procedural backend;
* ``CombinedNeural``      - raw training slices plus an equal count of
  additional synthetic lesions, neural backend;
* ``CombinedProcedural``  - same, procedural backend.

Each arm's corpus is materialized on disk so the exact training data is
auditable; all randomness derives from (seed, arm, stage).
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_io
from .corpus import Corpus, LESION
from .errors import ConfigError, DimensionError, LesionLabError, UsageError
from .implant import AugmentPolicy, AugmentRanges, augment_corpus
from .pairs import build_pairs
from .phantom import PhantomSpec, gen_corpus
from .segmentation import SegTrainConfig, binarize, predict, train_seg
from .synthesis import (
    NeuralSynthesizer,
    ProceduralSynthesizer,
    SynthTrainConfig,
    train,
)

log = logging.getLogger(__name__)

ARM_ORDER = (
    "SynthOnlyNeural",
    "SynthOnlyProcedural",
    "RealOnly",
    "CombinedNeural",
    "CombinedProcedural",
)
NEURAL_ARMS = {"SynthOnlyNeural", "CombinedNeural"}
SYNTH_ONLY_ARMS = {"SynthOnlyNeural", "SynthOnlyProcedural"}
COMBINED_ARMS = {"CombinedNeural", "CombinedProcedural"}


def derive_seed(*parts) -> int:
    """Deterministic 32-bit seed from mixed int/str stage identifiers."""
    acc = 0
    for part in parts:
        token = f"{part}".encode()
        acc = zlib.crc32(token, acc)
    return int(acc)


@dataclass
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_slices: int = 400
    arms: tuple[str, ...] = ARM_ORDER
    seeds: tuple[int, ...] = (0,)
    test_fraction: float = 0.2
    synth: SynthTrainConfig = field(default_factory=lambda: SynthTrainConfig(epochs=30))
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    implants_per_slice: tuple[int, int] = (1, 3)
    corpus_path: str | None = None  # reuse an existing corpus instead of generating

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("experiment needs at least one arm")
        unknown = set(self.arms) - set(ARM_ORDER)
        if unknown:
            raise ConfigError(f"unknown arms: {sorted(unknown)}")
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(
                f"test_fraction must lie in (0, 1), got {self.test_fraction}"
            )
        if self.n_slices < 5:
            raise ConfigError(f"n_slices must be >= 5, got {self.n_slices}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P^G| / (|P|+|G|); defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred > 0
    g = gt > 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def relative_gain(augmented: float, baseline: float) -> float:
    """(augmented - baseline) / baseline."""
    if baseline <= 0:
        raise UsageError(f"baseline must be > 0, got {baseline}")
    return (augmented - baseline) / baseline


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


def split_corpus(indices, test_fraction: float, seed: int):
    """Seeded train/test partition over slice indices, shared by all arms."""
    rng = np.random.default_rng([seed, derive_seed("split")])
    perm = rng.permutation(len(indices))
    n_test = max(1, int(round(test_fraction * len(indices))))
    shuffled = [indices[i] for i in perm]
    test = sorted(shuffled[:n_test])
    train = sorted(shuffled[n_test:])
    return train, test


def _materialize_subcorpus(source: Corpus, indices, out_dir) -> Corpus:
    corpus_io.copy_entries(source.root, out_dir, indices)
    entries = []
    for index in indices:
        label = source.label(index)
        _, n = corpus_io.lesion_components(label)
        entries.append({
            "index": index,
            "lesion_count": int(n),
            "lesion_area": int((label == LESION).sum()),
            "liver_area": int((label == 1).sum()),
        })
    corpus_io.dump_json(
        {
            "kind": "sub-corpus",
            "source": str(source.root),
            "indices": list(indices),
            "slices": entries,
            "total_lesions": int(sum(e["lesion_count"] for e in entries)),
        },
        Path(out_dir) / corpus_io.MANIFEST,
    )
    return Corpus(out_dir)


def _build_arm_corpus(arm, source: Corpus, train_ids, synthesizer, seed,
                      config: ExperimentConfig, arm_dir) -> Corpus:
    real_count = sum(
        corpus_io.lesion_components(source.label(i))[1] for i in train_ids
    )
    if arm == "RealOnly":
        return _materialize_subcorpus(source, train_ids, arm_dir / "corpus")
    if arm in SYNTH_ONLY_ARMS:
        keep = [i for i in train_ids
                if not (source.label(i) == LESION).any()]
        if not keep:
            raise UsageError(f"{arm}: no lesion-free training slices available")
        base = _materialize_subcorpus(source, keep, arm_dir / "base_corpus")
    else:
        base = _materialize_subcorpus(source, train_ids, arm_dir / "base_corpus")

    pairs = build_pairs(source, indices=train_ids)
    if not pairs:
        raise UsageError(f"{arm}: no training pairs available for implantation")
    policy = AugmentPolicy(
        pairs=pairs,
        target_count=real_count,
        lesions_per_slice=config.implants_per_slice,
        ranges=config.ranges,
    )
    rng = np.random.default_rng([seed, derive_seed(arm, "implant")])
    augment_corpus(base, synthesizer, rng, policy, arm_dir / "corpus")
    return Corpus(arm_dir / "corpus")


def _evaluate(net, source: Corpus, test_ids, threshold: float):
    per_slice = []
    for index in test_ids:
        prob = predict(net, source.image(index))
        pred = binarize(prob, threshold)
        gt = (source.label(index) == LESION).astype(np.uint8)
        per_slice.append({"index": index,
                          "dice": round(dice_score(pred, gt), 6)})
    mean = round(float(np.mean([row["dice"] for row in per_slice])), 6)
    return mean, per_slice


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Run every (arm, seed) cell and write report.json/.csv/.md.

    Returns the report dict. Arms that abort (for example a diverged
    training run) are marked failed in the report; the remaining arms still
    complete.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.corpus_path:
        source = Corpus(config.corpus_path)
    else:
        gen_corpus(config.phantom, config.n_slices, out_dir / "corpus")
        source = Corpus(out_dir / "corpus")

    train_ids, test_ids = split_corpus(source.indices, config.test_fraction,
                                       config.seeds[0])
    baseline_scores = [
        1.0 if not (source.label(i) == LESION).any() else 0.0 for i in test_ids
    ]
    background_baseline = round(float(np.mean(baseline_scores)), 6)

    results: dict[str, dict] = {
        arm: {"per_seed": {}, "status": "ok", "train_ids": {}} for arm in config.arms
    }

    for seed in config.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        synthesizers = {"procedural": ProceduralSynthesizer()}
        if NEURAL_ARMS & set(config.arms):
            pairs = build_pairs(source, indices=train_ids)
            if len(pairs) < 2:
                raise UsageError("not enough training pairs to fit the synthesizer")
            synth_cfg = replace(config.synth, seed=derive_seed(seed, "synth"))
            generator, _ = train(pairs, synth_cfg,
                                 out_dir=seed_dir / "synthesizer")
            synthesizers["neural"] = NeuralSynthesizer(generator)

        for arm in config.arms:
            arm_dir = seed_dir / arm
            backend = synthesizers.get(
                "neural" if arm in NEURAL_ARMS else "procedural"
            )
            try:
                if arm == "RealOnly":
                    arm_corpus = _build_arm_corpus(arm, source, train_ids, None,
                                                   seed, config, arm_dir)
                else:
                    arm_corpus = _build_arm_corpus(arm, source, train_ids,
                                                   backend, seed, config, arm_dir)
                images = [arm_corpus.image(i) for i in arm_corpus.indices]
                labels = [arm_corpus.label(i) for i in arm_corpus.indices]
                seg_cfg = replace(config.seg, seed=derive_seed(seed, arm, "seg"))
                net, _ = train_seg(images, labels, seg_cfg,
                                   out_dir=arm_dir / "segmenter")
                mean, per_slice = _evaluate(net, source, test_ids,
                                            config.seg.threshold)
                results[arm]["per_seed"][str(seed)] = mean
                results[arm]["train_ids"][str(seed)] = list(arm_corpus.indices)
                corpus_io.dump_json(
                    {"mean_dice": mean, "slices": per_slice},
                    arm_dir / "evaluation.json",
                )
                log.info("arm %s seed %d dice %.4f", arm, seed, mean)
            except LesionLabError as exc:
                results[arm]["status"] = "failed"
                results[arm]["error"] = f"{type(exc).__name__}: {exc}"
                log.error("arm %s seed %d failed: %s", arm, seed, exc)

    for arm in config.arms:
        values = list(results[arm]["per_seed"].values())
        if values:
            results[arm]["mean"] = round(float(np.mean(values)), 6)
            results[arm]["sd"] = round(float(np.std(values)), 6)

    gains = {}
    real_mean = results.get("RealOnly", {}).get("mean")
    if real_mean and real_mean > 0:
        for arm in config.arms:
            if arm != "RealOnly" and results[arm].get("mean") is not None:
                gains[arm] = round(relative_gain(results[arm]["mean"], real_mean), 6)

    report = {
        "kind": "five-arm-dice-report",
        "aggregation": "per-slice mean Dice over the shared test split; "
                       "empty prediction vs empty ground truth scores 1.0",
        "arms": {arm: {k: v for k, v in results[arm].items() if k != "train_ids"}
                 for arm in config.arms},
        "background_baseline": background_baseline,
        "relative_gain_vs_real": gains,
        "split": {"train": train_ids, "test": test_ids},
        "train_manifests": {arm: results[arm]["train_ids"] for arm in config.arms},
        "metadata": {
            "arms": list(config.arms),
            "seeds": list(config.seeds),
            "n_slices": config.n_slices,
            "test_fraction": config.test_fraction,
            "phantom": config.phantom.to_dict(),
            "corpus_hash": source.content_hash(),
            "synth_only_protocol": "slices bearing real lesions are removed "
                                   "from training; synthetic lesions are "
                                   "implanted into the remaining lesion-free "
                                   "slices up to the real-lesion count",
        },
    }
    corpus_io.dump_json(report, out_dir / "report.json")

    rows = _report_rows(report)
    markdown = render_table(rows)
    csv_text = render_csv(rows)
    (out_dir / "report.md").write_text(_report_markdown(report, markdown))
    (out_dir / "report.csv").write_text(csv_text)
    return report


def _report_rows(report) -> dict[str, dict[str, float]]:
    arms = [a for a in ARM_ORDER if a in report["arms"]]
    rows = {}
    for seed in report["metadata"]["seeds"]:
        row = {}
        for arm in arms:
            value = report["arms"][arm]["per_seed"].get(str(seed))
            if value is not None:
                row[arm] = value
        if row:
            rows[f"seed {seed}"] = row
    aggregate = {arm: report["arms"][arm]["mean"] for arm in arms
                 if report["arms"][arm].get("mean") is not None}
    if aggregate:
        rows["mean"] = aggregate
    return rows


# ---------------------------------------------------------------------------
# table rendering
# ---------------------------------------------------------------------------


def render_table(rows: dict[str, dict[str, float]], columns=None) -> str:
    """Markdown table, one row per entry, the per-row maximum in bold.

    Column order follows ``columns`` when given, else the canonical arm
    order, else insertion order of the first row.
    """
    if not rows:
        raise UsageError("cannot render an empty report")
    if columns is None:
        seen = []
        for row in rows.values():
            for key in row:
                if key not in seen:
                    seen.append(key)
        columns = [c for c in ARM_ORDER if c in seen] or seen
        columns += [c for c in seen if c not in columns]

    lines = ["| | " + " | ".join(columns) + " |",
             "|---" * (len(columns) + 1) + "|"]
    for label, row in rows.items():
        best = max((v for v in row.values() if v is not None), default=None)
        cells = []
        for col in columns:
            value = row.get(col)
            if value is None:
                cells.append("")
            elif value == best:
                cells.append(f"**{value:.4f}**")
            else:
                cells.append(f"{value:.4f}")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(rows: dict[str, dict[str, float]], columns=None) -> str:
    """Fixed 6-decimal CSV mirroring the markdown table."""
    if not rows:
        raise UsageError("cannot render an empty report")
    if columns is None:
        seen = []
        for row in rows.values():
            for key in row:
                if key not in seen:
                    seen.append(key)
        columns = [c for c in ARM_ORDER if c in seen] or seen
        columns += [c for c in seen if c not in columns]
    lines = ["row," + ",".join(columns)]
    for label, row in rows.items():
        cells = [f"{row[c]:.6f}" if row.get(c) is not None else "" for c in columns]
        lines.append(f"{label}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> dict[str, dict[str, float]]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")[1:]
    rows = {}
    for line in lines[1:]:
        cells = line.split(",")
        rows[cells[0]] = {
            col: float(cell) for col, cell in zip(header, cells[1:]) if cell
        }
    return rows


def _report_markdown(report, table: str) -> str:
    lines = [
        "# Five-arm segmentation comparison",
        "",
        f"Aggregation: {report['aggregation']}.",
        f"Predict-all-background baseline: {report['background_baseline']:.4f}.",
        "",
        table,
    ]
    gains = report.get("relative_gain_vs_real") or {}
    if gains:
        lines.append("")
        lines.append("Relative gain vs RealOnly: "
                     + ", ".join(f"{arm} {value:+.2%}"
                                 for arm, value in gains.items()))
        lines.append("")
    failed = [arm for arm, info in report["arms"].items()
              if info["status"] != "ok"]
    if failed:
        lines.append("")
        lines.append("Failed arms: " + ", ".join(failed))
        lines.append("")
    return "\n".join(lines)
