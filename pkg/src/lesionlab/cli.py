"""Command-line entry point wiring the pipeline together.

Subcommands: phantom, pairs, synth-train, synth-sample, implant, seg-train,
seg-eval, experiment, report. Every run validates its JSON config against a
schema (defaults filled, unknown keys rejected), applies ``--set key=value``
overrides, and writes a ``run.json`` provenance record into the output
directory; re-running a subcommand with a ``run.json`` as its config
reproduces the artifact bit-for-bit.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 partial
experiment (at least one arm failed).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as corpus_io
from .corpus import Corpus
from .errors import ConfigError, LesionLabError
from .experiment import (
    ARM_ORDER,
    ExperimentConfig,
    parse_csv,
    render_csv,
    render_table,
    run_experiment,
    _report_rows,
    _report_markdown,
)
from .implant import AugmentPolicy, AugmentRanges, augment_corpus
from .pairs import build_pairs, load_pairs, render_sketch, save_pairs
from .phantom import PhantomSpec, gen_corpus
from .segmentation import (
    SegNet,
    SegTrainConfig,
    binarize,
    predict,
    train_seg,
)
from .synthesis import (
    GeneratorNet,
    NeuralSynthesizer,
    ProceduralSynthesizer,
    SynthTrainConfig,
    eval_mse,
    train,
)
from .volumes import save_tensor_file, write_pgm

log = logging.getLogger("lesionlab")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


# ---------------------------------------------------------------------------
# config schemas
# ---------------------------------------------------------------------------

PHANTOM_SPEC_SCHEMA = {
    "image_size": int,
    "liver_area_fraction": list,
    "lesions_per_slice": list,
    "lesion_radius_px": list,
    "liver_intensity": list,
    "lesion_intensity": list,
    "noise_sd": float,
    "seed": int,
}

RANGES_SCHEMA = {"rotation": list, "scale": list, "mean_shift": list}

SYNTH_SCHEMA = {
    "epochs": int, "learning_rate": float, "beta1": float, "beta2": float,
    "gan_weight": float, "l1_weight": float, "batch_size": int, "seed": int,
}

SEG_SCHEMA = {
    "epochs": int, "learning_rate": float, "batch_size": int,
    "threshold": float, "seed": int,
}

SCHEMAS: dict[str, dict] = {
    "phantom": {"spec": PHANTOM_SPEC_SCHEMA, "n_slices": int},
    "pairs": {"corpus": str, "patch_size": int},
    "synth-train": {"pairs": str, "train": SYNTH_SCHEMA, "holdout_fraction": float},
    "synth-sample": {
        "pairs": str, "checkpoint": str, "backend": str, "count": int,
        "seed": int,
    },
    "implant": {
        "corpus": str, "pairs": str, "checkpoint": str, "backend": str,
        "target_count": int, "lesions_per_slice": list, "ranges": RANGES_SCHEMA,
        "seed": int,
    },
    "seg-train": {"corpus": str, "train": SEG_SCHEMA},
    "seg-eval": {"corpus": str, "checkpoint": str, "threshold": float,
                 "indices": list},
    "experiment": {
        "phantom": PHANTOM_SPEC_SCHEMA, "n_slices": int, "arms": list,
        "seeds": list, "test_fraction": float, "synth": SYNTH_SCHEMA,
        "seg": SEG_SCHEMA, "ranges": RANGES_SCHEMA,
        "implants_per_slice": list, "corpus": str,
    },
    "report": {"report": str},
}

# keys whose absence means "use the library default" rather than a required value
REQUIRED_KEYS: dict[str, tuple[str, ...]] = {
    "pairs": ("corpus",),
    "synth-train": ("pairs",),
    "synth-sample": ("pairs",),
    "implant": ("corpus", "pairs"),
    "seg-train": ("corpus",),
    "seg-eval": ("corpus", "checkpoint"),
    "report": ("report",),
}


def _check_keys(doc: dict, schema: dict, pointer: str):
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {pointer}/{key}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{pointer}/{key} must be an object")
            _check_keys(value, expected, f"{pointer}/{key}")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{pointer}/{key} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{pointer}/{key} must be an integer")
        elif not isinstance(value, expected):
            raise ConfigError(
                f"{pointer}/{key} must be of type {expected.__name__}"
            )


def validate_config(path, subcommand: str, overrides=None, seed=None) -> dict:
    """Load, override, and schema-check a config; returns the resolved dict.

    Accepts either a plain config or a previously written ``run.json`` (its
    ``resolved_config`` is extracted), which is what makes artifact
    regeneration a one-liner.
    """
    if path is None:
        doc = {}
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        if "resolved_config" in doc:  # run.json provenance record
            recorded = doc.get("subcommand")
            if recorded != subcommand:
                raise ConfigError(
                    f"run record {path} belongs to subcommand {recorded!r}, "
                    f"not {subcommand!r}"
                )
            doc = doc["resolved_config"]

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override through non-object key {part!r}")
        target[parts[-1]] = value

    schema = SCHEMAS[subcommand]
    _check_keys(doc, schema, "")
    if seed is not None:
        if "spec" in schema and subcommand == "phantom":
            doc.setdefault("spec", {})["seed"] = seed
        elif subcommand in ("synth-train", "seg-train"):
            doc.setdefault("train", {})["seed"] = seed
        elif "seeds" in schema:
            doc["seeds"] = [seed]
        elif "seed" in schema:
            doc["seed"] = seed
    for key in REQUIRED_KEYS.get(subcommand, ()):
        if key not in doc:
            raise ConfigError(f"missing required config key /{key}")
    return doc


def _hash_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_hashes(config: dict) -> dict:
    hashes = {}
    for key in ("corpus", "pairs", "report"):
        value = config.get(key)
        if value and Path(value).exists():
            target = Path(value)
            if target.is_dir():
                digest = hashlib.sha256()
                for p in sorted(target.rglob("*")):
                    if p.is_file():
                        digest.update(p.name.encode())
                        digest.update(p.read_bytes())
                hashes[key] = digest.hexdigest()
            else:
                hashes[key] = _hash_file(target)
    checkpoint = config.get("checkpoint")
    if checkpoint and Path(checkpoint).exists():
        manifest = Path(checkpoint) / "manifest.json"
        if manifest.exists():
            hashes["checkpoint"] = _hash_file(manifest)
    return hashes


def write_run_record(out_dir, subcommand: str, config: dict, outputs):
    record = {
        "subcommand": subcommand,
        "resolved_config": config,
        "package_version": __version__,
        "input_hashes": _input_hashes(config),
        "outputs": sorted(str(o) for o in outputs),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_io.dump_json(record, out_dir / "run.json")


# ---------------------------------------------------------------------------
# subcommand handlers: each returns an exit code
# ---------------------------------------------------------------------------


def _load_backend(config):
    backend = config.get("backend", "neural" if config.get("checkpoint") else
                         "procedural")
    if backend == "procedural":
        return ProceduralSynthesizer()
    if backend == "neural":
        checkpoint = config.get("checkpoint")
        if not checkpoint:
            raise ConfigError("neural backend requires a /checkpoint path")
        return NeuralSynthesizer(GeneratorNet.load(checkpoint))
    raise ConfigError(f"unknown backend {backend!r}; expected neural|procedural")


def cmd_phantom(config, out_dir, jobs):
    spec = PhantomSpec.from_dict(config.get("spec", {}))
    n_slices = config.get("n_slices", 100)
    manifest = gen_corpus(spec, n_slices, out_dir / "corpus", jobs=jobs)
    resolved = {"spec": spec.to_dict(), "n_slices": n_slices}
    write_run_record(out_dir, "phantom", resolved, [out_dir / "corpus"])
    log.info("wrote %d slices (%d lesions) to %s", n_slices,
             manifest["total_lesions"], out_dir / "corpus")
    return EXIT_OK


def cmd_pairs(config, out_dir, jobs):
    corpus = Corpus(config["corpus"])
    patch_size = config.get("patch_size", 64)
    pairs = build_pairs(corpus, patch_size=patch_size)
    save_pairs(pairs, out_dir / "pairs")
    resolved = {"corpus": config["corpus"], "patch_size": patch_size}
    write_run_record(out_dir, "pairs", resolved, [out_dir / "pairs"])
    log.info("extracted %d pairs", len(pairs))
    return EXIT_OK


def cmd_synth_train(config, out_dir, jobs):
    pairs = load_pairs(config["pairs"])
    train_cfg = SynthTrainConfig(**config.get("train", {}))
    holdout_fraction = config.get("holdout_fraction", 0.0)
    holdout = []
    fit = pairs
    if holdout_fraction > 0:
        n_holdout = max(1, int(round(holdout_fraction * len(pairs))))
        rng = np.random.default_rng([train_cfg.seed, 17])
        order = rng.permutation(len(pairs))
        holdout = [pairs[i] for i in order[:n_holdout]]
        fit = [pairs[i] for i in order[n_holdout:]]
    generator, rows = train(fit, train_cfg, out_dir=out_dir)
    summary = {"final_l1": rows[-1]["l1"], "epochs": train_cfg.epochs}
    if holdout:
        summary["holdout_mse"] = eval_mse(
            NeuralSynthesizer(generator), holdout,
            rng=np.random.default_rng([train_cfg.seed, 23]),
        )
    corpus_io.dump_json(summary, out_dir / "summary.json")
    resolved = {"pairs": config["pairs"], "train": vars(train_cfg).copy(),
                "holdout_fraction": holdout_fraction}
    write_run_record(out_dir, "synth-train", resolved,
                     [out_dir / "generator", out_dir / "training_log.csv"])
    log.info("trained synthesizer: %s", summary)
    return EXIT_OK


def cmd_synth_sample(config, out_dir, jobs):
    pairs = load_pairs(config["pairs"])
    backend = _load_backend(config)
    count = config.get("count", 8)
    seed = config.get("seed", 0)
    rng = np.random.default_rng([seed, 5])
    picks = rng.integers(0, len(pairs), size=count)
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, pick in enumerate(picks):
        pair = pairs[pick]
        patch = backend(pair.source, rng)
        stacked = np.stack([render_sketch(pair.source), pair.target, patch])
        save_tensor_file(sample_dir / f"sample_{i:03d}", stacked, dtype="f64le")
        write_pgm(sample_dir / f"sample_{i:03d}_synth.pgm", patch)
        write_pgm(sample_dir / f"sample_{i:03d}_target.pgm", pair.target)
        write_pgm(sample_dir / f"sample_{i:03d}_sketch.pgm",
                  render_sketch(pair.source))
        outputs.append(sample_dir / f"sample_{i:03d}.volj")
    resolved = {"pairs": config["pairs"], "count": count, "seed": seed,
                "backend": config.get("backend", "procedural")}
    if config.get("checkpoint"):
        resolved["checkpoint"] = config["checkpoint"]
    write_run_record(out_dir, "synth-sample", resolved, outputs)
    return EXIT_OK


def cmd_implant(config, out_dir, jobs):
    corpus = Corpus(config["corpus"])
    pairs = load_pairs(config["pairs"])
    backend = _load_backend(config)
    ranges_doc = config.get("ranges", {})
    ranges = AugmentRanges(**{k: tuple(v) for k, v in ranges_doc.items()})
    policy = AugmentPolicy(
        pairs=pairs,
        target_count=config.get("target_count"),
        lesions_per_slice=tuple(config.get("lesions_per_slice", (1, 3))),
        ranges=ranges,
    )
    seed = config.get("seed", 0)
    rng = np.random.default_rng([seed, 11])
    manifest = augment_corpus(corpus, backend, rng, policy, out_dir / "corpus")
    resolved = {
        "corpus": config["corpus"], "pairs": config["pairs"],
        "backend": config.get("backend", "procedural"),
        "lesions_per_slice": list(policy.lesions_per_slice),
        "ranges": {k: list(getattr(ranges, k))
                   for k in ("rotation", "scale", "mean_shift")},
        "seed": seed,
    }
    if config.get("target_count") is not None:
        resolved["target_count"] = config["target_count"]
    if config.get("checkpoint"):
        resolved["checkpoint"] = config["checkpoint"]
    write_run_record(out_dir, "implant", resolved, [out_dir / "corpus"])
    log.info("implanted %d lesions (%d skips)", manifest["placed"],
             manifest["skipped"])
    return EXIT_OK


def cmd_seg_train(config, out_dir, jobs):
    corpus = Corpus(config["corpus"])
    cfg = SegTrainConfig(**config.get("train", {}))
    images = [corpus.image(i) for i in corpus.indices]
    labels = [corpus.label(i) for i in corpus.indices]
    _, rows = train_seg(images, labels, cfg, out_dir=out_dir)
    resolved = {"corpus": config["corpus"], "train": vars(cfg).copy()}
    write_run_record(out_dir, "seg-train", resolved,
                     [out_dir / "segmenter", out_dir / "training_log.csv"])
    log.info("final training loss %.4f", rows[-1]["loss"])
    return EXIT_OK


def cmd_seg_eval(config, out_dir, jobs):
    from .experiment import dice_score

    corpus = Corpus(config["corpus"])
    net = SegNet.load(config["checkpoint"])
    threshold = config.get("threshold", 0.5)
    indices = config.get("indices", corpus.indices)
    per_slice = []
    for index in indices:
        pred = binarize(predict(net, corpus.image(index)), threshold)
        gt = (corpus.label(index) == 2).astype(np.uint8)
        per_slice.append({"index": index,
                          "dice": round(dice_score(pred, gt), 6)})
    mean = round(float(np.mean([r["dice"] for r in per_slice])), 6)
    corpus_io.dump_json({"mean_dice": mean, "slices": per_slice},
                        out_dir / "evaluation.json")
    resolved = {"corpus": config["corpus"], "checkpoint": config["checkpoint"],
                "threshold": threshold, "indices": list(indices)}
    write_run_record(out_dir, "seg-eval", resolved, [out_dir / "evaluation.json"])
    log.info("mean dice %.4f over %d slices", mean, len(per_slice))
    return EXIT_OK


def cmd_experiment(config, out_dir, jobs):
    kwargs = {}
    if "phantom" in config:
        kwargs["phantom"] = PhantomSpec.from_dict(config["phantom"])
    if "synth" in config:
        kwargs["synth"] = SynthTrainConfig(**config["synth"])
    if "seg" in config:
        kwargs["seg"] = SegTrainConfig(**config["seg"])
    if "ranges" in config:
        kwargs["ranges"] = AugmentRanges(
            **{k: tuple(v) for k, v in config["ranges"].items()}
        )
    for key in ("n_slices", "test_fraction"):
        if key in config:
            kwargs[key] = config[key]
    if "arms" in config:
        kwargs["arms"] = tuple(config["arms"])
    if "seeds" in config:
        kwargs["seeds"] = tuple(config["seeds"])
    if "implants_per_slice" in config:
        kwargs["implants_per_slice"] = tuple(config["implants_per_slice"])
    if "corpus" in config:
        kwargs["corpus_path"] = config["corpus"]
    exp_config = ExperimentConfig(**kwargs)

    report = run_experiment(exp_config, out_dir)
    resolved = {
        "phantom": exp_config.phantom.to_dict(),
        "n_slices": exp_config.n_slices,
        "arms": list(exp_config.arms),
        "seeds": list(exp_config.seeds),
        "test_fraction": exp_config.test_fraction,
        "synth": vars(exp_config.synth).copy(),
        "seg": vars(exp_config.seg).copy(),
        "ranges": {k: list(getattr(exp_config.ranges, k))
                   for k in ("rotation", "scale", "mean_shift")},
        "implants_per_slice": list(exp_config.implants_per_slice),
    }
    if exp_config.corpus_path:
        resolved["corpus"] = exp_config.corpus_path
    write_run_record(out_dir, "experiment", resolved,
                     [out_dir / "report.json", out_dir / "report.csv",
                      out_dir / "report.md"])
    failed = [arm for arm, info in report["arms"].items()
              if info["status"] != "ok"]
    if failed:
        log.error("failed arms: %s", ", ".join(failed))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(config, out_dir, jobs):
    report = corpus_io.load_json(config["report"])
    if report.get("kind") != "five-arm-dice-report":
        raise ConfigError(f"{config['report']} is not a dice report")
    rows = _report_rows(report)
    (out_dir / "report.md").write_text(
        _report_markdown(report, render_table(rows))
    )
    (out_dir / "report.csv").write_text(render_csv(rows))
    resolved = {"report": config["report"]}
    write_run_record(out_dir, "report", resolved,
                     [out_dir / "report.md", out_dir / "report.csv"])
    return EXIT_OK


HANDLERS = {
    "phantom": cmd_phantom,
    "pairs": cmd_pairs,
    "synth-train": cmd_synth_train,
    "synth-sample": cmd_synth_sample,
    "implant": cmd_implant,
    "seg-train": cmd_seg_train,
    "seg-eval": cmd_seg_eval,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionlab",
        description="Synthetic lesion implantation pipeline",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config (or a run.json to reproduce)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config key (dots descend into objects)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker cap where supported")
        p.add_argument("--dry-run", action="store_true",
                       help="validate and print the resolved plan, write nothing")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = validate_config(args.config, args.subcommand,
                                 overrides=args.overrides, seed=args.seed)
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        if args.dry_run:
            plan = {"subcommand": args.subcommand, "resolved_config": config,
                    "out": str(args.out), "jobs": args.jobs}
            print(json.dumps(plan, indent=2, sort_keys=True))
            return EXIT_OK
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.subcommand](config, out_dir, args.jobs)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG
    except LesionLabError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
