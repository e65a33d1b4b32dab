import json

import pytest

from lesionlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, dispatch, validate_config
from lesionlab.corpus import Corpus
from lesionlab.errors import ConfigError


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestValidateConfig:
    def test_empty_config_resolves_defaults(self):
        assert validate_config(None, "phantom") == {}

    def test_unknown_key_named(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"spec": {"bogus_key": 1}})
        with pytest.raises(ConfigError, match="/spec/bogus_key"):
            validate_config(cfg, "phantom")

    def test_type_checked(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"n_slices": "ten"})
        with pytest.raises(ConfigError, match="/n_slices"):
            validate_config(cfg, "phantom")

    def test_seed_flag_beats_config_seed(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"spec": {"seed": 1}})
        resolved = validate_config(cfg, "phantom", seed=9)
        assert resolved["spec"]["seed"] == 9

    def test_set_overrides_nested_keys(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"spec": {"image_size": 64}})
        resolved = validate_config(cfg, "phantom",
                                   overrides=["spec.image_size=96",
                                              "n_slices=5"])
        assert resolved["spec"]["image_size"] == 96
        assert resolved["n_slices"] == 5

    def test_missing_required_key(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {})
        with pytest.raises(ConfigError, match="/corpus"):
            validate_config(cfg, "pairs")

    def test_run_record_for_wrong_subcommand_rejected(self, tmp_path):
        cfg = write_json(tmp_path / "run.json",
                         {"subcommand": "pairs", "resolved_config": {}})
        with pytest.raises(ConfigError, match="belongs to subcommand"):
            validate_config(cfg, "phantom")


def phantom_config(tmp_path, **spec_overrides):
    spec = {"image_size": 64, "lesion_radius_px": [3.0, 6.0], "seed": 5,
            "lesions_per_slice": [1, 2]}
    spec.update(spec_overrides)
    return write_json(tmp_path / "phantom.json", {"spec": spec, "n_slices": 8})


class TestDispatch:
    def test_phantom_success(self, tmp_path):
        cfg = phantom_config(tmp_path)
        code = dispatch(["phantom", "--config", cfg, "--out",
                         str(tmp_path / "out")])
        assert code == EXIT_OK
        assert (tmp_path / "out" / "corpus" / "manifest.json").exists()
        assert (tmp_path / "out" / "run.json").exists()

    def test_unknown_key_exits_config(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "bad.json", {"nonsense": 1})
        code = dispatch(["phantom", "--config", cfg, "--out",
                         str(tmp_path / "out")])
        assert code == EXIT_CONFIG
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"
        assert "nonsense" in err["message"]

    def test_range_order_violation_exits_config(self, tmp_path, capsys):
        corpus_out = tmp_path / "c"
        assert dispatch(["phantom", "--config", phantom_config(tmp_path),
                         "--out", str(corpus_out)]) == EXIT_OK
        assert dispatch(["pairs", "--set", f"corpus={corpus_out/'corpus'}",
                         "--out", str(tmp_path / "p")]) == EXIT_OK
        code = dispatch([
            "implant",
            "--set", f"corpus={corpus_out/'corpus'}",
            "--set", f"pairs={tmp_path/'p'/'pairs'}",
            "--set", 'ranges={"scale": [1.5, 0.5]}',
            "--out", str(tmp_path / "i"),
        ])
        assert code == EXIT_CONFIG
        err = json.loads(capsys.readouterr().err)
        assert "scale" in err["message"]

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        cfg = phantom_config(tmp_path)
        out = tmp_path / "dry"
        code = dispatch(["phantom", "--config", cfg, "--out", str(out),
                         "--dry-run"])
        assert code == EXIT_OK
        assert not out.exists()
        plan = json.loads(capsys.readouterr().out)
        assert plan["subcommand"] == "phantom"
        assert plan["resolved_config"]["spec"]["seed"] == 5

    def test_rerun_from_run_record_is_bit_identical(self, tmp_path):
        cfg = phantom_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert dispatch(["phantom", "--config", cfg, "--out", str(out_a)]) == EXIT_OK
        assert dispatch(["phantom", "--config", str(out_a / "run.json"),
                         "--out", str(out_b)]) == EXIT_OK
        hash_a = Corpus(out_a / "corpus").content_hash()
        hash_b = Corpus(out_b / "corpus").content_hash()
        assert hash_a == hash_b
        assert (out_a / "corpus" / "manifest.json").read_bytes() == \
            (out_b / "corpus" / "manifest.json").read_bytes()

    def test_experiment_partial_failure_exit_code(self, tmp_path):
        # every slice bears a lesion, so SynthOnly arms cannot build their
        # lesion-free training set and must fail while the others finish
        exp_cfg = write_json(tmp_path / "exp.json", {
            "phantom": {"image_size": 64, "lesion_radius_px": [3.0, 6.0],
                        "lesions_per_slice": [1, 2], "seed": 3},
            "n_slices": 12,
            "arms": ["SynthOnlyProcedural", "RealOnly"],
            "seeds": [0],
            "seg": {"epochs": 1, "batch_size": 4},
        })
        out = tmp_path / "exp"
        code = dispatch(["experiment", "--config", exp_cfg, "--out", str(out)])
        assert code == EXIT_PARTIAL
        report = json.loads((out / "report.json").read_text())
        assert report["arms"]["SynthOnlyProcedural"]["status"] == "failed"
        assert report["arms"]["RealOnly"]["status"] == "ok"
        assert report["arms"]["RealOnly"]["per_seed"]


class TestPipelineChain:
    def test_full_cli_chain(self, tmp_path):
        base = tmp_path
        cfg = phantom_config(tmp_path)
        assert dispatch(["phantom", "--config", cfg, "--out",
                         str(base / "c")]) == EXIT_OK
        corpus = str(base / "c" / "corpus")
        assert dispatch(["pairs", "--set", f"corpus={corpus}", "--out",
                         str(base / "p")]) == EXIT_OK
        pairs = str(base / "p" / "pairs")

        synth_cfg = write_json(base / "synth.json", {
            "pairs": pairs,
            "train": {"epochs": 1, "gan_weight": 0.0, "batch_size": 4,
                      "seed": 1},
            "holdout_fraction": 0.25,
        })
        assert dispatch(["synth-train", "--config", synth_cfg, "--out",
                         str(base / "g")]) == EXIT_OK
        summary = json.loads((base / "g" / "summary.json").read_text())
        assert "holdout_mse" in summary

        assert dispatch(["synth-sample", "--set", f"pairs={pairs}",
                         "--set", "backend=procedural", "--set", "count=2",
                         "--out", str(base / "s")]) == EXIT_OK
        assert (base / "s" / "samples" / "sample_001_synth.pgm").exists()

        assert dispatch(["synth-sample", "--set", f"pairs={pairs}",
                         "--set", "backend=neural",
                         "--set", f"checkpoint={base/'g'/'generator'}",
                         "--set", "count=1",
                         "--out", str(base / "sn")]) == EXIT_OK

        assert dispatch(["implant", "--set", f"corpus={corpus}",
                         "--set", f"pairs={pairs}",
                         "--set", "target_count=4",
                         "--out", str(base / "i")]) == EXIT_OK
        aug_manifest = json.loads(
            (base / "i" / "corpus" / "augment_manifest.json").read_text()
        )
        assert aug_manifest["placed"] <= 4

        seg_cfg = write_json(base / "seg.json", {
            "corpus": str(base / "i" / "corpus"),
            "train": {"epochs": 1, "batch_size": 4, "seed": 2},
        })
        assert dispatch(["seg-train", "--config", seg_cfg, "--out",
                         str(base / "m")]) == EXIT_OK

        assert dispatch(["seg-eval", "--set", f"corpus={corpus}",
                         "--set", f"checkpoint={base/'m'/'segmenter'}",
                         "--out", str(base / "e")]) == EXIT_OK
        evaluation = json.loads((base / "e" / "evaluation.json").read_text())
        assert 0.0 <= evaluation["mean_dice"] <= 1.0

        exp_cfg = write_json(base / "exp.json", {
            "corpus": corpus,
            "arms": ["RealOnly"],
            "seeds": [0],
            "seg": {"epochs": 1, "batch_size": 4},
        })
        assert dispatch(["experiment", "--config", exp_cfg, "--out",
                         str(base / "x")]) == EXIT_OK
        assert dispatch(["report",
                         "--set", f"report={base/'x'/'report.json'}",
                         "--out", str(base / "r")]) == EXIT_OK
        assert (base / "r" / "report.md").exists()
        assert (base / "r" / "report.csv").exists()
