import json

import numpy as np
import pytest

from nanovlm.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_TEACHER,
                         build_config, main)

TINY_MODEL = [
    "--set", "model.embed_dim=8", "--set", "model.heads=2",
    "--set", "model.head_dim=4", "--set", "model.layers=1",
    "--set", "model.ff_mult=2", "--set", "model.max_text_len=12",
    "--set", "model.max_answer_len=12", "--set", "model.itc_proj_dim=4",
]
TINY_TRAIN = ["--set", "train.epochs=2", "--set", "train.batch_size=6",
              "--set", "train.early_stop_patience=1000"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    images = root / "images"
    assert main(["synth-data", "--out", str(images), "--per-category", "1",
                 "--seed", "3"]) == EXIT_OK
    records = root / "records.jsonl"
    assert main(["gen-data", "--manifest", str(images / "manifest.json"),
                 "--out", str(records), "--templates", "2", "--seed", "3"]) == EXIT_OK
    run = root / "run"
    assert main(["train", "--data", str(records), "--images-root", str(images),
                 "--out", str(run), "--seed", "5", *TINY_MODEL, *TINY_TRAIN]) == EXIT_OK
    return root, images, records, run


class TestConfigHandling:
    def test_defaults_plus_overrides(self):
        values = build_config(None, ["train.epochs=3", "model.layers=2"], seed=9)
        assert values["train.epochs"] == 3
        assert values["model.layers"] == 2
        assert values["seed"] == 9

    def test_unknown_key_rejected(self):
        from nanovlm.cli import ConfigError
        with pytest.raises(ConfigError):
            build_config(None, ["train.momentum=0.9"], None)

    def test_unknown_file_key_rejected(self, tmp_path):
        from nanovlm.cli import ConfigError
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        with pytest.raises(ConfigError):
            build_config(str(cfg), [], None)

    def test_cli_beats_file_beats_defaults(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train.epochs": 7, "train.lr": 0.5}))
        values = build_config(str(cfg), ["train.epochs=2"], None)
        assert values["train.epochs"] == 2
        assert values["train.lr"] == 0.5
        assert values["train.batch_size"] == 48


class TestExitCodes:
    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        assert excinfo.value.code == 2

    def test_answer_without_inputs_exits_two(self, workspace):
        root, images, records, run = workspace
        with pytest.raises(SystemExit) as excinfo:
            main(["answer", "--ckpt", str(run / "checkpoint")])
        assert excinfo.value.code == 2

    def test_config_violation_exits_three(self, tmp_path):
        code = main(["synth-data", "--out", str(tmp_path / "x"),
                     "--set", "bogus.key=1"])
        assert code == EXIT_CONFIG

    def test_missing_data_file_exits_four(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "none.jsonl"),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_DATA

    def test_mock_miss_exits_six(self, workspace, tmp_path):
        root, images, records, run = workspace
        code = main(["gen-data", "--manifest", str(images / "manifest.json"),
                     "--out", str(tmp_path / "r.jsonl"), "--templates", "1",
                     "--mock-dir", str(tmp_path / "empty_mock")])
        assert code == EXIT_TEACHER


class TestSynthData:
    def test_manifest_and_snapshot_written(self, workspace):
        root, images, records, run = workspace
        manifest = json.loads((images / "manifest.json").read_text())
        assert len(manifest["images"]) == 10
        snapshot = json.loads((images / "effective_config.json").read_text())
        assert snapshot["seed"] == 3


class TestGenData:
    def test_records_validate(self, workspace):
        from nanovlm.teacher import read_records, validate_dataset
        root, images, records, run = workspace
        recs = read_records(records)
        assert len(recs) == 10 * 3  # template 2 has three sub-questions
        assert validate_dataset(recs, images).ok


class TestTrain:
    def test_checkpoint_layout(self, workspace):
        root, images, records, run = workspace
        assert (run / "checkpoint" / "manifest.json").exists()
        assert (run / "checkpoint" / "weights.bin").exists()
        assert (run / "checkpoint" / "vocab.txt").exists()
        assert (run / "history.csv").exists()
        assert (run / "effective_config.json").exists()

    def test_deterministic_across_runs(self, workspace, tmp_path):
        root, images, records, run = workspace
        out2 = tmp_path / "run2"
        assert main(["train", "--data", str(records), "--images-root", str(images),
                     "--out", str(out2), "--seed", "5", *TINY_MODEL, *TINY_TRAIN]) == EXIT_OK
        w1 = (run / "checkpoint" / "weights.bin").read_bytes()
        w2 = (out2 / "checkpoint" / "weights.bin").read_bytes()
        assert w1 == w2

    def test_snapshot_reproduces_run(self, workspace, tmp_path):
        root, images, records, run = workspace
        snapshot = run / "effective_config.json"
        out3 = tmp_path / "run3"
        assert main(["train", "--data", str(records), "--images-root", str(images),
                     "--out", str(out3), "--config", str(snapshot)]) == EXIT_OK
        assert (run / "checkpoint" / "weights.bin").read_bytes() == \
               (out3 / "checkpoint" / "weights.bin").read_bytes()


class TestAnswer:
    def test_prints_single_answer_line(self, workspace, capsys):
        root, images, records, run = workspace
        image = next(images.glob("particles_*.png"))
        code = main(["answer", "--image", str(image),
                     "--question", "Describe the overall shape and morphology of the nanomaterials?",
                     "--ckpt", str(run / "checkpoint"), *TINY_MODEL])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert len(out.strip().splitlines()) == 1

    def test_batch_jsonl(self, workspace, tmp_path):
        root, images, records, run = workspace
        image = next(images.glob("fibres_*.png"))
        batch = tmp_path / "batch.jsonl"
        batch.write_text(json.dumps({"image_path": str(image),
                                     "instruction": "what is shown"}) + "\n")
        out_dir = tmp_path / "answers"
        out_dir.mkdir()
        code = main(["answer", "--batch", str(batch), "--ckpt", str(run / "checkpoint"),
                     "--out", str(out_dir)])
        assert code == EXIT_OK
        rows = [json.loads(line) for line in
                (out_dir / "answers.jsonl").read_text().splitlines()]
        assert set(rows[0]) == {"answer", "tokens", "latency_ms"}


class TestEval:
    def test_eval_vqa_report(self, workspace, tmp_path):
        root, images, records, run = workspace
        out = tmp_path / "vqa"
        code = main(["eval-vqa", "--data", str(records), "--images-root", str(images),
                     "--ckpt", str(run / "checkpoint"), "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads((out / "vqa_report.json").read_text())
        for key in ("bleu2", "bleu4", "rouge1", "rouge2", "rougeL", "meteor"):
            assert 0.0 <= report["mean"][key] <= 1.0
        assert (out / "vqa_report.md").exists()

    def test_eval_classify_report(self, workspace, tmp_path):
        root, images, records, run = workspace
        out = tmp_path / "cls"
        code = main(["eval-classify", "--manifest", str(images / "manifest.json"),
                     "--ckpt", str(run / "checkpoint"), "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads((out / "classify_report.json").read_text())
        assert 0.0 <= report["top1"] <= report["top5"] <= 1.0
        confusion = np.asarray(report["prf"]["confusion"])
        assert confusion.sum() == 10
