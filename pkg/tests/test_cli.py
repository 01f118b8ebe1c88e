import json

import numpy as np
import pytest

from elemseg.cli import main
from elemseg.data import read_image, read_mask

from conftest import TINY_MODEL, TINY_SPEC

FAST_TRAIN = dict(learning_rate=2e-3, steps=6, accum=2, eval_interval=3,
                  patience=2, seed=0)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data_dir(workdir):
    spec_path = workdir / "spec.json"
    from elemseg.screens import GeneratorSpec
    spec_path.write_text(json.dumps(GeneratorSpec(**TINY_SPEC).to_dict()))
    out = workdir / "data"
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(out),
                 "--count", "12"]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(workdir, data_dir):
    model_cfg = workdir / "model.json"
    model_cfg.write_text(json.dumps(TINY_MODEL))
    train_cfg = workdir / "train.json"
    train_cfg.write_text(json.dumps(FAST_TRAIN))
    out = workdir / "model.ckpt"
    assert main(["train", "--data", str(data_dir), "--model-config", str(model_cfg),
                 "--train-config", str(train_cfg), "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_outputs_exist(self, data_dir):
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "generator.json"):
            assert (data_dir / name).exists()
        assert any((data_dir / "images").iterdir())
        assert any((data_dir / "masks").iterdir())

    def test_determinism_byte_identical(self, workdir, data_dir, capsys):
        other = workdir / "data2"
        spec_path = workdir / "spec.json"
        assert main(["gen-data", "--spec", str(spec_path), "--out", str(other),
                     "--count", "12"]) == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl"):
            assert (other / name).read_bytes() == (data_dir / name).read_bytes()

    def test_bad_count_fails(self, workdir, capsys):
        assert main(["gen-data", "--out", str(workdir / "x"), "--count", "3"]) == 1
        assert "count" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_log_written(self, ckpt):
        assert ckpt.exists()
        assert (ckpt.parent / f"{ckpt.name}.json").exists()
        log = ckpt.parent / f"{ckpt.name}.log.csv"
        assert log.read_text().startswith("step,train_loss,val_miou,val_accuracy")

    def test_summary_json_on_stdout(self, workdir, data_dir, capsys):
        model_cfg = workdir / "model.json"
        train_cfg = workdir / "train.json"
        out = workdir / "model_b.ckpt"
        assert main(["train", "--data", str(data_dir), "--model-config", str(model_cfg),
                     "--train-config", str(train_cfg), "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["checkpoint"] == str(out)
        assert 0.0 <= summary["val_accuracy"] <= 1.0

    def test_byte_identical_rerun(self, workdir, data_dir, ckpt):
        model_cfg = workdir / "model.json"
        train_cfg = workdir / "train.json"
        out = workdir / "model_c.ckpt"
        assert main(["train", "--data", str(data_dir), "--model-config", str(model_cfg),
                     "--train-config", str(train_cfg), "--out", str(out)]) == 0
        assert out.read_bytes() == ckpt.read_bytes()
        assert (out.parent / f"{out.name}.log.csv").read_bytes() == \
            (ckpt.parent / f"{ckpt.name}.log.csv").read_bytes()


class TestEval:
    def test_prints_report_json(self, data_dir, ckpt, capsys):
        assert main(["eval", "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--split", "test"]) == 0
        report = json.loads(capsys.readouterr().out.strip())
        assert report["split"] == "test"
        assert report["count"] > 0
        assert 0.0 <= report["miou"] <= 1.0
        assert 0.0 <= report["accuracy"] <= 1.0

    def test_missing_checkpoint_fails(self, data_dir, capsys):
        assert main(["eval", "--data", str(data_dir), "--ckpt", "/nope.ckpt"]) == 1
        assert capsys.readouterr().err


class TestInfer:
    def test_writes_heatmap_and_mask(self, workdir, data_dir, ckpt, capsys):
        rec = json.loads((data_dir / "test.jsonl").read_text().splitlines()[0])
        elements_path = workdir / "elements.json"
        elements_path.write_text(json.dumps(rec["elements"]))
        out = workdir / "heat.png"
        assert main(["infer", "--ckpt", str(ckpt),
                     "--image", str(data_dir / rec["image"]),
                     "--elements", str(elements_path),
                     "--expr", rec["expression"], "--out", str(out)]) == 0
        heat = read_image(out)
        assert heat.shape[:2] == (TINY_SPEC["image_size"], TINY_SPEC["image_size"])
        mask = read_mask(workdir / "heat.mask.png")
        assert mask.shape == (TINY_SPEC["image_size"], TINY_SPEC["image_size"])


class TestAblate:
    def test_writes_grid_csv(self, workdir, data_dir, capsys):
        model_cfg = workdir / "model.json"
        train_cfg = workdir / "ablate_train.json"
        train_cfg.write_text(json.dumps({**FAST_TRAIN, "steps": 2, "eval_interval": 1,
                                         "patience": 1}))
        out = workdir / "grid.csv"
        assert main(["ablate", "--data", str(data_dir), "--out", str(out),
                     "--model-config", str(model_cfg),
                     "--train-config", str(train_cfg)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "img,el,proj,description,accuracy,miou,status"
        assert len(lines) == 6


class TestGradcheck:
    def test_passes_with_small_settings(self, capsys):
        assert main(["gradcheck", "--size", "12", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "model_12x12" in out and "FAIL" not in out


class TestParser:
    def test_unknown_command_exits_nonzero(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
