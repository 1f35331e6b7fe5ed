import hashlib
import json
import math

import numpy as np
import pytest

from selfscreen import ffnn
from selfscreen.cli import run_cli
from selfscreen.data import Dataset, save_dataset
from selfscreen.embed import hash_embed
from selfscreen.report import read_report

from conftest import HAPPY, SAD, cohort_dataset, make_sample

PNG = b"\x89PNG\r\n\x1a\n" + b"\x01" * 40


@pytest.fixture
def data_file(tmp_path):
    samples = [make_sample(f"s{i:02d}", f"p{i // 2}", i % 3 == 0, variant=i) for i in range(24)]
    path = tmp_path / "d.jsonl"
    save_dataset(Dataset(tuple(samples), source_vlm="mock-vlm"), path)
    return path


def run(*argv):
    return run_cli([str(a) for a in argv])


def test_eval_happy_path(tmp_path, data_file, capsys):
    out = tmp_path / "out"
    assert run("eval", "--dataset", data_file, "--variant", "default", "--seed", 7, "--epochs", 3,
               "--out-dir", out, "--model-out", out / "model.json", "--model-name", "mock-vlm") == 0
    for name in ("predictions.jsonl", "report.csv", "report.json", "manifest-eval.json", "model.json"):
        assert (out / name).exists(), name
    row = read_report(out / "report.csv")[0]
    assert row["model"] == "mock-vlm" and row["variant"] == "default"
    assert len((out / "predictions.jsonl").read_text().splitlines()) == 24
    manifest = json.loads((out / "manifest-eval.json").read_text())
    assert manifest["seeds"] == {"global": 7} and manifest["config"]["epochs"] == 3
    assert json.loads(capsys.readouterr().out.strip())["f1"] == row["f1"]


def test_eval_outputs_are_byte_identical(tmp_path, data_file):
    for d in ("a", "b"):
        assert run("eval", "--dataset", data_file, "--seed", 3, "--epochs", 2, "--out-dir", tmp_path / d) == 0
    for name in ("predictions.jsonl", "report.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_usage_errors_exit_1(tmp_path, data_file, capsys):
    assert run("eval") == 1
    assert "--dataset" in capsys.readouterr().err
    assert run("frobnicate") == 1
    assert run("eval", "--dataset", data_file, "--bogus") == 1
    assert run("eval", "--dataset", tmp_path / "missing.jsonl") == 1
    assert run("sweep", "--dataset", data_file, "--h", "4,x") == 1


def test_config_file(tmp_path, data_file):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("epochs: 1\nvariant: alternative\nh: 4\n")
    assert run("eval", "--dataset", data_file, "--config", cfg, "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "manifest-eval.json").read_text())["config"]["hidden_units"] == 4
    cfg.write_text("epochz: 1\n")
    assert run("eval", "--dataset", data_file, "--config", cfg) == 1


def test_sweep_seven_rows(tmp_path, data_file):
    assert run("sweep", "--dataset", data_file, "--h", "4,8,16,32,64,128,256", "--epochs", 1,
               "--out-dir", tmp_path) == 0
    rows = read_report(tmp_path / "sweep_report.csv")
    assert [int(r["h"]) for r in rows] == [4, 8, 16, 32, 64, 128, 256]
    for r in rows:
        for col in ("precision", "recall", "f1", "auc", "accuracy"):
            assert 0.0 <= float(r[col]) <= 100.0
    assert (tmp_path / "sweep.png").read_bytes()[:4] == b"\x89PNG"
    assert (tmp_path / "sweep_predictions_h4.jsonl").exists()


def test_ingest(tmp_path, capsys):
    src = tmp_path / "cohort.jsonl"
    save_dataset(cohort_dataset(), src)
    assert run("ingest", "--dataset", src, "--out-dir", tmp_path / "o") == 0
    stats = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert (stats["n_samples"], stats["n_subjects"], stats["n_negative"], stats["n_positive"]) == (147, 108, 106, 41)
    assert stats["deviations_from_reference"] == {}
    assert (tmp_path / "o" / "distribution.png").exists()


def test_describe_embed_eval_with_mock(tmp_path):
    imgs = []
    for i in range(8):
        p = tmp_path / f"img{i}.png"
        p.write_bytes(PNG + bytes([i]))
        imgs.append(p)
    fixture = tmp_path / "fx.json"
    fixture.write_text(json.dumps({"model_name": "mock-vlm", "description": {
        hashlib.sha256(p.read_bytes()).hexdigest(): (SAD if i % 2 else HAPPY) for i, p in enumerate(imgs)}}))
    ds = Dataset(tuple(make_sample(f"s{i}", f"p{i}", i % 2 == 1, image_path=str(p), variant=i)
                       for i, p in enumerate(imgs)))
    save_dataset(ds, tmp_path / "d.jsonl")
    out = tmp_path / "o"
    assert run("describe", "--dataset", tmp_path / "d.jsonl", "--provider", "mock", "--fixture", fixture,
               "--out-dir", out) == 0
    lines = [json.loads(line) for line in (out / "descriptions.jsonl").read_text().splitlines()]
    assert {d["text"] for d in lines} == {SAD, HAPPY}
    assert run("embed", "--dataset", out / "dataset_described.jsonl", "--out-dir", out) == 0
    assert len((out / "embeddings.jsonl").read_text().splitlines()) == 8
    assert run("eval", "--dataset", out / "dataset_described.jsonl", "--embeddings", out / "embeddings.jsonl",
               "--epochs", 1, "--out-dir", out) == 0
    assert read_report(out / "report.csv")[0]["provider"] == "precomputed"


def test_describe_partial_failure_exits_2(tmp_path):
    ds = Dataset((make_sample("s0", "p0", False, image_path=str(tmp_path / "nope.png")),))
    save_dataset(ds, tmp_path / "d.jsonl")
    assert run("describe", "--dataset", tmp_path / "d.jsonl", "--provider", "mock", "--out-dir", tmp_path) == 2
    assert "s0" in (tmp_path / "describe_failures.json").read_text()


def test_zeroshot_from_verdict_file(tmp_path, data_file):
    verdicts = tmp_path / "v.jsonl"
    with open(verdicts, "w") as fh:
        for i in range(24):
            fh.write(json.dumps({"sample_id": f"s{i:02d}", "raw_text": "Output: Normal",
                                 "parsed": "normal"}) + "\n")
    assert run("zeroshot", "--dataset", data_file, "--verdicts", verdicts, "--out-dir", tmp_path) == 0
    row = read_report(tmp_path / "zeroshot_report.csv")[0]
    assert row["recall"] == "0.0" and row["auc"] == "50.0"


def test_zeroshot_with_mock_provider(tmp_path):
    p = tmp_path / "i.png"
    p.write_bytes(PNG)
    fixture = tmp_path / "fx.json"
    fixture.write_text(json.dumps({"zeroshot": {hashlib.sha256(PNG).hexdigest(): "Output: Anxiety."}}))
    ds = Dataset((make_sample("a", "A", True, image_path=str(p)), make_sample("b", "B", False, image_path=str(p))))
    save_dataset(ds, tmp_path / "d.jsonl")
    assert run("zeroshot", "--dataset", tmp_path / "d.jsonl", "--provider", "mock", "--fixture", fixture,
               "--out-dir", tmp_path) == 0
    row = read_report(tmp_path / "zeroshot_report.csv")[0]
    assert row["recall"] == "100.0" and row["precision"] == "50.0"


def toy_model(tmp_path):
    """W[1] = embedding of SAD, everything else zero: p_abnormal(SAD) = 1 / (1 + e^-1)."""
    e = hash_embed(SAD).values
    W = np.zeros((2, 384))
    W[1] = e
    params = ffnn.FfnnParams(ffnn.DEFAULT, {"W": W, "b": np.zeros(2)})
    ffnn.save_model(params, tmp_path / "toy.json")
    return tmp_path / "toy.json", float(e @ e)


def test_screen_once_toy_model_text(tmp_path, capsys):
    model, ee = toy_model(tmp_path)
    assert abs(ee - 1.0) < 1e-12
    assert run("screen-once", "--model", model, "--text", SAD) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["label"] == "abnormal"
    assert out["p_abnormal"] == pytest.approx(0.7310585786300049, abs=1e-15)
    assert out["p_abnormal"] == pytest.approx(1.0 / (1.0 + math.exp(-ee)), abs=1e-15)


def test_screen_once_image_through_mock(tmp_path, capsys):
    model, _ = toy_model(tmp_path)
    img = tmp_path / "i.png"
    img.write_bytes(PNG)
    fixture = tmp_path / "fx.json"
    fixture.write_text(json.dumps({"description": {hashlib.sha256(PNG).hexdigest(): SAD}}))
    assert run("screen-once", "--model", model, "--provider", "mock", "--fixture", fixture, "--image", img) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["description"] == SAD and out["p_abnormal"] == pytest.approx(0.7310585786300049, abs=1e-15)


def test_screen_once_errors(tmp_path, capsys):
    model, _ = toy_model(tmp_path)
    assert run("screen-once", "--model", model, "--provider", "mock", "--image", tmp_path / "missing.png") == 1
    assert json.loads(capsys.readouterr().err)["stage"] == "describe"
    assert run("screen-once", "--model", model, "--image", "x.png", "--text", SAD) == 1
    assert run("screen-once", "--model", tmp_path / "nope.json", "--text", SAD) == 1
