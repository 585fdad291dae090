import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from mixtable.cli import main
from mixtable.data import write_bundle
from mixtable.model import LaTable, ModelConfig, save_checkpoint
from mixtable.toy import table_a

TINY = ["--d-f", "8", "--d-h", "16", "--n-layers", "1", "--n-heads", "2", "--t-train", "20", "--t-infer", "5"]


def digest(paths):
    return {str(p): hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_bundle(table_a(200, seed=1), root / "raw")
    assert main(["ingest", "--schema", str(root / "raw/schema.json"), "--csv", str(root / "raw/data.csv"), "--out", str(root / "ds"), "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "ds/train"), "--val", str(root / "ds/val"), "--out", str(root / "run"), "--epochs", "2", "--lr0", "1e-3", *TINY]) == 0
    return root


def test_ingest_writes_splits_and_config(workspace):
    for part in ("train", "val", "test"):
        assert {p.name for p in (workspace / "ds" / part).iterdir()} == {"schema.json", "data.csv", "stats.json"}
    cfg = json.loads((workspace / "ds/config.json").read_text())
    assert cfg["command"] == "ingest" and cfg["seed"] == 3 and cfg["split"] == [0.8, 0.1, 0.1]


def test_train_outputs(workspace):
    run = workspace / "run"
    assert {p.name for p in run.iterdir()} == {"checkpoint.ltbl", "loss_curve.csv", "config.json"}
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["d_h"] == 16 and cfg["lr0"] == 1e-3
    assert (run / "loss_curve.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"


def test_generate_twice_is_byte_identical(workspace, tmp_path):
    args = ["generate", "--checkpoint", str(workspace / "run/checkpoint.ltbl"), "--schema", str(workspace / "ds/train/schema.json"), "--n", "100", "--seed", "1"]
    assert main([*args, "--out", str(tmp_path / "a.csv")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "score,group" and len(lines) == 101
    assert {line.split(",")[1] for line in lines[1:]} <= {"X", "Y"}
    cfg = json.loads((tmp_path / "a.config.json").read_text())
    assert cfg["d_h"] == 16 and cfg["seed"] == 1  # model settings come from the checkpoint


def test_evaluate_prints_metric_report(workspace, tmp_path, capsys):
    gen = tmp_path / "gen.csv"
    main(["generate", "--checkpoint", str(workspace / "run/checkpoint.ltbl"), "--schema", str(workspace / "ds/train/schema.json"), "--n", "50", "--out", str(gen)])
    capsys.readouterr()
    assert main(["evaluate", "--real", str(workspace / "ds/test/data.csv"), "--synth", str(gen), "--k", "5"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"precision", "recall", "density", "coverage", "n_real", "n_synth", "k", "downstream_auc"}
    assert report["k"] == 5 and report["n_synth"] == min(50, report["n_real"])
    assert 0 <= report["coverage"] <= 1


def test_evaluate_with_label_and_out(workspace, tmp_path):
    out = tmp_path / "rep.json"
    test_dir = workspace / "ds/test"
    assert main(["evaluate", "--real", str(test_dir), "--synth", str(workspace / "ds/val"), "--label", "group", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert 0 <= report["downstream_auc"] <= 1
    assert json.loads((tmp_path / "rep.config.json").read_text())["label"] == "group"


def test_finetune_leaves_inputs_untouched(workspace, tmp_path):
    inputs = [workspace / "run/checkpoint.ltbl", *sorted((workspace / "ds/train").iterdir())]
    before = digest(inputs)
    rc = main(["finetune", "--checkpoint", str(workspace / "run/checkpoint.ltbl"), "--data", str(workspace / "ds/train"), "--n-samples", "100", "--epochs", "1", "--out", str(tmp_path / "ft")])
    assert rc == 0
    assert digest(inputs) == before
    assert (tmp_path / "ft/checkpoint.ltbl").exists()


def test_cache_embeddings_then_train_reads_without_writing(workspace, tmp_path):
    cache = tmp_path / "emb.bin"
    assert main(["cache-embeddings", "--data", str(workspace / "ds/train"), "--cache", str(cache), "--d-f", "8"]) == 0
    size = cache.stat().st_size
    assert size == 5 * (32 + 4 + 4 * 8)  # description, two names, two category sentences
    assert json.loads(sidecar_text(cache))["command"] == "cache-embeddings"
    before = digest([cache])
    rc = main(["train", "--data", str(workspace / "ds/train"), "--out", str(tmp_path / "r"), "--epochs", "1", "--cache", str(cache), *TINY])
    assert rc == 0 and digest([cache]) == before


def sidecar_text(path):
    return path.with_name(path.stem + ".config.json").read_text()


def test_overlap_report(workspace, tmp_path):
    out = tmp_path / "ov.json"
    assert main(["overlap-report", "--source", str(workspace / "ds/train"), "--target", str(workspace / "ds/test"), "--out", str(out), "--matrix-csv", str(tmp_path / "m.csv"), "--d-f", "64"]) == 0
    assert json.loads(out.read_text())["dissimilar_fraction"] == 0.0
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "target,score,group"


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"epochs": 3, "lr0": 5e-4, "d_h": 16, "n_heads": 2, "n_layers": 1, "d_f": 8, "T_train": 20, "T_infer": 5}))
    rc = main(["train", "--config", str(cfg_path), "--epochs", "1", "--data", str(workspace / "ds/train"), "--out", str(tmp_path / "r")])
    assert rc == 0
    echoed = json.loads((tmp_path / "r/config.json").read_text())
    assert echoed["epochs"] == 1 and echoed["lr0"] == 5e-4


def test_config_errors_exit_2(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epoch": 3}))
    assert main(["train", "--config", str(bad), "--data", str(workspace / "ds/train"), "--out", str(tmp_path / "r")]) == 2
    line = error_line(capsys)
    assert line == {"error": "ConfigError", "exit_code": 2, "message": line["message"]} and "epoch" in line["message"]
    assert main(["train", "--data", str(workspace / "ds/train"), "--out", str(tmp_path / "r"), "--d-h", "16", "--n-heads", "3"]) == 2


def test_data_errors_exit_3(workspace, tmp_path, capsys):
    assert main(["evaluate", "--real", str(tmp_path / "nope.csv"), "--synth", str(tmp_path / "nope.csv")]) == 3
    assert error_line(capsys)["error"] == "DataError"
    bad_csv = tmp_path / "bad.csv"
    bad_csv.write_text("score,group\n1.0,Z\n")
    assert main(["ingest", "--schema", str(workspace / "raw/schema.json"), "--csv", str(bad_csv), "--out", str(tmp_path / "o")]) == 3
    assert "row 0" in error_line(capsys)["message"]


def test_provider_error_exit_4(workspace, tmp_path, capsys):
    rc = main(["cache-embeddings", "--data", str(workspace / "ds/train"), "--cache", str(tmp_path / "e.bin"), "--provider", "remote", "--endpoint", "http://127.0.0.1:9", "--d-f", "8"])
    assert rc == 4
    assert error_line(capsys)["error"] == "ProviderError"


def test_nan_exit_5(workspace, tmp_path, capsys):
    model = LaTable(ModelConfig(d_h=16, d_f=8, n_layers=1, n_heads=2, T_train=20, T_infer=5))
    model.store["g_r.0.bias"].data[:] = np.nan
    save_checkpoint(model, tmp_path / "nan.ltbl")
    rc = main(["finetune", "--checkpoint", str(tmp_path / "nan.ltbl"), "--data", str(workspace / "ds/train"), "--n-samples", "20", "--epochs", "1", "--out", str(tmp_path / "ft")])
    assert rc == 5
    assert error_line(capsys)["error"] == "NumericError"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mixtable", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("mixtable ")
