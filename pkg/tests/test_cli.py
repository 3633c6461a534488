import json
import subprocess
import sys

import pytest

from histpetl.cli import build_config, load_config_file, main, parse_overrides
from histpetl.errors import ConfigError

TINY = """
[model]
dim = 8
heads = 2
blocks = 2
in_features = 4
max_len = 6
classes = 3

[method]
kind = "hpt"
bins = 4

[train]
batch_size = 4
max_epochs = 2
seed = 3

[data.generator]
classes = 3
train_per_class = 6
val_per_class = 3
test_per_class = 3
seq_len = 6
features = 4
seed = 1
"""


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.setenv("HISTPETL_OUTPUT_ROOT", str(tmp_path / "runs"))
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    return cfg


def train_run(tiny, out, *extra):
    assert main(["train", "--config", str(tiny), "--out", str(out), *extra]) == 0
    return out


# -- configuration ----------------------------------------------------------


def test_overrides_parse_json_values():
    assert parse_overrides(["--train.lr", "0.5", "--method.kind=lora", "--model.blocks=3"]) == {
        "train": {"lr": 0.5}, "method": {"kind": "lora"}, "model": {"blocks": 3}}
    with pytest.raises(ConfigError):
        parse_overrides(["--bogus"])


def test_build_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        build_config({"model": {"width": 3}})
    with pytest.raises(ConfigError):
        build_config({"optimizer": {}})


def test_method_lr_default_and_override():
    assert build_config({"method": {"kind": "full_finetune"}}).train.lr == 1e-5
    assert build_config({"method": {"kind": "hpt"}}).train.lr == 1e-3
    assert build_config({"method": {"kind": "full_finetune"}, "train": {"lr": 0.1}}).train.lr == 0.1


def test_json_and_toml_configs_agree(tmp_path, tiny):
    j = tmp_path / "c.json"
    j.write_text(json.dumps(load_config_file(tiny)))
    assert build_config(load_config_file(j)).to_dict() == build_config(load_config_file(tiny)).to_dict()


def test_bad_toml_is_validation_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    assert main(["train", "--config", str(bad)]) == 1


# -- commands ---------------------------------------------------------------


def test_gen_data(tiny, tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(tiny), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} >= {"train.ptds", "val.ptds", "test.ptds", "manifest.json",
                                               "config.json"}


def test_train_outputs_and_byte_identical_rerun(tiny, tmp_path):
    first = train_run(tiny, tmp_path / "a")
    for name in ("config.json", "report.json", "loss.csv", "checkpoint.zip"):
        assert (first / name).is_file(), name
    again = train_run(first / "config.json", tmp_path / "b")
    assert (again / "loss.csv").read_bytes() == (first / "loss.csv").read_bytes()
    assert (again / "checkpoint.zip").read_bytes() == (first / "checkpoint.zip").read_bytes()


def test_train_from_dataset_directory(tiny, tmp_path):
    main(["gen-data", "--config", str(tiny), "--out", str(tmp_path / "d")])
    out = train_run(tiny, tmp_path / "t", "--data", str(tmp_path / "d"))
    inline = train_run(tiny, tmp_path / "t2")
    assert (out / "loss.csv").read_bytes() == (inline / "loss.csv").read_bytes()
    assert json.loads((out / "config.json").read_text())["data"]["path"] == str(tmp_path / "d")


def test_shorthand_flags_and_overrides_land_in_manifest(tiny, tmp_path):
    out = train_run(tiny, tmp_path / "x", "--method", "adapter", "--rate", "4", "--train.max_epochs=1",
                    "--seed", "9")
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["method"]["kind"] == "adapter" and cfg["method"]["rate"] == 4
    assert cfg["train"]["max_epochs"] == 1 and cfg["train"]["seed"] == 9
    assert len((out / "loss.csv").read_text().splitlines()) == 2


def test_default_output_root_from_env(tiny, tmp_path):
    assert main(["train", "--config", str(tiny)]) == 0
    assert any((tmp_path / "runs").glob("train-hpt4-*/loss.csv"))


def test_train_class_mismatch_is_validation_error(tiny, tmp_path):
    assert main(["train", "--config", str(tiny), "--model.classes=4", "--out", str(tmp_path / "o")]) == 1


def test_eval(tiny, tmp_path):
    run = train_run(tiny, tmp_path / "r")
    assert main(["eval", str(run / "checkpoint.zip"), "--split", "val"]) == 0
    result = json.loads((run / "eval-val.json").read_text())
    assert 0.0 <= result["accuracy"] <= 1.0
    report = json.loads((run / "report.json").read_text())
    assert main(["eval", str(run / "checkpoint.zip")]) == 0
    test = json.loads((run / "eval-test.json").read_text())
    assert test["accuracy"] == report["test_accuracy"]


def test_eval_missing_or_corrupt_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path / "nope.zip")]) == 2
    junk = tmp_path / "junk.zip"
    junk.write_bytes(b"junk")
    assert main(["eval", str(junk)]) == 2


def test_count_params_preset(tmp_path, capsys):
    assert main(["count-params", "--preset", "table1-hpt16", "--out", str(tmp_path / "c")]) == 0
    text = capsys.readouterr().out
    assert "16,932" in text and "17.2K" in text
    assert (tmp_path / "c" / "audit-0.csv").read_text().splitlines()[-2] == "total_trainable,16932"
    assert main(["count-params", "--preset", "nope"]) == 1
    assert main(["count-params", "--list-presets"]) == 0
    assert "table3-lora6" in capsys.readouterr().out


def test_count_params_from_config(tiny, tmp_path):
    assert main(["count-params", "--config", str(tiny), "--out", str(tmp_path / "c")]) == 0
    audit = json.loads((tmp_path / "c" / "audit.json").read_text())[0]
    assert audit["trainable"] == audit["expected_trainable"] == 4 * 8 + 8 + 16 + 27


def test_grad_check_and_fault_injection(tmp_path):
    assert main(["grad-check", "--family", "linear", "--family", "hist_forward", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "gradcheck.csv").read_text().startswith("family,max_rel_error")
    assert main(["grad-check", "--family", "layer_norm", "--corrupt", "layer_norm"]) == 1
    assert main(["grad-check", "--family", "conv"]) == 1


def test_similarity_and_report(tiny, tmp_path):
    a = train_run(tiny, tmp_path / "a")
    b = train_run(tiny, tmp_path / "b", "--method", "linear_probe")
    sim = tmp_path / "sim"
    assert main(["similarity", str(a / "checkpoint.zip"), str(b / "checkpoint.zip"), "--out", str(sim)]) == 0
    rows = (sim / "similarity.csv").read_text().splitlines()
    assert rows[0] == "block,score" and len(rows) == 3
    rep = tmp_path / "rep"
    assert main(["report", str(a), str(b), "--similarity", f"hpt={sim / 'similarity.csv'}",
                 "--out", str(rep)]) == 0
    for name in ("summary.csv", "loss_curves.png", "accuracy.png", "similarity.png"):
        assert (rep / name).stat().st_size > 0, name
    assert (rep / "loss_curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    summary = (rep / "summary.csv").read_text().splitlines()
    assert len(summary) == 3 and summary[0].startswith("method,runs,mean_accuracy")


def test_report_on_non_run_directory(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_usage_errors_exit_1():
    for argv in (["no-such-command"], ["train", "--method", "prefix"], ["eval"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1, argv


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "histpetl.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "count-params", "grad-check", "similarity", "report", "benchmark"):
        assert cmd in proc.stdout
