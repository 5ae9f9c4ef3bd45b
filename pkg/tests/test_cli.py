import json

import pytest

from feddeap.cli import main
from feddeap.etf import delta_bound


def test_bounds_json(capsys):
    assert main(["bounds", "--k", "7", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["delta"] == pytest.approx(delta_bound(7))


def test_generate_and_inspect(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("samples_per_class = 10\n")
    out = tmp_path / "d.fdep"
    assert main(["generate-data", "--spec", str(cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["inspect-data", str(out), "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["raw"] is True and info["per_domain"] == [70, 70, 70, 70]


def test_train_evaluate_heatmap_export(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("samples_per_class = 15\nrounds = 2\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--json"]) == 0
    capsys.readouterr()
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["round"] for x in lines] == [0, 1, 2]
    ckpt = str(run / "checkpoint.fdck")
    assert main(["evaluate", "--checkpoint", ckpt, "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["round"] == 2
    assert main(["heatmap", "--checkpoint", ckpt, "--json"]) == 0
    assert len(json.loads(capsys.readouterr().out)["heatmap"]) == 4
    assert main(["export-features", "--checkpoint", ckpt, "--out", str(tmp_path / "f.tsv"), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["rows"] == 4 * 7 + 4 * 7 * 3

    cfg.write_text("samples_per_class = 15\nrounds = 3\n")
    assert main(["train", "--resume", ckpt, "--config", str(cfg), "--out", str(run), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["round"] == 3


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("nope = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    junk = tmp_path / "junk.fdep"
    junk.write_bytes(b"garbage bytes here")
    assert main(["inspect-data", str(junk)]) == 3
    assert main(["bounds", "--k", "1"]) == 4
    assert main(["no-such-command"]) == 2
