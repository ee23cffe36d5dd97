import json
import subprocess
import sys
import time

import pytest
from filelock import FileLock

from decoupled_nas.cli import format_count, main


def _run(*argv):
    return main(list(argv))


def test_format_count():
    assert format_count(4) == "4"
    assert format_count(9999) == "9999"
    assert format_count(1_037_664_180) == "1037664180 (≈1.04e9)"
    assert format_count(99_999) == "99999 (≈1.00e5)"


def test_count_small_space(capsys):
    assert _run("count", "conv", "3", "--num-ops", "2") == 0
    assert capsys.readouterr().out.strip() == "4"
    assert _run("count", "--config", "tabular-bench") == 0
    assert capsys.readouterr().out.strip() == "180"


def test_usage_errors_exit_2(capsys, tmp_path):
    assert _run("count", "conv", "2") == 2
    assert _run("count", "conv", "6", "--num-ops", "9") == 2
    assert _run("count", "conv", "6", "--ops", "a", "--num-ops", "1") == 2
    assert _run("search", "--config", "tabular-bench") == 2
    assert _run("search", "--out", str(tmp_path / "x")) == 2
    assert _run("resume", "--out", str(tmp_path / "nothing")) == 2
    assert _run("derive", "--out", str(tmp_path / "nothing")) == 2
    assert _run("stats", "--out", str(tmp_path / "nothing")) == 2
    assert _run("export-dot", "--out", str(tmp_path / "nothing")) == 2
    with pytest.raises(SystemExit) as e:
        _run("frobnicate")
    assert e.value.code == 2


def test_malformed_config_reports_line_and_field(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("task: tabular\nseed: 0\npolicy_lr: -1\n")
    assert _run("search", "--config", str(cfg), "--out", str(tmp_path / "run")) == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "policy_lr" in err


def test_enumerate(capsys):
    assert _run("enumerate", "conv", "3", "--num-ops", "2") == 0
    lines = capsys.readouterr().out.split("\n")
    assert lines[:2] == ["0>2:sep_conv_3x3 1>2:sep_conv_3x3", "0>2:sep_conv_3x3 1>2:sep_conv_5x5"]
    assert _run("enumerate", "recurrent", "4", "--limit", "3") == 0
    assert len(capsys.readouterr().out.split()) == 3 * 3


def test_search_smoke_and_byte_identical_outputs(tmp_path, capsys):
    t0 = time.perf_counter()
    assert _run("search", "--config", "cifar-like.toy", "--seed", "7", "--out", str(tmp_path / "a")) == 0
    assert time.perf_counter() - t0 < 60
    report = json.loads(capsys.readouterr().out)
    assert set(report["derived"]) == {"conv_normal", "conv_reduction"}
    assert _run("search", "--config", "cifar-like.toy", "--seed", "7", "--out", str(tmp_path / "b")) == 0
    for name in ("architecture.json", "conv_normal.dot", "conv_reduction.dot"):
        assert (tmp_path / "a" / "derived" / name).read_bytes() == (tmp_path / "b" / "derived" / name).read_bytes()


def test_locked_run_directory_exits_1(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    with FileLock(str(out / ".lock")):
        assert _run("search", "--config", "tabular-bench", "--out", str(out)) == 1
    assert "locked" in capsys.readouterr().err


def test_resume_derive_stats_export(tmp_path, capsys):
    out = tmp_path / "run"
    assert _run("search", "--config", "tabular-bench", "--out", str(out)) == 0
    capsys.readouterr()
    assert _run("resume", "--out", str(out), "--checkpoint", str(out / "checkpoints" / "epoch_0020.ckpt")) == 0
    capsys.readouterr()
    assert _run("derive", "--out", str(out), "--samples", "5", "--seed", "1") == 0
    derived = json.loads(capsys.readouterr().out)
    assert list(derived) == ["conv_normal"]
    body = json.loads((out / "derived" / "architecture.json").read_text())
    assert body["candidates"] == 5 and "true_reward" in body
    assert _run("stats", "--out", str(out)) == 0
    assert "bucket 0 conv_normal: 500 samples" in capsys.readouterr().out
    dots = tmp_path / "dots"
    assert _run("export-dot", "--out", str(dots), "--input", str(out / "derived" / "architecture.json"),
                "--config", "tabular-bench") == 0
    assert (dots / "conv_normal.dot").read_text().startswith('digraph "conv_normal"')
    assert _run("export-dot", "--out", str(out)) == 0


def test_console_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "decoupled_nas.cli", "count", "recurrent", "9"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert proc.stdout.strip() == "2642411520 (≈2.64e9)"
