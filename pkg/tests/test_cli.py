import json
import subprocess
import sys

import pytest

from ntmask.cli import main, parse_and_validate
from ntmask.evaluation import MetricsReport


def _write_config(tmp_path, ckpt, **extra):
    cfg = {
        "mode": "sa", "source_ckpt": str(ckpt), "target": "mnist-color",
        "optim": {"lr": 1e-2, "batch_size": 8},
        "budget": {"steps": 3, "train_limit": 100, "eval_limit": 60, "log_every": 0},
        **extra,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_set_override_reaches_config(tmp_path):
    cfg_path = _write_config(tmp_path, "x.ckpt")
    cmd, cfg = parse_and_validate(["protect", "--config", str(cfg_path), "--set", "hparams.lambda=0.2",
                                   "--seed", "5", "--out", str(tmp_path / "r")])
    assert cfg.hparams.lam == 0.2 and cfg.seed == 5 and cfg.out_dir == str(tmp_path / "r")
    assert cmd.verb == "protect" and cmd.overrides == ["hparams.lambda=0.2"]


def test_invalid_lambda_exits_2_naming_the_constraint(tmp_path, capsys):
    cfg_path = _write_config(tmp_path, "x.ckpt")
    assert main(["protect", "--config", str(cfg_path), "--set", "hparams.lambda=-1"]) == 2
    assert "lambda > 0" in capsys.readouterr().err


def test_missing_target_and_bad_verb_exit_2(tmp_path, capsys):
    assert main(["protect", "--set", "mode=sa", "--set", "source_ckpt=x"]) == 2
    assert "target: required" in capsys.readouterr().err
    assert main(["train-everything"]) == 2
    assert main(["protect", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["verify-ownership", "--set", "mode=sa", "--set", "source_ckpt=x", "--set", "target=usps"]) == 2


def test_protect_runs_are_reproducible_and_stdout_matches_metrics(quick_source_3ch, tmp_path, capsys):
    cfg_path = _write_config(tmp_path, quick_source_3ch)
    outs = []
    for name in ("a", "b"):
        assert main(["protect", "--config", str(cfg_path), "--out", str(tmp_path / name)]) == 0
        outs.append(capsys.readouterr().out)
    a, b = (tmp_path / "a" / "metrics.json").read_bytes(), (tmp_path / "b" / "metrics.json").read_bytes()
    assert a == b
    report = MetricsReport.load(tmp_path / "a" / "metrics.json")
    for k, v in report.summary().items():
        assert f"  {k} = {v}" in outs[0]
    assert "ST-D" in outs[0]

    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b" / "metrics.json")]) == 0
    table = capsys.readouterr().out
    assert "a" in table and "b" in table and "Source Drop" in table


def test_evaluate_prints_exact_counts(quick_source_3ch, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(quick_source_3ch), "--domains", "mnist", "mnist-color",
                 "--limit", "50"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines] == ["mnist", "mnist-color"]
    assert all(ln.endswith("/50)") for ln in lines)
    assert main(["evaluate", "--checkpoint", str(quick_source_3ch), "--domains", "svhn"]) == 2


def test_failed_run_exits_1_and_leaves_marker(tmp_path, capsys):
    cfg_path = _write_config(tmp_path, tmp_path / "missing.ckpt")
    assert main(["protect", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 1
    assert "run failed" in capsys.readouterr().err
    assert (tmp_path / "run" / "FAILED").exists()


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "ntmask", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("pretrain", "protect", "verify-ownership", "evaluate", "report"):
        assert verb in res.stdout


@pytest.mark.parametrize("verb,mode", [("pretrain", "pretrain"), ("verify-ownership", "ownership")])
def test_verbs_imply_their_mode(verb, mode, tmp_path):
    extra = ["--set", "source_ckpt=x", "--set", "watermark={}"] if mode == "ownership" else []
    _, cfg = parse_and_validate([verb, "--out", str(tmp_path)] + extra)
    assert cfg.mode == mode
