import subprocess
import sys

import numpy as np
import pytest

from redispatch import cli, datasets, surrogate
from redispatch.distrl import AgentConfig, AgentNets


def run_cli(args):
    return cli.main(args)


def test_usage_error_exits_2():
    proc = subprocess.run([sys.executable, "-m", "redispatch.cli",
                           "no-such-command"], capture_output=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "redispatch.cli"],
                          capture_output=True)
    assert proc.returncode == 2


def test_missing_config_file_is_usage_failure(tmp_path):
    rc = run_cli(["train-agent", "--out-dir", str(tmp_path),
                  "--config", str(tmp_path / "nope.cfg")])
    assert rc == 1


def test_missing_checkpoint_errors(tmp_path, capsys):
    rc = run_cli(["redispatch", "--out-dir", str(tmp_path), "--fault", "5"])
    assert rc == 1
    assert "not found" in capsys.readouterr().err


def test_gen_dataset_tiny(tmp_path, capsys):
    rc = run_cli(["gen-dataset", "--out-dir", str(tmp_path), "--seed", "3",
                  "--samples-per-level", "0"])
    # zero per level still writes a header-only dataset and reports 0 records
    assert rc == 0
    out = capsys.readouterr().out
    assert "target record count: 0" in out
    assert (tmp_path / "dataset.txt").exists()


def test_gen_dataset_paper_scale_prompt(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr("builtins.input", lambda prompt: "n")
    rc = run_cli(["gen-dataset", "--out-dir", str(tmp_path), "--paper-scale"])
    assert rc == 1
    out = capsys.readouterr().out
    assert "target record count: 148500" in out
    assert "aborted" in out


def test_eval_surrogate_reports_metrics(case, tiny_records, tmp_path, capsys):
    datasets.write_records(tmp_path / "dataset.txt", case, tiny_records)
    model, _ = surrogate.train_surrogate(case, tiny_records,
                                         np.random.default_rng(0), max_epochs=2)
    model.save(tmp_path / "surrogate.ckpt")
    rc = run_cli(["eval-surrogate", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    for token in ("MPEC", "F1", "Acc", "TNR", "TPR"):
        assert token in out
    assert (tmp_path / "surrogate_metrics.txt").exists()


def test_redispatch_emits_histograms(case, tiny_records, tmp_path, capsys):
    model, _ = surrogate.train_surrogate(case, tiny_records,
                                         np.random.default_rng(0), max_epochs=2)
    model.save(tmp_path / "surrogate.ckpt")
    nets = AgentNets(AgentConfig(conv_channels=(8, 8), task_hidden=(16, 16)),
                     rng=np.random.default_rng(1))
    nets.save(tmp_path / "agent_best.ckpt")
    rc = run_cli(["redispatch", "--out-dir", str(tmp_path), "--fault", "27",
                  "--level", "1.0", "--m-samples", "3"])
    assert rc == 0
    from redispatch.evaluate import read_histograms
    pre, crit, post = read_histograms(tmp_path / "redispatch_histograms.txt")
    for h in (pre, crit, post):
        assert h.sum() == pytest.approx(1.0, abs=1e-9)
    action_lines = (tmp_path / "redispatch_action.txt").read_text().splitlines()
    assert action_lines[0] == "gen_index action_mw"
    assert len(action_lines) == 10


def test_train_agent_with_config_file(case, tiny_records, tmp_path, capsys):
    model, _ = surrogate.train_surrogate(case, tiny_records,
                                         np.random.default_rng(0), max_epochs=2)
    model.save(tmp_path / "surrogate.ckpt")
    cfg = tmp_path / "train.cfg"
    cfg.write_text("episodes = 3\nwarmup_episodes = 1\nn_workers = 1\n"
                   "m_samples = 3\nbatch_size = 4\nvalidation_scenarios = 1\n"
                   "checkpoint_every = 3\n")
    rc = run_cli(["train-agent", "--out-dir", str(tmp_path),
                  "--config", str(cfg), "--seed", "1"])
    assert rc == 0
    assert (tmp_path / "train_log.txt").exists()
    assert (tmp_path / "agent_best.ckpt").exists()
