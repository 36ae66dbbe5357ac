import csv
import json

import numpy as np
import pytest
import yaml

from rpsp import cli
from rpsp.checkpoint import load_checkpoint
from rpsp.cli import CSV_COLUMNS, area_under_curve, compare_agents, main, summarize
from rpsp.config import ExperimentConfig, dump_config, from_dict, load_config
from rpsp.errors import InvalidConfigurationError

FAST = ["--iters", "2", "--batch-size", "300", "--m-init", "20"]


def test_auc_of_constant_curve():
    for c, n in [(3.5, 10), (-2.0, 7), (0.0, 4)]:
        assert area_under_curve([c] * n) == pytest.approx(c * n)


def test_identical_agents_get_identical_auc():
    cfg = ExperimentConfig()
    rows = [dict(avg_return=float(r), mean_length=1.0, pred_loss=0.1) for r in range(5)]
    a = summarize(cfg, {0: rows, 1: rows})
    b = summarize(cfg.replace(agent="fm2"), {0: rows, 1: rows})
    assert a["auc"] == b["auc"] == 10.0
    assert a["avg_return"]["stderr"] == [0.0] * 5
    ranked = compare_agents([a, b], ["x", "y"])
    assert [r["auc"] for r in ranked] == [10.0, 10.0] and [r["rank"] for r in ranked] == [1, 2]


def test_config_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig().validate()
    assert (cfg.batch_size, cfg.eta, cfg.epsilon, cfg.gamma, cfg.beta, cfg.a2) == (10000, 1e-2, 0.01, 0.99, 0.1, 0.1)
    assert cfg.kbr_lambda == 1.0 and cfg.replace(env="synthetic_lds").kbr_lambda == 0.3
    path = tmp_path / "c.yaml"
    dump_config(cfg.replace(agent="fm5", seeds=[3, 4]), path)
    assert load_config(path) == cfg.replace(agent="fm5", seeds=[3, 4])


@pytest.mark.parametrize("bad", [dict(env="hopper"), dict(agent="lstm"), dict(iters=-1), dict(gamma=1.5),
                                 dict(cap_scale=-1.0), dict(psr_init="zeros"), dict(seeds=[]), dict(lam=0.0),
                                 dict(unknown_key=1), dict(beta=0.0)])
def test_invalid_config_rejected(bad):
    with pytest.raises(InvalidConfigurationError):
        from_dict(bad)


def test_exit_code_two_on_configuration_errors(tmp_path, capsys):
    assert main(["train", "--agent", "gru", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["compare", "--runs", str(tmp_path / "nowhere")]) == 2
    assert main(["collect", "--trajectories", "0", "--out", str(tmp_path / "b.npz")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_exit_code_one_on_runtime_failure(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr("rpsp.training.alternating_update", boom)
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)] + FAST) == 1
    assert (out / "checkpoints" / "seed0_failed_iter0.npz").exists()


def test_train_writes_identical_csvs_and_echoes_config(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["train", "--agent", "fm2", "--seed", "0", "--seed", "1", "--out", str(d)] + FAST) == 0
    for seed in (0, 1):
        first, second = (open(d / f"seed{seed}.csv", "rb").read() for d in dirs)
        assert first == second
        with open(dirs[0] / f"seed{seed}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 2
        assert all(r["wall_ms"] == "0" for r in rows)
    echoed = yaml.safe_load(open(dirs[0] / "config.yaml"))
    assert echoed["agent"] == "fm2" and echoed["seeds"] == [0, 1] and echoed["iters"] == 2
    summary = json.load(open(dirs[0] / "summary.json"))
    assert summary["seeds"] == [0, 1] and len(summary["avg_return"]["mean"]) == 2
    assert (dirs[0] / "checkpoints" / "seed1_final.npz").exists()


def test_config_file_with_flag_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("agent: fm1\niters: 5\nbatch_size: 300\nm_init: 20\n")
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--iters", "1", "--set", "gamma=0.9"])
    cfg = cli.resolve_config(args)
    assert (cfg.agent, cfg.iters, cfg.gamma, cfg.batch_size) == ("fm1", 1, 0.9, 300)


def test_compare_ranks_runs(tmp_path, capsys):
    for name, agent in [("r1", "fm1"), ("r2", "fm2")]:
        assert main(["train", "--agent", agent, "--out", str(tmp_path / name)] + FAST) == 0
    assert main(["compare", "--runs", str(tmp_path / "r1"), str(tmp_path / "r2"),
                 "--out", str(tmp_path / "cmp.json")]) == 0
    rows = json.load(open(tmp_path / "cmp.json"))
    assert sorted(r["label"] for r in rows) == ["fm1", "fm2"]
    assert rows[0]["auc"] >= rows[1]["auc"]
    assert "rank" in capsys.readouterr().out


def test_check_gradients_passes(capsys):
    assert main(["check-gradients", "--seeds", "1"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_collect_then_init_psr(tmp_path):
    batch, ckpt = tmp_path / "b.npz", tmp_path / "psr.npz"
    assert main(["collect", "--env", "synthetic_lds", "--trajectories", "30", "--out", str(batch)]) == 0
    assert main(["init-psr", "--traj", str(batch), "--out", str(ckpt), "--env", "synthetic_lds"]) == 0
    psr, policy, meta = load_checkpoint(ckpt)
    assert policy is None and psr.lam == 0.3 and np.all(np.isfinite(psr.W_pred))
    assert meta["env"] == "synthetic_lds"
    assert main(["init-psr", "--traj", str(tmp_path / "none.npz"), "--out", str(ckpt)]) == 2
