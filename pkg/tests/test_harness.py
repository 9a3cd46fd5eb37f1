import csv
import json

import numpy as np
import pytest

from solartrade.cli import main
from solartrade.config import ExperimentConfig, load_config
from solartrade.exceptions import ConfigurationError
from solartrade.experiment import AGENTS, REFERENCE_MEANS, emit_report, run_experiment

FAST = ["ppo.short_epochs=2", "ppo.long_epochs=3", "ppo.actor_hidden=8,8,8", "ppo.critic_hidden=8,8",
        "moe.epochs=5", "moe.dim=8", "moe.expert_hidden=8", "moe.embed_hidden=8",
        "moe.compare=table/8/2/8, soliton/8/6/8"]


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


def test_config_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.run.seed == 42 and cfg.ppo.long_epochs == 1000 and cfg.ppo.short_epochs == 30
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text(), encoding="utf-8")
    assert load_config(path).hash() == cfg.hash()


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[ppo]\nentropy_coef = 0.05  # stronger exploration\n[moe]\naugment = no\n")
    cfg = load_config(path, ["run.seed=7", "ppo.normalize_advantages=false"])
    assert cfg.ppo.entropy_coef == 0.05 and cfg.moe.augment is False
    assert cfg.run.seed == 7 and cfg.ppo.normalize_advantages is False
    assert cfg.ppo.trader_params(5, 7)["actor_hidden"] == (64, 64, 64)


@pytest.mark.parametrize("override", ["nosection=1", "foo.bar=1", "ppo.nope=1", "ppo.gamma=abc", "run.seed"])
def test_bad_overrides(override):
    with pytest.raises(ConfigurationError):
        load_config(None, [override])


def test_validation_catches_bad_values():
    for override in ("split.test_fraction=1.5", "episodes.ppo=0", "data.source=web",
                     "moe.compare=table/128", "data.source=csv"):
        with pytest.raises(ConfigurationError):
            load_config(None, [override]).validate()


def test_hash_ignores_output_directory():
    assert load_config(None, ["run.out=a"]).hash() == load_config(None, ["run.out=b"]).hash()
    assert load_config(None, ["run.seed=1"]).hash() != load_config(None, ["run.seed=2"]).hash()


@pytest.fixture(scope="module")
def fast_results():
    cfg = load_config(None, FAST)
    return cfg, run_experiment(cfg)


def test_results_table_shape(fast_results):
    _, res = fast_results
    counts = {a: len(v) for a, v in res.totals.items()}
    assert counts == {"MoE": 30, "SellOnly": 1, "Random": 5, "PPO-30": 30, "PPO-1000": 30}
    assert len(res.curves["PPO-1000"]) == 3 and len(res.curves["PPO-30"]) == 2
    assert res.provenance == "synthetic+42"


def test_report_files(fast_results, tmp_path):
    cfg, res = fast_results
    emit_report(res, tmp_path, plots=True)
    header, rows = read_csv(tmp_path / "table3.csv")
    assert header == ["agent", "mean_total", "episodes", "reference_mean"]
    _, t1 = read_csv(tmp_path / "table1.csv")
    for i, (agent, mean, n, ref) in enumerate(rows):
        column = [float(r[i + 1]) for r in t1 if r[i + 1] != ""]
        assert len(column) == int(n) and float(mean) == pytest.approx(np.mean(column), rel=1e-12)
        assert float(ref) == REFERENCE_MEANS[agent]
    assert [r[0] for r in rows] == list(AGENTS)
    _, curve = read_csv(tmp_path / "training_curve.csv")
    assert len(curve) == cfg.ppo.long_epochs
    header, emb = read_csv(tmp_path / "embedding_compare.csv")
    # figure-4 bars follow the table order
    assert [(r[0], r[2]) for r in emb if r[5] == "random"] == [("table", "2"), ("soliton", "6")]
    assert "generalization_gap" in header
    assert emb[-1][5] == "chronological"
    for name in ("fig1_agent_means.png", "fig2_training_curve.png", "fig4_embedding_losses.png"):
        assert (tmp_path / name).stat().st_size > 0
    assert json.loads((tmp_path / "run.json").read_text())["config_hash"] == cfg.hash()


def test_rerun_gives_identical_results(fast_results):
    cfg, res = fast_results
    again = run_experiment(load_config(None, FAST))
    assert again.totals == res.totals and again.curves == res.curves
    assert again.embedding_rows == res.embedding_rows


def test_failed_stage_flushes_partial_results(tmp_path):
    cfg = load_config(None, FAST + ["moe.compare=grid/8/2/8"])
    with pytest.raises(Exception) as info:
        run_experiment(cfg, out_dir=tmp_path)
    assert "forecaster" in str(info.value)
    partial = json.loads((tmp_path / "partial_results.json").read_text())
    assert partial["failed_stage"] == "forecaster" and "PPO-1000" in partial["curves"]


def test_cli_usage_and_errors(capsys):
    assert main([]) == 1
    with pytest.raises(SystemExit) as info:
        main(["evaluate"])
    assert info.value.code == 1
    assert main(["experiment", "--set", "ppo.gamma=abc"]) == 2
    assert main(["experiment", "--config", "/nonexistent.cfg"]) == 2


def test_cli_train_and_evaluate(tmp_path, capsys):
    out = str(tmp_path)
    fast = ["--set", "ppo.actor_hidden=8,8,8", "--set", "ppo.critic_hidden=8,8"]
    assert main(["train-ppo", "--out", out, "--epochs", "2", *fast]) == 0
    assert main(["evaluate", "--agent", "ppo", "--model", out, "--out", out, "--episodes", "3",
                 "--trajectory", str(tmp_path / "traj.csv")]) == 0
    _, rows = read_csv(tmp_path / "evaluation_ppo.csv")
    assert len(rows) == 3
    _, traj = read_csv(tmp_path / "traj.csv")
    assert len(traj) == 110
    assert main(["train-moe", "--out", out, "--epochs", "3", "--set", "moe.dim=8",
                 "--set", "moe.embed_hidden=8", "--set", "moe.expert_hidden=8"]) == 0
    assert main(["evaluate", "--agent", "moe", "--model", str(tmp_path / "moe.spnn"), "--out", out]) == 0
    assert main(["evaluate", "--agent", "sell-only", "--out", out]) == 0
    assert main(["evaluate", "--agent", "ppo", "--out", out]) == 2


def test_cli_synth_round_trip(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3"]) == 0
    header, rows = read_csv(tmp_path / "dataset.csv")
    assert header == ["day", "price", "generation"] and len(rows) == 365
    assert main(["evaluate", "--agent", "sell-only", "--out", str(tmp_path),
                 "--set", "data.source=dataset", "--set", f"data.dataset_csv={tmp_path / 'dataset.csv'}"]) == 0
