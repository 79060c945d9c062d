import json
import os
import subprocess
import sys

import pytest

from affordance_rl import cli
from affordance_rl.config import ConfigError, RunConfig, from_dict, load_config, parse_override
from conftest import blob_dataset

# -- config -----------------------------------------------------------------


def test_defaults_round_trip_through_toml(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.toml"
    path.write_text(cfg.to_toml())
    back = load_config(path)
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_tiny_config_loads(tiny_config):
    cfg = load_config(tiny_config)
    assert cfg.seed == 3 and cfg.ppo.hidden_sizes == (8,) and cfg.phase1.updates == 1
    assert cfg.config_hash() != RunConfig().config_hash()


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = 1\n\n[ppo]\nlearning_rate = 1e-3\nlearnig_rate = 2e-3\n")
    with pytest.raises(ConfigError, match=r"bad\.toml:5: unknown key 'learnig_rate' in \[ppo\]"):
        load_config(path)


def test_unknown_table_reports_line(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = 1\n[phase3]\nupdates = 2\n")
    with pytest.raises(ConfigError, match=r"bad\.toml:2: unknown table"):
        load_config(path)


def test_wrong_type_and_validator_errors(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[phase1]\nupdates = \"many\"\n")
    with pytest.raises(ConfigError, match=r":2: \[phase1\] updates: expected int"):
        load_config(path)
    path.write_text("seed = 0\n[ppo]\nclip_epsilon = 1.5\n")
    with pytest.raises(ConfigError, match=r":2: \[ppo\] clip_epsilon"):
        load_config(path)


def test_toml_syntax_error_reports_line(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = 1\n[ppo\n")
    with pytest.raises(ConfigError, match=r"bad\.toml:2:"):
        load_config(path)


def test_managed_fields_not_settable():
    with pytest.raises(ConfigError, match="unknown key 'seed' in \\[ppo\\]"):
        from_dict({"ppo": {"seed": 4}})


def test_overrides():
    assert parse_override("ppo.learning_rate=1e-3") == ("ppo.learning_rate", 1e-3)
    assert parse_override("phase1.kinds=['button']") == ("phase1.kinds", ["button"])
    assert parse_override("episode.widget_kind=slider") == ("episode.widget_kind", "slider")
    cfg = load_config(None, dict([parse_override("phase2.updates=7"), ("seed", 9)]))
    assert cfg.phase2.updates == 7 and cfg.seed == 9
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_missing_config_file():
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config("/nonexistent/x.toml")


# -- CLI ----------------------------------------------------------------------


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_subcommands_and_globals():
    help_text = cli.build_parser().format_help()
    for word in ("train", "collect-labels", "train-classifier", "adapt", "probe", "replay", "emit-plots",
                 "--config", "--seed", "--out", "--deterministic", "--threads", cli.OUT_ENV):
        assert word in help_text


def test_missing_config_exits_2_and_writes_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "nope.toml"), "--out", str(out))
    assert code == cli.EXIT_USAGE and "cannot read config" in err
    assert not out.exists()


def test_adapt_without_classifier_exits_3(tmp_path, capsys, tiny_config):
    out = tmp_path / "run"
    assert run_cli(capsys, "train", "--config", str(tiny_config), "--out", str(out), "--updates", "0")[0] == 0
    code, _, err = run_cli(capsys, "adapt", "--config", str(tiny_config), "--out", str(out))
    assert code == cli.EXIT_MISSING and "affordance classifier" in err


def test_single_class_dataset_exit_and_message(tmp_path, capsys, tiny_config):
    data = blob_dataset(tmp_path / "one.jsonl", labels=("press",))
    code, _, err = run_cli(capsys, "train-classifier", "--config", str(tiny_config),
                           "--out", str(tmp_path / "run"), "--dataset", str(data))
    assert code != 0 and "single-class data" in err


def test_collect_labels_gives_up_with_data_error(tmp_path, capsys, tiny_config):
    out = str(tmp_path / "run")
    run_cli(capsys, "train", "--config", str(tiny_config), "--out", out, "--updates", "0")
    code, _, err = run_cli(capsys, "collect-labels", "--config", str(tiny_config), "--out", out)
    assert code == cli.EXIT_DATA and "successes" in err


def test_global_flags_after_subcommand_and_env_default(tmp_path, capsys, tiny_config, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from_env"))
    code, out, _ = run_cli(capsys, "train", "--updates", "0", "--config", str(tiny_config), "--seed", "5",
                           "--deterministic", "--set", "phase1.eval_episodes=2")
    assert code == 0
    csv_path = tmp_path / "from_env" / "metrics" / "phase1.csv"
    assert csv_path.is_file() and str(csv_path.parent.parent) in out
    snapshot = (tmp_path / "from_env" / "config" / "train.toml").read_text()
    assert "seed = 5" in snapshot and "eval_episodes = 2" in snapshot


def test_pipeline_probe_replay_and_plots(tmp_path, capsys, tiny_config):
    out = str(tmp_path / "run")
    common = ["--config", str(tiny_config), "--out", out, "--deterministic"]
    assert run_cli(capsys, "train", *common)[0] == 0
    blob_dataset(tmp_path / "run" / "datasets" / "labels.jsonl")
    code, text, _ = run_cli(capsys, "train-classifier", *common)
    assert code == 0 and "test accuracy" in text

    traj = tmp_path / "probe.jsonl"
    code, text, _ = run_cli(capsys, "probe", *common, "--save-trajectories", str(traj))
    assert code == 0 and "widget=deceptive rollouts=4" in text and "p_press=" in text
    code, text, _ = run_cli(capsys, "replay", *common, "--trajectory", str(traj))
    assert code == 0 and text.strip() == "MATCH"

    # nudge one stored reward of the last episode
    lines = traj.read_text().splitlines()
    i = max(k for k, line in enumerate(lines) if json.loads(line)["record"] == "step")
    rec = json.loads(lines[i])
    rec["reward"]["distance_penalty"] -= 1e-9
    lines[i] = json.dumps(rec)
    traj.write_text("\n".join(lines) + "\n")
    code, text, _ = run_cli(capsys, "replay", *common, "--trajectory", str(traj))
    assert code == cli.EXIT_FAIL and text.startswith("MISMATCH in 1 episode")

    code, text, _ = run_cli(capsys, "adapt", *common)
    assert code == 0
    code, text, _ = run_cli(capsys, "emit-plots", *common)
    assert code == 0 and text.count("wrote") == 3


def test_replay_missing_file_exits_3(tmp_path, capsys):
    code, _, err = run_cli(capsys, "replay", "--trajectory", str(tmp_path / "none.jsonl"), "--out", str(tmp_path))
    assert code == cli.EXIT_MISSING and "missing trajectory file" in err


def test_console_script_module_entry(tmp_path):
    env = dict(os.environ, **{cli.OUT_ENV: str(tmp_path)})
    res = subprocess.run([sys.executable, "-m", "affordance_rl.cli", "--help"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "usage: affordance-rl" in res.stdout
