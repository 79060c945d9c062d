import json

import numpy as np
import pytest

from affordance_rl import harness
from affordance_rl.affordance import ClassifierParams
from affordance_rl.config import load_config
from affordance_rl.harness import (
    PANEL_COLUMNS,
    PHASE1_COLUMNS,
    PHASE2_COLUMNS,
    ExperimentPlan,
    MissingArtifact,
    SchemaError,
    crossover_update,
    emit_plot_data,
    moving_average,
    read_csv,
    write_csv,
)
from affordance_rl.ppo import load_checkpoint
from conftest import blob_dataset


@pytest.fixture
def plan(tmp_path, tiny_config):
    return ExperimentPlan.from_config(load_config(tiny_config), tmp_path / "run")


@pytest.fixture
def untrained(tmp_path, tiny_config):
    return ExperimentPlan.from_config(load_config(tiny_config, {"phase1.updates": 0}), tmp_path / "run")


def test_zero_update_phase1_writes_only_initial_row(untrained):
    plan = untrained
    agent, rows = harness.run_phase1(plan)
    cols, csv_rows, prov = read_csv(plan.metrics_path("phase1"))
    assert tuple(cols) == PHASE1_COLUMNS
    assert len(rows) == len(csv_rows) == 1
    assert csv_rows[0]["update"] == "0" and csv_rows[0]["env_steps"] == "0"
    back, extra = load_checkpoint(plan.phase1_checkpoint)
    assert back.param_hash() == agent.param_hash()
    assert extra["config_hash"] == prov["config_hash"] == plan.config.config_hash()


def test_phase1_csv_reproducible(tmp_path, tiny_config):
    def run(name):
        p = ExperimentPlan.from_config(load_config(tiny_config), tmp_path / name)
        harness.run_phase1(p)
        return p.metrics_path("phase1").read_bytes()

    assert run("a") == run("b")


def test_every_output_carries_provenance(plan):
    harness.run_phase1(plan)
    blob_dataset(plan.dataset_path)
    harness.train_affordance_classifier(plan)
    harness.run_phase2_adaptation(plan)
    emit_plot_data(plan.path("metrics"), plan.path("plotdata"))
    stamp = plan.provenance

    for csv_path in list(plan.path("metrics").glob("*.csv")) + list(plan.path("plotdata").glob("*.csv")):
        first = csv_path.read_text().splitlines()[0]
        assert first.startswith("# provenance: "), csv_path
        prov = json.loads(first.split(":", 1)[1])
        assert prov["config_hash"] == stamp["config_hash"] and prov["code_version"] == stamp["code_version"]
    report = json.loads(plan.path("metrics", "classifier.json").read_text())
    assert report["provenance"] == stamp
    for ckpt in (plan.phase1_checkpoint, plan.phase2_checkpoint):
        assert load_checkpoint(ckpt)[1]["config_hash"] == stamp["config_hash"]
    for stage in ("train", "train-classifier", "adapt"):
        text = plan.path("config", f"{stage}.toml").read_text()
        assert stamp["config_hash"] in text.splitlines()[0]
        assert load_config(plan.path("config", f"{stage}.toml")).config_hash() == stamp["config_hash"]

    cols, rows, _ = read_csv(plan.metrics_path("phase2"))
    assert tuple(cols) == PHASE2_COLUMNS
    assert [r["update"] for r in rows] == ["0", "1"]
    assert 0.0 <= float(rows[0]["p_press"]) <= 1.0


def test_probe_leaves_checkpoint_hash_unchanged(plan):
    agent, _ = harness.run_phase1(plan)
    blob_dataset(plan.dataset_path)
    clf, _ = harness.train_affordance_classifier(plan)
    before = load_checkpoint(plan.phase1_checkpoint)[0].param_hash()
    result, h = harness.probe(plan, agent, clf)
    assert h == before == agent.param_hash()
    assert len(result.labels) == plan.config.phase2.probe_rollouts


def test_adapt_requires_artifacts(untrained):
    plan = untrained
    with pytest.raises(MissingArtifact, match="phase-1 checkpoint"):
        harness.run_phase2_adaptation(plan)
    harness.run_phase1(plan)
    with pytest.raises(MissingArtifact, match="affordance classifier"):
        harness.run_phase2_adaptation(plan)
    assert not plan.metrics_path("phase2").exists()


def test_dataset_collection_gives_up(untrained):
    plan = untrained
    harness.run_phase1(plan)
    with pytest.raises(harness.DatasetCollectionFailed, match="successes in 16 rollouts"):
        harness.collect_labeled_dataset(plan)
    assert not plan.dataset_path.exists()


def test_classifier_artifact_round_trip(plan):
    blob_dataset(plan.dataset_path)
    params, report = harness.train_affordance_classifier(plan)
    back = ClassifierParams.load(plan.classifier_path)
    x = np.random.default_rng(0).normal(size=(3, params.n_features))
    np.testing.assert_array_equal(back.logits(x), params.logits(x))
    assert report["sizes"] == {"train": 160, "val": 20, "test": 20}


# -- plot data -------------------------------------------------------------


def fake_metrics(d, rows=3):
    stamp = {"config_hash": "abc", "code_version": "0.1.0+x", "seed": 0, "deterministic": True}
    p1 = [{"phase": "phase1", "update": u, "env_steps": 4096 * u, "mean_return": 0.1 * u, "success_button": 0.2 * u,
           "success_slider": 0.1 * u, "policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0, "clip_frac": 0.0}
          for u in range(rows)]
    write_csv(d / "phase1.csv", PHASE1_COLUMNS, p1, stamp)
    p2 = [{"phase": "phase2", "update": u, "env_steps": 4096 * u, "mean_return": 0.0, "success_deceptive": 0.3 * u,
           "p_press": 0.4 * u, "p_slide": 1 - 0.4 * u, "probe_success": 0.3 * u, "policy_loss": 0.0,
           "value_loss": 0.0, "kl": 0.0, "clip_frac": 0.0, "param_hash": "h"} for u in range(rows)]
    write_csv(d / "phase2.csv", PHASE2_COLUMNS, p2, stamp)


def test_emit_plot_data_long_format_and_byte_identical(tmp_path):
    fake_metrics(tmp_path)
    first = [p.read_bytes() for p in emit_plot_data(tmp_path, tmp_path / "a")]
    second = [p.read_bytes() for p in emit_plot_data(tmp_path, tmp_path / "b")]
    assert first == second
    cols, rows, prov = read_csv(tmp_path / "a" / "panel_c.csv")
    assert tuple(cols) == PANEL_COLUMNS and prov["source"] == "phase2.csv"
    assert len(rows) == 6 and {r["series"] for r in rows} == {"p_press", "p_slide"}
    assert rows[2]["env_time_s"] == repr(4096 * 0.01)


def test_emit_plot_data_schema_diff(tmp_path):
    write_csv(tmp_path / "phase1.csv", ("update", "env_steps", "success_button"),
              [{"update": 0, "env_steps": 0, "success_button": 0.0}], {})
    with pytest.raises(SchemaError, match=r"missing columns \['success_slider'\]"):
        emit_plot_data(tmp_path, tmp_path / "out")


def test_emit_plot_data_without_inputs(tmp_path):
    with pytest.raises(MissingArtifact):
        emit_plot_data(tmp_path, tmp_path / "out")


def test_crossover_and_moving_average():
    assert crossover_update([0, 1, 2, 3], [0.1, 0.4, 0.6, 0.9], [0.9, 0.6, 0.4, 0.1]) == 2
    # press ahead from the start is not a crossover
    assert crossover_update([0, 1], [0.9, 0.9], [0.1, 0.1]) is None
    assert crossover_update([0, 1], [0.2, 0.3], [0.8, 0.7]) is None
    np.testing.assert_allclose(moving_average([1, 2, 3, 4, 5, 6], 3), [2, 3, 4, 5])
    assert moving_average([1.0, 3.0], 5).tolist() == [2.0]
