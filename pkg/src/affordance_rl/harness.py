"""End-to-end experiment pipeline.

Stages, each reading the previous stage's artifacts from one run directory::

    run_phase1              checkpoints/phase1.npz, metrics/phase1.csv
    collect_labeled_dataset datasets/labels.jsonl
    train_affordance_classifier
                            checkpoints/classifier.npz, metrics/classifier.json
    run_phase2_adaptation   checkpoints/phase2.npz, metrics/phase2.csv
    emit_plot_data          plotdata/panel_a.csv, panel_b.csv, panel_c.csv

Every stage also writes ``config/<stage>.toml`` (the resolved config) and
stamps its outputs with the config hash and code version. CSV files carry
the stamp as a leading ``# provenance: {...}`` line. Wall-clock timings go
to ``metrics/timing_<phase>.csv`` so the metric files themselves depend only
on config and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .affordance import (
    ClassifierParams,
    LabeledMotion,
    labeled_motion,
    probe_affordance,
    read_dataset,
    train_classifier,
    write_dataset,
)
from .config import RunConfig
from .env import VecWidgetEnv, run_episodes
from .ppo import (
    METRIC_COLUMNS,
    Agent,
    MetricRow,
    PpoConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

CODE_VERSION_BASE = "0.1.0"
PHASE1_COLUMNS = ("phase",) + METRIC_COLUMNS
PHASE2_COLUMNS = ("phase", "update", "env_steps", "mean_return", "success_deceptive", "p_press", "p_slide",
                  "probe_success", "policy_loss", "value_loss", "kl", "clip_frac", "param_hash")
PANELS = {
    # panel file: (source metrics, x columns, series columns)
    "panel_a": ("phase1", ("update", "env_steps"), ("success_button", "success_slider")),
    "panel_b": ("phase2", ("update", "env_steps"), ("success_deceptive", "probe_success")),
    "panel_c": ("phase2", ("update", "env_steps"), ("p_press", "p_slide")),
}
PANEL_COLUMNS = ("update", "env_steps", "env_time_s", "series", "value")

# seed offsets; every stream is derived from the run's root seed
EVAL_SEED, DATASET_SEED, CLASSIFIER_SEED, PHASE2_SEED, PROBE_SEED = 10_000, 20_000, 30_000, 40_000, 50_000


class MissingArtifact(FileNotFoundError):
    pass


class DatasetCollectionFailed(RuntimeError):
    pass


class SchemaError(ValueError):
    pass


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    src = Path(__file__).parent
    for p in sorted(src.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{CODE_VERSION_BASE}+{h.hexdigest()[:12]}"


@dataclass
class PhasePlan:
    name: str
    kinds: tuple
    updates: int
    eval_episodes: int
    eval_every: int = 1
    probe_every: int = 0
    seed: int = 0


@dataclass
class ExperimentPlan:
    """Ordered phases plus where and under which stamp outputs land."""

    config: RunConfig
    out_dir: Path
    phases: list = field(default_factory=list)
    deterministic: bool = True

    @classmethod
    def from_config(cls, config: RunConfig, out_dir, deterministic: bool = True) -> "ExperimentPlan":
        s = config.seed
        p1, p2 = config.phase1, config.phase2
        phases = [
            PhasePlan("phase1", tuple(p1.kinds), p1.updates, p1.eval_episodes, p1.eval_every, 0, s),
            PhasePlan("phase2", ("deceptive",), p2.updates, p2.eval_episodes, 1, p2.probe_every, s + PHASE2_SEED),
        ]
        return cls(config, Path(out_dir), phases, deterministic)

    def phase(self, name: str) -> PhasePlan:
        for p in self.phases:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config.config_hash(), "code_version": code_version(),
                "seed": self.config.seed, "deterministic": self.deterministic}

    def path(self, *parts) -> Path:
        return self.out_dir.joinpath(*parts)

    @property
    def phase1_checkpoint(self) -> Path:
        return self.path("checkpoints", "phase1.npz")

    @property
    def phase2_checkpoint(self) -> Path:
        return self.path("checkpoints", "phase2.npz")

    @property
    def classifier_path(self) -> Path:
        return self.path("checkpoints", "classifier.npz")

    @property
    def dataset_path(self) -> Path:
        return self.path("datasets", "labels.jsonl")

    def metrics_path(self, phase: str) -> Path:
        return self.path("metrics", f"{phase}.csv")

    def env_factory(self) -> Callable[..., VecWidgetEnv]:
        cfg = self.config

        def make(n, kinds=None, seed=None, auto_reset=True):
            return VecWidgetEnv(n, cfg.episode, kinds, seed, arm=cfg.arm, physics=cfg.physics,
                                auto_reset=auto_reset)

        return make

    def snapshot(self, stage: str) -> Path:
        out = self.path("config", f"{stage}.toml")
        stamp = json.dumps(self.provenance, sort_keys=True)
        _atomic_write(out, f"# provenance: {stamp}\n" + self.config.to_toml())
        return out


# ---------------------------------------------------------------------------
# file helpers


def _atomic_write(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict], provenance: dict) -> None:
    buf = io.StringIO()
    buf.write(f"# provenance: {json.dumps(provenance, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    _atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[dict], dict]:
    """Returns (columns, rows as str dicts, provenance)."""
    provenance = {}
    lines = Path(path).read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("# provenance:"):
            provenance = json.loads(line.split(":", 1)[1])
        elif not line.startswith("#"):
            body.append(line)
    reader = csv.reader(body)
    columns = next(reader, [])
    return columns, [dict(zip(columns, row)) for row in reader], provenance


def read_metric_column(path, column: str) -> np.ndarray:
    cols, rows, _ = read_csv(path)
    if column not in cols:
        raise SchemaError(f"{path}: no column {column!r}")
    return np.array([float(r[column]) for r in rows])


# ---------------------------------------------------------------------------
# phases


def _ppo_config(plan: ExperimentPlan, phase: PhasePlan, min_log_std=None) -> PpoConfig:
    return replace(plan.config.ppo, seed=phase.seed, min_log_std=min_log_std)


def require_artifact(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise MissingArtifact(f"missing {what}: {path}")
    return Path(path)


def run_phase1(plan: ExperimentPlan, on_row: Callable = None) -> tuple[Agent, list[MetricRow]]:
    """Train on the common-widget mix, evaluating mean-action success per kind.

    The checkpoint and metric CSV are rewritten after every evaluation, so a
    divergence leaves the last good state on disk before re-raising.
    """
    phase = plan.phase("phase1")
    plan.snapshot("train")
    cfg = _ppo_config(plan, phase)
    stamp = plan.provenance
    rows, timing = [], []

    def record(row: MetricRow, agent: Agent):
        d = row.as_dict()
        d["phase"] = "phase1"
        rows.append(d)
        timing.append({"update": row.update, "wall_time_s": row.wall_time})
        save_checkpoint(agent, plan.phase1_checkpoint.with_suffix(".tmp.npz"), extra={**stamp, "update": row.update})
        os.replace(plan.phase1_checkpoint.with_suffix(".tmp.npz"), plan.phase1_checkpoint)
        write_csv(plan.metrics_path("phase1"), PHASE1_COLUMNS, rows, stamp)
        write_csv(plan.path("metrics", "timing_phase1.csv"), ("update", "wall_time_s"), timing, stamp)
        if on_row:
            on_row(row, agent)

    plan.phase1_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    return train(plan.env_factory(), cfg, phase.updates, kinds=phase.kinds, eval_episodes=phase.eval_episodes,
                 eval_every=phase.eval_every, on_update=record, eval_seed=plan.config.seed + EVAL_SEED)


def collect_labeled_dataset(plan: ExperimentPlan, checkpoint=None, n_per_class: int = None,
                            kinds: Sequence = ("button", "slider")) -> list[LabeledMotion]:
    """Roll out the stochastic policy until ``n_per_class`` successes per kind.

    Failed episodes are discarded. Raises :class:`DatasetCollectionFailed`
    if a kind needs more than ``dataset.max_attempts`` rollouts.
    """
    settings = plan.config.dataset
    n_per_class = n_per_class or settings.n_per_class
    agent, _ = load_checkpoint(require_artifact(checkpoint or plan.phase1_checkpoint, "policy checkpoint"))
    factory = plan.env_factory()
    seed = plan.config.seed + DATASET_SEED
    rng = np.random.default_rng(seed)
    motions = []
    for k, kind in enumerate(kinds):
        got = attempts = batch = 0
        while got < n_per_class:
            if attempts >= settings.max_attempts:
                raise DatasetCollectionFailed(
                    f"{kind}: only {got}/{n_per_class} successes in {attempts} rollouts "
                    f"(success rate {got / max(attempts, 1):.3f}); train the policy further")
            env = factory(settings.batch, kinds=[kind], seed=[seed, k, batch], auto_reset=False)
            for i, tr in enumerate(run_episodes(agent.policy_fn(rng), env, settings.batch)):
                attempts += 1
                if tr.success and got < n_per_class:
                    tr.episode_id = f"{kind}-{batch}-{i}"
                    motions.append(labeled_motion(tr, plan.config.arm, plan.config.episode.dt))
                    got += 1
            batch += 1
        log.info("%s: %d successes from %d rollouts", kind, got, attempts)
    plan.snapshot("collect-labels")
    plan.dataset_path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(plan.dataset_path.with_suffix(".tmp"), motions, plan.provenance)
    os.replace(plan.dataset_path.with_suffix(".tmp"), plan.dataset_path)
    return motions


def train_affordance_classifier(plan: ExperimentPlan, dataset=None) -> tuple[ClassifierParams, dict]:
    motions = read_dataset(require_artifact(dataset or plan.dataset_path, "labeled dataset"))
    c = plan.config.classifier
    rng = np.random.default_rng(plan.config.seed + CLASSIFIER_SEED)
    params, report = train_classifier(motions, rng, hidden=c.hidden, epochs=c.epochs, lr=c.learning_rate,
                                      batch_size=c.batch_size, patience=c.patience, weight_decay=c.weight_decay)
    plan.snapshot("train-classifier")
    stamp = plan.provenance
    tmp = plan.classifier_path.with_suffix(".tmp.npz")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    params.save(tmp, extra=stamp)
    os.replace(tmp, plan.classifier_path)
    _atomic_write(plan.path("metrics", "classifier.json"),
                  json.dumps({"provenance": stamp, **report}, indent=2, sort_keys=True) + "\n")
    return params, report


def probe(plan: ExperimentPlan, agent: Agent, classifier: ClassifierParams, kind="deceptive",
          rollouts: int = None):
    """Affordance probe on a fixed widget set; asserts the agent is untouched."""
    rollouts = rollouts or plan.config.phase2.probe_rollouts
    seed = plan.config.seed + PROBE_SEED
    env = plan.env_factory()(rollouts, kinds=[kind], seed=seed, auto_reset=False)
    before = agent.param_hash()
    result = probe_affordance(agent.policy_fn(np.random.default_rng(seed)), env, rollouts, classifier)
    if agent.param_hash() != before:
        raise RuntimeError("probe modified policy parameters")
    return result, before


def run_phase2_adaptation(plan: ExperimentPlan, checkpoint=None, classifier=None,
                          on_row: Callable = None) -> tuple[Agent, list[dict]]:
    """Continue PPO on the deceptive widget only, probing affordances as it learns."""
    phase = plan.phase("phase2")
    agent, _ = load_checkpoint(require_artifact(checkpoint or plan.phase1_checkpoint, "phase-1 checkpoint"))
    clf = ClassifierParams.load(require_artifact(classifier or plan.classifier_path, "affordance classifier"))
    plan.snapshot("adapt")
    min_log_std = math.log(plan.config.phase2.min_std)
    agent.min_log_std = min_log_std
    cfg = _ppo_config(plan, phase, min_log_std)
    stamp = plan.provenance
    rows, timing = [], []

    def record(row: MetricRow, agent: Agent):
        d = row.as_dict()
        d["phase"] = "phase2"
        if phase.probe_every and row.update % phase.probe_every == 0:
            result, h = probe(plan, agent, clf)
            d.update(p_press=result.distribution.p_press, p_slide=result.distribution.p_slide,
                     probe_success=result.success_rate, param_hash=h)
        else:
            d.update(p_press=float("nan"), p_slide=float("nan"), probe_success=float("nan"),
                     param_hash=agent.param_hash())
        rows.append(d)
        timing.append({"update": row.update, "wall_time_s": row.wall_time})
        tmp = plan.phase2_checkpoint.with_suffix(".tmp.npz")
        save_checkpoint(agent, tmp, extra={**stamp, "update": row.update})
        os.replace(tmp, plan.phase2_checkpoint)
        write_csv(plan.metrics_path("phase2"), PHASE2_COLUMNS, rows, stamp)
        write_csv(plan.path("metrics", "timing_phase2.csv"), ("update", "wall_time_s"), timing, stamp)
        if on_row:
            on_row(d, agent)

    agent, _ = train(plan.env_factory(), cfg, phase.updates, kinds=phase.kinds, eval_episodes=phase.eval_episodes,
                     eval_every=1, agent=agent, on_update=record, eval_seed=plan.config.seed + EVAL_SEED + 7)
    return agent, rows


# ---------------------------------------------------------------------------
# plot data


def emit_plot_data(metrics_dir, out_dir, dt: float = 0.01) -> list[Path]:
    """Long-format ``(update, env_steps, env_time_s, series, value)`` CSV per panel.

    Panels whose source metrics file is absent are skipped; a source that
    lacks a required column raises :class:`SchemaError` listing the gap.
    Output bytes depend only on the input files.
    """
    metrics_dir, out_dir = Path(metrics_dir), Path(out_dir)
    written = []
    for panel, (source, xs, series) in PANELS.items():
        path = metrics_dir / f"{source}.csv"
        if not path.is_file():
            continue
        cols, rows, provenance = read_csv(path)
        missing = [c for c in xs + series if c not in cols]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}; expected {list(xs + series)}, found {cols}")
        long_rows = []
        for r in rows:
            for s in series:
                long_rows.append({"update": r["update"], "env_steps": r["env_steps"],
                                  "env_time_s": repr(int(r["env_steps"]) * dt), "series": s, "value": r[s]})
        out = out_dir / f"{panel}.csv"
        write_csv(out, PANEL_COLUMNS, long_rows, {**provenance, "source": f"{source}.csv"})
        written.append(out)
    if not written:
        raise MissingArtifact(f"no metric files (phase1.csv, phase2.csv) in {metrics_dir}")
    return written


# ---------------------------------------------------------------------------
# acceptance helpers


def crossover_update(updates, p_press, p_slide):
    """First update where press overtakes a previously dominant slide, or None."""
    slide_led = False
    for u, a, b in zip(updates, p_press, p_slide):
        if b > a:
            slide_led = True
        elif a > b and slide_led:
            return int(u)
    return None


def moving_average(x, window: int = 5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        return np.array([x.mean()])
    return np.convolve(x, np.ones(window) / window, mode="valid")
