"""Motion labelling: trajectory features, a press/slide classifier, probes.

Features describe the motion the policy *attempted*. The path part replays
the motor commands on the arm with all contacts removed, so a slide pushed
against a handle that cannot slide still looks like a slide. Positions are
displacements from the fingertip start in the widget frame (x along the
handle length, y along the rail / width, z up):

* commanded fingertip path sampled at ``N_SAMPLES`` stations equally spaced
  in arc length over the first ``PATH_WINDOW`` metres (pauses and repeated
  frames do not change the features);
* final handle displacement along the slide axis and the press axis;
* mean joint speed at the same arc-length stations.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EpisodeConfig, Trajectory, VecWidgetEnv, run_episodes
from .nn import MLP, Adam
from .sim import ArmConfig, Mechanism, WidgetSpec, forward_kinematics, free_motion

N_SAMPLES = 16
# path length (m) covered by the motion descriptor; successful reach-and-actuate
# motions are 6-9 cm long, later wandering is ignored
PATH_WINDOW = 0.10
FEATURE_DIM = 3 * N_SAMPLES + 2 + N_SAMPLES
DATASET_SCHEMA = "affordance-rl/labels/v1"
CLASSIFIER_SCHEMA = "affordance-rl/classifier/v1"


class Label(str, enum.Enum):
    PRESS = "press"
    SLIDE = "slide"


LABELS = (Label.PRESS, Label.SLIDE)


def label_for(spec: WidgetSpec) -> Label:
    return Label.PRESS if spec.mechanism is Mechanism.PRESS else Label.SLIDE


@dataclass
class AffordanceDistribution:
    p_press: float
    p_slide: float

    def __post_init__(self):
        for p in (self.p_press, self.p_slide):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if abs(self.p_press + self.p_slide - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")

    @property
    def dominant(self) -> Label:
        return Label.PRESS if self.p_press >= self.p_slide else Label.SLIDE


@dataclass
class LabeledMotion:
    features: np.ndarray
    label: Label
    source_episode: str = ""


def widget_frame(spec: WidgetSpec) -> np.ndarray:
    """Rows are the widget's (length, rail, up) axes in world coordinates."""
    up = np.array([0.0, 0.0, 1.0])
    if spec.mechanism is Mechanism.SLIDE:
        rail = np.array(spec.travel_axis)
    else:
        # press widgets carry no rail; they share the world-aligned base orientation
        rail = np.array([0.0, 1.0, 0.0])
    length = np.cross(rail, up)
    return np.stack([length, rail, up])


def _arc_resample(points: np.ndarray, extra: np.ndarray, n: int, window: float):
    """Sample ``points``/``extra`` at ``n`` stations over the first ``window`` of path length.

    Stations past the end of a shorter path repeat its last point.
    """
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(points[1:] != points[:-1], axis=1)
    points, extra = points[keep], extra[keep]
    if len(points) == 1:
        return np.repeat(points, n, axis=0), np.repeat(extra, n)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    stations = np.linspace(0.0, window, n)
    path = np.stack([np.interp(stations, s, points[:, k]) for k in range(points.shape[1])], axis=1)
    return path, np.interp(stations, s, extra)


def _distinct_steps(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Indices of steps that are not an exact repeat of the previous step."""
    keep = np.ones(len(actions), dtype=bool)
    keep[1:] = np.any(obs[1:-1] != obs[:-2], axis=1) | np.any(actions[1:] != actions[:-1], axis=1)
    return np.flatnonzero(keep)


def featurize(trajectory: Trajectory, spec: WidgetSpec = None, arm: ArmConfig = None,
              window: float = PATH_WINDOW, dt: float = EpisodeConfig.dt) -> np.ndarray:
    """Fixed-length motion descriptor of shape ``(FEATURE_DIM,)``."""
    spec = spec or trajectory.widget
    arm = arm or ArmConfig()
    if len(trajectory) < 2:
        raise ValueError("trajectory needs at least two steps")
    steps = _distinct_steps(trajectory.observations, trajectory.actions)
    obs = trajectory.observations[np.append(steps, len(trajectory))]
    frame = widget_frame(spec)
    # the commanded path: where the motor commands drive the fingertip with contacts
    # removed. A slide blocked by an immovable handle still reads as a slide
    angles = free_motion(arm, obs[0, 0:7], obs[0, 7:14], trajectory.actions[steps], dt)
    tips = forward_kinematics(arm, angles).fingertip_mid
    # displacement from the fingertip's own start: the start height would otherwise
    # encode the handle height, i.e. the widget's appearance rather than the motion
    rel = (tips - tips[0]) @ frame.T
    speed = np.mean(np.abs(obs[:, 7:14]), axis=1)
    path, speed_profile = _arc_resample(rel, speed, N_SAMPLES, window)
    moved = (obs[-1, 19:22] - obs[0, 19:22]) @ frame.T
    handle = np.array([moved[1], -moved[2]])  # along rail, downward press
    return np.concatenate([path.ravel(), handle, speed_profile])


def labeled_motion(trajectory: Trajectory, arm: ArmConfig = None, dt: float = EpisodeConfig.dt) -> LabeledMotion:
    """Label a *successful* trajectory with its widget's mechanism."""
    if not trajectory.success:
        raise ValueError("only successful trajectories can be labelled")
    return LabeledMotion(featurize(trajectory, arm=arm, dt=dt), label_for(trajectory.widget), trajectory.episode_id)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierParams:
    net: MLP
    feature_mean: np.ndarray
    feature_std: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_mean)

    def logits(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        return self.net.forward((x - self.feature_mean) / self.feature_std)

    def save(self, path, extra: dict = None) -> None:
        meta = {"schema": CLASSIFIER_SCHEMA, "net": self.net.describe(), "labels": [l.value for l in LABELS],
                "extra": extra or {}}
        arrays = {f"w{i}": p for i, p in enumerate(self.net.params)}
        buf = io.BytesIO()
        np.savez(buf, meta=np.array(json.dumps(meta)), feature_mean=self.feature_mean,
                 feature_std=self.feature_std, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ClassifierParams":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("schema") != CLASSIFIER_SCHEMA:
                raise ValueError(f"{path}: unsupported classifier schema")
            net = MLP(meta["net"]["sizes"], meta["net"]["activation"])
            net.params = [data[f"w{i}"].copy() for i in range(len(net.params))]
            return cls(net, data["feature_mean"].copy(), data["feature_std"].copy())


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(params: ClassifierParams, features) -> np.ndarray:
    """(N, 2) array of (p_press, p_slide)."""
    return softmax(params.logits(features))


def classify(params: ClassifierParams, features) -> AffordanceDistribution:
    p = class_probabilities(params, features)
    if p.shape[0] != 1:
        raise ValueError("classify takes a single feature vector")
    p_press = float(p[0, 0])
    return AffordanceDistribution(p_press, 1.0 - p_press)


def split_indices(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)):
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def confusion_matrix(y_true, y_pred, n_classes: int = 2) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def train_classifier(
    data: Sequence[LabeledMotion],
    rng: np.random.Generator,
    split=(0.8, 0.1, 0.1),
    hidden: int = 32,
    epochs: int = 300,
    lr: float = 3e-3,
    batch_size: int = 64,
    patience: int = 40,
    weight_decay: float = 1e-4,
) -> tuple[ClassifierParams, dict]:
    """Softmax classifier with early stopping on validation accuracy.

    Returns the best-on-validation parameters and a report holding
    train/val/test accuracy, the test confusion matrix (rows = true label,
    press first) and per-class test recall.
    """
    if len(data) < 100:
        raise ValueError(f"dataset too small ({len(data)} < 100)")
    X = np.stack([np.asarray(d.features, dtype=np.float64) for d in data])
    y = np.array([LABELS.index(Label(d.label)) for d in data])
    if len(np.unique(y)) < 2:
        raise ValueError("single-class data: both press and slide examples are required")

    tr, va, te = split_indices(len(data), rng, split)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0) + 1e-8
    net = MLP((X.shape[1], hidden, len(LABELS)), "tanh", rng)
    params = ClassifierParams(net, mean, std)
    opt = Adam(net.params, lr=lr)
    Xn = (X - mean) / std

    def accuracy(idx):
        if len(idx) == 0:
            return float("nan")
        return float(np.mean(np.argmax(net.forward(Xn[idx]), axis=1) == y[idx]))

    def xent(idx):
        p = softmax(net.forward(Xn[idx]))
        return float(-np.mean(np.log(p[np.arange(len(idx)), y[idx]] + 1e-300)))

    # best = highest validation accuracy, ties broken by lower validation loss
    best_key, best_net, best_epoch = (-1.0, 0.0), net.copy(), 0
    for epoch in range(epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits, cache = net.forward(Xn[idx], cache=True)
            p = softmax(logits)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            grads, _ = net.backward(p / len(idx), cache)
            grads = [g + weight_decay * w for g, w in zip(grads, net.params)]
            opt.step(grads)
        key = (accuracy(va), -xent(va))
        if key > best_key:
            best_key, best_net, best_epoch = key, net.copy(), epoch
        elif epoch - best_epoch >= patience:
            break
    net.params[:] = [p.copy() for p in best_net.params]

    pred_te = np.argmax(net.forward(Xn[te]), axis=1)
    cm = confusion_matrix(y[te], pred_te)
    recall = {LABELS[i].value: float(cm[i, i] / max(cm[i].sum(), 1)) for i in range(len(LABELS))}
    report = {
        "train_accuracy": accuracy(tr),
        "val_accuracy": accuracy(va),
        "test_accuracy": accuracy(te),
        "confusion_matrix": cm.tolist(),
        "recall": recall,
        "sizes": {"train": len(tr), "val": len(va), "test": len(te)},
        "best_epoch": best_epoch,
    }
    return params, report


# ---------------------------------------------------------------------------
# datasets


def write_dataset(path, motions: Sequence[LabeledMotion], provenance: dict = None) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"record": "header", "schema": DATASET_SCHEMA, "feature_dim": FEATURE_DIM,
                             "provenance": provenance or {}}) + "\n")
        for m in motions:
            fh.write(json.dumps({"features": np.asarray(m.features).tolist(), "label": Label(m.label).value,
                                 "source_episode": m.source_episode}) + "\n")


def read_dataset(path) -> list[LabeledMotion]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("record") == "header":
                if rec.get("schema") != DATASET_SCHEMA:
                    raise ValueError(f"{path}:{lineno}: unsupported dataset schema")
                continue
            out.append(LabeledMotion(np.array(rec["features"]), Label(rec["label"]), rec.get("source_episode", "")))
    return out


# ---------------------------------------------------------------------------
# probing


@dataclass
class ProbeResult:
    distribution: AffordanceDistribution
    success_rate: float
    labels: list
    trajectories: list


def label_trajectories(classifier: ClassifierParams, trajectories: Sequence[Trajectory], arm: ArmConfig = None,
                       dt: float = EpisodeConfig.dt):
    feats = np.stack([featurize(t, arm=arm, dt=dt) for t in trajectories])
    return [LABELS[i] for i in np.argmax(classifier.logits(feats), axis=1)]


def probe_affordance(policy, env: VecWidgetEnv, n_rollouts: int, classifier: ClassifierParams) -> ProbeResult:
    """Roll out ``policy`` without learning and tally the predicted labels.

    ``policy(obs) -> (actions, log_probs, values)``; ``env`` must have
    ``n_rollouts`` slots and ``auto_reset=False``. The distribution is the
    fraction of rollouts classified as each label.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    trajs = run_episodes(policy, env, n_rollouts)
    labels = label_trajectories(classifier, trajs, env.arm, env.config.dt)
    p_press = sum(l is Label.PRESS for l in labels) / len(labels)
    return ProbeResult(
        AffordanceDistribution(p_press, 1.0 - p_press),
        float(np.mean([t.success for t in trajs])),
        labels,
        trajs,
    )
