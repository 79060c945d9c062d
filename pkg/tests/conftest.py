import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# small enough that a full stage runs in a second or two
TINY_TOML = """\
seed = 3

[ppo]
steps_per_update = 64
n_envs = 4
minibatch_size = 32
epochs_per_update = 2
hidden_sizes = [8]

[phase1]
updates = 1
eval_episodes = 4
eval_every = 1

[dataset]
n_per_class = 2
batch = 8
max_attempts = 16

[classifier]
epochs = 20

[phase2]
updates = 1
eval_episodes = 4
probe_rollouts = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


def blob_dataset(path, n=200, labels=("press", "slide"), seed=0):
    """Write a separable synthetic labeled dataset in the on-disk format."""
    from affordance_rl.affordance import FEATURE_DIM, Label, LabeledMotion, write_dataset

    rng = np.random.default_rng(seed)
    motions = []
    for i in range(n):
        label = Label(labels[i % len(labels)])
        centre = -2.0 if label is Label.PRESS else 2.0
        motions.append(LabeledMotion(rng.normal(centre, 1.0, FEATURE_DIM), label, f"ep{i}"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, motions, {"synthetic": True})
    return path
