"""How the agent's perceived affordance of the deceptive widget shifts.

Reads a finished run directory (default ``runs``), produced by::

    affordance-rl train --deterministic
    affordance-rl collect-labels --deterministic
    affordance-rl train-classifier --deterministic
    affordance-rl adapt --deterministic

then shows three things:

1. what the phase-1 policy does on the deceptive widget: the path its motor
   commands aim for versus the path the fingertip actually takes;
2. the label distribution and success rate per adaptation update;
3. where press overtakes slide.

    python demos/affordance_shift.py [RUN_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from affordance_rl.affordance import PATH_WINDOW, ClassifierParams, _arc_resample, featurize, label_trajectories
from affordance_rl.env import VecWidgetEnv, run_episodes
from affordance_rl.harness import crossover_update, read_csv
from affordance_rl.ppo import load_checkpoint
from affordance_rl.sim import ArmConfig, forward_kinematics

run = Path(sys.argv[1] if len(sys.argv) > 1 else "runs")
agent, _ = load_checkpoint(run / "checkpoints" / "phase1.npz")
clf = ClassifierParams.load(run / "checkpoints" / "classifier.npz")
arm = ArmConfig()

# -- 1. one phase-1 rollout on the deceptive widget -----------------------------
env = VecWidgetEnv(20, kinds=["deceptive"], seed=123, auto_reset=False)
trajs = run_episodes(agent.policy_fn(np.random.default_rng(0), deterministic=True), env, 20)
labels = label_trajectories(clf, trajs)
t = trajs[0]
tips = forward_kinematics(arm, t.observations[:, :7]).fingertip_mid
actual, _ = _arc_resample(tips - tips[0], np.zeros(len(tips)), 16, PATH_WINDOW)
commanded = featurize(t)[:48].reshape(16, 3)

print(f"phase-1 policy on the deceptive widget: {sum(t.success for t in trajs)}/20 successes, "
      f"labels {sum(l.value == 'slide' for l in labels)} slide / {sum(l.value == 'press' for l in labels)} press")
print("fingertip displacement (mm) at arc-length stations, commanded vs actual")
print(" station   commanded x/y/z          actual x/y/z")
for i in (0, 3, 7, 11, 15):
    c, a = 1000 * commanded[i], 1000 * actual[i]
    print(f" {i:7d}  {c[0]:6.1f} {c[1]:6.1f} {c[2]:6.1f}   {a[0]:6.1f} {a[1]:6.1f} {a[2]:6.1f}")
# The two agree until the fingers meet the handle. After that the actual path
# is whatever the contact allows; the classifier only sees the commanded one.

# -- 2. the adaptation curve ------------------------------------------------------
_, rows, prov = read_csv(run / "metrics" / "phase2.csv")
upd = np.array([int(r["update"]) for r in rows])
success = np.array([float(r["success_deceptive"]) for r in rows])
p_press = np.array([float(r["p_press"]) for r in rows])
p_slide = np.array([float(r["p_slide"]) for r in rows])

print(f"\nadaptation (config {prov.get('config_hash')}):")
print(" update  success  p_press  " + "press share".ljust(20))
for i in range(0, len(rows), 5):
    bar = "#" * int(round(20 * p_press[i]))
    print(f" {upd[i]:6d}  {success[i]:7.2f}  {p_press[i]:7.2f}  {bar:20s}|")

# -- 3. crossover -----------------------------------------------------------------
cross = crossover_update(upd, p_press, p_slide)
both = np.flatnonzero((success >= 0.8) & (p_press >= 0.8))
print(f"\npress overtakes slide at update {cross}")
if len(both):
    print(f"success >= 0.8 with p_press >= 0.8 first at update {upd[both[0]]}")
