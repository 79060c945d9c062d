"""A tour of the simulated widgets, driven by a hand-written controller.

Builds one widget of each kind at the same spot and tries two scripted
motions on each: a press (come down on top of the handle) and a slide (come
down beside the handle, then push it along the rail). The button only
answers the press, the slider only the slide. The deceptive widget looks
like a slider but carries a stiff press mechanism, so neither motion
completes it without learning.

    python demos/widgets_and_contact.py
"""

import numpy as np

from affordance_rl.env import EpisodeConfig, WidgetEnv
from affordance_rl.sim import REST_ANGLES, ArmConfig, fingertip_jacobians, forward_kinematics, make_widget

arm = ArmConfig()
gain = np.array(arm.torque_gain)
origin = (0.38, 0.01, 0.0)
widgets = {
    "button": make_widget("button", (0.04, 0.04, 0.03), origin),
    "slider": make_widget("slider", (0.015, 0.05, 0.04), origin),
    "deceptive": make_widget("deceptive", (0.025, 0.05, 0.04), origin),
}


def waypoints(spec, motion):
    """Hover point, contact point, end point for the fingertip midpoint."""
    c = spec.handle_rest_center
    w, _, h = spec.handle_dims
    if motion == "press":
        return c + [0, 0, h / 2 + 0.03], c + [0, 0, h / 2], c + [0, 0, h / 2 - 0.03]
    # both fingertips on the -y side of the handle, then sweep along +y
    side = c + [0, -(w / 2 + 0.026), 0.0]
    return side + [0, 0, h / 2 + 0.03], side, side + [0, 0.06, 0]


def run(spec, motion, steps=150, kp=1000.0, kd=0.05, k_posture=50.0, speed=0.001):
    env = WidgetEnv(EpisodeConfig(), arm)
    env.reset(spec)
    hover, contact, end = waypoints(spec, motion)
    posture = np.array([0, 0, 0, 1, 0, 1, 0], dtype=float)
    target = hover
    for t in range(steps):
        q, qd = env.arm_state.angles, env.arm_state.velocities
        pose = forward_kinematics(arm, q[None])
        if t >= 30:
            # walk the target: down to the contact point, then on to the end point
            goal = contact if np.linalg.norm(target - contact) > 1e-9 and t < 90 else end
            step = goal - target
            target = target + step * min(1.0, speed / max(np.linalg.norm(step), 1e-12))
        jac = fingertip_jacobians(arm, pose, q[None, 6])[0].mean(axis=0)
        force = jac.T @ (kp * (target - pose.fingertip_mid[0])) / gain - kd * qd / gain
        force -= k_posture * posture * (q - np.array(REST_ANGLES))
        force[6] = 0.0
        _, _, done = env.step(np.clip(force, -arm.max_force, arm.max_force))
        if done:
            break
    return env


print(f"{'widget':10s} {'motion':7s} {'steps':>5s} {'handle travel (mm)':>19s} {'completed':>9s}")
for name, spec in widgets.items():
    for motion in ("press", "slide"):
        env = run(spec, motion)
        w = env.widget_state
        print(f"{name:10s} {motion:7s} {env.steps:5d} {1000 * w.displacement:19.1f} {str(w.triggered):>9s}")

# Button travel counts downward, slider travel along the rail. The deceptive
# handle never slides, and its 700 N/m spring holds a gentle press short of
# the 20 mm goal: this scripted press pushes too softly, a learned one does not.
