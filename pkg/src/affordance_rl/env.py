"""Widget-interaction MDP on top of :mod:`affordance_rl.sim`.

Observation layout (``OBS_DIM`` = 28 floats)::

    [0:7]    joint angles (rad)
    [7:14]   joint angular velocities (rad/s)
    [14:17]  handle (width, length, height)
    [17:19]  base (width, length)
    [19:22]  handle centre
    [22:25]  base centre
    [25:28]  handle velocity in the world frame

Rewards per step: a clamped distance penalty (fingertip midpoint to handle
centre), a clamped movement penalty (mean absolute joint speed) and a
completion reward of 1 on the step the widget triggers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sim import (
    N_JOINTS,
    REST_ANGLES,
    ArmConfig,
    ArmState,
    ContactReport,
    WidgetBatch,
    WidgetKind,
    WidgetPhysics,
    WidgetSpec,
    WidgetState,
    batch_step,
    forward_kinematics,
    make_widget,
)

log = logging.getLogger(__name__)


class EnvironmentFault(RuntimeError):
    """The simulator rejected the environment's state."""


OBS_DIM = 28
PENALTY_FLOOR = -0.01
TRAJECTORY_SCHEMA = "affordance-rl/trajectory/v1"

BUTTON_SIDE = (0.03, 0.05)
SLIDER_LENGTH = (0.04, 0.06)
SLIDER_WIDTH = (0.01, 0.02)
DECEPTIVE_HANDLE = (0.025, 0.05, 0.04)


@dataclass
class EpisodeConfig:
    widget_kind: WidgetKind = WidgetKind.BUTTON
    placement_center: tuple = (0.38, 0.0)
    placement_size: float = 0.05
    horizon: int = 150
    dt: float = 0.01
    discount: float = 0.99
    distance_coef: float = 0.02
    movement_coef: float = 0.005
    rng_seed: int = 0

    def __post_init__(self):
        self.widget_kind = WidgetKind(self.widget_kind)
        self.placement_center = tuple(float(v) for v in self.placement_center)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.distance_coef < 0 or self.movement_coef < 0:
            raise ValueError("penalty coefficients must be non-negative")


def sample_widget(
    kind: WidgetKind | str,
    rng: np.random.Generator,
    placement_center=(0.38, 0.0),
    placement_size: float = 0.05,
    physics: WidgetPhysics = WidgetPhysics(),
) -> WidgetSpec:
    """Draw widget dimensions and a base origin inside the placement square."""
    kind = WidgetKind(kind)
    if kind is WidgetKind.BUTTON:
        side = rng.uniform(*BUTTON_SIDE)
        dims = (side, side, 0.03)
    elif kind is WidgetKind.SLIDER:
        length = rng.uniform(*SLIDER_LENGTH)
        width = rng.uniform(*SLIDER_WIDTH)
        dims = (width, length, 0.04)
    else:
        dims = DECEPTIVE_HANDLE
    offset = rng.uniform(-0.5, 0.5, size=2) * placement_size
    origin = (placement_center[0] + offset[0], placement_center[1] + offset[1], 0.0)
    return make_widget(kind, dims, origin, physics)


@dataclass
class Observation:
    angles: np.ndarray
    velocities: np.ndarray
    handle_dims: np.ndarray
    base_dims: np.ndarray
    handle_center: np.ndarray
    base_center: np.ndarray
    handle_velocity: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.angles,
                self.velocities,
                self.handle_dims,
                self.base_dims,
                self.handle_center,
                self.base_center,
                self.handle_velocity,
            ]
        ).astype(np.float64)

    @classmethod
    def from_vector(cls, v) -> "Observation":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (OBS_DIM,):
            raise ValueError(f"observation vector must have shape ({OBS_DIM},)")
        return cls(v[0:7], v[7:14], v[14:17], v[17:19], v[19:22], v[22:25], v[25:28])

    @property
    def proprioception(self) -> np.ndarray:
        return np.concatenate([self.angles, self.velocities])


@dataclass
class RewardBreakdown:
    distance_penalty: float
    movement_penalty: float
    completion: float

    @property
    def total(self) -> float:
        return self.distance_penalty + self.movement_penalty + self.completion

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.distance_penalty, self.movement_penalty, self.completion)


def reward_terms(distance, mean_speed, newly_triggered, distance_coef, movement_coef):
    """Batched reward components; returns (distance, movement, completion)."""
    dist_pen = np.clip(-distance_coef * np.asarray(distance), PENALTY_FLOOR, 0.0)
    move_pen = np.clip(-movement_coef * np.asarray(mean_speed), PENALTY_FLOOR, 0.0)
    completion = np.where(newly_triggered, 1.0, 0.0)
    return dist_pen, move_pen, completion


def compute_reward(
    contact: ContactReport,
    arm: ArmState,
    widget: WidgetState,
    spec: WidgetSpec,
    already_triggered: bool,
    distance_coef: float = 0.02,
    movement_coef: float = 0.005,
) -> RewardBreakdown:
    mid = np.mean(contact.fingertip_pos, axis=0)
    center = spec.handle_rest_center + widget.displacement * np.array(spec.travel_axis)
    d, m, c = reward_terms(
        np.linalg.norm(mid - center),
        np.mean(np.abs(arm.velocities)),
        widget.triggered and not already_triggered,
        distance_coef,
        movement_coef,
    )
    return RewardBreakdown(float(d), float(m), float(c))


def episode_return(rewards: Sequence[float], discount: float = 0.99) -> float:
    """Discounted return ``sum_t discount**t * r_t`` (t from 0)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("rewards must be a non-empty 1-D sequence")
    total = 0.0
    for r in rewards[::-1]:
        total = r + discount * total
    return float(total)


class VecWidgetEnv:
    """``n`` independent widget episodes advanced in lock-step.

    Each instance owns an RNG stream spawned from ``seed``; the widget kind
    of every new episode is drawn uniformly from ``kinds``. With
    ``auto_reset`` a finished instance starts a new episode on the same
    call; otherwise it stays frozen until :meth:`reset`.
    """

    def __init__(
        self,
        n: int,
        config: EpisodeConfig = None,
        kinds: Iterable[WidgetKind | str] = None,
        seed: int = None,
        arm: ArmConfig = None,
        physics: WidgetPhysics = None,
        auto_reset: bool = True,
    ):
        self.config = config or EpisodeConfig()
        self.arm = arm or ArmConfig()
        self.physics = physics or WidgetPhysics()
        self.kinds = [WidgetKind(k) for k in (kinds or [self.config.widget_kind])]
        self.n = n
        self.auto_reset = auto_reset
        seed = self.config.rng_seed if seed is None else seed
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
        self.widgets: WidgetBatch = None
        self.action_clipped = np.zeros(n, dtype=bool)

    # -- state ---------------------------------------------------------
    def _new_widget(self, i: int) -> WidgetSpec:
        rng = self.rngs[i]
        kind = self.kinds[rng.integers(len(self.kinds))] if len(self.kinds) > 1 else self.kinds[0]
        cfg = self.config
        return sample_widget(kind, rng, cfg.placement_center, cfg.placement_size, self.physics)

    def _reset_slot(self, i: int, spec: WidgetSpec = None) -> None:
        spec = spec or self._new_widget(i)
        self.widgets.set(i, spec)
        self.q[i] = REST_ANGLES
        self.qd[i] = 0.0
        self.disp[i] = 0.0
        self.wvel[i] = 0.0
        self.triggered[i] = False
        self.t[i] = 0
        self.active[i] = True

    def reset(self, widgets: Sequence[WidgetSpec] = None) -> np.ndarray:
        """Start a fresh episode in every slot; ``widgets`` pins the specs."""
        n = self.n
        if widgets is not None and len(widgets) != n:
            raise ValueError("need one widget per instance")
        specs = list(widgets) if widgets is not None else [self._new_widget(i) for i in range(n)]
        self.widgets = WidgetBatch(specs)
        self.q = np.tile(np.array(REST_ANGLES), (n, 1))
        self.qd = np.zeros((n, N_JOINTS))
        self.disp = np.zeros(n)
        self.wvel = np.zeros(n)
        self.triggered = np.zeros(n, dtype=bool)
        self.t = np.zeros(n, dtype=np.int64)
        self.active = np.ones(n, dtype=bool)
        return self.observe()

    def observe(self) -> np.ndarray:
        wb = self.widgets
        obs = np.empty((self.n, OBS_DIM))
        obs[:, 0:7] = self.q
        obs[:, 7:14] = self.qd
        obs[:, 14:17] = wb.handle_dims
        obs[:, 17:19] = wb.base_dims
        obs[:, 19:22] = wb.handle_center(self.disp)
        obs[:, 22:25] = wb.origin
        obs[:, 25:28] = self.wvel[:, None] * wb.axis
        return obs

    def fingertip_mid(self) -> np.ndarray:
        return forward_kinematics(self.arm, self.q).fingertip_mid

    # -- dynamics ------------------------------------------------------
    def step(self, actions):
        """Apply one action per instance.

        Returns ``(obs, rewards, done, info)`` where ``rewards`` is (n, 3)
        holding (distance, movement, completion) and ``info`` carries
        ``success``, ``final_obs`` (observation at episode end, before any
        auto-reset) and the pre-step widget specs.
        """
        if self.widgets is None:
            raise RuntimeError("call reset() first")
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n, N_JOINTS):
            raise ValueError(f"actions must have shape ({self.n}, {N_JOINTS})")
        if not np.all(np.isfinite(actions)):
            raise ValueError("non-finite action")
        limit = self.arm.max_force
        self.action_clipped = np.any(np.abs(actions) > limit, axis=1)
        if np.any(self.action_clipped & self.active):
            log.debug("clamping %d out-of-range actions", int(np.sum(self.action_clipped)))
        actions = np.clip(actions, -limit, limit)

        was_triggered = self.triggered.copy()
        try:
            q, qd, disp, wvel, trig, status = batch_step(
                self.arm, self.physics, self.widgets, self.q, self.qd, self.disp, self.wvel,
                self.triggered, actions, self.config.dt,
            )
        except ValueError as err:
            raise EnvironmentFault(str(err)) from err
        act = self.active
        self.q[act], self.qd[act], self.disp[act] = q[act], qd[act], disp[act]
        self.wvel[act], self.triggered[act] = wvel[act], trig[act]
        self.t[act] += 1

        mid = status.fingertips.mean(axis=1)
        center = self.widgets.handle_center(self.disp)
        dist = np.sqrt(np.sum((mid - center) ** 2, axis=1))
        speed = np.mean(np.abs(self.qd), axis=1)
        cfg = self.config
        d, m, c = reward_terms(dist, speed, self.triggered & ~was_triggered, cfg.distance_coef, cfg.movement_coef)
        rewards = np.stack([d, m, c], axis=1)
        rewards[~act] = 0.0

        done = act & (self.triggered | (self.t >= cfg.horizon))
        obs = self.observe()
        info = {
            "success": done & self.triggered,
            "final_obs": obs.copy(),
            "widgets": list(self.widgets.specs),
            "max_penetration": status.max_penetration,
            "min_distance": status.min_distance,
            "contact_force": status.contact_force,
        }
        if np.any(done):
            if self.auto_reset:
                for i in np.flatnonzero(done):
                    self._reset_slot(i)
                obs = self.observe()
            else:
                self.active = self.active & ~done
        return obs, rewards, done, info


class WidgetEnv:
    """Single-episode interface over a one-slot :class:`VecWidgetEnv`."""

    def __init__(self, config: EpisodeConfig = None, arm: ArmConfig = None,
                 physics: WidgetPhysics = None):
        self.config = config or EpisodeConfig()
        self._vec = VecWidgetEnv(1, self.config, seed=self.config.rng_seed, arm=arm,
                                 physics=physics, auto_reset=False)
        self.done = True
        self.action_clipped = False

    @property
    def spec(self) -> WidgetSpec:
        return self._vec.widgets.specs[0]

    @property
    def arm_state(self) -> ArmState:
        return ArmState(self._vec.q[0].copy(), self._vec.qd[0].copy())

    @property
    def widget_state(self) -> WidgetState:
        v = self._vec
        return WidgetState(float(v.disp[0]), float(v.wvel[0]), bool(v.triggered[0]))

    @property
    def steps(self) -> int:
        return int(self._vec.t[0])

    def fingertip_mid(self) -> np.ndarray:
        return self._vec.fingertip_mid()[0]

    def reset(self, widget: WidgetSpec = None) -> Observation:
        obs = self._vec.reset(None if widget is None else [widget])
        self.done = False
        return Observation.from_vector(obs[0])

    def step(self, action) -> tuple[Observation, RewardBreakdown, bool]:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        obs, rewards, done, info = self._vec.step(np.asarray(action, dtype=np.float64)[None])
        self.action_clipped = bool(self._vec.action_clipped[0])
        self.done = bool(done[0])
        return (
            Observation.from_vector(info["final_obs"][0]),
            RewardBreakdown(*(float(x) for x in rewards[0])),
            self.done,
        )


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """One episode. ``observations`` has one more row than ``actions``."""

    widget: WidgetSpec
    observations: np.ndarray  # (T+1, OBS_DIM)
    actions: np.ndarray  # (T, 7)
    rewards: np.ndarray  # (T, 3): distance, movement, completion
    log_probs: np.ndarray = None
    values: np.ndarray = None
    episode_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, N_JOINTS)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1, 3)
        n = len(self.actions)
        self.log_probs = np.zeros(n) if self.log_probs is None else np.asarray(self.log_probs, dtype=np.float64)
        self.values = np.zeros(n) if self.values is None else np.asarray(self.values, dtype=np.float64)
        if len(self.observations) != n + 1 or len(self.rewards) != n:
            raise ValueError("misaligned trajectory arrays")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def success(self) -> bool:
        return bool(np.sum(self.rewards[:, 2]) >= 1.0)

    @property
    def total_rewards(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def to_jsonl(self, path: str | Path, episode_config: EpisodeConfig = None) -> None:
        write_trajectories(path, [self], episode_config)


def _episode_config_dict(cfg: EpisodeConfig) -> dict:
    d = asdict(cfg)
    d["widget_kind"] = cfg.widget_kind.value
    d["placement_center"] = list(cfg.placement_center)
    return d


def write_trajectories(path, trajectories: Sequence[Trajectory], episode_config: EpisodeConfig = None):
    """Line-delimited JSON: a header line, one line per step, a final line.

    Floats go through ``repr`` so values round-trip exactly.
    """
    cfg = episode_config or EpisodeConfig()
    with open(path, "w") as fh:
        for traj in trajectories:
            header = {
                "record": "header",
                "schema": TRAJECTORY_SCHEMA,
                "episode_id": traj.episode_id,
                "widget": traj.widget.to_dict(),
                "episode_config": _episode_config_dict(cfg),
                "meta": traj.meta,
            }
            fh.write(json.dumps(header) + "\n")
            for t in range(len(traj)):
                row = {
                    "record": "step",
                    "t": t,
                    "observation": traj.observations[t].tolist(),
                    "action": traj.actions[t].tolist(),
                    "reward": {
                        "distance_penalty": traj.rewards[t, 0],
                        "movement_penalty": traj.rewards[t, 1],
                        "completion": traj.rewards[t, 2],
                        "total": float(traj.rewards[t].sum()),
                    },
                    "log_prob": float(traj.log_probs[t]),
                    "value": float(traj.values[t]),
                    "done": t == len(traj) - 1,
                }
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"record": "final", "observation": traj.observations[-1].tolist()}) + "\n")


def read_trajectories(path) -> list[tuple[Trajectory, EpisodeConfig]]:
    out = []
    current = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("record")
            if kind == "header":
                if rec.get("schema") != TRAJECTORY_SCHEMA:
                    raise ValueError(f"{path}:{lineno}: unsupported schema {rec.get('schema')!r}")
                current = {"header": rec, "obs": [], "act": [], "rew": [], "lp": [], "val": []}
            elif kind == "step":
                if current is None:
                    raise ValueError(f"{path}:{lineno}: step before header")
                current["obs"].append(rec["observation"])
                current["act"].append(rec["action"])
                r = rec["reward"]
                current["rew"].append([r["distance_penalty"], r["movement_penalty"], r["completion"]])
                current["lp"].append(rec["log_prob"])
                current["val"].append(rec["value"])
            elif kind == "final":
                if current is None:
                    raise ValueError(f"{path}:{lineno}: final before header")
                h = current["header"]
                traj = Trajectory(
                    widget=WidgetSpec.from_dict(h["widget"]),
                    observations=current["obs"] + [rec["observation"]],
                    actions=current["act"],
                    rewards=current["rew"],
                    log_probs=current["lp"],
                    values=current["val"],
                    episode_id=h.get("episode_id", ""),
                    meta=h.get("meta", {}),
                )
                out.append((traj, EpisodeConfig(**h["episode_config"])))
                current = None
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {kind!r}")
    if current is not None:
        raise ValueError(f"{path}: truncated trajectory")
    return out


def replay(traj: Trajectory, episode_config: EpisodeConfig = None, arm: ArmConfig = None,
           physics: WidgetPhysics = None) -> np.ndarray:
    """Re-run the stored actions on the stored widget; returns the (T, 3) reward stream."""
    env = WidgetEnv(episode_config, arm=arm, physics=physics)
    env.reset(traj.widget)
    rewards = []
    for a in traj.actions:
        _, r, done = env.step(a)
        rewards.append(r.as_tuple())
        if done:
            break
    return np.array(rewards, dtype=np.float64).reshape(-1, 3)


def replay_matches(traj: Trajectory, episode_config: EpisodeConfig = None, **kw) -> bool:
    """Bitwise comparison of a replayed reward stream with the stored one."""
    again = replay(traj, episode_config, **kw)
    return again.shape == traj.rewards.shape and again.tobytes() == traj.rewards.tobytes()


def run_episodes(policy, env: VecWidgetEnv, n_episodes: int, widgets: Sequence[WidgetSpec] = None) -> list[Trajectory]:
    """Run exactly ``n_episodes`` episodes in parallel slots (no auto-reset).

    ``policy(obs) -> (actions, log_probs, values)`` on batched observations.
    Episodes are returned in slot order.
    """
    if env.auto_reset:
        raise ValueError("run_episodes needs an env built with auto_reset=False")
    if env.n != n_episodes:
        raise ValueError("env must have one slot per episode")
    obs = env.reset(widgets)
    specs = list(env.widgets.specs)
    obs_buf = [[o] for o in obs]
    act_buf = [[] for _ in range(n_episodes)]
    rew_buf = [[] for _ in range(n_episodes)]
    lp_buf = [[] for _ in range(n_episodes)]
    val_buf = [[] for _ in range(n_episodes)]
    while np.any(env.active):
        live = env.active.copy()
        actions, log_probs, values = policy(obs)
        obs, rewards, done, info = env.step(actions)
        for i in np.flatnonzero(live):
            act_buf[i].append(np.clip(actions[i], -env.arm.max_force, env.arm.max_force))
            rew_buf[i].append(rewards[i])
            lp_buf[i].append(log_probs[i])
            val_buf[i].append(values[i])
            obs_buf[i].append(info["final_obs"][i])
    return [
        Trajectory(specs[i], obs_buf[i], act_buf[i], rew_buf[i], lp_buf[i], val_buf[i], episode_id=str(i))
        for i in range(n_episodes)
    ]


__all__ = [
    "EpisodeConfig",
    "OBS_DIM",
    "Observation",
    "RewardBreakdown",
    "Trajectory",
    "VecWidgetEnv",
    "WidgetEnv",
    "compute_reward",
    "episode_return",
    "read_trajectories",
    "replay",
    "replay_matches",
    "run_episodes",
    "sample_widget",
    "write_trajectories",
]
