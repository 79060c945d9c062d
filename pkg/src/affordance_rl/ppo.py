"""Proximal policy optimization on the widget environment.

The agent is a diagonal-Gaussian policy over normalized motor commands
``u``; the environment receives ``max_force * clip(u, -1, 1)``. Log
probabilities always refer to the unclipped ``u``.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import OBS_DIM, EnvironmentFault, VecWidgetEnv, run_episodes
from .nn import MLP, Adam, clip_by_global_norm
from .sim import N_JOINTS, WidgetKind

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "affordance-rl/checkpoint/v1"
LOG_2PI = math.log(2.0 * math.pi)
METRIC_COLUMNS = (
    "update",
    "env_steps",
    "mean_return",
    "success_button",
    "success_slider",
    "policy_loss",
    "value_loss",
    "kl",
    "clip_frac",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PpoConfig:
    """PPO hyperparameters. None of these values come from published settings."""

    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    discount: float = 0.99
    learning_rate: float = 3e-4
    epochs_per_update: int = 10
    minibatch_size: int = 512
    steps_per_update: int = 4096
    n_envs: int = 16
    value_loss_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    hidden_sizes: tuple = (64, 64)
    activation: str = "tanh"
    init_log_std: float = math.log(0.5)
    min_log_std: float = None
    seed: int = 0

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps_per_update % self.n_envs:
            raise ValueError("steps_per_update must be a multiple of n_envs")


class RunningNorm:
    """Running mean/variance (parallel-merge form), frozen on demand."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.frozen = False

    def update(self, x) -> None:
        if self.frozen:
            return
        x = np.asarray(x, dtype=np.float64).reshape(-1, len(self.mean))
        b_mean, b_var, b_n = x.mean(axis=0), x.var(axis=0), len(x)
        delta = b_mean - self.mean
        total = self.count + b_n
        self.mean = self.mean + delta * b_n / total
        m2 = self.var * self.count + b_var * b_n + delta**2 * self.count * b_n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x):
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


class Agent:
    """Policy head, value head and observation normalizer."""

    def __init__(self, cfg: PpoConfig = None, obs_dim: int = OBS_DIM, act_dim: int = N_JOINTS,
                 max_force: float = 200.0):
        cfg = cfg or PpoConfig()
        rng = np.random.default_rng(cfg.seed)
        sizes = (obs_dim, *cfg.hidden_sizes)
        self.policy = MLP((*sizes, act_dim), cfg.activation, rng, out_scale=0.01)
        self.value = MLP((*sizes, 1), cfg.activation, rng, out_scale=1.0)
        self.log_std = np.full(act_dim, float(cfg.init_log_std))
        self.min_log_std = cfg.min_log_std
        self.obs_norm = RunningNorm(obs_dim)
        self.max_force = float(max_force)

    # -- distribution --------------------------------------------------
    def effective_log_std(self) -> np.ndarray:
        if self.min_log_std is None:
            return self.log_std
        return np.maximum(self.log_std, self.min_log_std)

    def mean(self, norm_obs):
        return self.policy.forward(norm_obs)

    def log_prob(self, mean, u):
        log_std = self.effective_log_std()
        z = (u - mean) / np.exp(log_std)
        return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)

    def to_action(self, u):
        return self.max_force * np.clip(u, -1.0, 1.0)

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        """Batched sampling. Returns (env_actions, u, log_prob, value)."""
        norm = self.obs_norm(obs)
        mean = self.mean(norm)
        if not np.all(np.isfinite(mean)):
            raise TrainingDiverged("non-finite policy output")
        if deterministic:
            u = mean
        else:
            u = mean + np.exp(self.effective_log_std()) * rng.standard_normal(mean.shape)
        value = self.value.forward(norm)[..., 0]
        return self.to_action(u), u, self.log_prob(mean, u), value

    def mean_action(self, obs):
        return self.to_action(self.mean(self.obs_norm(obs)))

    def policy_fn(self, rng=None, deterministic=False):
        """Adapter for :func:`affordance_rl.env.run_episodes`."""
        def fn(obs):
            a, _, lp, v = self.act(obs, rng, deterministic)
            return a, lp, v
        return fn

    # -- persistence ---------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = {f"policy_{i}": p for i, p in enumerate(self.policy.params)}
        arrays.update({f"value_{i}": p for i, p in enumerate(self.value.params)})
        arrays["log_std"] = self.log_std
        arrays["obs_mean"] = self.obs_norm.mean
        arrays["obs_var"] = self.obs_norm.var
        arrays["obs_count"] = np.array(self.obs_norm.count)
        return arrays

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self) -> "Agent":
        other = Agent.__new__(Agent)
        other.policy = self.policy.copy()
        other.value = self.value.copy()
        other.log_std = self.log_std.copy()
        other.min_log_std = self.min_log_std
        other.obs_norm = RunningNorm(len(self.obs_norm.mean), self.obs_norm.clip)
        other.obs_norm.mean = self.obs_norm.mean.copy()
        other.obs_norm.var = self.obs_norm.var.copy()
        other.obs_norm.count = self.obs_norm.count
        other.obs_norm.frozen = self.obs_norm.frozen
        other.max_force = self.max_force
        return other

    def load_state(self, other: "Agent") -> None:
        for dst, src in zip(self.policy.params + self.value.params, other.policy.params + other.value.params):
            dst[...] = src
        self.log_std[...] = other.log_std
        self.obs_norm.mean = other.obs_norm.mean.copy()
        self.obs_norm.var = other.obs_norm.var.copy()
        self.obs_norm.count = other.obs_norm.count


def save_checkpoint(agent: Agent, path, extra: dict = None) -> None:
    """``.npz`` holding all arrays plus a JSON architecture/provenance block."""
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "policy": agent.policy.describe(),
        "value": agent.value.describe(),
        "max_force": agent.max_force,
        "min_log_std": agent.min_log_std,
        "obs_clip": agent.obs_norm.clip,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **agent.state_arrays())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Agent, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
        p_sizes = meta["policy"]["sizes"]
        cfg = PpoConfig(hidden_sizes=tuple(p_sizes[1:-1]), activation=meta["policy"]["activation"],
                        min_log_std=meta["min_log_std"])
        agent = Agent(cfg, obs_dim=p_sizes[0], act_dim=p_sizes[-1], max_force=meta["max_force"])
        agent.value = MLP(meta["value"]["sizes"], meta["value"]["activation"])
        for i in range(len(agent.policy.params)):
            agent.policy.params[i] = data[f"policy_{i}"].copy()
        for i in range(len(agent.value.params)):
            agent.value.params[i] = data[f"value_{i}"].copy()
        agent.log_std = data["log_std"].copy()
        agent.obs_norm.mean = data["obs_mean"].copy()
        agent.obs_norm.var = data["obs_var"].copy()
        agent.obs_norm.count = float(data["obs_count"])
        agent.obs_norm.clip = meta["obs_clip"]
    return agent, meta.get("extra", {})


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values, dones, bootstrap_value, discount=0.99, lam=0.95):
    """Generalized advantage estimates along axis 0.

    ``dones[t]`` marks that the episode ended at step t, so nothing after t
    leaks into it. Extra trailing axes (parallel environments) broadcast.
    Returns (advantages, return_targets).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * live - values[t]
        last = delta + discount * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean()
    centered = adv - adv.mean()
    return centered / (centered.std() + 1e-12)


# ---------------------------------------------------------------------------
# update


@dataclass
class RolloutBatch:
    obs: np.ndarray  # normalized observations, (N, obs_dim)
    u: np.ndarray  # pre-clamp Gaussian samples, (N, act_dim)
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    values: np.ndarray = None

    def __len__(self):
        return len(self.obs)


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    kl: float = 0.0
    clip_frac: float = 0.0
    grad_norm: float = 0.0


def clipped_surrogate(ratio, adv, eps):
    """Per-sample clipped objective ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def policy_loss_and_grads(agent: Agent, obs, u, old_log_probs, adv, eps, entropy_coef):
    """Clipped-surrogate loss (minus entropy bonus) and its gradients.

    Returns (loss, grads for ``agent.policy.params + [log_std]``, info).
    """
    mean, cache = agent.policy.forward(obs, cache=True)
    log_std = agent.effective_log_std()
    std = np.exp(log_std)
    z = (u - mean) / std
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
    ratio = np.exp(logp - old_log_probs)
    lo, hi = 1.0 - eps, 1.0 + eps
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    n = len(adv)
    entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    loss = -float(np.mean(np.minimum(surr1, surr2))) - entropy_coef * entropy

    # d loss / d ratio: the unclipped branch carries gradient unless the clip is active
    unclipped = (surr1 <= surr2) | ((ratio > lo) & (ratio < hi))
    d_ratio = np.where(unclipped, -adv, 0.0) / n
    d_logp = d_ratio * ratio
    d_mean = d_logp[:, None] * z / std
    d_log_std = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0) - entropy_coef
    if agent.min_log_std is not None:
        d_log_std = np.where(agent.log_std >= agent.min_log_std, d_log_std, 0.0)
    grads, _ = agent.policy.backward(d_mean, cache)
    info = {
        "kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "entropy": entropy,
    }
    return loss, grads + [d_log_std], info


def value_loss_and_grads(agent: Agent, obs, returns):
    pred, cache = agent.value.forward(obs, cache=True)
    err = pred[:, 0] - returns
    loss = float(np.mean(err * err))
    grads, _ = agent.value.backward((2.0 * err / len(err))[:, None], cache)
    return loss, grads


class PpoOptimizer:
    """Adam state for both heads."""

    def __init__(self, agent: Agent, lr: float):
        self.policy = Adam(agent.policy.params + [agent.log_std], lr=lr)
        self.value = Adam(agent.value.params, lr=lr)


def ppo_update(agent: Agent, batch: RolloutBatch, cfg: PpoConfig, opt: PpoOptimizer,
               rng: np.random.Generator) -> UpdateStats:
    """Several epochs of minibatch clipped-surrogate updates, in place.

    Advantages are normalized once per batch. If any loss turns non-finite
    the agent is restored to its pre-update state and
    :class:`TrainingDiverged` is raised.
    """
    snapshot = agent.copy()
    adv = normalize_advantages(batch.advantages)
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    stats = UpdateStats()
    count = 0
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = order[start:start + mb]
            p_loss, p_grads, info = policy_loss_and_grads(
                agent, batch.obs[idx], batch.u[idx], batch.log_probs[idx], adv[idx],
                cfg.clip_epsilon, cfg.entropy_coef,
            )
            v_loss, v_grads = value_loss_and_grads(agent, batch.obs[idx], batch.returns[idx])
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                agent.load_state(snapshot)
                raise TrainingDiverged(f"non-finite loss (policy={p_loss}, value={v_loss})")
            v_grads = [cfg.value_loss_coef * g for g in v_grads]
            p_grads, p_norm = clip_by_global_norm(p_grads, cfg.max_grad_norm)
            v_grads, _ = clip_by_global_norm(v_grads, cfg.max_grad_norm)
            opt.policy.step(p_grads)
            opt.value.step(v_grads)
            stats.policy_loss += p_loss
            stats.value_loss += v_loss
            stats.entropy += info["entropy"]
            stats.kl += info["kl"]
            stats.clip_frac += info["clip_frac"]
            stats.grad_norm += p_norm
            count += 1
    for k in asdict(stats):
        setattr(stats, k, getattr(stats, k) / max(count, 1))
    return stats


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricRow:
    update: int
    env_steps: int
    mean_return: float
    success: dict
    policy_loss: float = float("nan")
    value_loss: float = float("nan")
    kl: float = float("nan")
    clip_frac: float = float("nan")
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "update": self.update,
            "env_steps": self.env_steps,
            "mean_return": self.mean_return,
            "success_button": self.success.get("button", float("nan")),
            "success_slider": self.success.get("slider", float("nan")),
            "policy_loss": self.policy_loss,
            "value_loss": self.value_loss,
            "kl": self.kl,
            "clip_frac": self.clip_frac,
        }
        d.update({f"success_{k}": v for k, v in self.success.items()})
        d.update(self.extra)
        return d


def evaluate(agent: Agent, env_factory: Callable[..., VecWidgetEnv], kinds: Sequence, episodes: int,
             seed: int = 10_000) -> dict:
    """Mean-action success rate per widget kind on a fixed set of episodes."""
    out = {}
    for k, kind in enumerate(kinds):
        kind = WidgetKind(kind)
        env = env_factory(episodes, kinds=[kind], seed=seed + k, auto_reset=False)
        trajs = run_episodes(agent.policy_fn(deterministic=True), env, episodes)
        out[kind.value] = float(np.mean([t.success for t in trajs]))
    return out


class PpoTrainer:
    """Rollout collection plus :func:`ppo_update`, one call per update."""

    def __init__(self, agent: Agent, env: VecWidgetEnv, cfg: PpoConfig, seed: int = None):
        if env.n != cfg.n_envs:
            raise ValueError("env slot count must match cfg.n_envs")
        self.agent = agent
        self.env = env
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.opt = PpoOptimizer(agent, cfg.learning_rate)
        self.obs = env.reset()
        self.env_steps = 0
        self.episode_returns = []
        self._running = np.zeros(env.n)
        self._disc = np.ones(env.n)

    def collect(self) -> RolloutBatch:
        cfg, agent, env = self.cfg, self.agent, self.env
        T, n = cfg.steps_per_update // cfg.n_envs, env.n
        obs_buf = np.zeros((T, n, OBS_DIM))
        u_buf = np.zeros((T, n, N_JOINTS))
        lp_buf = np.zeros((T, n))
        val_buf = np.zeros((T, n))
        rew_buf = np.zeros((T, n))
        done_buf = np.zeros((T, n))
        raw = []
        self.episode_returns = []
        for t in range(T):
            raw.append(self.obs)
            norm = agent.obs_norm(self.obs)
            mean = agent.mean(norm)
            if not np.all(np.isfinite(mean)):
                raise TrainingDiverged("non-finite policy output")
            u = mean + np.exp(agent.effective_log_std()) * self.rng.standard_normal(mean.shape)
            obs_buf[t] = norm
            u_buf[t] = u
            lp_buf[t] = agent.log_prob(mean, u)
            val_buf[t] = agent.value.forward(norm)[:, 0]
            self.obs, rewards, done, _ = env.step(agent.to_action(u))
            r = rewards.sum(axis=1)
            rew_buf[t] = r
            done_buf[t] = done
            self._running += self._disc * r
            self._disc *= cfg.discount
            for i in np.flatnonzero(done):
                self.episode_returns.append(self._running[i])
                self._running[i] = 0.0
                self._disc[i] = 1.0
        bootstrap = agent.value.forward(agent.obs_norm(self.obs))[:, 0]
        adv, ret = compute_gae(rew_buf, val_buf, done_buf, bootstrap, cfg.discount, cfg.gae_lambda)
        agent.obs_norm.update(np.concatenate(raw))
        self.env_steps += T * n
        flat = lambda a: a.reshape(T * n, *a.shape[2:])  # noqa: E731
        return RolloutBatch(flat(obs_buf), flat(u_buf), flat(lp_buf), flat(adv), flat(ret), flat(val_buf))

    def update(self) -> UpdateStats:
        batch = self.collect()
        return ppo_update(self.agent, batch, self.cfg, self.opt, self.rng)


def train(env_factory: Callable[..., VecWidgetEnv], cfg: PpoConfig, total_updates: int,
          kinds: Sequence = (WidgetKind.BUTTON, WidgetKind.SLIDER), eval_episodes: int = 50,
          eval_every: int = 1, agent: Agent = None, on_update: Callable = None,
          eval_kinds: Sequence = None, eval_seed: int = 10_000):
    """Alternate rollouts and updates; evaluate mean-action success per kind.

    ``env_factory(n, kinds=..., seed=..., auto_reset=...)`` builds vector
    environments. Returns (agent, metric rows). Row 0 is the evaluation of
    the initial agent. ``on_update(row, agent)`` runs after each row.
    """
    agent = agent or Agent(cfg)
    eval_kinds = list(eval_kinds or kinds)
    env = env_factory(cfg.n_envs, kinds=list(kinds), seed=cfg.seed, auto_reset=True)
    trainer = PpoTrainer(agent, env, cfg)
    start = time.perf_counter()
    rows = []

    def record(update, stats, mean_return):
        success = evaluate(agent, env_factory, eval_kinds, eval_episodes, eval_seed)
        row = MetricRow(update, trainer.env_steps, mean_return, success, wall_time=time.perf_counter() - start)
        if stats is not None:
            row.policy_loss, row.value_loss = stats.policy_loss, stats.value_loss
            row.kl, row.clip_frac = stats.kl, stats.clip_frac
        rows.append(row)
        if on_update:
            on_update(row, agent)
        log.info("update %d steps %d success %s", update, trainer.env_steps, success)

    record(0, None, float("nan"))
    for u in range(1, total_updates + 1):
        try:
            stats = trainer.update()
        except EnvironmentFault as err:
            log.error("update %d skipped after environment fault: %s", u, err)
            trainer.obs = trainer.env.reset()
            continue
        mean_ret = float(np.mean(trainer.episode_returns)) if trainer.episode_returns else float("nan")
        if u % eval_every == 0 or u == total_updates:
            record(u, stats, mean_ret)
    return agent, rows
