import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordance_rl.env import VecWidgetEnv
from affordance_rl.ppo import (
    METRIC_COLUMNS,
    Agent,
    PpoConfig,
    RolloutBatch,
    RunningNorm,
    clipped_surrogate,
    compute_gae,
    load_checkpoint,
    normalize_advantages,
    policy_loss_and_grads,
    ppo_update,
    PpoOptimizer,
    save_checkpoint,
    train,
    value_loss_and_grads,
)

LOG_2PI = math.log(2 * math.pi)


def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Sum over k of (gamma lam)^k delta_{t+k}, stopping at the episode end."""
    T = len(rewards)
    nxt = np.append(values[1:], bootstrap)
    delta = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


# -- advantages -------------------------------------------------------------


def test_gae_matches_brute_force_on_1000_sequences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 21))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.2).astype(float)
        boot = rng.normal()
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, ret = compute_gae(r, v, d, boot, gamma, lam)
        worst = max(worst, np.max(np.abs(adv - brute_force_gae(r, v, d, boot, gamma, lam))))
        np.testing.assert_array_equal(ret, adv + v)
    assert worst <= 1e-10


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=8), rng.normal(size=8)
    adv, _ = compute_gae(r, v, np.zeros(8), 0.7, 0.9, 0.0)
    expected = r + 0.9 * np.append(v[1:], 0.7) - v
    np.testing.assert_allclose(adv, expected, atol=1e-14)


def test_gae_single_terminal_step():
    adv, ret = compute_gae([1.0], [0.25], [1.0], 123.0, 0.99, 0.95)
    assert adv[0] == 0.75 and ret[0] == 1.0


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    d = (rng.random((10, 3)) < 0.3).astype(float)
    boot = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, boot, 0.99, 0.95)
    for j in range(3):
        col, _ = compute_gae(r[:, j], v[:, j], d[:, j], boot[j], 0.99, 0.95)
        np.testing.assert_array_equal(adv[:, j], col)


def test_gae_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        compute_gae(np.zeros(3), np.zeros(4), np.zeros(3), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=200))
def test_advantage_normalization(values):
    adv = np.array(values)
    out = normalize_advantages(adv)
    assert abs(out.mean()) <= 1e-9
    if adv.std() > 1e-6 * max(1.0, np.abs(adv).max()):
        assert abs(out.std() - 1.0) <= 1e-6


# -- clipped surrogate -----------------------------------------------------


def test_surrogate_ratio_one_gives_zero_after_normalization():
    adv = normalize_advantages(np.random.default_rng(3).normal(size=64))
    assert abs(-np.mean(clipped_surrogate(np.ones(64), adv, 0.2))) <= 1e-12


def test_surrogate_clip_cases():
    adv = np.array([0.5, 1.0, 3.0])
    np.testing.assert_array_equal(clipped_surrogate(np.full(3, 2.0), adv, 0.2), 1.2 * adv)
    # negative advantage keeps the unclipped (more pessimistic) branch
    np.testing.assert_array_equal(clipped_surrogate(np.full(3, 2.0), -adv, 0.2), -2.0 * adv)
    np.testing.assert_array_equal(clipped_surrogate(np.full(3, 0.5), -adv, 0.2), -0.8 * adv)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(-10.0, 10.0), st.floats(0.05, 0.5))
def test_surrogate_bounded_by_clip(ratio, adv, eps):
    s = float(clipped_surrogate(ratio, adv, eps))
    assert s <= ratio * adv + 1e-12
    if adv >= 0:
        assert s <= (1 + eps) * adv + 1e-12


# -- loss gradients ---------------------------------------------------------


def tiny_agent(seed=0, min_log_std=None):
    cfg = PpoConfig(hidden_sizes=(4,), init_log_std=-0.3, seed=seed, min_log_std=min_log_std)
    agent = Agent(cfg, obs_dim=3, act_dim=2)
    rng = np.random.default_rng(seed + 100)
    for p in agent.policy.params:
        p[...] = rng.normal(0.0, 0.5, p.shape)
    return agent


def fd_grad(f, flat, h=1e-5):
    g = np.zeros_like(flat)
    for i in range(len(flat)):
        a, b = flat.copy(), flat.copy()
        a[i] += h
        b[i] -= h
        g[i] = (f(a) - f(b)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_policy_loss_gradient_matches_finite_differences(seed):
    agent = tiny_agent(seed)
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(16, 3))
    mean = agent.mean(obs)
    u = mean + 0.5 * rng.normal(size=mean.shape)
    adv = rng.normal(size=16)
    # old log-probs put each ratio clearly inside or outside the clip range, away from kinks
    shift = rng.choice([-0.5, 0.0, 0.5], size=16) + rng.uniform(-0.05, 0.05, 16)
    old_lp = agent.log_prob(mean, u) + shift
    n_pol = agent.policy.n_params
    assert n_pol + 2 <= 64

    def loss(flat):
        agent.policy.set_flat(flat[:n_pol])
        agent.log_std = flat[n_pol:].copy()
        return policy_loss_and_grads(agent, obs, u, old_lp, adv, 0.2, 0.01)[0]

    flat = np.concatenate([agent.policy.get_flat(), agent.log_std])
    fd = fd_grad(loss, flat)
    loss(flat)
    _, grads, _ = policy_loss_and_grads(agent, obs, u, old_lp, adv, 0.2, 0.01)
    assert rel_err(np.concatenate([g.ravel() for g in grads]), fd) <= 1e-4


def test_value_loss_gradient_matches_finite_differences():
    agent = tiny_agent(7)
    rng = np.random.default_rng(7)
    obs, ret = rng.normal(size=(16, 3)), rng.normal(size=16)
    assert agent.value.n_params <= 64

    def loss(flat):
        agent.value.set_flat(flat)
        return value_loss_and_grads(agent, obs, ret)[0]

    flat = agent.value.get_flat()
    fd = fd_grad(loss, flat)
    agent.value.set_flat(flat)
    _, grads = value_loss_and_grads(agent, obs, ret)
    assert rel_err(np.concatenate([g.ravel() for g in grads]), fd) <= 1e-4


def test_log_std_floor_blocks_gradient_below_floor():
    agent = tiny_agent(1, min_log_std=math.log(0.3))
    agent.log_std[:] = [math.log(0.1), math.log(0.6)]
    np.testing.assert_allclose(agent.effective_log_std(), [math.log(0.3), math.log(0.6)])
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(8, 3))
    mean = agent.mean(obs)
    u = mean + 0.3 * rng.normal(size=mean.shape)
    _, grads, _ = policy_loss_and_grads(agent, obs, u, agent.log_prob(mean, u), rng.normal(size=8), 0.2, 0.0)
    assert grads[-1][0] == 0.0 and grads[-1][1] != 0.0


# -- distribution and sampling ----------------------------------------------


def test_log_prob_matches_gaussian_density():
    agent = tiny_agent(2)
    agent.log_std[:] = [-0.5, 0.2]
    mean = np.array([[0.1, -0.3]])
    u = np.array([[0.4, 0.5]])
    std = np.exp(agent.log_std)
    expected = np.sum(-0.5 * ((u - mean) / std) ** 2 - np.log(std) - 0.5 * LOG_2PI)
    assert agent.log_prob(mean, u)[0] == pytest.approx(expected, abs=1e-12)


def test_tiny_std_is_deterministic_and_seeded_sampling_repeats():
    agent = tiny_agent(3)
    obs = np.random.default_rng(0).normal(size=(5, 3))
    det = agent.act(obs, None, deterministic=True)[0]
    agent.log_std[:] = -30.0
    near = agent.act(obs, np.random.default_rng(1))[0]
    np.testing.assert_allclose(near, det, atol=1e-9)
    agent.log_std[:] = 0.0
    a = agent.act(obs, np.random.default_rng(5))[0]
    b = agent.act(obs, np.random.default_rng(5))[0]
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a) <= agent.max_force)


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.0, size=(1000, 4))
    norm = RunningNorm(4)
    for chunk in np.array_split(data, 7):
        norm.update(chunk)
    np.testing.assert_allclose(norm.mean, data.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(norm.var, data.var(axis=0), rtol=1e-5)
    norm.frozen = True
    norm.update(data + 100)
    np.testing.assert_allclose(norm.mean, data.mean(axis=0), rtol=1e-6)


# -- update and training loop ------------------------------------------------


def test_ppo_update_improves_surrogate_on_fixed_batch():
    agent = tiny_agent(4)
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(256, 3))
    mean = agent.mean(obs)
    u = mean + np.exp(agent.log_std) * rng.normal(size=mean.shape)
    lp = agent.log_prob(mean, u)
    adv = u[:, 0] - mean[:, 0]  # reward pushing the first action component up
    batch = RolloutBatch(obs, u, lp, adv, np.zeros(256))
    cfg = PpoConfig(hidden_sizes=(4,), minibatch_size=64, epochs_per_update=4, learning_rate=1e-2,
                    steps_per_update=256, n_envs=16)
    before = agent.mean(obs)[:, 0].mean()
    ppo_update(agent, batch, cfg, PpoOptimizer(agent, cfg.learning_rate), rng)
    assert agent.mean(obs)[:, 0].mean() > before


def test_checkpoint_round_trip(tmp_path):
    agent = Agent(PpoConfig(seed=3, min_log_std=-1.0))
    agent.obs_norm.update(np.random.default_rng(0).normal(size=(50, agent.obs_norm.mean.size)))
    path = tmp_path / "a.npz"
    save_checkpoint(agent, path, {"note": "x"})
    back, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert back.param_hash() == agent.param_hash()
    assert back.min_log_std == -1.0
    obs = np.random.default_rng(1).normal(size=(4, agent.obs_norm.mean.size))
    np.testing.assert_array_equal(back.mean_action(obs), agent.mean_action(obs))


def small_cfg(**kw):
    return PpoConfig(steps_per_update=64, n_envs=4, minibatch_size=32, epochs_per_update=2, hidden_sizes=(8,), **kw)


def test_zero_updates_returns_initial_agent():
    cfg = small_cfg()
    initial = Agent(cfg).param_hash()
    agent, rows = train(VecWidgetEnv, cfg, 0, eval_episodes=2)
    assert agent.param_hash() == initial
    assert len(rows) == 1 and rows[0].update == 0 and rows[0].env_steps == 0


def test_training_rows_and_determinism():
    def run():
        agent, rows = train(VecWidgetEnv, small_cfg(seed=2), 2, eval_episodes=2)
        return agent.param_hash(), [r.as_dict() for r in rows]

    (h1, rows1), (h2, rows2) = run(), run()
    assert h1 == h2
    assert [r["update"] for r in rows1] == [0, 1, 2]
    assert rows1[2]["env_steps"] == 128
    for a, b in zip(rows1, rows2):
        assert np.array_equal(np.array([a[c] for c in METRIC_COLUMNS], float),
                              np.array([b[c] for c in METRIC_COLUMNS], float), equal_nan=True)


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip_epsilon=0.0)
    with pytest.raises(ValueError):
        PpoConfig(steps_per_update=100, n_envs=16)
