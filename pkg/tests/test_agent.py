from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crl_lab import autodiff as ad
from crl_lab.agent import (AgentConfig, AgentError, LossWeights, OldTaskBuffer, PPOConfig, RolloutBatch,
                           _seed_streams, agem_project, approx_kl, behavior_cloning, build_batch,
                           collect_rollouts, gae, gcv_loss_q, gcv_loss_v, kl_early_stop, kl_old_loss, lwf_loss,
                           mc_loss_q, mc_loss_v, mc_returns, method_variant, new_learner, ppo_loss,
                           run_task_stream, task_transition, total_loss, train_stage, UpdateLog)
from crl_lab.envs import Goal, TaskSpec
from crl_lab.network import ActionSpec, forward_policy, forward_value, init_network


def tiny_stream(k=2, horizon=5):
    targets = [(0, 0), (2, 2), (0, 2)]
    return [TaskSpec(goals=(Goal(i, targets[i]),), grid_size=3, object_cells=((1, 1),), horizon=horizon,
                     goal_dim=k, label=f"t{i}") for i in range(k)]


def tiny_config(**kw):
    ppo = PPOConfig(total_steps=2, rollout_episodes=4, update_times=2, d_targ=1.0, eval_interval=0,
                    entropy_coef=kw.pop("entropy_coef", 0.0))
    base = dict(ppo=ppo, weights=LossWeights(1.0, 1.0, 1.0, 1.0), hidden_sizes=(8,), lr_backbone=0.05,
                lr_action=0.05, lr_critic=0.05, buffer_episodes=4, buffer_batch=8, eval_episodes=4)
    base.update(kw)
    return AgentConfig(**base)


def small_net(critic="V", kind="categorical", n=3, seed=0):
    return init_network(2, 2, (4,), ActionSpec(kind, n), seed=seed, critic=critic)


def batch_for(params, obs, codes, actions, adv=None, returns=None, shift=0.0):
    dist = forward_policy(params, obs, codes)
    logp = dist.log_prob(actions).data - shift
    n = len(obs)
    return RolloutBatch(obs=obs, goal_code=codes, actions=actions, log_probs=logp, dist_params=dist.params_array(),
                        rewards=np.zeros(n), returns=np.zeros(n) if returns is None else returns,
                        advantages=adv)


def buffer_from(params, obs, codes, actions):
    dist = forward_policy(params, obs, codes)
    v = forward_value(params, "mc", obs, codes).data if params.critic == "V" else np.zeros(len(obs))
    return OldTaskBuffer(obs, codes, actions, dist.params_array(), v, np.zeros(len(obs)), None, 0, dist.kind)


RNG = np.random.default_rng(0)
OBS = RNG.standard_normal((5, 2))
CODES = np.tile([1.0, 0.0], (5, 1))
ACTS = np.array([0, 1, 2, 1, 0])


# --- returns and advantages -------------------------------------------------

def test_mc_returns_examples():
    np.testing.assert_allclose(mc_returns([0, 0, 1], 0.5), [0.25, 0.5, 1.0], atol=0)
    assert mc_returns([3.0, -1.0], 0.0).tolist() == [3.0, -1.0]
    assert mc_returns(np.zeros(4), 0.9).tolist() == [0.0] * 4


def test_gae_identities():
    rng = np.random.default_rng(1)
    r, v = rng.standard_normal(7), rng.standard_normal(7)
    delta = r + 0.9 * np.append(v[1:], 0.0) - v
    np.testing.assert_allclose(gae(r, v, 0.9, 0.0), delta, atol=1e-12)
    np.testing.assert_allclose(gae(r, np.zeros(7), 0.9, 1.0), mc_returns(r, 0.9), atol=1e-12)
    np.testing.assert_allclose(gae([1.0, 1.0], [0.0, 0.0], 0.9, 0.95), [1.855, 1.0], atol=1e-12)
    with pytest.raises(AgentError):
        gae([1.0], [0.0, 0.0], 0.9, 0.95)


# --- PPO --------------------------------------------------------------------

def test_ppo_single_sample_hand_case():
    p = small_net()
    b = batch_for(p, OBS[:1], CODES[:1], ACTS[:1], adv=np.array([2.0]), shift=math.log(1.5))
    # ratio 1.5, eps 0.2: -min(1.5 * 2, 1.2 * 2)
    assert ppo_loss(b, p, PPOConfig()).data == pytest.approx(-2.4, abs=1e-12)


def test_ppo_ratio_one_and_zero_advantage():
    p = small_net()
    adv = np.array([0.5, -1.0, 2.0, 0.0, 1.0])
    assert ppo_loss(batch_for(p, OBS, CODES, ACTS, adv=adv), p, PPOConfig()).data == pytest.approx(-adv.mean())
    loss = ppo_loss(batch_for(p, OBS, CODES, ACTS, adv=np.zeros(5)), p, PPOConfig())
    assert loss.data == 0.0
    grads = ad.gradients(loss)
    assert all(np.all(g == 0) for g in grads.values())


def test_kl_early_stop_cases():
    p = small_net()
    b = batch_for(p, OBS, CODES, ACTS, adv=np.zeros(5))
    assert approx_kl(b, p) == 0.0 and not kl_early_stop(b, p, 0.0)
    moved = p.copy()
    moved.arrays["action.b"] = moved.arrays["action.b"] + np.array([-0.3, 0.0, 0.3])
    first = batch_for(p, OBS[:1], CODES[:1], ACTS[:1], adv=np.zeros(1))  # action 0 becomes less likely
    assert kl_early_stop(first, moved, 0.0)
    # two-sample case: estimate is the plain mean of recorded minus current log-probs
    two = dataclasses.replace(b, obs=OBS[:2], goal_code=CODES[:2], actions=ACTS[:2],
                              log_probs=np.log([0.5, 0.25]))
    cur = forward_policy(p, OBS[:2], CODES[:2]).log_prob(ACTS[:2]).data
    assert approx_kl(two, p) == pytest.approx(np.mean(np.log([0.5, 0.25]) - cur), abs=1e-15)


# --- critic and anchor losses -------------------------------------------------

def test_mc_loss_hand_value_and_zero_weight():
    p = small_net()
    v = forward_value(p, "mc", OBS[:1], CODES[:1]).data[0]
    b = batch_for(p, OBS[:1], CODES[:1], ACTS[:1], returns=np.array([v + 0.6]))
    assert mc_loss_v(p, b).data == pytest.approx(0.36, abs=1e-12)
    perfect = batch_for(p, OBS[:1], CODES[:1], ACTS[:1], returns=np.array([v]))
    assert mc_loss_v(p, perfect).data == 0.0
    zero = mc_loss_v(p, b, eta=0.0)
    assert zero.data == 0.0 and not zero.requires_grad
    pq = small_net("Q")
    assert mc_loss_q(pq, b, eta=0.0).data == 0.0


def test_kl_loss_hand_case_and_modes():
    p = small_net(n=2)
    obs, codes = OBS[:1], CODES[:1]
    buf = buffer_from(p, obs, codes, np.array([0]))
    assert kl_old_loss(p, None, buf).data == pytest.approx(0.0, abs=1e-15)
    ref = dataclasses.replace(buf, dist_params=np.log([[0.5, 0.5]]))
    target = p.copy()
    target.arrays["action.W"][:] = 0.0
    target.arrays["action.b"][:] = np.log([0.9, 0.1])
    assert kl_old_loss(target, None, ref).data == pytest.approx(0.510826, abs=1e-6)
    assert kl_old_loss(target, None, ref, alpha=0.0).data == 0.0
    bc = kl_old_loss(target, None, ref, mode="bc-mse")
    assert bc.data == pytest.approx(-math.log(0.9), abs=1e-12)
    with pytest.raises(AgentError):
        kl_old_loss(target, None, ref, mode="l2")


def test_gaussian_kl_and_bc():
    p = small_net(kind="gaussian", n=2)
    buf = buffer_from(p, OBS, CODES, np.zeros((5, 2)))
    assert kl_old_loss(p, None, buf).data == pytest.approx(0.0, abs=1e-14)
    mean = forward_policy(p, OBS, CODES).mean.data
    assert behavior_cloning(p, buf).data == pytest.approx(np.mean((mean ** 2).sum(1)), abs=1e-14)


def test_lwf_zero_on_anchor():
    p = small_net()
    b = batch_for(p, OBS, CODES, ACTS)
    assert lwf_loss(p, p.copy(), b).data == pytest.approx(0.0, abs=1e-15)
    assert lwf_loss(p, p.copy(), b, alpha=0.0).data == 0.0


def test_gcv_losses_zero_weight_and_missing_targets():
    p = small_net()
    buf = buffer_from(p, OBS, CODES, ACTS)
    assert gcv_loss_v(p, buf, 0.0).data == 0.0
    assert gcv_loss_v(p, buf).data == pytest.approx(0.0, abs=1e-30)  # gcv starts as a copy of mc
    with pytest.raises(AgentError):
        gcv_loss_q(small_net("Q"), buf)


def test_total_loss_weights_and_requirements():
    one = ad.Tensor(np.array(1.0))
    two = ad.Tensor(np.array(2.0))
    assert total_loss({"ppo": one, "kl": two, "mc": two}, {"kl": 0.5, "mc": 0.0}).data == 2.0
    w = LossWeights(alpha=0.0, beta_v=0.0, beta_q=0.0, eta=0.0)
    assert total_loss({"ppo": one, "kl": two, "gcv": two, "mc": two}, w).data == 1.0
    with pytest.raises(AgentError):
        total_loss({"kl": one}, {})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_agem_projection_never_conflicts(seed):
    rng = np.random.default_rng(seed)
    g, ref = rng.standard_normal(9), rng.standard_normal(9)
    out = agem_project(g, ref)
    assert out @ ref >= -1e-9
    if g @ ref >= 0:
        assert out is g
    assert np.all(agem_project(g, np.zeros(9)) == g)


# --- rollouts ---------------------------------------------------------------

@pytest.mark.parametrize("family", ["grid-pickplace", "point-reach"])
def test_recorded_log_probs_recompute(family):
    if family == "grid-pickplace":
        spec = tiny_stream(1)[0]
    else:
        spec = TaskSpec(goals=(Goal(0, (0.5, 0.5)),), family="point-reach", horizon=6)
    p = init_network(spec.obs_dim, spec.goal_dim, (8,), ActionSpec(spec.action_kind, spec.n_actions), seed=3)
    eps = collect_rollouts(spec, p, 6, seed=2)
    for e in eps:
        again = forward_policy(p, e.obs, e.goal_code).log_prob(e.actions).data
        np.testing.assert_allclose(again, e.log_probs, atol=1e-12, rtol=0)
    twice = collect_rollouts(spec, p, 6, seed=2)
    assert all(np.asarray(a.actions).tobytes() == np.asarray(b.actions).tobytes() for a, b in zip(eps, twice))


def test_build_batch_shapes_and_normalisation():
    spec = tiny_stream(1)[0]
    cfg = tiny_config()
    p = init_network(spec.obs_dim, spec.goal_dim, (8,), ActionSpec("categorical", 6), seed=1)
    eps = collect_rollouts(spec, p, 4, seed=0)
    b = build_batch(eps, p, cfg)
    assert len(b) == sum(len(e) for e in eps)
    assert abs(b.advantages.mean()) < 1e-9
    pq = init_network(spec.obs_dim, spec.goal_dim, (8,), ActionSpec("categorical", 6), seed=1, critic="Q")
    assert build_batch(eps, pq, cfg).advantages.shape == (len(b),)


# --- stage transitions --------------------------------------------------------

def trained_learner(method="crl-vla-v", config=None, seed=0):
    stream = tiny_stream(2)
    config = config or tiny_config()
    seeds = _seed_streams(seed)
    state = new_learner(stream, method, config, seed)
    state, _ = train_stage(state, [stream[0]], method, config, seeds, UpdateLog())
    return stream, config, seeds, state


@pytest.mark.parametrize("method", ["crl-vla-v", "crl-vla-q"])
def test_transition_self_consistency_and_freeze(method):
    stream, config, seeds, state = trained_learner(method)
    final = collect_rollouts(stream[0], state.params, 4, seed=9)
    old_mc = state.params.head_bytes("mc")
    state = task_transition(state, final, config, np.random.default_rng(0))
    assert state.params.head_bytes("gcv") == old_mc
    assert state.stage == 2 and len(state.buffers) == 1
    buf = state.buffers[0]
    gcv = gcv_loss_q if method == "crl-vla-q" else gcv_loss_v
    assert gcv(state.params, buf).data <= 1e-12
    if method == "crl-vla-v":
        assert forward_value(state.anchor, "mc", buf.obs, buf.goal_code).data.tobytes() == buf.v_old.tobytes()
    frozen = state.params.head_bytes("gcv")
    log = UpdateLog()
    state, _ = train_stage(state, [stream[1]], method, config, seeds, log)
    assert state.params.head_bytes("gcv") == frozen
    assert any("loss_gcv" in r and "loss_kl" in r for r in log.records)


def test_buffer_is_read_only():
    stream, config, _, state = trained_learner()
    state = task_transition(state, collect_rollouts(stream[0], state.params, 2, seed=1), config,
                            np.random.default_rng(0))
    buf = state.buffers[0]
    with pytest.raises(ValueError):
        buf.obs[0, 0] = 5.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        buf.v_old = np.zeros(3)
    with pytest.raises(AgentError):
        task_transition(state, [], config, np.random.default_rng(0))


def test_buffer_capacity_caps_stored_rows():
    stream, config, _, state = trained_learner()
    config = dataclasses.replace(config, buffer_capacity=3)
    state = task_transition(state, collect_rollouts(stream[0], state.params, 4, seed=1), config,
                            np.random.default_rng(0))
    assert len(state.buffers[0]) == 3


def test_total_loss_replays_from_log(tmp_path):
    cfg = tiny_config(entropy_coef=0.1)
    _, _, log = run_task_stream(tiny_stream(2), "crl-vla-v", cfg, seed=1, log_path=tmp_path / "u.jsonl",
                                return_state=True)
    updates = [r for r in log.records if "loss" in r]
    assert any("loss_gcv" in r for r in updates)
    for r in updates:
        parts = {k[5:]: v for k, v in r.items() if k.startswith("loss_")}
        replay = parts.pop("ppo") + sum(r[f"weight_{k}"] * v for k, v in parts.items())
        assert replay == pytest.approx(r["loss"], abs=1e-12)
    assert len((tmp_path / "u.jsonl").read_text().splitlines()) == len(log.records)


# --- reductions ---------------------------------------------------------------

def test_stage_one_matches_sl_bit_for_bit():
    stream = tiny_stream(1)
    cfg = tiny_config()
    r_sl, s_sl, _ = run_task_stream(stream, "sl", cfg, seed=4, return_state=True)
    r_crl, s_crl, _ = run_task_stream(stream, "crl-vla-v", cfg, seed=4, return_state=True)
    assert r_sl.r.tobytes() == r_crl.r.tobytes()
    assert s_sl.params.flat().tobytes() == s_crl.params.flat().tobytes()


def test_zero_continual_weights_match_sl_over_two_tasks():
    stream = tiny_stream(2)
    cfg = tiny_config(weights=LossWeights(alpha=0.0, beta_v=0.0, beta_q=0.0, eta=1.0))
    r_sl, s_sl, _ = run_task_stream(stream, "sl", cfg, seed=2, return_state=True)
    r_crl, s_crl, _ = run_task_stream(stream, "crl-vla-v", cfg, seed=2, return_state=True)
    assert r_sl.r.tobytes() == r_crl.r.tobytes()
    assert s_sl.params.flat().tobytes() == s_crl.params.flat().tobytes()


@pytest.mark.parametrize("method", ["er", "er-mix", "lwf", "mtl", "crl-vla-q"])
def test_every_method_runs_a_two_task_stream(method):
    R = run_task_stream(tiny_stream(2), method, tiny_config(), seed=0)
    assert R.r.shape == (2, 2) and np.all((R.r >= 0) & (R.r <= 1))


def test_stream_validation():
    with pytest.raises(AgentError):
        method_variant("ewc")
    with pytest.raises(AgentError):
        run_task_stream([], "sl", tiny_config(), seed=0)
    mixed = [tiny_stream(1)[0], TaskSpec(goals=(Goal(0, (0.5, 0.5)),), family="point-reach")]
    with pytest.raises(AgentError):
        run_task_stream(mixed, "sl", tiny_config(), seed=0)
    with pytest.raises(AgentError):
        PPOConfig(clip_epsilon=0.0)
    with pytest.raises(AgentError):
        LossWeights(alpha=-1.0)
