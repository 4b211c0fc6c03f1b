"""Continual PPO learner with a frozen goal-conditioned value head.

The learner trains one task at a time. At every task boundary the current
network is frozen as an anchor, its Monte-Carlo critic head is copied into the
goal-conditioned value (GCV) head, a replay buffer of the finished task is
stored with the anchor's values and action distributions, and a fresh MC head
is drawn. Later stages add three penalties to the PPO objective: a KL term
towards the anchor policy on buffer states, a GCV regression keeping the
backbone consistent with the stored values, and the usual MC critic loss.

Baselines (``sl``, ``er``, ``er-mix``, ``lwf``, ``mtl``) share the same loop
and differ only in which extra terms or gradient edits they apply.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import Episode, TaskSpec, run_episodes
from .metrics import TransferMatrix
from .network import (HEADS, ActionDistribution, ActionSpec, GradientBundle, ParameterStore,
                      SGDMomentum, backward, distribution_from_array, forward_policy,
                      forward_qvalue, forward_value, init_critic_head, init_network,
                      save_checkpoint)

METHODS = ("sl", "er", "er-mix", "lwf", "mtl", "crl-vla-v", "crl-vla-q")
KL_MODES = ("kl-div", "bc-mse")


class AgentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PPOConfig:
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    d_targ: float = 0.01
    ppo_epochs: int = 1
    rollout_episodes: int = 16
    update_times: int = 10
    total_steps: int = 12
    eval_interval: int = 1
    normalize_advantages: bool = True
    entropy_coef: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise AgentError("clip_epsilon must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise AgentError("gae_lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise AgentError("gamma must lie in [0, 1)")
        if self.d_targ < 0 or self.entropy_coef < 0:
            raise AgentError("d_targ and entropy_coef must be >= 0")
        for name in ("ppo_epochs", "rollout_episodes", "update_times", "total_steps"):
            if getattr(self, name) < 1:
                raise AgentError(f"{name} must be >= 1")
        if self.eval_interval < 0:
            raise AgentError("eval_interval must be >= 0")


@dataclass
class LossWeights:
    alpha: float = 1e-6
    beta_v: float = 1e-3
    beta_q: float = 1e-2
    eta: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise AgentError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class AgentConfig:
    ppo: PPOConfig = field(default_factory=PPOConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    kl_mode: str = "kl-div"
    warm_start_mc: bool = False
    hidden_sizes: tuple = (64, 64)
    goal_embed_dim: int | None = None
    init_log_std: float = -0.5
    lr_backbone: float = 1e-4
    lr_action: float = 5e-5
    lr_critic: float = 1e-3
    momentum: float = 0.9
    clip_norm: float = 1.0
    buffer_capacity: int = 1024
    buffer_batch: int = 64
    buffer_episodes: int = 64
    lwf_alpha: float = 1.0
    er_mix_weight: float = 1.0
    eval_episodes: int = 50
    eval_greedy: bool = True

    def __post_init__(self):
        if isinstance(self.ppo, dict):
            self.ppo = PPOConfig(**self.ppo)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.kl_mode not in KL_MODES:
            raise AgentError(f"kl_mode must be one of {KL_MODES}, got {self.kl_mode!r}")
        if self.buffer_capacity < 1 or self.buffer_batch < 1 or self.buffer_episodes < 1:
            raise AgentError("buffer sizes must be >= 1")
        if self.eval_episodes < 1:
            raise AgentError("eval_episodes must be >= 1")

    def optimizer(self) -> SGDMomentum:
        lr = {"backbone": self.lr_backbone, "action": self.lr_action, "mc": self.lr_critic, "gcv": 0.0}
        return SGDMomentum(lr=lr, momentum=self.momentum, clip_backbone=self.clip_norm,
                           clip_heads=self.clip_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


# ---------------------------------------------------------------------------
# data containers

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class OldTaskBuffer:
    """Transitions of a finished task with the anchor's outputs captured at creation."""

    obs: np.ndarray
    goal_code: np.ndarray
    actions: np.ndarray
    dist_params: np.ndarray
    v_old: np.ndarray
    mc_return: np.ndarray
    q_old: np.ndarray | None = None
    source_task: int = 0
    kind: str = "categorical"

    def __post_init__(self):
        for name in ("obs", "goal_code", "actions", "dist_params", "v_old", "mc_return", "q_old"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value))

    def __len__(self) -> int:
        return len(self.v_old)

    def take(self, idx) -> "OldTaskBuffer":
        idx = np.asarray(idx, dtype=np.int64)
        return OldTaskBuffer(self.obs[idx], self.goal_code[idx], self.actions[idx], self.dist_params[idx],
                             self.v_old[idx], self.mc_return[idx],
                             None if self.q_old is None else self.q_old[idx], self.source_task, self.kind)

    def sample(self, rng: np.random.Generator, n: int) -> "OldTaskBuffer":
        """Uniform without replacement (everything when ``n >= len``)."""
        if n >= len(self):
            return self
        return self.take(np.sort(rng.choice(len(self), size=n, replace=False)))

    def anchor_distribution(self) -> ActionDistribution:
        return distribution_from_array(self.kind, self.dist_params)


def concat_buffers(buffers: Sequence[OldTaskBuffer]) -> OldTaskBuffer:
    first = buffers[0]
    cat = lambda name: np.concatenate([getattr(b, name) for b in buffers])
    q = None if first.q_old is None else cat("q_old")
    return OldTaskBuffer(cat("obs"), cat("goal_code"), cat("actions"), cat("dist_params"),
                         cat("v_old"), cat("mc_return"), q, first.source_task, first.kind)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    goal_code: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    dist_params: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray | None = None
    episode: np.ndarray | None = None
    success_rate: float = float("nan")

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class LearnerState:
    params: ParameterStore
    optimizer: SGDMomentum
    anchor: ParameterStore | None = None
    buffers: list = field(default_factory=list)
    stage: int = 1
    variant: str = "V"
    kl_mode: str = "kl-div"


# ---------------------------------------------------------------------------
# rollouts and return estimates

def policy_fn(params: ParameterStore, greedy: bool = False):
    """Batched ``(obs, goal_codes, rng) -> (actions, log_probs, dist_params)``."""

    def act(obs, codes, rng):
        dist = forward_policy(params, obs, codes)
        actions = dist.mode() if greedy else dist.sample(rng)
        return actions, dist.log_prob(actions).data, dist.params_array()

    return act


def collect_rollouts(spec: TaskSpec, params: ParameterStore, n_episodes: int, seed: int,
                     task: int = 0, greedy: bool = False) -> list[Episode]:
    return run_episodes(spec, policy_fn(params, greedy), n_episodes, seed, task=task)


def mc_returns(rewards, gamma: float) -> np.ndarray:
    """G_t = sum_{k>=t} gamma^(k-t) r_k by reverse scan."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """GAE over one episode; the value after the last step is 0."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != r.shape:
        raise AgentError(f"values shape {v.shape} != rewards shape {r.shape}")
    v_next = np.append(v[1:], 0.0)
    delta = r + gamma * v_next - v
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        out[t] = acc
    return out


def _action_array(kind: str, actions) -> np.ndarray:
    return np.asarray(actions, dtype=np.int64 if kind == "categorical" else np.float64)


def expected_q(params: ParameterStore, head: str, obs, goal_code, dist: ActionDistribution | None = None) -> Tensor:
    """E_{a~pi}[Q(s, a)]; for Gaussian policies the linear-in-action head gives Q(s, mean)."""
    if dist is None:
        dist = forward_policy(params, obs, goal_code)
    if params.meta["action_kind"] == "categorical":
        q = forward_qvalue(params, head, obs, goal_code)
        return ad.tsum(q * dist.probs(), axis=1)
    return forward_qvalue(params, head, obs, goal_code, action=dist.mean.data)


def build_batch(episodes: Sequence[Episode], params: ParameterStore, config: AgentConfig) -> RolloutBatch:
    """Stack episodes and attach MC returns and PPO advantages from the live MC head."""
    ppo = config.ppo
    kind = params.meta["action_kind"]
    obs = np.concatenate([e.obs for e in episodes])
    codes = np.concatenate([e.goal_code for e in episodes])
    actions = _action_array(kind, np.concatenate([np.asarray(e.actions) for e in episodes]))
    returns = np.concatenate([mc_returns(e.rewards, ppo.gamma) for e in episodes])
    if params.critic == "V":
        values = forward_value(params, "mc", obs, codes).data
        adv = np.concatenate([
            gae(e.rewards, v, ppo.gamma, ppo.gae_lambda)
            for e, v in zip(episodes, np.split(values, np.cumsum([len(e) for e in episodes])[:-1]))])
    else:
        adv = q_advantage(params, obs, codes, actions)
    if ppo.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return RolloutBatch(
        obs=obs, goal_code=codes, actions=actions,
        log_probs=np.concatenate([e.log_probs for e in episodes]),
        dist_params=np.concatenate([e.dist_params for e in episodes]),
        rewards=np.concatenate([e.rewards for e in episodes]), returns=returns, advantages=adv,
        episode=np.concatenate([np.full(len(e), i) for i, e in enumerate(episodes)]),
        success_rate=float(np.mean([e.success for e in episodes])))


def q_advantage(params: ParameterStore, obs, codes, actions) -> np.ndarray:
    """Q_mc(s, a) - E_pi[Q_mc(s, .)]."""
    dist = forward_policy(params, obs, codes)
    if params.meta["action_kind"] == "categorical":
        q = forward_qvalue(params, "mc", obs, codes).data
        return q[np.arange(len(q)), actions] - (q * dist.probs()).sum(axis=1)
    q_sa = forward_qvalue(params, "mc", obs, codes, action=actions).data
    return q_sa - expected_q(params, "mc", obs, codes, dist).data


# ---------------------------------------------------------------------------
# losses (each returns a scalar node; a zero weight returns a constant zero)

def _scaled(loss: Tensor, weight: float) -> Tensor:
    return loss if weight == 1.0 else loss * weight


def ppo_loss(batch: RolloutBatch, params: ParameterStore, config: PPOConfig) -> Tensor:
    if batch.advantages is None:
        raise AgentError("batch has no advantages")
    eps = config.clip_epsilon
    logp = forward_policy(params, batch.obs, batch.goal_code).log_prob(batch.actions)
    ratio = ad.exp(logp - batch.log_probs)
    adv = batch.advantages
    surrogate = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)
    return -ad.mean(surrogate)


def entropy_loss(params: ParameterStore, batch: RolloutBatch) -> Tensor:
    """Negative mean policy entropy (minimizing it encourages exploration)."""
    dist = forward_policy(params, batch.obs, batch.goal_code)
    if dist.kind == "categorical":
        logp = ad.log_softmax(dist.logits)
        return ad.mean(ad.tsum(ad.exp(logp) * logp, axis=1))
    d = dist.mean.shape[1]
    return -(ad.tsum(dist.log_std) + 0.5 * d * (1.0 + np.log(2.0 * np.pi)))


def approx_kl(batch: RolloutBatch, params: ParameterStore) -> float:
    logp = forward_policy(params, batch.obs, batch.goal_code).log_prob(batch.actions).data
    return float(np.mean(batch.log_probs - logp))


def kl_early_stop(batch: RolloutBatch, params: ParameterStore, d_targ: float) -> bool:
    """True when the sample KL estimate mean(log pi_behavior - log pi) exceeds ``d_targ``."""
    return approx_kl(batch, params) > d_targ


def mc_loss_v(params: ParameterStore, batch: RolloutBatch, eta: float = 1.0) -> Tensor:
    if eta == 0:
        return ad.zeros_like_loss()
    v = forward_value(params, "mc", batch.obs, batch.goal_code)
    return _scaled(ad.mean(ad.square(v - batch.returns)), eta)


def _q_at(params, head, obs, codes, actions) -> Tensor:
    if params.meta["action_kind"] == "categorical":
        return ad.take_rows(forward_qvalue(params, head, obs, codes), actions)
    return forward_qvalue(params, head, obs, codes, action=actions)


def mc_loss_q(params: ParameterStore, batch: RolloutBatch, eta: float = 1.0) -> Tensor:
    if eta == 0:
        return ad.zeros_like_loss()
    q = _q_at(params, "mc", batch.obs, batch.goal_code, batch.actions)
    return _scaled(ad.mean(ad.square(q - batch.returns)), eta)


def gcv_loss_v(params: ParameterStore, buffer: OldTaskBuffer, beta_v: float = 1.0) -> Tensor:
    """Regress the frozen GCV head's value on buffer states onto the stored anchor values."""
    if beta_v == 0:
        return ad.zeros_like_loss()
    v = forward_value(params, "gcv", buffer.obs, buffer.goal_code)
    return _scaled(ad.mean(ad.square(v - buffer.v_old)), beta_v)


def gcv_loss_q(params: ParameterStore, buffer: OldTaskBuffer, beta_q: float = 1.0) -> Tensor:
    if beta_q == 0:
        return ad.zeros_like_loss()
    if buffer.q_old is None:
        raise AgentError("buffer carries no Q targets")
    q = _q_at(params, "gcv", buffer.obs, buffer.goal_code, _action_array(buffer.kind, buffer.actions))
    return _scaled(ad.mean(ad.square(q - buffer.q_old)), beta_q)


def kl_between(reference: ActionDistribution, dist: ActionDistribution) -> Tensor:
    """Per-row KL(reference || dist) with ``reference`` treated as a constant."""
    if dist.kind == "categorical":
        ref_logp = ad.log_softmax(reference.logits.data).data
        return ad.tsum(np.exp(ref_logp) * (ref_logp - ad.log_softmax(dist.logits)), axis=1)
    mu_r, ls_r = reference.mean.data, np.broadcast_to(reference.log_std.data, reference.mean.shape)
    var_ratio = np.exp(2.0 * ls_r) + (mu_r - dist.mean) ** 2
    terms = dist.log_std - ls_r + var_ratio / (2.0 * ad.exp(2.0 * dist.log_std)) - 0.5
    return ad.tsum(terms, axis=1)


def behavior_cloning(params: ParameterStore, buffer: OldTaskBuffer) -> Tensor:
    """Cross-entropy to stored actions (categorical) or squared error of the mean (continuous)."""
    dist = forward_policy(params, buffer.obs, buffer.goal_code)
    if dist.kind == "categorical":
        return -ad.mean(dist.log_prob(_action_array("categorical", buffer.actions)))
    return ad.mean(ad.tsum(ad.square(dist.mean - buffer.actions), axis=1))


def kl_old_loss(params: ParameterStore, anchor: ParameterStore | None, buffer: OldTaskBuffer,
                mode: str = "kl-div", alpha: float = 1.0) -> Tensor:
    """Keep the policy close to the anchor on buffer states.

    ``kl-div`` uses the anchor distribution stored in the buffer (``anchor``
    is only consulted when the buffer lacks it); ``bc-mse`` clones stored actions.
    """
    if alpha == 0:
        return ad.zeros_like_loss()
    if mode == "kl-div":
        if buffer.dist_params is not None and len(buffer.dist_params):
            ref = buffer.anchor_distribution()
        elif anchor is not None:
            ref = forward_policy(anchor, buffer.obs, buffer.goal_code)
        else:
            raise AgentError("kl-div needs stored anchor distributions or an anchor network")
        dist = forward_policy(params, buffer.obs, buffer.goal_code)
        return _scaled(ad.mean(kl_between(ref, dist)), alpha)
    if mode == "bc-mse":
        return _scaled(behavior_cloning(params, buffer), alpha)
    raise AgentError(f"unknown kl mode {mode!r}")


def lwf_loss(params: ParameterStore, anchor: ParameterStore, batch: RolloutBatch, alpha: float = 1.0) -> Tensor:
    """Distillation KL(pi_anchor || pi) on the new task's states."""
    if alpha == 0:
        return ad.zeros_like_loss()
    ref = forward_policy(anchor, batch.obs, batch.goal_code)
    dist = forward_policy(params, batch.obs, batch.goal_code)
    return _scaled(ad.mean(kl_between(ref, dist)), alpha)


def total_loss(parts: dict, weights: dict | LossWeights) -> Tensor:
    """sum_k w_k * parts[k]; ``ppo`` is unweighted, zero-weight and missing parts are skipped.

    The parts are expected unweighted, so each weight is applied exactly once here.
    """
    if isinstance(weights, LossWeights):
        weights = {"kl": weights.alpha, "gcv": weights.beta_v, "gcv_q": weights.beta_q, "mc": weights.eta}
    if "ppo" not in parts:
        raise AgentError("total loss needs a ppo term")
    out = parts["ppo"]
    for name, node in parts.items():
        if name == "ppo" or node is None:
            continue
        w = weights.get(name, 1.0)
        if w is None:
            raise AgentError(f"no weight for loss part {name!r}")
        if w == 0:
            continue
        out = out + (node if w == 1.0 else node * w)
    return out


def agem_project(grad: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Project ``grad`` so it does not conflict with ``ref`` (single-constraint episodic memory)."""
    dot = float(grad @ ref)
    norm2 = float(ref @ ref)
    if dot >= 0 or norm2 == 0:
        return grad
    return grad - (dot / norm2) * ref


# ---------------------------------------------------------------------------
# stream plumbing

def method_variant(method: str) -> str:
    if method not in METHODS:
        raise AgentError(f"unknown method {method!r}; expected one of {METHODS}")
    return "Q" if method == "crl-vla-q" else "V"


def _check_stream(stream: Sequence[TaskSpec]) -> None:
    if not stream:
        raise AgentError("empty task stream")
    first = stream[0]
    for spec in stream[1:]:
        if (spec.obs_dim, spec.goal_dim, spec.action_kind, spec.n_actions) != \
                (first.obs_dim, first.goal_dim, first.action_kind, first.n_actions):
            raise AgentError("all tasks in a stream must share observation, goal and action spaces")


def _seed_streams(seed: int) -> dict:
    names = ("init", "rollout", "buffer", "reinit", "fill")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children))


def _next_seed(seq: np.random.SeedSequence) -> int:
    """Draw a fresh child seed from a spawning sequence."""
    return int(seq.spawn(1)[0].generate_state(1)[0])


def eval_seed(seed: int, stage: int, task: int) -> int:
    """Evaluation episodes depend only on (seed, stage, task), so every method sees the same starts."""
    return int(np.random.SeedSequence([seed, 7919, stage, task]).generate_state(1)[0])


def initial_params(stream: Sequence[TaskSpec], method: str, config: AgentConfig, seed: int) -> ParameterStore:
    """pi_theta0 for ``(stream, method, seed)``; the policy part is independent of the critic variant."""
    spec = stream[0]
    init_seed = int(_seed_streams(seed)["init"].generate_state(1)[0])
    return init_network(spec.obs_dim, spec.goal_dim, config.hidden_sizes,
                        ActionSpec(spec.action_kind, spec.n_actions), seed=init_seed,
                        critic=method_variant(method), goal_embed_dim=config.goal_embed_dim,
                        init_log_std=config.init_log_std)


def new_learner(stream, method: str, config: AgentConfig, seed: int) -> LearnerState:
    return LearnerState(params=initial_params(stream, method, config, seed), optimizer=config.optimizer(),
                        variant=method_variant(method), kl_mode=config.kl_mode)


def evaluate(params: ParameterStore, spec: TaskSpec, n_episodes: int, seed: int, greedy: bool = True) -> float:
    eps = run_episodes(spec, policy_fn(params, greedy), n_episodes, seed)
    return float(np.mean([e.success for e in eps]))


def task_transition(state: LearnerState, final_rollouts: Sequence[Episode], config: AgentConfig,
                    rng: np.random.Generator, source_task: int | None = None) -> LearnerState:
    """Freeze the anchor, copy MC into GCV, store the finished task's buffer, redraw MC."""
    if state.stage < 1:
        raise AgentError("task_transition needs a trained stage (stage >= 1)")
    if not final_rollouts:
        raise AgentError("task_transition needs final rollouts to fill the buffer")
    anchor = state.params.copy()
    anchor.frozen = set(HEADS)
    params = state.params.copy()
    params.frozen = {"gcv"}
    params.arrays["gcv.W"] = anchor.arrays["mc.W"].copy()
    params.arrays["gcv.b"] = anchor.arrays["mc.b"].copy()
    if not config.warm_start_mc:
        init_critic_head(rng, params, "mc")

    kind = anchor.meta["action_kind"]
    obs = np.concatenate([e.obs for e in final_rollouts])
    codes = np.concatenate([e.goal_code for e in final_rollouts])
    actions = _action_array(kind, np.concatenate([np.asarray(e.actions) for e in final_rollouts]))
    returns = np.concatenate([mc_returns(e.rewards, config.ppo.gamma) for e in final_rollouts])
    if len(obs) > config.buffer_capacity:
        keep = np.sort(rng.choice(len(obs), size=config.buffer_capacity, replace=False))
        obs, codes, actions, returns = obs[keep], codes[keep], actions[keep], returns[keep]
    dist = forward_policy(anchor, obs, codes)
    if anchor.critic == "V":
        v_old, q_old = forward_value(anchor, "mc", obs, codes).data, None
    else:
        q_old = _q_at(anchor, "mc", obs, codes, actions).data
        v_old = expected_q(anchor, "mc", obs, codes, dist).data
    task = state.stage - 1 if source_task is None else source_task
    buffer = OldTaskBuffer(obs, codes, actions, dist.params_array(), v_old, returns, q_old, task, kind)
    state.optimizer.reset()
    return replace(state, params=params, anchor=anchor, buffers=list(state.buffers) + [buffer],
                   stage=state.stage + 1)


class UpdateLog:
    """Per-update JSON-lines sink (kept in memory when no path is given)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _loss_parts(method: str, state: LearnerState, batch: RolloutBatch, config: AgentConfig,
                buffer_rng: np.random.Generator) -> tuple[dict, dict, OldTaskBuffer | None]:
    """Unweighted loss nodes and their weights for one update."""
    params, w = state.params, config.weights
    parts = {"ppo": ppo_loss(batch, params, config.ppo)}
    weights = {}
    mc = mc_loss_q if state.variant == "Q" else mc_loss_v
    if w.eta > 0:
        parts["mc"], weights["mc"] = mc(params, batch), w.eta
    if config.ppo.entropy_coef > 0:
        parts["entropy"], weights["entropy"] = entropy_loss(params, batch), config.ppo.entropy_coef
    sample = None
    if method in ("crl-vla-v", "crl-vla-q") and state.buffers:
        beta = w.beta_q if state.variant == "Q" else w.beta_v
        if w.alpha > 0 or beta > 0:
            sample = concat_buffers([b.sample(buffer_rng, config.buffer_batch) for b in state.buffers])
        if w.alpha > 0:
            parts["kl"], weights["kl"] = kl_old_loss(params, state.anchor, sample, state.kl_mode), w.alpha
        if beta > 0:
            gcv = gcv_loss_q if state.variant == "Q" else gcv_loss_v
            parts["gcv"], weights["gcv"] = gcv(params, sample), beta
    elif method == "lwf" and state.anchor is not None and config.lwf_alpha > 0:
        parts["distill"], weights["distill"] = lwf_loss(params, state.anchor, batch), config.lwf_alpha
    elif method in ("er", "er-mix") and state.buffers:
        sample = concat_buffers([b.sample(buffer_rng, config.buffer_batch) for b in state.buffers])
        if method == "er-mix" and config.er_mix_weight > 0:
            parts["replay"], weights["replay"] = behavior_cloning(params, sample), config.er_mix_weight
    return parts, weights, sample


def train_stage(state: LearnerState, specs: Sequence[TaskSpec], method: str, config: AgentConfig,
                seeds: dict, log: UpdateLog, eval_fn=None) -> tuple[LearnerState, list[Episode]]:
    """M rollout steps of up to N early-stopped updates each; returns the last rollouts."""
    ppo = config.ppo
    buffer_rng = np.random.default_rng(seeds["buffer"].spawn(1)[0])
    episodes: list[Episode] = []
    for step in range(ppo.total_steps):
        episodes = []
        n = ppo.rollout_episodes
        counts = [n // len(specs) + (1 if i < n % len(specs) else 0) for i in range(len(specs))]
        for i, (spec, c) in enumerate(zip(specs, counts)):
            if c:
                episodes += collect_rollouts(spec, state.params, c, _next_seed(seeds["rollout"]), task=i)
        batch = build_batch(episodes, state.params, config)
        stopped = False
        update = 0
        for _epoch in range(ppo.ppo_epochs):
            for _ in range(ppo.update_times):
                kl = approx_kl(batch, state.params)
                if kl > ppo.d_targ:
                    stopped = True
                    break
                parts, weights, sample = _loss_parts(method, state, batch, config, buffer_rng)
                loss = total_loss(parts, weights)
                grad = backward(loss, state.params)
                if method == "er" and sample is not None:
                    ref = backward(behavior_cloning(state.params, sample), state.params)
                    # loss gradients may not disagree with the replay gradient: g . g_ref >= 0
                    grad = GradientBundle(agem_project(grad.flat, ref.flat), grad.slices, grad.layout)
                state.optimizer.step(state.params, grad)
                record = dict(stage=state.stage, step=step, update=update, approx_kl=kl,
                              loss=float(loss.data), train_success=batch.success_rate)
                record.update({f"loss_{k}": float(v.data) for k, v in parts.items()})
                record.update({f"weight_{k}": v for k, v in weights.items()})
                log.write(record)
                update += 1
            if stopped:
                break
        if stopped:
            log.write(dict(stage=state.stage, step=step, update=update, early_stop=True))
        if eval_fn is not None and ppo.eval_interval and (step + 1) % ppo.eval_interval == 0:
            log.write(dict(stage=state.stage, step=step, eval_current=eval_fn(state.params)))
    return state, episodes


def run_task_stream(stream: Sequence[TaskSpec], method: str, config: AgentConfig, seed: int,
                    log_path=None, checkpoint_dir=None, return_state: bool = False):
    """Train on ``stream`` in order; row k of the result holds success on every task after stage k."""
    _check_stream(stream)
    method_variant(method)
    seeds = _seed_streams(seed)
    reinit_rng = np.random.default_rng(seeds["reinit"])
    state = new_learner(stream, method, config, seed)
    log = UpdateLog(log_path)
    K = len(stream)
    R = np.zeros((K, K))
    for k, spec in enumerate(stream):
        specs = list(stream[:k + 1]) if method == "mtl" else [spec]
        eval_current = lambda p, k=k: evaluate(p, spec, config.eval_episodes,
                                                 eval_seed(seed, k, k) + 1, config.eval_greedy)
        state, _ = train_stage(state, specs, method, config, seeds, log, eval_current)
        for i, other in enumerate(stream):
            R[k, i] = evaluate(state.params, other, config.eval_episodes, eval_seed(seed, k, i), config.eval_greedy)
        log.write(dict(stage=state.stage, eval_row=R[k].tolist()))
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(state.params, Path(checkpoint_dir) / f"stage{k + 1}.ckpt",
                            extra=dict(method=method, seed=seed, stage=k + 1))
        if k + 1 < K:
            final = collect_rollouts(spec, state.params, config.buffer_episodes,
                                     _next_seed(seeds["fill"]), task=k)
            state = task_transition(state, final, config, reinit_rng, source_task=k)
    matrix = TransferMatrix(R, labels=[s.label or f"task-{i + 1}" for i, s in enumerate(stream)], seeds=[seed])
    if return_state:
        return matrix, state, log
    return matrix
