"""Shared-backbone actor with dual critic heads, built on :mod:`crl_lab.autodiff`.

Layout: a tanh MLP backbone consumes ``concat(obs, goal_code)``; three linear
heads read the backbone features:

* ``action``  -- categorical logits, or a Gaussian mean plus a state-independent
  log-std vector;
* ``mc``      -- the trainable Monte-Carlo critic;
* ``gcv``     -- the goal-conditioned value critic, a frozen copy of ``mc``.

With ``critic="Q"`` the critic heads emit one value per discrete action, or
read ``concat(features, action)`` for continuous actions.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEADS = ("backbone", "action", "mc", "gcv")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass(frozen=True)
class ActionSpec:
    kind: str  # "categorical" | "gaussian"
    n: int  # number of actions, or action dimension

    def __post_init__(self):
        if self.kind not in ("categorical", "gaussian"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("action spec needs n >= 1")


class ParameterStore:
    """Ordered named float64 arrays grouped by head, with per-head freeze flags."""

    def __init__(self, arrays: dict[str, np.ndarray], meta: dict, frozen: set[str] | None = None):
        self.arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.meta = dict(meta)
        self.frozen = set(frozen if frozen is not None else {"gcv"})

    # layout ---------------------------------------------------------------
    @staticmethod
    def head_of(name: str) -> str:
        return name.split(".", 1)[0]

    def names(self, head: str | None = None) -> list[str]:
        return [n for n in self.arrays if head is None or self.head_of(n) == head]

    @property
    def action_spec(self) -> ActionSpec:
        return ActionSpec(self.meta["action_kind"], self.meta["action_n"])

    @property
    def critic(self) -> str:
        return self.meta["critic"]

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, flat offset) for every array, in storage order."""
        out, offset = [], 0
        for name, arr in self.arrays.items():
            out.append((name, arr.shape, offset))
            offset += arr.size
        return out

    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def head_slices(self) -> dict[str, slice]:
        slices: dict[str, list[int]] = {}
        for name, shape, offset in self.layout():
            lo_hi = slices.setdefault(self.head_of(name), [offset, offset])
            lo_hi[1] = offset + int(np.prod(shape, dtype=int))
        return {h: slice(lo, hi) for h, (lo, hi) in slices.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        for name, shape, offset in self.layout():
            n = int(np.prod(shape, dtype=int))
            self.arrays[name] = vec[offset:offset + n].reshape(shape).copy()

    def is_frozen(self, name: str) -> bool:
        return self.head_of(name) in self.frozen

    def leaf(self, name: str) -> Tensor:
        return Tensor(self.arrays[name], requires_grad=not self.is_frozen(name), name=name)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.arrays.items()},
                              copy.deepcopy(self.meta), set(self.frozen))

    def head_bytes(self, head: str) -> bytes:
        return b"".join(self.arrays[n].tobytes() for n in self.names(head))

    def equals(self, other: "ParameterStore") -> bool:
        return (list(self.arrays) == list(other.arrays)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


@dataclass
class GradientBundle:
    """Flat gradient aligned with a store's layout; frozen heads are zero."""

    flat: np.ndarray
    slices: dict[str, slice]
    layout: list

    def head(self, name: str) -> np.ndarray:
        return self.flat[self.slices[name]]

    def by_name(self) -> dict[str, np.ndarray]:
        out = {}
        for name, shape, offset in self.layout:
            n = int(np.prod(shape, dtype=int))
            out[name] = self.flat[offset:offset + n].reshape(shape)
        return out

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(self.flat + other.flat, self.slices, self.layout)


def backward(loss: Tensor, params: ParameterStore) -> GradientBundle:
    """Gradient of a scalar ``loss`` w.r.t. every array of ``params``."""
    grads = ad.gradients(loss)
    flat = np.zeros(params.size())
    for name, shape, offset in params.layout():
        g = grads.get(name)
        if g is None or params.is_frozen(name):
            continue
        flat[offset:offset + g.size] = g.ravel()
    return GradientBundle(flat, params.head_slices(), params.layout())


# ---------------------------------------------------------------------------
# construction

def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


def _critic_shape(feat_dim: int, action: ActionSpec, critic: str) -> tuple[int, int]:
    if critic == "V":
        return feat_dim, 1
    if action.kind == "categorical":
        return feat_dim, action.n
    return feat_dim + action.n, 1


def init_critic_head(rng: np.random.Generator, params: ParameterStore, head: str = "mc") -> None:
    """(Re)draw a critic head in place from ``rng``."""
    fan_in, fan_out = params.arrays[f"{head}.W"].shape
    w, b = _uniform_layer(rng, fan_in, fan_out)
    params.arrays[f"{head}.W"], params.arrays[f"{head}.b"] = w, b


def init_network(obs_dim: int, goal_dim: int, hidden_sizes=(64, 64),
                 action_spec: ActionSpec | None = None, seed: int = 0,
                 critic: str = "V", goal_embed_dim: int | None = None,
                 init_log_std: float = -0.5) -> ParameterStore:
    """Seeded uniform(+-1/sqrt(fan_in)) init; the GCV head starts as a copy of MC."""
    if action_spec is None:
        action_spec = ActionSpec("categorical", 2)
    if obs_dim < 1 or goal_dim < 1:
        raise ValueError("obs_dim and goal_dim must be positive")
    if any(int(h) < 1 for h in hidden_sizes):
        raise ValueError(f"zero-sized hidden layer in {tuple(hidden_sizes)}")
    if critic not in ("V", "Q"):
        raise ValueError(f"critic must be 'V' or 'Q', got {critic!r}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    in_dim = obs_dim + goal_dim
    if goal_embed_dim:
        arrays["backbone.embed"] = rng.uniform(-1.0, 1.0, size=(goal_dim, goal_embed_dim))
        in_dim = obs_dim + goal_embed_dim
    for i, h in enumerate(hidden_sizes):
        arrays[f"backbone.{i}.W"], arrays[f"backbone.{i}.b"] = _uniform_layer(rng, in_dim, int(h))
        in_dim = int(h)
    feat_dim = in_dim
    arrays["action.W"], arrays["action.b"] = _uniform_layer(rng, feat_dim, action_spec.n)
    if action_spec.kind == "gaussian":
        arrays["action.log_std"] = np.full(action_spec.n, float(init_log_std))
    c_in, c_out = _critic_shape(feat_dim, action_spec, critic)
    arrays["mc.W"], arrays["mc.b"] = _uniform_layer(rng, c_in, c_out)
    arrays["gcv.W"], arrays["gcv.b"] = arrays["mc.W"].copy(), arrays["mc.b"].copy()
    meta = dict(obs_dim=obs_dim, goal_dim=goal_dim, hidden_sizes=[int(h) for h in hidden_sizes],
                action_kind=action_spec.kind, action_n=action_spec.n, critic=critic,
                goal_embed_dim=goal_embed_dim, seed=seed, n_layers=len(hidden_sizes))
    return ParameterStore(arrays, meta)


# ---------------------------------------------------------------------------
# forward passes

def _batch(x, width: int, what: str) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} has shape {x.shape}, expected (*, {width})")
    return x


def features(params: ParameterStore, obs, goal_code) -> Tensor:
    meta = params.meta
    obs = _batch(obs, meta["obs_dim"], "obs")
    goal = _batch(goal_code, meta["goal_dim"], "goal_code")
    if obs.shape[0] != goal.shape[0]:
        raise ValueError(f"batch mismatch: {obs.shape[0]} obs vs {goal.shape[0]} goals")
    if meta.get("goal_embed_dim"):
        goal = ad.matmul(goal, params.leaf("backbone.embed"))
    x = ad.concat([obs, goal], axis=1)
    for i in range(meta["n_layers"]):
        x = ad.tanh(x @ params.leaf(f"backbone.{i}.W") + params.leaf(f"backbone.{i}.b"))
    return x


@dataclass
class ActionDistribution:
    kind: str
    logits: Tensor | None = None
    mean: Tensor | None = None
    log_std: Tensor | None = None

    def log_prob(self, actions) -> Tensor:
        if self.kind == "categorical":
            return ad.take_rows(ad.log_softmax(self.logits), np.asarray(actions, dtype=np.int64))
        a = np.asarray(actions, dtype=np.float64).reshape(self.mean.shape)
        z = (a - self.mean) / ad.exp(self.log_std)
        d = self.mean.shape[1]
        return (-0.5 * ad.tsum(ad.square(z), axis=1) - ad.tsum(self.log_std)
                - 0.5 * d * np.log(2.0 * np.pi))

    def log_probs_all(self) -> Tensor:
        return ad.log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        lp = ad.log_softmax(self.logits.data).data
        return np.exp(lp)

    def params_array(self) -> np.ndarray:
        """Distribution parameters as one array (logits, or mean|log_std)."""
        if self.kind == "categorical":
            return self.logits.data.copy()
        n = self.mean.shape[0]
        return np.concatenate([self.mean.data, np.broadcast_to(self.log_std.data, (n, self.log_std.shape[-1]))],
                              axis=1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "categorical":
            p = self.probs()
            u = rng.random(p.shape[0])
            idx = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
            return np.minimum(idx, p.shape[1] - 1)
        std = np.exp(self.log_std.data)
        return self.mean.data + std * rng.standard_normal(self.mean.shape)

    def mode(self) -> np.ndarray:
        if self.kind == "categorical":
            return self.logits.data.argmax(axis=1)
        return self.mean.data.copy()


def distribution_from_array(kind: str, arr: np.ndarray) -> ActionDistribution:
    """Inverse of :meth:`ActionDistribution.params_array` (constant, no graph)."""
    arr = np.asarray(arr, dtype=np.float64)
    if kind == "categorical":
        return ActionDistribution(kind, logits=Tensor(arr))
    d = arr.shape[1] // 2
    return ActionDistribution(kind, mean=Tensor(arr[:, :d]), log_std=Tensor(arr[:, d:]))


def _policy_from_features(params: ParameterStore, feats: Tensor) -> ActionDistribution:
    out = feats @ params.leaf("action.W") + params.leaf("action.b")
    if params.meta["action_kind"] == "categorical":
        return ActionDistribution("categorical", logits=out)
    log_std = ad.clip(params.leaf("action.log_std"), LOG_STD_MIN, LOG_STD_MAX)
    return ActionDistribution("gaussian", mean=out, log_std=log_std)


def forward_policy(params: ParameterStore, obs, goal_code) -> ActionDistribution:
    return _policy_from_features(params, features(params, obs, goal_code))


def _check_head(head: str) -> None:
    if head not in ("mc", "gcv"):
        raise ValueError(f"value head must be 'mc' or 'gcv', got {head!r}")


def _value_from_features(params, head, feats) -> Tensor:
    return (feats @ params.leaf(f"{head}.W") + params.leaf(f"{head}.b"))[:, 0]


def forward_value(params: ParameterStore, head: str, obs, goal_code) -> Tensor:
    """Scalar V(s, g) per row from the ``mc`` or ``gcv`` head."""
    _check_head(head)
    if params.critic != "V":
        raise ValueError("forward_value needs a V-critic network")
    return _value_from_features(params, head, features(params, obs, goal_code))


def _q_from_features(params, head, feats, action=None) -> Tensor:
    if params.meta["action_kind"] == "categorical":
        return feats @ params.leaf(f"{head}.W") + params.leaf(f"{head}.b")
    if action is None:
        raise ValueError("continuous Q head needs an action")
    a = _batch(action, params.meta["action_n"], "action")
    x = ad.concat([feats, a], axis=1)
    return (x @ params.leaf(f"{head}.W") + params.leaf(f"{head}.b"))[:, 0]


def forward_qvalue(params: ParameterStore, head: str, obs, goal_code, action=None) -> Tensor:
    """Per-action Q vector (categorical, shape (B, A)) or Q(s, a) (continuous, shape (B,))."""
    _check_head(head)
    if params.critic != "Q":
        raise ValueError("forward_qvalue needs a Q-critic network")
    return _q_from_features(params, head, features(params, obs, goal_code), action)


def forward_all(params: ParameterStore, obs, goal_code, heads=("mc",), action=None):
    """One backbone pass shared by the policy and the requested critic heads."""
    feats = features(params, obs, goal_code)
    dist = _policy_from_features(params, feats)
    values = {}
    for h in heads:
        if params.critic == "V":
            values[h] = _value_from_features(params, h, feats)
        else:
            values[h] = _q_from_features(params, h, feats, action)
    return dist, values


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class SGDMomentum:
    """SGD with heavy-ball momentum, per-head learning rates and grad-norm clipping.

    ``clip_backbone`` applies to the backbone slice, ``clip_heads`` to the
    concatenation of all head slices.
    """

    lr: dict = field(default_factory=lambda: {"backbone": 1e-4, "action": 5e-5, "mc": 1e-3, "gcv": 0.0})
    momentum: float = 0.9
    clip_backbone: float | None = 1.0
    clip_heads: float | None = 1.0
    velocity: np.ndarray | None = None

    def step(self, params: ParameterStore, grad: GradientBundle) -> None:
        g = grad.flat.copy()
        slices = grad.slices
        for h in params.frozen:
            if h in slices:
                g[slices[h]] = 0.0
        if self.clip_backbone and "backbone" in slices:
            _clip_inplace(g, [slices["backbone"]], self.clip_backbone)
        if self.clip_heads:
            _clip_inplace(g, [s for h, s in slices.items() if h != "backbone"], self.clip_heads)
        if self.velocity is None or self.velocity.shape != g.shape:
            self.velocity = np.zeros_like(g)
        self.velocity = self.momentum * self.velocity + g
        lr_vec = np.zeros_like(g)
        for h, s in slices.items():
            if h not in params.frozen:
                lr_vec[s] = self.lr.get(h, 0.0)
        flat = params.flat() - lr_vec * self.velocity
        for h in params.frozen:
            if h in slices:
                flat[slices[h]] = params.flat()[slices[h]]
        params.set_flat(flat)

    def reset(self) -> None:
        self.velocity = None


def _clip_inplace(g: np.ndarray, slices: list[slice], max_norm: float) -> None:
    norm = np.sqrt(sum(float(np.dot(g[s], g[s])) for s in slices))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for s in slices:
            g[s] *= scale


# ---------------------------------------------------------------------------
# checkpoints: 8-byte little-endian header length, JSON header, raw f64 payload

def save_checkpoint(params: ParameterStore, path, extra: dict | None = None) -> None:
    header = {
        "layout": [[name, list(shape), offset] for name, shape, offset in params.layout()],
        "heads": {h: [s.start, s.stop] for h, s in params.head_slices().items()},
        "meta": params.meta,
        "frozen": sorted(params.frozen),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = params.flat().astype("<f8").tobytes()
    Path(path).write_bytes(struct.pack("<Q", len(blob)) + blob + payload)


def load_checkpoint(path) -> ParameterStore:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    flat = np.frombuffer(raw[8 + n:], dtype="<f8").astype(np.float64)
    arrays = {}
    for name, shape, offset in header["layout"]:
        size = int(np.prod(shape, dtype=int))
        arrays[name] = flat[offset:offset + size].reshape(shape).copy()
    return ParameterStore(arrays, header["meta"], set(header["frozen"]))


# ---------------------------------------------------------------------------
# finite-difference check

def grad_check(params: ParameterStore, loss_fn: Callable[[ParameterStore], Tensor],
               n_probes: int = 20, step: float = 1e-5, seed: int = 0,
               kink_tol: float = 1e-6, max_redraws: int = 50, floor: float = 1e-6) -> float:
    """Max relative error of reverse-mode vs central differences on random coordinates.

    A probe whose one-sided slopes disagree by more than ``kink_tol`` (relative)
    straddles a non-differentiable point (e.g. a clip boundary) and is re-drawn.
    Frozen coordinates are skipped. The error is relative to
    ``max(|numeric|, |analytic|, floor)``, so gradients far below ``floor`` are
    compared on an absolute scale where round-off would dominate a ratio.
    """
    rng = np.random.default_rng(seed)
    analytic = backward(loss_fn(params), params).flat
    base = params.flat()
    trainable = np.concatenate([
        np.arange(s.start, s.stop) for h, s in params.head_slices().items() if h not in params.frozen
    ])
    f0 = loss_fn(params).item()

    def f_at(vec):
        p = params.copy()
        p.set_flat(vec)
        return loss_fn(p).item()

    worst, done, redraws = 0.0, 0, 0
    while done < min(n_probes, trainable.size):
        i = int(rng.choice(trainable))
        plus, minus = base.copy(), base.copy()
        plus[i] += step
        minus[i] -= step
        fp, fm = f_at(plus), f_at(minus)
        right, left = (fp - f0) / step, (f0 - fm) / step
        scale = max(abs(right), abs(left), 1e-8)
        if abs(right - left) / scale > max(kink_tol, 50 * step) and redraws < max_redraws:
            redraws += 1
            continue
        numeric = (fp - fm) / (2 * step)
        denom = max(abs(numeric), abs(analytic[i]), floor)
        worst = max(worst, abs(numeric - analytic[i]) / denom)
        done += 1
    return worst
