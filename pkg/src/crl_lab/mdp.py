"""Exact solution of finite goal-conditioned MDPs.

Everything here is dense float64 linear algebra: values come from a direct
solve of the Bellman system, occupancies from the transposed system.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_TOL = 1e-12


class MDPError(ValueError):
    """Malformed MDP, policy, or goal argument."""


@dataclass(frozen=True)
class GoalConditionedMDP:
    """Finite <S, A, G, P, r, gamma> with a per-goal initial distribution.

    ``transition`` is either ``(S, A, S)`` (shared by all goals) or
    ``(G, S, A, S)`` when goals terminate episodes differently.
    ``reward`` is ``(S, A, G)`` and ``initial_dist`` is ``(G, S)``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        mu = np.asarray(self.initial_dist, dtype=np.float64)
        if r.ndim != 3:
            raise MDPError(f"reward must be (S, A, G), got {r.shape}")
        S, A, G = r.shape
        if mu.ndim == 1:
            mu = np.tile(mu, (G, 1))
        if P.shape not in ((S, A, S), (G, S, A, S)):
            raise MDPError(f"transition shape {P.shape} incompatible with reward {r.shape}")
        if mu.shape != (G, S):
            raise MDPError(f"initial_dist must be (G, S) = {(G, S)}, got {mu.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise MDPError(f"gamma must lie in [0, 1), got {self.gamma}")
        if (P < 0).any() or np.abs(P.sum(axis=-1) - 1.0).max() > PROB_TOL:
            raise MDPError("transition rows must be probability distributions")
        if (mu < 0).any() or np.abs(mu.sum(axis=-1) - 1.0).max() > PROB_TOL:
            raise MDPError("initial_dist rows must be probability distributions")
        if not np.isfinite(r).all():
            raise MDPError("reward must be finite")
        for name, value in (("transition", P), ("reward", r), ("initial_dist", mu)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def n_goals(self) -> int:
        return self.reward.shape[2]

    def transition_for(self, goal: int) -> np.ndarray:
        self.check_goal(goal)
        return self.transition if self.transition.ndim == 3 else self.transition[goal]

    def check_goal(self, goal: int) -> None:
        if not 0 <= int(goal) < self.n_goals:
            raise MDPError(f"goal {goal} out of range for {self.n_goals} goals")

    def with_gamma(self, gamma: float) -> "GoalConditionedMDP":
        return GoalConditionedMDP(self.transition, self.reward, gamma, self.initial_dist, self.labels)

    def with_reward(self, reward: np.ndarray) -> "GoalConditionedMDP":
        return GoalConditionedMDP(self.transition, reward, self.gamma, self.initial_dist, self.labels)

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "n_goals": self.n_goals,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GoalConditionedMDP":
        mdp = cls(np.array(doc["transition"]), np.array(doc["reward"]),
                  doc["gamma"], np.array(doc["initial_dist"]))
        declared = (doc.get("n_states"), doc.get("n_actions"), doc.get("n_goals"))
        actual = (mdp.n_states, mdp.n_actions, mdp.n_goals)
        if any(d is not None and d != a for d, a in zip(declared, actual)):
            raise MDPError(f"declared sizes {declared} disagree with arrays {actual}")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GoalConditionedMDP":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TabularPolicy:
    """``probs[s, g, a]`` = pi(a | s, g)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise MDPError(f"policy must be (S, G, A), got {p.shape}")
        if (p < 0).any() or np.abs(p.sum(axis=-1) - 1.0).max() > PROB_TOL:
            raise MDPError("policy rows must be probability distributions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def for_goal(self, goal: int) -> np.ndarray:
        return self.probs[:, goal, :]

    def check_against(self, mdp: GoalConditionedMDP) -> None:
        if self.probs.shape != (mdp.n_states, mdp.n_goals, mdp.n_actions):
            raise MDPError(f"policy shape {self.probs.shape} does not match MDP "
                           f"{(mdp.n_states, mdp.n_goals, mdp.n_actions)}")

    @classmethod
    def uniform(cls, mdp: GoalConditionedMDP) -> "TabularPolicy":
        return cls(np.full((mdp.n_states, mdp.n_goals, mdp.n_actions), 1.0 / mdp.n_actions))


@dataclass(frozen=True)
class ValueTables:
    v: np.ndarray  # (S,)
    q: np.ndarray  # (S, A)
    adv: np.ndarray  # (S, A)


@dataclass(frozen=True)
class OccupancyMeasure:
    """Per-goal normalized discounted visitation ``d[i, s]`` for ``goals[i]``."""

    d: np.ndarray
    goals: tuple
    weights: np.ndarray

    @property
    def mixture(self) -> np.ndarray:
        """d_p(s) = sum_g p(g) d_g(s)."""
        return self.weights @ self.d

    def for_goal(self, goal: int) -> np.ndarray:
        return self.d[self.goals.index(goal)]


def _policy_matrices(mdp, policy, goal):
    policy.check_against(mdp)
    mdp.check_goal(goal)
    P = mdp.transition_for(goal)
    pi = policy.for_goal(goal)
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = (pi * mdp.reward[:, :, goal]).sum(axis=1)
    return P, pi, P_pi, r_pi


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:  # unreachable for gamma < 1
        raise RuntimeError("singular Bellman system") from exc


def policy_evaluation(mdp: GoalConditionedMDP, policy: TabularPolicy, goal: int) -> ValueTables:
    P, pi, P_pi, r_pi = _policy_matrices(mdp, policy, goal)
    S = mdp.n_states
    v = _solve(np.eye(S) - mdp.gamma * P_pi, r_pi)
    q = mdp.reward[:, :, goal] + mdp.gamma * (P @ v)
    return ValueTables(v=v, q=q, adv=q - v[:, None])


def occupancy(mdp: GoalConditionedMDP, policy: TabularPolicy, goal: int) -> OccupancyMeasure:
    _, _, P_pi, _ = _policy_matrices(mdp, policy, goal)
    mu0 = mdp.initial_dist[goal]
    d = (1.0 - mdp.gamma) * _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mu0)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return OccupancyMeasure(d=d[None, :], goals=(int(goal),), weights=np.ones(1))


def mixture_occupancy(mdp: GoalConditionedMDP, policy: TabularPolicy, goal_weights) -> OccupancyMeasure:
    w = np.asarray(goal_weights, dtype=np.float64)
    if w.shape != (mdp.n_goals,):
        raise MDPError(f"goal weights need length {mdp.n_goals}, got {w.shape}")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise MDPError("goal weights must be a distribution")
    d = np.stack([occupancy(mdp, policy, g).d[0] for g in range(mdp.n_goals)])
    return OccupancyMeasure(d=d, goals=tuple(range(mdp.n_goals)), weights=w)


def expected_return(mdp: GoalConditionedMDP, policy: TabularPolicy, goal: int) -> float:
    """J_g(pi) = sum_s mu0_g(s) V(s, g)."""
    v = policy_evaluation(mdp, policy, goal).v
    return float(mdp.initial_dist[goal] @ v)


def pdl_residual(mdp: GoalConditionedMDP, pi_new: TabularPolicy, pi_old: TabularPolicy, goal: int) -> float:
    """|dJ - (1-gamma)^-1 E_{s~d_new, a~pi_new}[A_old(s, a)]| for one goal."""
    lhs = expected_return(mdp, pi_new, goal) - expected_return(mdp, pi_old, goal)
    adv_old = policy_evaluation(mdp, pi_old, goal).adv
    d_new = occupancy(mdp, pi_new, goal).d[0]
    inner = (pi_new.for_goal(goal) * adv_old).sum(axis=1)
    rhs = float(d_new @ inner) / (1.0 - mdp.gamma)
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# random instances

def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, n_goals: int,
               gamma: float) -> GoalConditionedMDP:
    """Dirichlet(1) transition rows, U[-1, 1] rewards (so R_max <= 1), Dirichlet(1) starts."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_goals))
    mu = rng.dirichlet(np.ones(n_states), size=n_goals)
    return GoalConditionedMDP(P, r, gamma, mu)


def random_policy(rng: np.random.Generator, mdp: GoalConditionedMDP) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(mdp.n_actions), size=(mdp.n_states, mdp.n_goals)))


def perturb_policy(rng: np.random.Generator, policy: TabularPolicy, strength: float) -> TabularPolicy:
    """Mix each row with a fresh Dirichlet(1) draw; keeps the support of full-support rows."""
    S, G, A = policy.probs.shape
    noise = rng.dirichlet(np.ones(A), size=(S, G))
    p = (1.0 - strength) * policy.probs + strength * noise
    return TabularPolicy(p / p.sum(axis=-1, keepdims=True))
