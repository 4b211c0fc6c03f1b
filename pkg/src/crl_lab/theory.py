"""Numerical checks of the stability/plasticity bounds on exactly solved MDPs.

Each ``check_*`` returns a :class:`BoundReport` carrying both sides of the
inequality plus the intermediate quantities that produced them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mdp import (GoalConditionedMDP, MDPError, OccupancyMeasure, TabularPolicy,
                  expected_return, mixture_occupancy, occupancy, policy_evaluation)

SUPPORT_EPS = 1e-12
SLACK_TOL = 1e-9


class DivergenceInfinite(ValueError):
    """KL(pi_new || pi_old) is infinite at a weighted state."""

    def __init__(self, state: int, goal: int):
        super().__init__(f"pi_new puts mass outside the support of pi_old at state {state}, goal {goal}")
        self.state, self.goal = state, goal


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    metadata: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= -SLACK_TOL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slack"] = self.slack
        d["holds"] = self.holds
        return d


def _weights(mdp: GoalConditionedMDP, p) -> np.ndarray:
    w = np.asarray(p, dtype=np.float64)
    if w.shape != (mdp.n_goals,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise MDPError(f"goal distribution must be a length-{mdp.n_goals} probability vector")
    return w


def advantage_magnitude(mdp: GoalConditionedMDP, anchor: TabularPolicy, visiting: TabularPolicy,
                        goal: int, support: str = "pairs", eps: float = SUPPORT_EPS) -> float:
    """sup |A^anchor(s, a)| over the pairs visited by ``visiting`` under ``goal``.

    ``support="pairs"`` keeps (s, a) with d(s) > eps and visiting(a|s) > eps;
    ``support="states"`` keeps every action at states with d(s) > eps.
    """
    adv = policy_evaluation(mdp, anchor, goal).adv
    d = occupancy(mdp, visiting, goal).d[0]
    mask = np.broadcast_to((d > eps)[:, None], adv.shape)
    if support == "pairs":
        mask = mask & (visiting.for_goal(goal) > eps)
    elif support != "states":
        raise ValueError(f"support must be 'pairs' or 'states', got {support!r}")
    if not mask.any():
        raise RuntimeError("empty support in advantage magnitude")
    return float(np.abs(adv[mask]).max())


def stability_plasticity_metrics(mdp, pi_new, pi_old, p_old, p_new, support: str = "pairs"):
    """(M_old, M_new): goal-weighted advantage magnitudes of pi_old's advantage on pi_new's visits."""
    w_old, w_new = _weights(mdp, p_old), _weights(mdp, p_new)
    per_goal = np.array([
        advantage_magnitude(mdp, pi_old, pi_new, g, support) if (w_old[g] > 0 or w_new[g] > 0) else 0.0
        for g in range(mdp.n_goals)
    ])
    return float(w_old @ per_goal), float(w_new @ per_goal)


def kl_categorical(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q); inf where p has mass outside supp(q)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def policy_divergence(mdp: GoalConditionedMDP, pi_new: TabularPolicy, pi_old: TabularPolicy,
                      weighting: OccupancyMeasure, eps: float = 0.0) -> float:
    """sqrt(2 E_{g~w} E_{s~d_g}[KL(pi_new(.|s,g) || pi_old(.|s,g))])."""
    total = 0.0
    for i, g in enumerate(weighting.goals):
        wg = weighting.weights[i]
        if wg <= 0:
            continue
        d = weighting.d[i]
        kl = kl_categorical(pi_new.for_goal(g), pi_old.for_goal(g))
        for s in np.flatnonzero(d > eps):
            if not np.isfinite(kl[s]):
                raise DivergenceInfinite(int(s), int(g))
        total += wg * float(d[d > eps] @ kl[d > eps])
    return math.sqrt(2.0 * max(total, 0.0))


def _return_gap(mdp, pi_new, pi_old, w):
    return sum(w[g] * (expected_return(mdp, pi_new, g) - expected_return(mdp, pi_old, g))
               for g in range(mdp.n_goals) if w[g] > 0)


def check_stability_bound(mdp, pi_new, pi_old, p_old, support: str = "pairs") -> BoundReport:
    w = _weights(mdp, p_old)
    gamma = mdp.gamma
    m_old, _ = stability_plasticity_metrics(mdp, pi_new, pi_old, w, w, support)
    d_old = policy_divergence(mdp, pi_new, pi_old, mixture_occupancy(mdp, pi_old, w))
    lhs = abs(_return_gap(mdp, pi_new, pi_old, w))
    rhs = 2.0 * gamma / (1.0 - gamma) ** 2 * m_old * d_old
    return BoundReport("stability", lhs, rhs,
                       dict(M_old=m_old, D_old=d_old, gamma=gamma, support=support))


def check_plasticity_bound(mdp, pi_new, pi_old, p_new, support: str = "pairs") -> BoundReport:
    w = _weights(mdp, p_new)
    gamma = mdp.gamma
    _, m_new = stability_plasticity_metrics(mdp, pi_new, pi_old, w, w, support)
    d_new = policy_divergence(mdp, pi_new, pi_old, mixture_occupancy(mdp, pi_new, w))
    lhs = _return_gap(mdp, pi_new, pi_old, w)
    rhs = m_new * d_new / (1.0 - gamma)
    return BoundReport("plasticity", lhs, rhs,
                       dict(M_new=m_new, D_new=d_new, gamma=gamma, support=support))


def v_path_advantage(mdp: GoalConditionedMDP, goal: int, v: np.ndarray) -> np.ndarray:
    """A_hat(s, a) = r(s, a, g) + gamma E_{s'}[v(s')] - v(s)."""
    P = mdp.transition_for(goal)
    return mdp.reward[:, :, goal] + mdp.gamma * (P @ v) - v[:, None]


def q_path_advantage(q: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """A_hat(s, a) = q(s, a) - E_{a'~pi}[q(s, a')]."""
    return q - (probs * q).sum(axis=-1, keepdims=True)


def check_corollary_v(mdp: GoalConditionedMDP, goal: int, v_approx, anchor: TabularPolicy) -> BoundReport:
    v_old = policy_evaluation(mdp, anchor, goal).v
    v_approx = np.asarray(v_approx, dtype=np.float64)
    if v_approx.shape != v_old.shape:
        raise MDPError(f"v_approx shape {v_approx.shape} != {v_old.shape}")
    eps_v = float(np.abs(v_approx - v_old).max())
    r_max = float(np.abs(mdp.reward[:, :, goal]).max())
    v_inf = float(np.abs(v_old).max())
    lhs = float(np.abs(v_path_advantage(mdp, goal, v_approx)).max())
    rhs = r_max + (1.0 + mdp.gamma) * (v_inf + eps_v)
    return BoundReport("corollary_v", lhs, rhs,
                       dict(eps_V=eps_v, R_max=r_max, V_old_inf=v_inf, gamma=mdp.gamma))


def check_corollary_q(mdp: GoalConditionedMDP, goal: int, q_approx, anchor: TabularPolicy) -> BoundReport:
    q_old = policy_evaluation(mdp, anchor, goal).q
    q_approx = np.asarray(q_approx, dtype=np.float64)
    if q_approx.shape != q_old.shape:
        raise MDPError(f"q_approx shape {q_approx.shape} != {q_old.shape}")
    eps_q = float(np.abs(q_approx - q_old).max())
    q_inf = float(np.abs(q_old).max())
    lhs = float(np.abs(q_path_advantage(q_approx, anchor.for_goal(goal))).max())
    rhs = 2.0 * (q_inf + eps_q)
    return BoundReport("corollary_q", lhs, rhs, dict(eps_Q=eps_q, Q_old_inf=q_inf))


def check_corollary_mc(returns, gamma: float, path: str, fitted_values, policy_probs=None) -> BoundReport:
    """MC-return bound on one trajectory.

    ``returns`` is G_0..G_T. For ``path="V"`` ``fitted_values`` holds V(s_t)
    and rewards are recovered as r_t = G_t - gamma G_{t+1} (G_{T+1} = 0,
    terminal value 0). For ``path="Q"`` it is a ``(T+1, A)`` table and the
    advantage is Q - E_pi[Q] under ``policy_probs`` (uniform by default).
    """
    G = np.asarray(returns, dtype=np.float64)
    fitted = np.asarray(fitted_values, dtype=np.float64)
    g_min, g_max = (float(G.min()), float(G.max())) if G.size else (0.0, 0.0)
    g_abs = max(abs(g_min), abs(g_max))
    if fitted.size and (fitted.min() < g_min - 1e-12 or fitted.max() > g_max + 1e-12):
        raise MDPError("fitted values must be clamped to [G_min, G_max]")
    if path == "V":
        if fitted.shape != G.shape:
            raise MDPError(f"V-path needs one value per step, got {fitted.shape} for {G.shape}")
        g_next = np.append(G[1:], 0.0)
        v_next = np.append(fitted[1:], 0.0)
        adv = (G - gamma * g_next) + gamma * v_next - fitted
        rhs = 2.0 * (1.0 + gamma) * g_abs
    elif path == "Q":
        if fitted.ndim != 2 or fitted.shape[0] != G.shape[0]:
            raise MDPError(f"Q-path needs a (T, A) table, got {fitted.shape}")
        probs = (np.full_like(fitted, 1.0 / fitted.shape[1]) if policy_probs is None
                 else np.asarray(policy_probs, dtype=np.float64))
        adv = q_path_advantage(fitted, probs)
        rhs = 2.0 * g_abs
    else:
        raise ValueError(f"path must be 'V' or 'Q', got {path!r}")
    lhs = float(np.abs(adv).max()) if adv.size else 0.0
    return BoundReport(f"corollary_mc_{path}", lhs, rhs,
                       dict(G_min=g_min, G_max=g_max, G_abs=g_abs, gamma=gamma))
