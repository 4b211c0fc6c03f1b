"""Randomized numerical suites behind ``crl-lab verify``.

Each suite yields :class:`~crl_lab.theory.BoundReport` records; a record
fails when ``lhs > rhs + SLACK_TOL``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import agent as ag
from .mdp import pdl_residual, perturb_policy, random_mdp, random_policy, policy_evaluation
from .network import ActionSpec, forward_policy, grad_check, init_network
from .theory import (BoundReport, check_corollary_mc, check_corollary_q, check_corollary_v,
                     check_plasticity_bound, check_stability_bound)

SUITES = ("bounds", "pdl", "corollaries", "grad")
PDL_TOL = 1e-9
GRAD_TOL = 1e-4
GAMMAS = (0.5, 0.9)


def _instance_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def random_instance(rng: np.random.Generator, index: int = 0, max_states: int = 8, max_actions: int = 4,
                    max_goals: int = 3):
    """A random GC-MDP (|S|<=8, |A|<=4, |G|<=3, gamma alternating 0.5/0.9) and a policy pair."""
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    G = int(rng.integers(1, max_goals + 1))
    mdp = random_mdp(rng, S, A, G, GAMMAS[index % len(GAMMAS)])
    pi_old = random_policy(rng, mdp)
    pi_new = perturb_policy(rng, pi_old, float(rng.uniform(0.05, 1.0)))
    return mdp, pi_old, pi_new


def bounds_suite(instances: int, seed: int) -> list[BoundReport]:
    out = []
    for i, rng in enumerate(_instance_rngs(seed, instances)):
        mdp, pi_old, pi_new = random_instance(rng, i)
        p_old = rng.dirichlet(np.ones(mdp.n_goals))
        p_new = rng.dirichlet(np.ones(mdp.n_goals))
        out.append(check_stability_bound(mdp, pi_new, pi_old, p_old))
        out.append(check_plasticity_bound(mdp, pi_new, pi_old, p_new))
    return out


def pdl_suite(instances: int, seed: int) -> list[BoundReport]:
    out = []
    for i, rng in enumerate(_instance_rngs(seed, instances)):
        mdp, pi_old, pi_new = random_instance(rng, i)
        worst = max(pdl_residual(mdp, pi_new, pi_old, g) for g in range(mdp.n_goals))
        out.append(BoundReport("pdl", worst, PDL_TOL, dict(gamma=mdp.gamma)))
    return out


def corollary_suite(instances: int, seed: int, noise_levels=(0.0, 0.1, 0.5)) -> list[BoundReport]:
    out = []
    for i, rng in enumerate(_instance_rngs(seed, instances)):
        mdp, pi_old, _ = random_instance(rng, i)
        g = int(rng.integers(mdp.n_goals))
        tables = policy_evaluation(mdp, pi_old, g)
        for eps in noise_levels:
            v_hat = tables.v + rng.uniform(-eps, eps, size=tables.v.shape)
            q_hat = tables.q + rng.uniform(-eps, eps, size=tables.q.shape)
            out.append(check_corollary_v(mdp, g, v_hat, pi_old))
            out.append(check_corollary_q(mdp, g, q_hat, pi_old))
        T = int(rng.integers(1, 30))
        rewards = rng.uniform(-1.0, 1.0, size=T)
        G = ag.mc_returns(rewards, mdp.gamma)
        lo, hi = G.min(), G.max()
        out.append(check_corollary_mc(G, mdp.gamma, "V", rng.uniform(lo, hi, size=T)))
        A = mdp.n_actions
        out.append(check_corollary_mc(G, mdp.gamma, "Q", rng.uniform(lo, hi, size=(T, A)),
                                      rng.dirichlet(np.ones(A), size=T)))
    return out


# ---------------------------------------------------------------------------
# gradient fixtures

@dataclass
class GradFixture:
    params: object
    anchor: object
    batch: ag.RolloutBatch
    buffer: ag.OldTaskBuffer
    ppo: ag.PPOConfig


def grad_fixture(rng: np.random.Generator, kind: str = "categorical", critic: str = "V",
                 batch_size: int = 6) -> GradFixture:
    """Small random network, behaviour data and buffer for finite-difference checks."""
    obs_dim, goal_dim, n = 3, 2, (3 if kind == "categorical" else 2)
    spec = ActionSpec(kind, n)
    seed = int(rng.integers(2 ** 31))
    params = init_network(obs_dim, goal_dim, (5, 4), spec, seed=seed, critic=critic)
    anchor = init_network(obs_dim, goal_dim, (5, 4), spec, seed=seed + 1, critic=critic)
    # behaviour policy: a perturbed copy so likelihood ratios differ from 1
    behaviour = params.copy()
    behaviour.set_flat(behaviour.flat() + 0.05 * rng.standard_normal(behaviour.size()))
    obs = rng.uniform(-1, 1, size=(batch_size, obs_dim))
    codes = np.eye(goal_dim)[rng.integers(goal_dim, size=batch_size)]
    bdist = forward_policy(behaviour, obs, codes)
    actions = bdist.sample(rng)
    batch = ag.RolloutBatch(obs=obs, goal_code=codes, actions=actions,
                            log_probs=bdist.log_prob(actions).data, dist_params=bdist.params_array(),
                            rewards=rng.standard_normal(batch_size), returns=rng.standard_normal(batch_size),
                            advantages=rng.standard_normal(batch_size))
    b_obs = rng.uniform(-1, 1, size=(batch_size, obs_dim))
    b_codes = np.eye(goal_dim)[rng.integers(goal_dim, size=batch_size)]
    adist = forward_policy(anchor, b_obs, b_codes)
    b_actions = adist.sample(rng)
    buffer = ag.OldTaskBuffer(b_obs, b_codes, b_actions, adist.params_array(),
                              rng.standard_normal(batch_size), rng.standard_normal(batch_size),
                              rng.standard_normal(batch_size) if critic == "Q" else None, 0, kind)
    return GradFixture(params, anchor, batch, buffer, ag.PPOConfig())


def loss_terms() -> dict:
    """name -> (action kind, critic, loss_fn(fixture) -> params -> node)."""

    def total(fx):
        def fn(p):
            parts = {"ppo": ag.ppo_loss(fx.batch, p, fx.ppo), "mc": ag.mc_loss_v(p, fx.batch),
                     "gcv": ag.gcv_loss_v(p, fx.buffer), "kl": ag.kl_old_loss(p, fx.anchor, fx.buffer),
                     "entropy": ag.entropy_loss(p, fx.batch)}
            return ag.total_loss(parts, {"mc": 0.7, "gcv": 0.3, "kl": 0.5, "entropy": 0.01})
        return fn

    return {
        "ppo": ("categorical", "V", lambda fx: lambda p: ag.ppo_loss(fx.batch, p, fx.ppo)),
        "ppo_gaussian": ("gaussian", "V", lambda fx: lambda p: ag.ppo_loss(fx.batch, p, fx.ppo)),
        "gcv_v": ("categorical", "V", lambda fx: lambda p: ag.gcv_loss_v(p, fx.buffer)),
        "gcv_q": ("categorical", "Q", lambda fx: lambda p: ag.gcv_loss_q(p, fx.buffer)),
        "gcv_q_continuous": ("gaussian", "Q", lambda fx: lambda p: ag.gcv_loss_q(p, fx.buffer)),
        "mc_v": ("categorical", "V", lambda fx: lambda p: ag.mc_loss_v(p, fx.batch)),
        "mc_q": ("categorical", "Q", lambda fx: lambda p: ag.mc_loss_q(p, fx.batch)),
        "mc_q_continuous": ("gaussian", "Q", lambda fx: lambda p: ag.mc_loss_q(p, fx.batch)),
        "kl_div": ("categorical", "V", lambda fx: lambda p: ag.kl_old_loss(p, fx.anchor, fx.buffer, "kl-div")),
        "kl_div_gaussian": ("gaussian", "V",
                            lambda fx: lambda p: ag.kl_old_loss(p, fx.anchor, fx.buffer, "kl-div")),
        "bc_mse": ("gaussian", "V", lambda fx: lambda p: ag.kl_old_loss(p, fx.anchor, fx.buffer, "bc-mse")),
        "bc_cross_entropy": ("categorical", "V",
                             lambda fx: lambda p: ag.kl_old_loss(p, fx.anchor, fx.buffer, "bc-mse")),
        "lwf_distill": ("categorical", "V", lambda fx: lambda p: ag.lwf_loss(p, fx.anchor, fx.batch)),
        "entropy": ("categorical", "V", lambda fx: lambda p: ag.entropy_loss(p, fx.batch)),
        "total": ("categorical", "V", total),
    }


def grad_suite(instances: int, seed: int, n_probes: int = 8) -> list[BoundReport]:
    """``instances`` random configurations per loss term (at least 20)."""
    out = []
    n = max(20, instances)
    for name, (kind, critic, make) in loss_terms().items():
        for i, rng in enumerate(_instance_rngs(seed + zlib.crc32(name.encode()) % 100003, n)):
            fx = grad_fixture(rng, kind, critic)
            err = grad_check(fx.params, make(fx), n_probes=n_probes, seed=i)
            out.append(BoundReport(f"grad_{name}", err, GRAD_TOL, dict(config=i)))
    return out


def run_suites(suites=SUITES, instances: int = 200, seed: int = 0, grad_instances: int = 20) -> dict:
    """Run the named suites; returns a JSON-ready report with an overall summary."""
    runners = {"bounds": lambda: bounds_suite(instances, seed), "pdl": lambda: pdl_suite(instances, seed),
               "corollaries": lambda: corollary_suite(instances, seed),
               "grad": lambda: grad_suite(grad_instances, seed)}
    doc = {"suites": {}}
    total = failures = 0
    min_slack = float("inf")
    for name in suites:
        if name not in runners:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
        reports = runners[name]()
        fails = [r for r in reports if not r.holds]
        slack = min(r.slack for r in reports) if reports else float("inf")
        doc["suites"][name] = {"instances": len(reports), "failures": len(fails), "min_slack": slack,
                               "failed": [r.to_dict() for r in fails[:20]]}
        total += len(reports)
        failures += len(fails)
        min_slack = min(min_slack, slack)
    doc["summary"] = {"instances": total, "failures": failures, "min_slack": min_slack}
    return doc
