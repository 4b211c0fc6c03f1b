"""Procedural goal-conditioned environments.

``grid-pickplace``: an n x n grid with movable objects. A goal asks for one
object to rest (not carried) on one target cell. Actions are
up/down/left/right/pick/place and are deterministic.

``point-reach``: a point mass in a square arena driven by a clipped 2-D
velocity action (dt = 0.1); a goal is a target point.

Both support sparse (+1 on success) or potential-shaped rewards
``r + gamma * phi(s') - phi(s)``; terminal states have potential 0, so
shaping leaves the optimal policy unchanged even under horizon truncation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .mdp import GoalConditionedMDP

UP, DOWN, LEFT, RIGHT, PICK, PLACE = range(6)
GRID_ACTIONS = ("up", "down", "left", "right", "pick", "place")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
POINT_DT = 0.1
MAX_TABULAR_STATES = 4096


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class Goal:
    id: int  # index into the goal code vector
    target: tuple  # grid: (row, col); point-reach: (x, y)
    obj: int = 0
    label: str = ""


@dataclass(frozen=True)
class TaskSpec:
    goals: tuple
    family: str = "grid-pickplace"
    grid_size: int = 3
    n_objects: int = 1
    layout_seed: int = 0
    object_cells: tuple | None = None
    horizon: int = 12
    reward_mode: str = "shaped"
    shaping_gamma: float = 0.99
    goal_dim: int | None = None
    start: tuple | None = None
    arena_bound: float = 1.0
    success_radius: float = 0.1
    label: str = ""

    def __post_init__(self):
        if self.family not in ("grid-pickplace", "point-reach"):
            raise EnvError(f"unknown family {self.family!r}")
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")
        if not self.goals:
            raise EnvError("goal set must be non-empty")
        if self.reward_mode not in ("sparse", "shaped"):
            raise EnvError(f"reward_mode must be sparse or shaped, got {self.reward_mode!r}")
        goals = tuple(g if isinstance(g, Goal) else Goal(**g) for g in self.goals)
        object.__setattr__(self, "goals", tuple(
            replace(g, target=tuple(g.target), label=g.label or _default_label(self.family, g)) for g in goals))
        if self.goal_dim is None:
            object.__setattr__(self, "goal_dim", max(g.id for g in self.goals) + 1)
        if any(g.id >= self.goal_dim for g in self.goals):
            raise EnvError("goal id exceeds goal_dim")
        if self.family == "grid-pickplace":
            n = self.grid_size
            for g in self.goals:
                if not (0 <= g.obj < self.n_objects and all(0 <= c < n for c in g.target)):
                    raise EnvError(f"goal {g} out of range for {n}x{n} grid with {self.n_objects} objects")

    @property
    def obs_dim(self) -> int:
        return 3 + 3 * self.n_objects if self.family == "grid-pickplace" else 2

    @property
    def action_kind(self) -> str:
        return "categorical" if self.family == "grid-pickplace" else "gaussian"

    @property
    def n_actions(self) -> int:
        return len(GRID_ACTIONS) if self.family == "grid-pickplace" else 2

    def goal_code(self, goal: Goal) -> np.ndarray:
        code = np.zeros(self.goal_dim)
        code[goal.id] = 1.0
        return code

    def layout(self) -> tuple:
        """Initial object cells, reproducible from ``layout_seed``."""
        if self.family != "grid-pickplace":
            return ()
        if self.object_cells is not None:
            return tuple(tuple(c) for c in self.object_cells)
        n = self.grid_size
        cells = [(r, c) for r in range(n) for c in range(n)]
        rng = np.random.default_rng(self.layout_seed)
        for _ in range(1000):
            pick = rng.choice(len(cells), size=self.n_objects, replace=self.n_objects > len(cells))
            layout = tuple(cells[i] for i in pick)
            if n == 1 or not any(layout[g.obj] == g.target for g in self.goals):
                return layout
        raise EnvError("could not draw a layout with no goal satisfied at reset")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["goals"] = [asdict(g) for g in self.goals]
        return d


def _default_label(family: str, g: Goal) -> str:
    if family == "grid-pickplace":
        return f"put object {g.obj} on cell {tuple(g.target)}"
    return f"reach point {tuple(g.target)}"


@dataclass
class Transition:
    obs: np.ndarray
    goal_code: np.ndarray
    action: object
    reward: float
    next_obs: np.ndarray
    done: bool
    success: bool = False
    log_prob_behavior: float = float("nan")
    step_index: int = 0


# ---------------------------------------------------------------------------
# grid dynamics as pure functions of a hashable config
# config = (agent_cell, carried_index_or_-1, object_cells)

def grid_step(config, action: int, n: int):
    agent, carried, objects = config
    if action in _MOVES:
        dr, dc = _MOVES[action]
        agent = (min(max(agent[0] + dr, 0), n - 1), min(max(agent[1] + dc, 0), n - 1))
        if carried >= 0:
            objects = objects[:carried] + (agent,) + objects[carried + 1:]
    elif action == PICK:
        if carried < 0:
            here = [i for i, cell in enumerate(objects) if cell == agent]
            if here:
                carried = here[0]
    elif action == PLACE:
        carried = -1
    else:
        raise EnvError(f"invalid grid action {action!r}")
    return agent, carried, objects


def grid_success(config, goal: Goal) -> bool:
    _, carried, objects = config
    return carried != goal.obj and objects[goal.obj] == tuple(goal.target)


def _manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def grid_potential(config, goal: Goal, n: int) -> float:
    """-(object-to-target + 0.5 * agent-to-object [if not carried]) / (2 (n - 1))."""
    if n == 1:
        return 0.0
    agent, carried, objects = config
    dist = _manhattan(objects[goal.obj], goal.target)
    if carried != goal.obj:
        dist += 0.5 * _manhattan(agent, objects[goal.obj])
    return -dist / (2.0 * (n - 1))


def grid_obs(config, n: int) -> np.ndarray:
    agent, carried, objects = config
    scale = (lambda v: 2.0 * v / (n - 1) - 1.0) if n > 1 else (lambda v: 0.0)
    out = [scale(agent[0]), scale(agent[1]), 1.0 if carried >= 0 else -1.0]
    for i, cell in enumerate(objects):
        out += [scale(cell[0]), scale(cell[1]), 1.0 if carried == i else -1.0]
    return np.array(out)


def grid_reward(config, action, nxt, goal: Goal, spec: TaskSpec, last_step: bool = False) -> tuple[float, bool]:
    """Reward and success flag; the potential of any terminal state is taken as 0."""
    success = grid_success(nxt, goal)
    r = 1.0 if success else 0.0
    if spec.reward_mode == "shaped":
        n = spec.grid_size
        phi_next = 0.0 if (success or last_step) else grid_potential(nxt, goal, n)
        r += spec.shaping_gamma * phi_next - grid_potential(config, goal, n)
    return r, success


def point_potential(pos, goal: Goal, bound: float) -> float:
    return -float(np.linalg.norm(np.asarray(pos) - np.asarray(goal.target))) / (2.0 * np.sqrt(2.0) * bound)


# ---------------------------------------------------------------------------

class Env:
    """Single-episode-at-a-time environment; ``reset`` picks the goal and start."""

    def __init__(self, spec: TaskSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._layout = spec.layout()
        self.goal: Goal | None = None
        self.state = None
        self.t = 0
        self.done = True

    # state helpers --------------------------------------------------------
    def _start_state(self):
        spec = self.spec
        if spec.family == "grid-pickplace":
            n = spec.grid_size
            if spec.start is not None:
                agent = tuple(spec.start)
            else:
                k = int(self.rng.integers(n * n))
                agent = (k // n, k % n)
            return agent, -1, self._layout
        b = spec.arena_bound
        if spec.start is not None:
            return np.asarray(spec.start, dtype=np.float64)
        return self.rng.uniform(-b, b, size=2)

    def observe(self) -> np.ndarray:
        if self.spec.family == "grid-pickplace":
            return grid_obs(self.state, self.spec.grid_size)
        return self.state / self.spec.arena_bound

    @property
    def goal_code(self) -> np.ndarray:
        return self.spec.goal_code(self.goal)

    def reset(self, goal: Goal | int | None = None) -> np.ndarray:
        goals = self.spec.goals
        if goal is None:
            goal = goals[int(self.rng.integers(len(goals)))]
        elif isinstance(goal, (int, np.integer)):
            goal = goals[int(goal)]
        self.goal = goal
        self.state = self._start_state()
        self.t = 0
        self.done = False
        return self.observe()

    def potential(self, state=None) -> float:
        state = self.state if state is None else state
        if self.spec.family == "grid-pickplace":
            return grid_potential(state, self.goal, self.spec.grid_size)
        return point_potential(state, self.goal, self.spec.arena_bound)

    def step(self, action) -> Transition:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        spec = self.spec
        obs = self.observe()
        if spec.family == "grid-pickplace":
            action = int(action)
            nxt = grid_step(self.state, action, spec.grid_size)
            reward, success = grid_reward(self.state, action, nxt, self.goal, spec,
                                          last_step=self.t + 1 >= spec.horizon)
        else:
            action = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
            b = spec.arena_bound
            nxt = np.clip(self.state + POINT_DT * action, -b, b)
            success = bool(np.linalg.norm(nxt - np.asarray(self.goal.target)) <= spec.success_radius)
            reward = 1.0 if success else 0.0
            if spec.reward_mode == "shaped":
                terminal = success or self.t + 1 >= spec.horizon
                phi_next = 0.0 if terminal else point_potential(nxt, self.goal, b)
                reward += spec.shaping_gamma * phi_next - point_potential(self.state, self.goal, b)
        self.state = nxt
        self.t += 1
        self.done = success or self.t >= spec.horizon
        return Transition(obs=obs, goal_code=self.goal_code, action=action, reward=float(reward),
                          next_obs=self.observe(), done=self.done, success=success, step_index=self.t - 1)


def make_task(spec: TaskSpec, seed: int = 0) -> Env:
    return Env(spec, seed)


def step(env: Env, action) -> Transition:
    return env.step(action)


# ---------------------------------------------------------------------------
# batched episodes

@dataclass
class Episode:
    obs: np.ndarray  # (T, obs_dim)
    goal_code: np.ndarray  # (T, goal_dim)
    actions: np.ndarray  # (T,) or (T, d)
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    success: bool
    goal_index: int
    task: int = 0
    dist_params: np.ndarray | None = None  # behaviour distribution parameters per step

    def __len__(self) -> int:
        return len(self.rewards)


PolicyFn = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple]


def run_episodes(spec: TaskSpec, policy_fn: PolicyFn, n_episodes: int, seed: int,
                 task: int = 0) -> list[Episode]:
    """Roll out ``n_episodes`` in lockstep; goals are assigned round-robin.

    ``policy_fn(obs, goal_codes, rng)`` returns ``(actions, log_probs, dist_params)``
    for a batch; the last two may be ``None``.
    """
    if n_episodes < 1:
        raise EnvError("n_episodes must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n_episodes + 1)
    policy_rng = np.random.default_rng(seeds[-1])
    envs = [Env(spec, int(s.generate_state(1)[0])) for s in seeds[:-1]]
    n_goals = len(spec.goals)
    obs = np.stack([e.reset(i % n_goals) for i, e in enumerate(envs)])
    codes = np.stack([e.goal_code for e in envs])
    logs = [dict(obs=[], act=[], rew=[], lp=[], dp=[], success=False) for _ in envs]
    active = np.arange(n_episodes)
    while active.size:
        actions, log_probs, dist_params = policy_fn(obs[active], codes[active], policy_rng)
        still = []
        for j, i in enumerate(active):
            tr = envs[i].step(actions[j])
            log = logs[i]
            log["obs"].append(tr.obs)
            log["act"].append(actions[j])
            log["rew"].append(tr.reward)
            log["lp"].append(np.nan if log_probs is None else log_probs[j])
            if dist_params is not None:
                log["dp"].append(dist_params[j])
            if tr.done:
                log["success"] = tr.success
            else:
                obs[i] = tr.next_obs
                still.append(i)
        active = np.asarray(still, dtype=np.int64)
    out = []
    for i, log in enumerate(logs):
        T = len(log["rew"])
        out.append(Episode(
            obs=np.asarray(log["obs"]), goal_code=np.tile(codes[i], (T, 1)),
            actions=np.asarray(log["act"]), rewards=np.asarray(log["rew"]),
            log_probs=np.asarray(log["lp"], dtype=np.float64), success=bool(log["success"]),
            goal_index=i % n_goals, task=task,
            dist_params=np.asarray(log["dp"]) if log["dp"] else None))
    return out


def success_rate(env: Env | TaskSpec, policy_fn: PolicyFn, n_episodes: int, seed: int) -> float:
    """Fraction of ``n_episodes`` that reach the goal before the horizon."""
    spec = env.spec if isinstance(env, Env) else env
    if n_episodes < 1:
        raise EnvError("n_episodes must be >= 1")
    eps = run_episodes(spec, policy_fn, n_episodes, seed)
    return float(np.mean([e.success for e in eps]))


def dump_episodes(episodes: Sequence[Episode], path) -> None:
    """Debug dump: one JSON object per episode."""
    with open(path, "w") as fh:
        for e in episodes:
            fh.write(json.dumps({
                "goal_index": e.goal_index, "task": e.task, "success": e.success,
                "actions": np.asarray(e.actions).tolist(), "rewards": e.rewards.tolist(),
            }) + "\n")


# ---------------------------------------------------------------------------
# exact export

@dataclass
class TabularExport:
    mdp: GoalConditionedMDP
    states: list  # (t, config) per index; the last one is the terminal state
    obs: np.ndarray  # observation for every non-terminal state

    @property
    def terminal(self) -> int:
        return len(self.states) - 1


def to_tabular(env: Env | TaskSpec, gamma: float | None = None) -> TabularExport:
    """Enumerate a grid task into a time-augmented goal-conditioned MDP.

    States are (t, config) for every config reachable at step t plus one
    absorbing terminal state; success or reaching the horizon moves to the
    terminal, so discounted values equal the live env's expected discounted
    episode returns exactly. Goals are indexed by position in ``spec.goals``
    and the transition tensor is per goal (termination depends on it).
    """
    spec = env.spec if isinstance(env, Env) else env
    if spec.family != "grid-pickplace":
        raise EnvError("only the grid family has a finite state space")
    n, H = spec.grid_size, spec.horizon
    gamma = spec.shaping_gamma if gamma is None else gamma
    layout = spec.layout()
    if spec.start is not None:
        starts = [(tuple(spec.start), -1, layout)]
    else:
        starts = [((r, c), -1, layout) for r in range(n) for c in range(n)]
    layers = [list(dict.fromkeys(starts))]
    total = len(layers[0])
    for _ in range(1, H):
        nxt = dict.fromkeys(grid_step(c, a, n) for c in layers[-1] for a in range(len(GRID_ACTIONS)))
        layers.append(list(nxt))
        total += len(layers[-1])
        if total + 1 > MAX_TABULAR_STATES:
            raise EnvError(f"state space exceeds {MAX_TABULAR_STATES} states")
    states = [(t, c) for t, layer in enumerate(layers) for c in layer]
    index = {s: i for i, s in enumerate(states)}
    S, A, G = len(states) + 1, len(GRID_ACTIONS), len(spec.goals)
    term = S - 1
    P = np.zeros((G, S, A, S))
    R = np.zeros((S, A, G))
    for (t, c), i in index.items():
        for a in range(A):
            c2 = grid_step(c, a, n)
            for gi, goal in enumerate(spec.goals):
                r, success = grid_reward(c, a, c2, goal, spec, last_step=t + 1 >= H)
                R[i, a, gi] = r
                j = term if (success or t + 1 >= H) else index[(t + 1, c2)]
                P[gi, i, a, j] = 1.0
    P[:, term, :, term] = 1.0
    mu = np.zeros(S)
    for c in layers[0]:
        mu[index[(0, c)]] = 1.0 / len(layers[0])
    mdp = GoalConditionedMDP(P, R, gamma, np.tile(mu, (G, 1)),
                             labels={"goals": [g.label for g in spec.goals]})
    obs = np.stack([grid_obs(c, n) for _, c in states])
    return TabularExport(mdp=mdp, states=states + [("terminal", None)], obs=obs)
