"""TOML benchmark configuration with strict key checking.

Sections: ``[stream]`` (with ``[[stream.tasks]]``), ``[ppo]``, ``[weights]``,
``[variant]``, ``[network]``, ``[eval]``, ``[methods]``, ``[seeds]``.
Unknown keys raise :class:`ConfigError` naming the offending key path.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .agent import METHODS, AgentConfig, LossWeights, PPOConfig
from .envs import Goal, TaskSpec


class ConfigError(ValueError):
    pass


_STREAM_KEYS = {"name", "family", "grid_size", "n_objects", "layout_seed", "object_cells", "horizon",
                "reward_mode", "shaping_gamma", "arena_bound", "success_radius", "start", "tasks"}
_TASK_KEYS = {"label", "goals", "layout_seed", "object_cells", "start"}
_GOAL_KEYS = {"obj", "target", "label"}
_VARIANT_KEYS = {"kl_mode", "warm_start_mc", "buffer_capacity", "buffer_batch", "buffer_episodes",
                 "lwf_alpha", "er_mix_weight"}
_NETWORK_KEYS = {"hidden_sizes", "goal_embed_dim", "init_log_std", "lr_backbone", "lr_action", "lr_critic",
                 "momentum", "clip_norm"}
_EVAL_KEYS = {"episodes", "greedy", "baseline_episodes"}
_SECTIONS = {
    "stream": _STREAM_KEYS,
    "ppo": {f.name for f in fields(PPOConfig)},
    "weights": {f.name for f in fields(LossWeights)},
    "variant": _VARIANT_KEYS,
    "network": _NETWORK_KEYS,
    "eval": _EVAL_KEYS,
    "methods": {"run"},
    "seeds": {"values"},
}


def _check_keys(table: dict, allowed: set, path: str) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"{path or 'config'} must be a table")
    for key in table:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")


@dataclass
class BenchConfig:
    stream: list
    agent: AgentConfig
    methods: list
    seeds: list
    name: str = "stream"
    baseline_episodes: int = 50
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, **sections) -> "BenchConfig":
        """A copy with ``section={key: value}`` merged into the raw document."""
        raw = copy.deepcopy(self.raw)
        for section, values in sections.items():
            raw.setdefault(section, {}).update(values)
        return parse_config(raw)


def config_hash(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _build_stream(doc: dict) -> tuple[str, list[TaskSpec]]:
    _check_keys(doc, _STREAM_KEYS, "stream")
    tasks = doc.get("tasks")
    if not tasks:
        raise ConfigError("stream.tasks must list at least one task")
    shared = {k: v for k, v in doc.items() if k not in ("tasks", "name")}
    goal_dim = sum(len(t.get("goals", ())) for t in tasks)
    specs, next_id = [], 0
    for i, task in enumerate(tasks):
        path = f"stream.tasks[{i}]"
        _check_keys(task, _TASK_KEYS, path)
        goals = []
        for j, g in enumerate(task.get("goals", ())):
            _check_keys(g, _GOAL_KEYS, f"{path}.goals[{j}]")
            goals.append(Goal(id=next_id, target=tuple(g["target"]), obj=int(g.get("obj", 0)),
                              label=g.get("label", "")))
            next_id += 1
        kw = {**shared, **{k: v for k, v in task.items() if k not in ("goals",)}}
        for key in ("object_cells",):
            if kw.get(key) is not None:
                kw[key] = tuple(tuple(c) for c in kw[key])
        if kw.get("start") is not None:
            kw["start"] = tuple(kw["start"])
        kw.setdefault("label", f"task-{i + 1}")
        try:
            specs.append(TaskSpec(goals=tuple(goals), goal_dim=goal_dim, **kw))
        except Exception as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return doc.get("name", "stream"), specs


def parse_config(raw: dict) -> BenchConfig:
    raw = copy.deepcopy(raw)
    _check_keys(raw, set(_SECTIONS), "")
    for section, allowed in _SECTIONS.items():
        if section in raw:
            _check_keys(raw[section], allowed, section)
    if "stream" not in raw:
        raise ConfigError("missing [stream] section")
    name, stream = _build_stream(raw["stream"])
    try:
        ppo = PPOConfig(**raw.get("ppo", {}))
        weights = LossWeights(**raw.get("weights", {}))
        ev = raw.get("eval", {})
        agent = AgentConfig(ppo=ppo, weights=weights, **raw.get("variant", {}), **raw.get("network", {}),
                            eval_episodes=int(ev.get("episodes", 50)), eval_greedy=bool(ev.get("greedy", True)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    methods = list(raw.get("methods", {}).get("run", ["sl", "crl-vla-v"]))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"methods.run: unknown method {m!r}")
    seeds = [int(s) for s in raw.get("seeds", {}).get("values", [0])]
    if not seeds:
        raise ConfigError("seeds.values must be non-empty")
    return BenchConfig(stream=stream, agent=agent, methods=methods, seeds=seeds, name=name,
                       baseline_episodes=int(raw.get("eval", {}).get("baseline_episodes", agent.eval_episodes)),
                       raw=raw)


def load_config(path) -> BenchConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw)


def shipped_config_path(name: str = "task4_stream") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.toml"
