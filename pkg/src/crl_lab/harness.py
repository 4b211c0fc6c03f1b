"""Benchmark orchestration: method x seed sweeps, artifacts, ablations, reports."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agent as ag
from .config import BenchConfig
from .envs import TaskSpec
from .metrics import MetricsReport, TransferMatrix, compute_metrics
from .verify import run_suites

METRIC_KEYS = ("far", "bwt", "forgetting", "ft")
ABLATION_PARAMS = ("alpha", "beta_v", "beta_q", "eta")


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CRL_LAB_THREADS", "1")))
    except ValueError:
        return 1


def baseline_success(stream: Sequence[TaskSpec], seed: int, n_episodes: int,
                     config: ag.AgentConfig | None = None, method: str = "sl") -> np.ndarray:
    """Success of the untrained policy pi_theta0 on every task (same eval starts as stage 1)."""
    config = config or ag.AgentConfig()
    params = ag.initial_params(stream, method, config, seed)
    return np.array([ag.evaluate(params, spec, n_episodes, ag.eval_seed(seed, 0, i), config.eval_greedy)
                     for i, spec in enumerate(stream)])


def run_cell(config: BenchConfig, method: str, seed: int, out_dir=None) -> tuple[TransferMatrix, MetricsReport]:
    """One (method, seed) run; writes artifacts under ``out_dir/<method>/seed<seed>`` when given."""
    cell = None if out_dir is None else Path(out_dir) / method / f"seed{seed}"
    matrix = ag.run_task_stream(config.stream, method, config.agent, seed,
                                log_path=None if cell is None else cell / "logs" / "updates.jsonl",
                                checkpoint_dir=None if cell is None else cell / "checkpoints")
    b = baseline_success(config.stream, seed, config.baseline_episodes, config.agent, method)
    provenance = dict(config_hash=config.hash, method=method, seed=seed, stream=config.name,
                      baseline_policy="initial policy before any training",
                      reward="grid shaped/sparse substitute for simulator success reward")
    report = compute_metrics(matrix, b, provenance)
    if cell is not None:
        cell.mkdir(parents=True, exist_ok=True)
        (cell / "transfer_matrix.csv").write_text(matrix.to_csv())
        (cell / "metrics.json").write_text(_json(report.to_dict()))
    return matrix, report


def _cell_job(args):
    config, method, seed, out_dir = args
    return run_cell(config, method, seed, out_dir)


def run_benchmark(config: BenchConfig, out_dir=None) -> dict:
    """Sweep methods x seeds; returns ``{(method, seed): (matrix, report)}`` in config order."""
    jobs = [(config, m, s, out_dir) for m in config.methods for s in config.seeds]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    out = {(j[1], j[2]): r for j, r in zip(jobs, results)}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.csv").write_text(summary_csv(out, config.methods))
        (Path(out_dir) / "config.json").write_text(_json(dict(hash=config.hash, config=config.raw)))
    return out


def aggregate(results: dict, method: str) -> dict:
    """Mean and std of each metric over a method's seeds (``None`` values skipped)."""
    reports = [rep for (m, _), (_, rep) in results.items() if m == method]
    agg = {"n_seeds": len(reports)}
    for key in METRIC_KEYS:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        agg[f"{key}_mean"] = float(np.mean(vals)) if vals else float("nan")
        agg[f"{key}_std"] = float(np.std(vals)) if vals else float("nan")
    return agg


def summary_csv(results: dict, methods: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_seeds"] + [f"{k}_{s}" for k in ("FAR", "BWT", "F", "FT") for s in ("mean", "std")])
    for m in methods:
        a = aggregate(results, m)
        w.writerow([m, a["n_seeds"]] + [f"{a[f'{k}_{s}']:.6f}" for k in METRIC_KEYS for s in ("mean", "std")])
    return buf.getvalue()


def ablation_sweep(config: BenchConfig, parameter: str, values: Sequence[float], out_dir=None) -> list[dict]:
    """Rerun the benchmark per value of one loss weight; one row per (value, method)."""
    if parameter not in ABLATION_PARAMS:
        raise ValueError(f"parameter must be one of {ABLATION_PARAMS}, got {parameter!r}")
    rows = []
    for value in values:
        cfg = config.with_overrides(weights={parameter: float(value)})
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}={value:g}"
        results = run_benchmark(cfg, sub)
        for m in cfg.methods:
            a = aggregate(results, m)
            rows.append(dict(value=float(value), method=m, FAR=a["far_mean"], BWT=a["bwt_mean"],
                             Forgetting=a["forgetting_mean"], FT=a["ft_mean"]))
    if out_dir is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([parameter, "method", "FAR", "BWT", "Forgetting", "FT"])
        for r in rows:
            w.writerow([f"{r['value']:g}", r["method"]] + [f"{r[k]:.6f}" for k in ("FAR", "BWT", "Forgetting", "FT")])
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(buf.getvalue())
    return rows


def verify(suites, instances: int, seed: int, out_path=None, grad_instances: int = 20) -> dict:
    doc = run_suites(suites, instances, seed, grad_instances)
    if out_path is not None:
        Path(out_path).write_text(_json(doc))
    return doc


def report(in_dir) -> str:
    """Markdown digest of a benchmark directory (summary, per-cell metrics, bound checks)."""
    in_dir = Path(in_dir)
    lines = [f"# Benchmark report: {in_dir.name}", ""]
    summary = in_dir / "summary.csv"
    if summary.exists():
        rows = list(csv.DictReader(summary.open()))
        lines += ["## Summary (mean ± std over seeds)", "",
                  "| method | seeds | FAR | BWT | F | FT |", "|---|---|---|---|---|---|"]
        for r in rows:
            cells = [f"{float(r[f'{k}_mean']):.3f} ± {float(r[f'{k}_std']):.3f}" for k in ("FAR", "BWT", "F", "FT")]
            lines.append(f"| {r['method']} | {r['n_seeds']} | " + " | ".join(cells) + " |")
        lines.append("")
    cells = sorted(in_dir.glob("*/seed*/metrics.json"))
    if cells:
        lines += ["## Runs", "", "| method | seed | FAR | BWT | F | FT |", "|---|---|---|---|---|---|"]
        for path in cells:
            m = json.loads(path.read_text())
            fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
            lines.append(f"| {path.parent.parent.name} | {path.parent.name[4:]} | "
                         + " | ".join(fmt(m[k]) for k in METRIC_KEYS) + " |")
        lines.append("")
    bounds = in_dir / "bounds_report.json"
    if bounds.exists():
        s = json.loads(bounds.read_text())["summary"]
        lines += ["## Bound checks", "",
                  f"{s['instances']} checks, {s['failures']} failures, min slack {s['min_slack']:.3e}", ""]
    lines += ["Rewards are grid-world substitutes for simulator success; baselines b_i use the "
              "untrained initial policy.", ""]
    return "\n".join(lines)
