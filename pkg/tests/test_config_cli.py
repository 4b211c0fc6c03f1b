from __future__ import annotations

import json
import subprocess
import sys

import pytest

from crl_lab import harness
from crl_lab.cli import main
from crl_lab.config import ConfigError, load_config, parse_config, shipped_config_path

TINY = """
[stream]
name = "tiny"
grid_size = 3
n_objects = 1
object_cells = [[1, 1]]
horizon = 6

[[stream.tasks]]
label = "left"
goals = [{ obj = 0, target = [0, 0] }]

[[stream.tasks]]
label = "right"
goals = [{ obj = 0, target = [2, 2] }]

[ppo]
total_steps = 2
rollout_episodes = 4
update_times = 2
eval_interval = 0

[weights]
alpha = 1.0
beta_v = 1.0

[variant]
buffer_episodes = 4

[network]
hidden_sizes = [8]
lr_backbone = 0.05

[eval]
episodes = 4
baseline_episodes = 4

[methods]
run = ["sl", "crl-vla-v"]

[seeds]
values = [0, 1]
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def test_shipped_config_parses():
    cfg = load_config(shipped_config_path())
    assert len(cfg.stream) == 3 and cfg.methods == ["sl", "crl-vla-v"] and cfg.seeds == [0, 1, 2, 3, 4]
    assert all(s.goal_dim == 6 for s in cfg.stream)
    assert [g.id for g in cfg.stream[2].goals] == [4, 5]


def test_unknown_keys_name_their_path(tiny):
    cfg = load_config(tiny)
    raw = cfg.raw
    for section, key, where in [("ppo", "clip", "ppo.clip"), ("network", "depth", "network.depth")]:
        bad = json.loads(json.dumps(raw))
        bad[section][key] = 1
        with pytest.raises(ConfigError, match=where):
            parse_config(bad)
    bad = json.loads(json.dumps(raw))
    bad["stream"]["tasks"][1]["goals"][0]["colour"] = "red"
    with pytest.raises(ConfigError, match=r"stream.tasks\[1\].goals\[0\].colour"):
        parse_config(bad)
    with pytest.raises(ConfigError, match="extras"):
        parse_config({**raw, "extras": {}})


def test_invalid_values_rejected(tiny):
    raw = load_config(tiny).raw
    with pytest.raises(ConfigError):
        parse_config({**raw, "methods": {"run": ["ewc"]}})
    with pytest.raises(ConfigError):
        parse_config({**raw, "weights": {"alpha": -1.0}})
    with pytest.raises(ConfigError):
        parse_config({k: v for k, v in raw.items() if k != "stream"})


def test_hash_is_stable_and_sensitive(tiny):
    a, b = load_config(tiny), load_config(tiny)
    assert a.hash == b.hash and len(a.hash) == 64
    assert a.with_overrides(weights={"alpha": 0.5}).hash != a.hash
    assert a.with_overrides(weights={"alpha": 0.5}).agent.weights.alpha == 0.5


def test_cli_train_bench_report_and_rerun(tiny, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(tiny), "--method", "crl-vla-v", "--seed", "3", "--out", str(out)]) == 0
    cell = out / "crl-vla-v" / "seed3"
    assert (cell / "transfer_matrix.csv").exists() and (cell / "checkpoints" / "stage2.ckpt").exists()
    assert json.loads((cell / "metrics.json").read_text())["provenance"]["config_hash"] == load_config(tiny).hash

    first, second = tmp_path / "b1", tmp_path / "b2"
    assert main(["bench", "--config", str(tiny), "--out", str(first)]) == 0
    assert main(["bench", "--config", str(tiny), "--out", str(second)]) == 0
    for m in ("sl", "crl-vla-v"):
        for s in (0, 1):
            for name in ("transfer_matrix.csv", "metrics.json"):
                assert (first / m / f"seed{s}" / name).read_bytes() == (second / m / f"seed{s}" / name).read_bytes()
    assert (first / "summary.csv").read_bytes() == (second / "summary.csv").read_bytes()

    assert main(["report", "--in", str(first), "--out", str(tmp_path / "r.md")]) == 0
    text = (tmp_path / "r.md").read_text()
    assert "| sl |" in text and "crl-vla-v" in text


def test_cli_verify_and_errors(tmp_path, capsys):
    out = tmp_path / "bounds.json"
    code = main(["verify", "--suites", "bounds,pdl,corollaries", "--instances", "10", "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["summary"]["failures"] == 0 and set(doc["suites"]) == {"bounds", "pdl", "corollaries"}
    assert main(["verify", "--suites", "nope", "--instances", "1", "--out", str(out)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[stream]\nwidth = 3\n")
    assert main(["bench", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "stream.width" in capsys.readouterr().err


def test_ablation_sweep_rows(tiny, tmp_path):
    cfg = load_config(tiny).with_overrides(seeds={"values": [0]}, methods={"run": ["crl-vla-v"]})
    rows = harness.ablation_sweep(cfg, "alpha", [0.0, 1.0], tmp_path / "abl")
    assert [(r["value"], r["method"]) for r in rows] == [(0.0, "crl-vla-v"), (1.0, "crl-vla-v")]
    assert (tmp_path / "abl" / "ablation.csv").read_text().startswith("alpha,method,FAR")
    with pytest.raises(ValueError):
        harness.ablation_sweep(cfg, "gamma", [0.5])


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "crl_lab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify" in res.stdout and "ablate" in res.stdout
