"""``crl-lab`` command line."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, load_config
from .verify import SUITES


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_verify(args) -> int:
    suites = _csv_list(args.suites)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = harness.verify(suites, args.instances, args.seed, out, args.grad_instances)
    s = doc["summary"]
    for name, suite in doc["suites"].items():
        print(f"{name:12s} {suite['instances']:5d} checks  {suite['failures']} failures  "
              f"min slack {suite['min_slack']:.3e}")
    print(f"wrote {out}")
    return 0 if s["failures"] == 0 else 1


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    _, rep = harness.run_cell(config, args.method, args.seed, out)
    print(json.dumps({k: getattr(rep, k) for k in harness.METRIC_KEYS}, sort_keys=True))
    print(f"wrote {out / args.method / f'seed{args.seed}'}")
    return 0


def cmd_bench(args) -> int:
    config = load_config(args.config)
    results = harness.run_benchmark(config, args.out)
    print(harness.summary_csv(results, config.methods), end="")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    values = [float(v) for v in _csv_list(args.values)]
    rows = harness.ablation_sweep(config, args.param, values, args.out)
    for r in rows:
        print(f"{args.param}={r['value']:g} {r['method']}: FAR {r['FAR']:.3f} BWT {r['BWT']:.3f} "
              f"F {r['Forgetting']:.3f} FT {r['FT']:.3f}")
    return 0


def cmd_report(args) -> int:
    text = harness.report(args.in_dir)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crl-lab", description="Continual goal-conditioned RL toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="randomized bound, identity and gradient checks")
    v.add_argument("--suites", default=",".join(SUITES))
    v.add_argument("--instances", type=int, default=200)
    v.add_argument("--grad-instances", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="bounds_report.json")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="one method on one seed")
    t.add_argument("--config", required=True)
    t.add_argument("--method", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="runs")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="all methods x seeds in a config")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="runs")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="sweep one loss weight")
    a.add_argument("--config", required=True)
    a.add_argument("--param", required=True, choices=harness.ABLATION_PARAMS)
    a.add_argument("--values", required=True)
    a.add_argument("--out", default="ablation")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="markdown summary of a run directory")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
