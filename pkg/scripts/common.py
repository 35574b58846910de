"""Shared helpers for the experiment scripts."""
import argparse
import json
from pathlib import Path

import numpy as np

from gcdlab import experiment as ex


def parser(description: str, default_out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="base experiment config JSON (defaults to the standard benchmark)")
    p.add_argument("--out-dir", default=default_out)
    p.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
    return p


def base_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seeds:
        cfg.seeds = list(args.seeds)
    return cfg


def run_arm(base: ex.ExperimentConfig, out_dir: Path, name: str, gcd=None, **top) -> dict:
    """Run one arm with ``gcd`` and top-level fields overridden; returns the per-seed test metrics."""
    d = base.to_dict()
    d["gcd"].update(gcd or {})
    d.update(top)
    cfg = ex.ExperimentConfig.from_dict(d)
    summary = ex.run_experiment(cfg, Path(out_dir) / name)
    ok = [s for s in summary["per_seed"] if s["status"] == "ok"]
    return {k: [s["test"][k] for s in ok] for k in ex.SUMMARY_KEYS}


def describe(name: str, metrics: dict) -> str:
    cells = [f"{k} {np.median(v):.4f}" for k, v in metrics.items() if v and None not in v]
    return f"{name:<28} " + "  ".join(cells)


def dump(out_dir: Path, filename: str, obj) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / filename).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
