"""Command-line runner for the individual stages and the full pipeline.

Each stage reads its inputs from and writes its outputs to --out-dir, so
`generate`, `train-gcd`, `reliability`, `train-downstream` and `evaluate`
chain into the same result `run-all` produces for a single seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import sam, synthdata
from .rdl import DownstreamClassifier, ReliabilityTable

log = logging.getLogger("gcdlab")

DATASET = "dataset.jsonl"
CKPT_DIR = "checkpoints"


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if getattr(args, "dump_headness", False):
        cfg.dump_headness = True
    return cfg.validate()


def _seed(cfg) -> int:
    return cfg.seeds[0]


def _records(out: Path):
    path = out / DATASET
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `generate` first")
    return synthdata.load_jsonl(path)


def cmd_generate(cfg, out: Path) -> dict:
    spec, records = ex.make_dataset(cfg, _seed(cfg))
    synthdata.dump_jsonl(records, out / DATASET)
    hist = synthdata.class_histogram(records)
    ex.write_json(out / "dataset_summary.json", {
        "seed": spec.seed, "num_records": len(records),
        "class_counts": {str(k): v for k, v in sorted(hist.items())},
        "num_labeled": sum(r.labeled for r in records),
        "num_test": sum(r.split == "test" for r in records)})
    return {"records": len(records)}


def cmd_train_gcd(cfg, out: Path) -> dict:
    train, _ = synthdata.split(_records(out))
    res = ex.run_gcd(cfg, _seed(cfg), train)
    (out / CKPT_DIR).mkdir(exist_ok=True)
    for ckpt in res.checkpoints:
        ex.save_gcd_checkpoint(out / CKPT_DIR / f"epoch_{ckpt.epoch:04d}.json", ckpt)
    ex.write_pseudo_labels(out / "pseudo_labels.csv", res.pseudo_ids, res.pseudo_labels, res.pseudo_max_q)
    ex.write_json(out / "gcd_history.json", res.history)
    if res.tau_dumps:
        ex.write_headness(out / "headness.csv", res.tau_dumps)
    return {"checkpoints": [c.epoch for c in res.checkpoints], "final_loss": res.history[-1]["loss"]}


def _load_checkpoints(out: Path):
    paths = sorted((out / CKPT_DIR).glob("epoch_*.json"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {out / CKPT_DIR}; run `train-gcd` first")
    return [ex.load_gcd_checkpoint(p) for p in paths]


def cmd_reliability(cfg, out: Path) -> dict:
    train, _ = synthdata.split(_records(out))
    unl = [r for r in train if not r.labeled]
    X = synthdata.stack(unl, "base_feature")
    table, _ = ex.reliability_from_checkpoints(_load_checkpoints(out), [r.id for r in unl], X,
                                               cfg.downstream.epochs, cfg.gcd.num_checkpoints)
    table.to_csv(out / "reliability.csv")
    ex.write_json(out / "kappa_histogram.json", ex.kappa_histogram(table, cfg.downstream.epochs))
    return {"instances": int(table.ids.size)}


def cmd_train_downstream(cfg, out: Path) -> dict:
    train, _ = synthdata.split(_records(out))
    path = out / "reliability.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `reliability` first")
    table = ReliabilityTable.from_csv(path, cfg.downstream.epochs)
    clf, history, _, corrupted = ex.downstream_stage(cfg, _seed(cfg), train, table)
    (out / "classifier.json").write_text(clf.to_json())
    ex.write_json(out / "downstream_history.json", {"corrupted": int(corrupted.sum()), "epochs": history})
    return {"final_loss": history[-1]["loss"]}


def cmd_evaluate(cfg, out: Path) -> dict:
    _, test = synthdata.split(_records(out))
    path = out / "classifier.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `train-downstream` first")
    report = ex.evaluate_classifier(cfg, DownstreamClassifier.from_json(path.read_text()), test)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    report.write_per_class_csv(out / "per_class.csv", synthdata.class_histogram(test))
    return {k: getattr(report, k) for k in ex.SUMMARY_KEYS}


def cmd_run_all(cfg, out: Path) -> dict:
    summary = ex.run_experiment(cfg, out)
    return summary["aggregate"]


def cmd_sam_demo(cfg, out: Path, stage: int = 2, steps: int = 200, pairs: int = 2) -> dict:
    rng = ex.stream(_seed(cfg), ex.STREAM_INIT)
    data = [sam.synthetic_pair(rng) for _ in range(pairs)]
    res = sam.train_sam(rng, data, stage=stage, steps=steps)
    rows = []
    for k, ((F, M), S) in enumerate(zip(data, res.maps)):
        sam.write_pgm(out / f"sam_mask_{k}.pgm", M)
        sam.write_pgm(out / f"sam_attention_{k}.pgm", S)
        rows.append({"pair": k, "mean_inside": float(S[M > 0].mean()), "mean_outside": float(S[M == 0].mean())})
    result = {"stage": stage, "steps": steps, "loss_initial": res.losses[0], "loss_final": res.losses[-1],
              "loss_ratio": res.losses[-1] / res.losses[0], "maps": rows}
    ex.write_json(out / "sam_metrics.json", result)
    with open(out / "sam_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(res.losses))
    return {k: result[k] for k in ("loss_initial", "loss_final", "loss_ratio")}


COMMANDS = {
    "generate": (cmd_generate, "generate the synthetic benchmark"),
    "train-gcd": (cmd_train_gcd, "train encoder and clustering head; write checkpoints and pseudo-labels"),
    "reliability": (cmd_reliability, "score pseudo-label stability and assign buckets"),
    "train-downstream": (cmd_train_downstream, "train the downstream classifier on pseudo-labels"),
    "evaluate": (cmd_evaluate, "score the downstream classifier on the held-out split"),
    "run-all": (cmd_run_all, "the full pipeline for every configured seed"),
    "sam-demo": (cmd_sam_demo, "train the attention module on synthetic masks and write PGM maps"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcdlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="experiment config JSON")
        s.add_argument("--out-dir", help="output directory")
        s.add_argument("--seed", type=int, help="overrides the config's seed list")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-gcd", "run-all"):
            s.add_argument("--dump-headness", action="store_true",
                           help="write per-epoch (id, h, tau) rows to headness.csv")
        if name == "sam-demo":
            s.add_argument("--stage", type=int, default=2)
            s.add_argument("--steps", type=int, default=200)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command][0]
        if args.command == "sam-demo":
            result = fn(cfg, out, stage=args.stage, steps=args.steps)
        else:
            result = fn(cfg, out)
    except Exception as exc:
        err = {"status": "error", "command": args.command, "type": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "step", None) is not None:
            err["step"] = exc.step
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "out_dir": str(out), "result": result},
                     sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
