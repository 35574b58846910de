"""Experiment configuration and the seeded end-to-end pipeline.

A run goes generate -> GCD training -> stability and buckets -> weighted
downstream training -> matched evaluation on the held-out split, once per
seed. Every source of randomness draws from its own stream so that
switching an arm only changes what that arm controls.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cluster, rdl, synthdata
from .cluster import Checkpoint, ClusterHead, GcdConfig, GcdResult
from .encoder import EncoderParams, forward, load_checkpoint, save_checkpoint
from .evaluation import MetricsReport, match_and_score
from .rdl import DownstreamConfig, ReliabilityTable

log = logging.getLogger(__name__)

# stream ids for np.random.default_rng([seed, stream]); data uses the seed directly
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_DOWNSTREAM = 3
STREAM_CORRUPT = 4

SUMMARY_KEYS = ("acc_all", "acc_known", "acc_novel")


def stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose])


def ts_schedule_arm(epoch: int, epochs: int, tau_min: float, tau_max: float) -> float:
    """Uniform temperature that follows a cosine with period epochs / 2."""
    if not 0 <= epoch < epochs:
        raise ValueError("epoch must lie in [0, epochs)")
    return float(cluster.ts_schedule(epoch, epochs, tau_min, tau_max))


def _build(cls, data: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    dataset: synthdata.DatasetSpec = field(default_factory=lambda: synthdata.DatasetSpec(test_fraction=0.2))
    gcd: GcdConfig = field(default_factory=GcdConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    reliability_arm: str = "rdl"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs/default"
    # fraction of each pseudo-class (least stable first) relabeled at random
    corruption_fraction: float = 0.0
    fix_known_matching: bool = False
    dump_headness: bool = False

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        g = self.gcd
        cluster.parse_temperature_arm(g.temperature_arm)
        rdl.parse_reliability_arm(self.reliability_arm)
        checks = [
            (0.0 <= g.rho <= 1.0, "gcd.rho must lie in [0, 1]"),
            (0.0 < g.top_percent <= 100.0, "gcd.top_percent must lie in (0, 100]"),
            (0.0 < g.tau_min <= g.tau_max, "need 0 < gcd.tau_min <= gcd.tau_max"),
            (0.0 <= g.clamp_low_pct < g.clamp_high_pct <= 100.0, "need 0 <= clamp_low_pct < clamp_high_pct <= 100"),
            (0.0 <= g.lam <= 1.0, "gcd.lam must lie in [0, 1]"),
            (g.num_checkpoints >= 2, "gcd.num_checkpoints must be at least 2"),
            (g.epochs >= g.num_checkpoints, "gcd.epochs must be at least gcd.num_checkpoints"),
            (g.hidden >= 1 and g.embed_dim >= 2, "encoder dims must be positive"),
            (g.batch_size >= 1 and g.lr > 0 and g.head_temperature > 0, "batch_size, lr and head_temperature must be positive"),
            (self.downstream.epochs >= 1, "downstream.epochs must be positive"),
            (self.downstream.batch_size >= 1 and self.downstream.lr > 0, "downstream batch_size and lr must be positive"),
            (len(self.seeds) >= 1, "at least one seed is required"),
            (0.0 <= self.corruption_fraction < 1.0, "corruption_fraction must lie in [0, 1)"),
            (self.dataset.test_fraction > 0.0, "dataset.test_fraction must be positive for evaluation"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        nested = {
            "dataset": (synthdata.DatasetSpec, {"test_fraction": 0.2}),
            "gcd": (GcdConfig, {}),
            "downstream": (DownstreamConfig, {}),
        }
        kwargs = {}
        for key, (sub, defaults) in nested.items():
            if key in data:
                kwargs[key] = _build(sub, {**defaults, **data.pop(key)}, key)
        top = _build(cls, data, "config")
        cfg = replace(top, **kwargs)
        cfg.seeds = [int(s) for s in cfg.seeds]
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


# ---- stages ---------------------------------------------------------------

def make_dataset(config: ExperimentConfig, seed: int):
    spec = replace(config.dataset, seed=int(seed))
    spec.validate()
    return spec, synthdata.generate(spec)


def run_gcd(config: ExperimentConfig, seed: int, train) -> GcdResult:
    return cluster.train_gcd(train, config.dataset.num_classes, config.gcd,
                             stream(seed, STREAM_INIT), stream(seed, STREAM_BATCH),
                             headness_dump=config.dump_headness)


def reliability_from_checkpoints(checkpoints: list[Checkpoint], ids, X_unl,
                                 num_buckets: int, num_checkpoints: int) -> tuple[ReliabilityTable, np.ndarray]:
    """Stability of each unlabeled instance's pseudo-label, ranked into buckets.

    The last checkpoint is the final model; the earlier ones are the
    intermediates. Returns the table and the final q.
    """
    if len(checkpoints) != num_checkpoints:
        raise ValueError(f"expected {num_checkpoints} checkpoints, got {len(checkpoints)}")
    qs = [cluster.predict_proba(c.encoder, c.head, X_unl) for c in checkpoints]
    q_final = qs[-1]
    stab = rdl.stability(q_final, qs[:-1], num_checkpoints)
    table = ReliabilityTable(np.asarray(ids), np.argmax(q_final, axis=1), np.atleast_1d(stab))
    return rdl.rank_buckets(table, num_buckets), q_final


def downstream_stage(config: ExperimentConfig, seed: int, train, table: ReliabilityTable):
    """Train f_s on labeled plus (optionally corrupted) pseudo-labeled rows."""
    by_id = {r.id: r for r in train}
    lab = [r for r in train if r.labeled]
    X_lab = synthdata.stack(lab, "base_feature") if lab else np.zeros((0, config.dataset.ambient_dim))
    y_lab = np.array([r.label for r in lab], dtype=int)
    X_unl = np.stack([by_id[int(i)].base_feature for i in table.ids])
    y_unl = table.pseudo_class.astype(int)
    corrupted = np.zeros(y_unl.size, dtype=bool)
    if config.corruption_fraction > 0:
        y_unl, corrupted = rdl.corrupt_pseudo_labels(y_unl, table.stability, config.dataset.num_classes,
                                                     config.corruption_fraction, stream(seed, STREAM_CORRUPT))
    T_is = config.downstream.epochs
    mode, _ = rdl.parse_reliability_arm(config.reliability_arm)
    weight_fn = None if mode == "none" else (
        lambda epoch: rdl.unlabeled_weights(config.reliability_arm, epoch, table, T_is))
    clf, history = rdl.train_downstream(X_lab, y_lab, X_unl, y_unl, config.dataset.num_classes,
                                        config.downstream, stream(seed, STREAM_DOWNSTREAM), weight_fn)
    return clf, history, y_unl, corrupted


def evaluate_classifier(config: ExperimentConfig, clf, records) -> MetricsReport:
    X = synthdata.stack(records, "base_feature")
    truth = np.array([r.true_class for r in records])
    C = config.dataset.num_classes
    return match_and_score(clf.predict(X), truth, config.dataset.known_classes, C, C,
                           fix_known=config.fix_known_matching)


def pca_2d(Z: np.ndarray) -> np.ndarray:
    """Projection on the top two principal axes, signs fixed for reproducibility."""
    Zc = Z - Z.mean(axis=0)
    _, _, Vt = np.linalg.svd(Zc, full_matrices=False)
    axes = Vt[:2]
    flip = np.sign(axes[np.arange(axes.shape[0]), np.argmax(np.abs(axes), axis=1)])
    return Zc @ (axes * flip[:, None]).T


def kappa_histogram(table: ReliabilityTable, num_epochs: int, bins: int = 10) -> dict:
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {"num_epochs": num_epochs, "bin_edges": edges.tolist(), "epochs": []}
    for t in range(num_epochs):
        k = np.atleast_1d(rdl.kappa(t, table.bucket, num_epochs))
        counts, _ = np.histogram(k, bins=edges)
        out["epochs"].append({"epoch": t, "counts": counts.tolist(), "total_weight": float(k.sum())})
    return out


# ---- file formats used by the CLI stages ---------------------------------

def save_gcd_checkpoint(path, ckpt: Checkpoint) -> None:
    save_checkpoint(path, ckpt.tensors(), {"epoch": ckpt.epoch,
                                           "softmax_temperature": ckpt.head.softmax_temperature})


def load_gcd_checkpoint(path) -> Checkpoint:
    tensors, meta = load_checkpoint(path)
    protos = tensors.pop("prototypes")
    return Checkpoint(int(meta["epoch"]), EncoderParams(tensors),
                      ClusterHead(protos, float(meta["softmax_temperature"])))


def write_pseudo_labels(path, ids, labels, max_q) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "pseudo_class", "max_q"])
        for i, c, q in zip(ids, labels, max_q):
            w.writerow([int(i), int(c), repr(float(q))])


def write_headness(path, dumps: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "id", "h", "tau"])
        for d in dumps:
            for i, h, t in zip(d["ids"], d["h"], d["tau"]):
                w.writerow([d["epoch"], int(i), repr(float(h)), repr(float(t))])


def write_projection(path, ids, classes, P) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class", "pc1", "pc2"])
        for i, c, (a, b) in zip(ids, classes, P):
            w.writerow([int(i), int(c), f"{a:.6f}", f"{b:.6f}"])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---- full pipeline --------------------------------------------------------

def _summary(report: MetricsReport) -> dict:
    return {k: getattr(report, k) for k in SUMMARY_KEYS}


def run_seed(config: ExperimentConfig, seed: int, seed_dir: Path | None = None) -> dict:
    spec, records = make_dataset(config, seed)
    train, test = synthdata.split(records)
    res = run_gcd(config, seed, train)
    by_id = {r.id: r for r in train}
    X_unl = np.stack([by_id[int(i)].base_feature for i in res.pseudo_ids])
    table, _ = reliability_from_checkpoints(res.checkpoints, res.pseudo_ids, X_unl,
                                            config.downstream.epochs, config.gcd.num_checkpoints)
    clf, history, y_used, corrupted = downstream_stage(config, seed, train, table)
    test_report = evaluate_classifier(config, clf, test)
    truth_unl = np.array([by_id[int(i)].true_class for i in res.pseudo_ids])
    C = spec.num_classes
    pseudo_report = match_and_score(res.pseudo_labels, truth_unl, spec.known_classes, C, C,
                                    fix_known=config.fix_known_matching)
    out = {
        "seed": int(seed),
        "status": "ok",
        "test": test_report.to_dict(),
        "pseudo_labels": _summary(pseudo_report),
        "corrupted": int(corrupted.sum()),
        "gcd_history": res.history,
        "downstream_history": history,
    }
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
        write_json(seed_dir / "metrics.json", out)
        test_report.write_per_class_csv(seed_dir / "per_class.csv", synthdata.class_histogram(test))
        write_pseudo_labels(seed_dir / "pseudo_labels.csv", res.pseudo_ids, res.pseudo_labels, res.pseudo_max_q)
        table.to_csv(seed_dir / "reliability.csv")
        write_json(seed_dir / "kappa_histogram.json", kappa_histogram(table, config.downstream.epochs))
        all_recs = train + test
        Z = forward(res.encoder, synthdata.stack(all_recs, "base_feature"))
        write_projection(seed_dir / "projection.csv", [r.id for r in all_recs],
                         [r.true_class for r in all_recs], pca_2d(Z))
        if res.tau_dumps:
            write_headness(seed_dir / "headness.csv", res.tau_dumps)
    return out


def aggregate(per_seed: list[dict]) -> dict:
    """Median and IQR across successful seeds for test and pseudo-label accuracy."""
    ok = [r for r in per_seed if r.get("status") == "ok"]
    agg = {"num_ok": len(ok), "num_failed": len(per_seed) - len(ok)}
    for part in ("test", "pseudo_labels"):
        agg[part] = {}
        for k in SUMMARY_KEYS:
            vals = np.array([r[part][k] for r in ok if r[part][k] is not None], dtype=float)
            if vals.size == 0:
                agg[part][k] = None
                continue
            q25, q50, q75 = np.percentile(vals, [25, 50, 75])
            agg[part][k] = {"median": float(q50), "q25": float(q25), "q75": float(q75),
                            "iqr": float(q75 - q25), "values": vals.tolist()}
    return agg


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None, write: bool = True) -> dict:
    """Run every seed, recording failures per seed, and write the metrics."""
    config.validate()
    root = Path(out_dir or config.out_dir)
    per_seed = []
    for seed in config.seeds:
        try:
            per_seed.append(run_seed(config, seed, root / f"seed_{seed}" if write else None))
        except Exception as exc:  # a failed seed must not abort the others
            log.warning("seed %s failed: %s", seed, exc)
            per_seed.append({"seed": int(seed), "status": "error",
                             "error": {"type": type(exc).__name__, "message": str(exc),
                                       "step": getattr(exc, "step", None)}})
    cfg = config.to_dict()
    cfg.pop("out_dir")  # keep the metrics bytes independent of where they are written
    summary = {"config": cfg, "per_seed": per_seed, "aggregate": aggregate(per_seed)}
    if write:
        root.mkdir(parents=True, exist_ok=True)
        write_json(root / "metrics.json", summary)
    return summary
