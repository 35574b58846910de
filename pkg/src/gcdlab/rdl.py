"""Reliability-weighted training on pseudo-labels.

Stability measures how little an instance's cluster distribution moved
between intermediate checkpoints and the final model. Within each
pseudo-class, instances are ranked by stability into T_is buckets; a
bucket's weight stays at 1 until the training epoch passes the bucket
index and then decays along a quarter circle. Unreliable pseudo-labels
are thus used early and faded out late, without ever emptying a class.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

KL_FLOOR = 1e-8
_Q_EPS = 1e-12


def kl_divergence(p, q) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), _Q_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, _Q_EPS)) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def stability(q_final, q_intermediates, num_checkpoints: int | None = None) -> np.ndarray | float:
    """Sum over intermediate checkpoints of 1 / KL(q_final || q_t), KL floored at 1e-8.

    Works on a single distribution or row-wise on (n, C) arrays.
    """
    q_intermediates = list(q_intermediates)
    if num_checkpoints is not None and len(q_intermediates) != num_checkpoints - 1:
        raise ValueError(f"expected {num_checkpoints - 1} intermediate distributions, "
                         f"got {len(q_intermediates)}")
    s = sum(1.0 / np.maximum(kl_divergence(q_final, q_t), KL_FLOOR) for q_t in q_intermediates)
    return float(s) if np.ndim(s) == 0 else s


def bucket_of_rank(rank: int, n: int, num_buckets: int) -> int:
    """Bucket index for the ``rank``-th least stable of ``n`` instances.

    The rank is normalized by n-1 so the least stable lands in bucket 0
    and the most stable in the last bucket. A singleton is its class's most
    stable member and goes to the last bucket, so no class loses its only
    pseudo-label.
    """
    if n <= 1:
        return num_buckets - 1
    return min(rank * num_buckets // (n - 1), num_buckets - 1)


@dataclass
class ReliabilityTable:
    ids: np.ndarray
    pseudo_class: np.ndarray
    stability: np.ndarray
    rank_fraction: np.ndarray = field(default=None)
    bucket: np.ndarray = field(default=None)
    num_buckets: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "pseudo_class", "s_i", "t_bar_i"])
            for i, c, s, b in zip(self.ids, self.pseudo_class, self.stability, self.bucket):
                w.writerow([int(i), int(c), repr(float(s)), int(b)])

    @classmethod
    def from_csv(cls, path: str | Path, num_buckets: int) -> "ReliabilityTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        table = cls(np.array([int(r["id"]) for r in rows]),
                    np.array([int(r["pseudo_class"]) for r in rows]),
                    np.array([float(r["s_i"]) for r in rows]))
        table.bucket = np.array([int(r["t_bar_i"]) for r in rows])
        table.num_buckets = num_buckets
        return table


def rank_buckets(table: ReliabilityTable, num_buckets: int) -> ReliabilityTable:
    """Fill per-class rank fractions and buckets; ties in stability break by id."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be positive")
    n = table.ids.size
    frac = np.zeros(n)
    bucket = np.zeros(n, dtype=int)
    for c in np.unique(table.pseudo_class):
        idx = np.flatnonzero(table.pseudo_class == c)
        order = idx[np.lexsort((table.ids[idx], table.stability[idx]))]
        n_c = order.size
        for r, j in enumerate(order):
            frac[j] = r / n_c
            bucket[j] = bucket_of_rank(r, n_c, num_buckets)
    table.rank_fraction = frac
    table.bucket = bucket
    table.num_buckets = num_buckets
    return table


def kappa(t, t_bar, num_epochs: int):
    """Reliability weight for epoch ``t`` and bucket ``t_bar``."""
    x = np.maximum((np.asarray(t, dtype=float) - np.asarray(t_bar, dtype=float)) / num_epochs, 0.0)
    out = np.sqrt(np.maximum(1.0 - x ** 2, 0.0))
    return float(out) if out.ndim == 0 else out


def global_r_keep(stab: np.ndarray, r_percent: float) -> np.ndarray:
    """Keep mask for global filtering: drop the lowest r% stabilities overall (ties by position)."""
    n = stab.size
    n_drop = int(np.floor(r_percent / 100.0 * n))
    order = np.lexsort((np.arange(n), stab))
    keep = np.ones(n, dtype=bool)
    keep[order[:n_drop]] = False
    return keep


def classwise_r_keep(pseudo: np.ndarray, stab: np.ndarray, r_percent: float) -> np.ndarray:
    keep = np.ones(stab.size, dtype=bool)
    for c in np.unique(pseudo):
        idx = np.flatnonzero(pseudo == c)
        keep[idx] = global_r_keep(stab[idx], r_percent)
    return keep


def parse_reliability_arm(arm: str) -> tuple[str, float | None]:
    if arm in ("rdl", "none"):
        return arm, None
    if arm.startswith("global_r:"):
        r = float(arm.split(":", 1)[1])
        if not 0 <= r < 100:
            raise ValueError("global_r percent must lie in [0, 100)")
        return "global_r", r
    raise ValueError(f"unknown reliability arm {arm!r}")


def unlabeled_weights(arm: str, epoch: int, table: ReliabilityTable, num_epochs: int) -> np.ndarray:
    mode, r = parse_reliability_arm(arm)
    if mode == "rdl":
        return kappa(epoch, table.bucket, num_epochs)
    if mode == "global_r":
        return global_r_keep(table.stability, r).astype(float)
    return np.ones(table.ids.size)


def corrupt_pseudo_labels(pseudo: np.ndarray, stab: np.ndarray, num_classes: int, fraction: float,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Reassign the least stable ``fraction`` of each pseudo-class to a random other class.

    Returns (corrupted labels, boolean mask of the corrupted positions).
    """
    out = pseudo.copy()
    hit = ~classwise_r_keep(pseudo, stab, 100.0 * fraction)
    for j in np.flatnonzero(hit):
        choices = [c for c in range(num_classes) if c != pseudo[j]]
        out[j] = choices[rng.integers(len(choices))]
    return out, hit


@dataclass
class DownstreamClassifier:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, num_classes: int, in_dim: int) -> "DownstreamClassifier":
        return cls(np.zeros((num_classes, in_dim)), np.zeros(num_classes))

    def logits(self, X):
        return X @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def to_json(self) -> str:
        return json.dumps({"W": self.W.tolist(), "b": self.b.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DownstreamClassifier":
        d = json.loads(text)
        return cls(np.asarray(d["W"], dtype=float), np.asarray(d["b"], dtype=float))


@dataclass
class DownstreamConfig:
    epochs: int = 36
    batch_size: int = 64
    lr: float = 0.5
    weight_decay: float = 1e-4


def _weighted_ce_step(clf, X, y, w, lr, weight_decay, batch_size):
    logits = clf.logits(X)
    q = softmax(logits, axis=1)
    ce = -np.log(np.maximum(q[np.arange(y.size), y], _Q_EPS))
    loss = float(np.sum(w * ce) / batch_size)
    g = q.copy()
    g[np.arange(y.size), y] -= 1.0
    # same operation order as the unweighted path, so unit weights reproduce it bit for bit
    g *= w[:, None]
    g /= batch_size
    clf.W -= lr * (g.T @ X + weight_decay * clf.W)
    clf.b -= lr * g.sum(axis=0)
    return loss


class NonFiniteDownstreamLoss(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite downstream loss at step {step}")
        self.step = step


def train_downstream(X_lab, y_lab, X_unl, y_unl, num_classes: int, config: DownstreamConfig,
                     rng: np.random.Generator, weight_fn=None):
    """Mini-batch SGD on sum_l CE + sum_u w_u(t) CE over labeled and pseudo-labeled rows.

    ``weight_fn(epoch)`` returns the unlabeled weights for that epoch; when
    omitted every row has weight one and the plain unweighted path is used.
    Returns the classifier and per-epoch metrics.
    """
    X = np.vstack([X_lab, X_unl])
    y = np.concatenate([y_lab, y_unl]).astype(int)
    n_lab = len(y_lab)
    clf = DownstreamClassifier.init(num_classes, X.shape[1])
    metrics = []
    step = 0
    for epoch in range(config.epochs):
        if weight_fn is None:
            w = None
        else:
            w = np.concatenate([np.ones(n_lab), np.asarray(weight_fn(epoch), dtype=float)])
        perm = rng.permutation(y.size)
        losses = []
        for s in range(0, y.size, config.batch_size):
            b = perm[s:s + config.batch_size]
            wb = np.ones(b.size) if w is None else w[b]
            loss = _weighted_ce_step(clf, X[b], y[b], wb, config.lr, config.weight_decay, config.batch_size)
            if not np.isfinite(loss):
                raise NonFiniteDownstreamLoss(step)
            losses.append(loss)
            step += 1
        w_unl = np.ones(len(y_unl)) if w is None else w[n_lab:]
        mass = np.bincount(y_unl.astype(int), weights=w_unl, minlength=num_classes) if len(y_unl) else np.zeros(num_classes)
        metrics.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "unlabeled_weight_mass": [float(v) for v in mass],
                        "total_unlabeled_weight": float(w_unl.sum())})
    return clf, metrics


def train_downstream_unweighted(X_lab, y_lab, X_unl, y_unl, num_classes, config, rng):
    """Reference joint training with no per-row weights at all."""
    X = np.vstack([X_lab, X_unl])
    y = np.concatenate([y_lab, y_unl]).astype(int)
    clf = DownstreamClassifier.init(num_classes, X.shape[1])
    losses = []
    for _ in range(config.epochs):
        perm = rng.permutation(y.size)
        ep = []
        for s in range(0, y.size, config.batch_size):
            b = perm[s:s + config.batch_size]
            logits = clf.logits(X[b])
            q = softmax(logits, axis=1)
            ce = -np.log(np.maximum(q[np.arange(b.size), y[b]], _Q_EPS))
            ep.append(float(ce.sum() / config.batch_size))
            g = q
            g[np.arange(b.size), y[b]] -= 1.0
            g /= config.batch_size
            clf.W -= config.lr * (g.T @ X[b] + config.weight_decay * clf.W)
            clf.b -= config.lr * g.sum(axis=0)
        losses.append(float(np.mean(ep)))
    return clf, losses
