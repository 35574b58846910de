"""Parametric clustering head and the joint GCD training loop.

Cluster probabilities are a softmax over cosine similarities between an
embedding and C unit-norm prototypes. Unlabeled structure is learned by
pulling q toward a sharpened, frequency-normalized target; labeled
instances add cross-entropy on the same head, so known classes occupy the
prototype slots matching their class ids.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from . import ita
from .encoder import EmbeddingQueue, EncoderParams, MomentumEncoder, backward, forward, momentum_update

log = logging.getLogger(__name__)

KL_EPS = 1e-12


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class ClusterHead:
    prototypes: np.ndarray
    softmax_temperature: float = 0.1

    @classmethod
    def init(cls, rng: np.random.Generator, num_clusters: int, embed_dim: int,
             softmax_temperature: float = 0.1) -> "ClusterHead":
        P = rng.standard_normal((num_clusters, embed_dim))
        return cls(P / np.linalg.norm(P, axis=1, keepdims=True), softmax_temperature)

    @property
    def num_clusters(self) -> int:
        return self.prototypes.shape[0]

    def copy(self) -> "ClusterHead":
        return ClusterHead(self.prototypes.copy(), self.softmax_temperature)

    def logits(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.prototypes.T / self.softmax_temperature

    def renormalize(self) -> None:
        self.prototypes /= np.linalg.norm(self.prototypes, axis=1, keepdims=True)


def soft_assign(head: ClusterHead, z: np.ndarray) -> np.ndarray:
    return softmax(head.logits(z), axis=-1)


def kmeans_prototypes(Z: np.ndarray, labels: np.ndarray, num_clusters: int,
                      rng: np.random.Generator, iters: int = 20) -> np.ndarray:
    """Spherical k-means centres with labeled classes pinned to their own slots.

    Slot c for every labeled class c starts (and stays) at the normalized
    mean of its labeled embeddings; the free slots are D^2-seeded from the
    unlabeled rows and refined by Lloyd steps.
    """
    dim = Z.shape[1]
    known = sorted(int(c) for c in np.unique(labels[labels >= 0]))
    P = np.zeros((num_clusters, dim))
    for c in known:
        m = Z[labels == c].mean(axis=0)
        P[c] = m / np.linalg.norm(m)
    free = [c for c in range(num_clusters) if c not in known]
    X = Z[labels < 0] if np.any(labels < 0) else Z
    chosen = [P[c] for c in known]
    for c in free:
        if chosen:
            d2 = np.maximum(1.0 - np.max(X @ np.array(chosen).T, axis=1), 0.0) ** 2
            pr = d2 / d2.sum() if d2.sum() > 0 else np.full(len(X), 1.0 / len(X))
        else:
            pr = np.full(len(X), 1.0 / len(X))
        P[c] = X[rng.choice(len(X), p=pr)]
        chosen.append(P[c])
    for _ in range(iters):
        assign = np.argmax(X @ P.T, axis=1)
        for c in free:
            members = X[assign == c]
            if len(members):
                m = members.sum(axis=0)
                P[c] = m / np.linalg.norm(m)
    return P


def target_distribution(Q: np.ndarray) -> np.ndarray:
    """Square-and-renormalize target; empty clusters get zero mass."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    f = Q.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(f > 0, Q ** 2 / f, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def loss_kl(p_bar: np.ndarray, q: np.ndarray):
    """KL(p_bar || q) and its gradient wrt the logits producing q (p_bar held fixed)."""
    p_bar = np.asarray(p_bar, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0) & (p_bar > 0)):
        warnings.warn("zero cluster probability under nonzero target; clamped", RuntimeWarning)
    q_safe = np.maximum(q, KL_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_bar > 0, p_bar * (np.log(p_bar) - np.log(q_safe)), 0.0)
    loss = terms.sum(axis=-1)
    grad = q * p_bar.sum(axis=-1, keepdims=True) - p_bar
    return loss, grad


def loss_ce(label, q: np.ndarray):
    """Cross-entropy of a hard label; gradient wrt logits is q - onehot."""
    q = np.asarray(q, dtype=float)
    label = np.asarray(label)
    C = q.shape[-1]
    if np.any(label < 0) or np.any(label >= C):
        raise ValueError("label index out of range")
    y = np.eye(C)[label]
    loss = -np.log(np.maximum(np.sum(y * q, axis=-1), KL_EPS))
    return loss, q - y


def combine_gcd_losses(l_rep_u, l_rep_s, l_cls_u, l_cls_s, lam: float, l_att: float = 0.0) -> float:
    return l_att + (1 - lam) * l_rep_u + lam * l_rep_s + (1 - lam) * l_cls_u + lam * l_cls_s


@dataclass
class GcdConfig:
    hidden: int = 128
    embed_dim: int = 32
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    encoder_momentum: float = 0.99
    queue_capacity: int | None = None
    head_temperature: float = 0.03
    lam: float = 0.35
    temperature_arm: str = "ita"
    tau_min: float = 0.07
    tau_max: float = 1.0
    rho: float = 0.9
    top_percent: float = 1.0
    clamp_low_pct: float = 10.0
    clamp_high_pct: float = 90.0
    num_checkpoints: int = 3
    head_init: str = "kmeans"
    # "batch": sharpen each mini-batch's own Q; "epoch": sharpen the full-data Q once per epoch
    target_scope: str = "batch"
    # scales both clustering terms; 0 leaves a purely contrastive objective
    cluster_weight: float = 1.0

    def capacity(self) -> int:
        cap = self.queue_capacity or 4 * self.batch_size
        return max(cap, 2 * self.batch_size)


@dataclass
class Checkpoint:
    epoch: int
    encoder: EncoderParams
    head: ClusterHead

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.tensors)
        out["prototypes"] = self.head.prototypes
        return out


@dataclass
class GcdResult:
    encoder: EncoderParams
    head: ClusterHead
    pseudo_ids: np.ndarray
    pseudo_labels: np.ndarray
    pseudo_max_q: np.ndarray
    checkpoints: list[Checkpoint]
    history: list[dict] = field(default_factory=list)
    tau_dumps: list[dict] = field(default_factory=list)


def checkpoint_epochs(epochs: int, count: int) -> list[int]:
    if epochs <= 0:
        return []
    return sorted({-(-k * epochs // count) for k in range(1, count + 1)})


def parse_temperature_arm(arm: str) -> tuple[str, float | None]:
    if arm == "ita":
        return "ita", None
    if arm in ("ts", "ts_schedule"):
        return "ts", None
    if arm.startswith("fixed_tau:"):
        value = float(arm.split(":", 1)[1])
        if value <= 0:
            raise ValueError("fixed temperature must be positive")
        return "fixed", value
    raise ValueError(f"unknown temperature arm {arm!r}")


def ts_schedule(epoch: int, epochs: int, tau_min: float, tau_max: float) -> float:
    """Cosine temperature schedule with period epochs/2 (starts at tau_max)."""
    period = epochs / 2.0
    return tau_min + 0.5 * (tau_max - tau_min) * (1.0 + np.cos(2.0 * np.pi * epoch / period))


def predict_proba(encoder: EncoderParams, head: ClusterHead, X: np.ndarray) -> np.ndarray:
    return soft_assign(head, forward(encoder, X))


def train_gcd(train_records, num_classes: int, config: GcdConfig, rng_init: np.random.Generator,
              rng_batch: np.random.Generator, headness_dump: bool = False) -> GcdResult:
    """Joint contrastive + clustering training on the training split.

    ``train_records`` are InstanceRecords; labeled ones supervise their
    class-id slot. Returns the final model, hard pseudo-labels for the
    unlabeled instances and the evenly spaced checkpoints.
    """
    mode, fixed_tau = parse_temperature_arm(config.temperature_arm)
    ids = np.array([r.id for r in train_records])
    labels = np.array([r.label if r.labeled else -1 for r in train_records])
    Va = np.stack([r.view_a for r in train_records])
    Vb = np.stack([r.view_b for r in train_records])
    base = np.stack([r.base_feature for r in train_records])
    n, lam = ids.size, config.lam

    online = EncoderParams.init(rng_init, Va.shape[1], config.hidden, config.embed_dim)
    target = MomentumEncoder(online.copy(), config.encoder_momentum)
    head = ClusterHead.init(rng_init, num_classes, config.embed_dim, config.head_temperature)
    if config.head_init == "kmeans":
        head.prototypes = kmeans_prototypes(forward(online, base), labels, num_classes, rng_init)
    elif config.head_init != "random":
        raise ValueError(f"unknown head_init {config.head_init!r}")
    cap = config.capacity()
    queue = EmbeddingQueue(cap, config.embed_dim)
    prime = rng_batch.permutation(n)[:cap]
    queue.push(ids[prime], forward(target.params, Vb[prime]), labels[prime])

    state = ita.HeadTempState(config.rho, config.top_percent, config.tau_min, config.tau_max,
                              config.clamp_low_pct, config.clamp_high_pct)
    bs = config.batch_size
    steps_per_epoch = -(-n // bs)
    total_steps = max(1, config.epochs * steps_per_epoch)
    save_at = set(checkpoint_epochs(config.epochs, config.num_checkpoints))
    checkpoints: list[Checkpoint] = []
    history: list[dict] = []
    tau_dumps: list[dict] = []
    step = 0

    for epoch in range(config.epochs):
        if mode == "ita":
            z_all = forward(online, Va)
            h_raw = ita.headness_raw_batch(z_all, ids, queue.vectors, queue.ids, config.top_percent)
            tau_all = state.refresh(ids, h_raw)
            if headness_dump:
                tau_dumps.append({"epoch": epoch, "ids": ids.copy(),
                                  "h": np.array([state.h[int(i)] for i in ids]), "tau": tau_all.copy()})
        elif mode == "ts":
            tau_all = np.full(n, ts_schedule(epoch, config.epochs, config.tau_min, config.tau_max))
        else:
            tau_all = np.full(n, fixed_tau)

        if config.target_scope == "epoch":
            p_bar_all = target_distribution(soft_assign(head, forward(online, Va)))
        elif config.target_scope != "batch":
            raise ValueError(f"unknown target_scope {config.target_scope!r}")
        perm = rng_batch.permutation(n)
        epoch_losses = []
        for s in range(steps_per_epoch):
            b = perm[s * bs:(s + 1) * bs]
            lr = 0.5 * config.lr * (1.0 + np.cos(np.pi * step / total_steps))
            z, cache = forward(online, Va[b], return_cache=True)
            queue.push(ids[b], forward(target.params, Vb[b]), labels[b])
            lu, gu, ls, gs = ita.contrastive_batch(z, ids[b], labels[b], tau_all[b],
                                                   queue.vectors, queue.ids, queue.labels)
            B = b.size
            q = soft_assign(head, z)
            p_bar = target_distribution(q) if config.target_scope == "batch" else p_bar_all[b]
            kl, g_kl = loss_kl(p_bar, q)
            lab = labels[b] >= 0
            has_pos = ~np.isnan(ls)
            cw = config.cluster_weight
            dlogits = cw * (1 - lam) * g_kl / B
            l_rep_s = l_cls_s = 0.0
            dz = (1 - lam) * gu / B
            if has_pos.any():
                l_rep_s = float(np.mean(ls[has_pos]))
                dz = dz + lam * gs / has_pos.sum()
            if lab.any():
                ce, g_ce = loss_ce(labels[b][lab], q[lab])
                l_cls_s = float(np.mean(ce))
                dlogits[lab] += cw * lam * g_ce / lab.sum()
            total = combine_gcd_losses(float(np.mean(lu)), l_rep_s, cw * float(np.mean(kl)), cw * l_cls_s, lam)
            if not np.isfinite(total):
                raise NonFiniteLossError(step)
            T = head.softmax_temperature
            dz = dz + dlogits @ head.prototypes / T
            dP = dlogits.T @ z / T
            grads, _ = backward(online, cache, dz)
            for name, g in grads.items():
                online.tensors[name] -= lr * g
            head.prototypes -= lr * dP
            head.renormalize()
            if not online.all_finite():
                raise NonFiniteLossError(step, "parameters")
            target = momentum_update(online, target)
            epoch_losses.append(total)
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                        "tau_mean": float(np.mean(tau_all))})
        log.debug("epoch %d loss %.4f", epoch, history[-1]["loss"])
        if epoch + 1 in save_at:
            checkpoints.append(Checkpoint(epoch + 1, online.copy(), head.copy()))

    unl = labels < 0
    q_unl = predict_proba(online, head, base[unl]) if unl.any() else np.zeros((0, num_classes))
    return GcdResult(
        encoder=online, head=head,
        pseudo_ids=ids[unl],
        pseudo_labels=np.argmax(q_unl, axis=1) if unl.any() else np.zeros(0, dtype=int),
        pseudo_max_q=q_unl.max(axis=1) if unl.any() else np.zeros(0),
        checkpoints=checkpoints, history=history, tau_dumps=tau_dumps,
    )
