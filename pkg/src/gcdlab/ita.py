"""Instance-wise temperature assignment for contrastive learning.

Headness estimates how crowded an embedding's neighborhood is; crowded
(head-class) instances are mapped to high temperatures, sparse (tail)
instances to low ones. The per-instance losses below are the reference
forms; ``contrastive_batch`` is the vectorized path used for training and
is tested against them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


def top_count(n: int, top_percent: float) -> int:
    return max(1, int(np.floor(top_percent * n / 100.0)))


def headness_raw(z: np.ndarray, hat_z: np.ndarray, top_percent: float) -> float:
    """Share of exp-similarity mass held by the top-K% nearest queue entries."""
    hat_z = np.atleast_2d(hat_z)
    if hat_z.shape[0] == 0 or hat_z.size == 0:
        raise ValueError("headness needs at least one queue entry")
    sims = hat_z @ z
    k = top_count(sims.size, top_percent)
    # shift by the max for stability; it cancels in the ratio
    e = np.exp(sims - sims.max())
    top = np.sort(e)[::-1][:k]
    return float(top.sum() / e.sum())


def headness_raw_batch(Z, ids, queue_vectors, queue_ids, top_percent: float) -> np.ndarray:
    """Vectorized ``headness_raw`` with self-exclusion by instance id."""
    sims = Z @ queue_vectors.T
    own = np.asarray(ids)[:, None] == np.asarray(queue_ids)[None, :]
    sims = np.where(own, -np.inf, sims)
    n_hat = (~own).sum(axis=1)
    if np.any(n_hat == 0):
        raise ValueError("headness needs at least one queue entry")
    e = np.exp(sims - sims.max(axis=1, keepdims=True))
    e_sorted = -np.sort(-e, axis=1)
    out = np.empty(Z.shape[0])
    for i in range(Z.shape[0]):
        k = top_count(int(n_hat[i]), top_percent)
        out[i] = e_sorted[i, :k].sum() / e_sorted[i].sum()
    return out


def headness_update(prev: float | None, h_raw: float, rho: float) -> float:
    if prev is None:
        return float(h_raw)
    return float(rho * prev + (1.0 - rho) * h_raw)


def assign_temperatures(h_values, tau_min: float = 0.07, tau_max: float = 1.0,
                        low_pct: float = 10.0, high_pct: float = 90.0) -> np.ndarray:
    """Clamp headness to its [low, high] percentiles, then min-max map to [tau_min, tau_max]."""
    h = np.asarray(h_values, dtype=float)
    if h.size < 2:
        raise ValueError("temperature assignment needs at least two headness scores")
    if not 0 < tau_min <= tau_max:
        raise ValueError("need 0 < tau_min <= tau_max")
    h_low, h_high = np.percentile(h, [low_pct, high_pct])
    h_bar = np.clip(h, h_low, h_high)
    lo, hi = h_bar.min(), h_bar.max()
    if hi <= lo:
        return np.full(h.shape, tau_min)
    tau = (h_bar - lo) / (hi - lo) * (tau_max - tau_min) + tau_min
    return np.clip(tau, tau_min, tau_max)


@dataclass
class HeadTempState:
    rho: float = 0.9
    top_percent: float = 1.0
    tau_min: float = 0.07
    tau_max: float = 1.0
    clamp_low_pct: float = 10.0
    clamp_high_pct: float = 90.0
    h: dict[int, float] = field(default_factory=dict)
    tau: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 < self.top_percent <= 100.0:
            raise ValueError("top_percent must lie in (0, 100]")
        if not 0.0 < self.tau_min <= self.tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")

    def update(self, instance_id: int, h_raw: float) -> float:
        self.h[instance_id] = headness_update(self.h.get(instance_id), h_raw, self.rho)
        return self.h[instance_id]

    def refresh(self, ids, h_raw) -> np.ndarray:
        """One epoch of headness momentum updates followed by temperature reassignment."""
        for i, hr in zip(ids, h_raw):
            self.update(int(i), float(hr))
        all_ids = sorted(self.h)
        taus = assign_temperatures([self.h[i] for i in all_ids], self.tau_min, self.tau_max,
                                   self.clamp_low_pct, self.clamp_high_pct)
        self.tau = {i: float(t) for i, t in zip(all_ids, taus)}
        return np.array([self.tau[int(i)] for i in ids])

    def temperatures(self, ids) -> np.ndarray:
        return np.array([self.tau.get(int(i), self.tau_min) for i in ids])


def loss_unsup(z, z_pos, hat_z, tau: float):
    """Instance-discrimination loss with the positive included in the denominator."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    hat_z = np.atleast_2d(hat_z).reshape(-1, np.size(z))
    keys = np.vstack([z_pos[None, :], hat_z])
    logits = keys @ z / tau
    lse = logsumexp(logits)
    p = np.exp(logits - lse)
    loss = lse - logits[0]
    grad = (p @ keys - z_pos) / tau
    return float(loss), grad


def loss_sup(z, positives, hat_z, tau: float, z_self=None):
    """Mean over positives of single-positive log-softmax losses.

    The shared denominator runs over ``hat_z`` plus ``z_self`` when given.
    Returns ``None`` when there are no positives (the instance is skipped).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    positives = np.atleast_2d(positives).reshape(-1, np.size(z))
    if positives.shape[0] == 0:
        return None
    keys = np.atleast_2d(hat_z).reshape(-1, np.size(z))
    if z_self is not None:
        keys = np.vstack([z_self[None, :], keys])
    logits = keys @ z / tau
    lse = logsumexp(logits)
    p = np.exp(logits - lse)
    pos_logits = positives @ z / tau
    loss = lse - pos_logits.mean()
    grad = (p @ keys - positives.mean(axis=0)) / tau
    return float(loss), grad


def contrastive_batch(Z, ids, labels, tau, queue_vectors, queue_ids, queue_labels):
    """Both contrastive losses for a mini-batch against the queue.

    Each batch instance must already have its momentum embedding in the
    queue; the newest entry with its id is the positive and any older
    entries with that id are dropped. Supervised positives are queue
    entries sharing the instance's label (own entry included); unlabeled
    rows (label -1) get ``nan`` loss and zero gradient for that term.

    Returns (loss_u, grad_u, loss_s, grad_s), losses per row.
    """
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), ids.shape)
    B, N = Z.shape[0], queue_ids.size
    same_id = ids[:, None] == queue_ids[None, :]
    # newest entry per id is the last matching column
    last = N - 1 - np.argmax(same_id[:, ::-1], axis=1)
    if not np.all(same_id[np.arange(B), last]):
        raise ValueError("every batch instance needs its momentum embedding in the queue")
    stale = same_id.copy()
    stale[np.arange(B), last] = False
    logits = (Z @ queue_vectors.T) / tau[:, None]
    logits = np.where(stale, -np.inf, logits)
    lse = logsumexp(logits, axis=1)
    p = np.exp(logits - lse[:, None])
    mix = p @ queue_vectors
    loss_u = lse - logits[np.arange(B), last]
    grad_u = (mix - queue_vectors[last]) / tau[:, None]

    pos = (labels[:, None] >= 0) & (labels[:, None] == queue_labels[None, :]) & ~stale
    n_pos = pos.sum(axis=1)
    has = n_pos > 0
    safe = np.maximum(n_pos, 1)
    pos_logit_mean = np.where(pos, logits, 0.0).sum(axis=1) / safe
    loss_s = np.where(has, lse - pos_logit_mean, np.nan)
    pos_mean = (pos.astype(float) @ queue_vectors) / safe[:, None]
    grad_s = np.where(has[:, None], (mix - pos_mean) / tau[:, None], 0.0)
    return loss_u, grad_u, loss_s, grad_s
