"""Embedding network, its momentum twin, and the momentum-embedding queue.

The online map is  z = normalize(W3 @ b(x) + b3)  with the backbone
b(x) = W2 @ softplus0(W1 @ x + b1) + b2, where softplus0 is softplus
shifted to pass through the origin. All operations are batched over rows;
gradients are written out by hand.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus0(x):
    # without the shift every hidden unit carries a log 2 offset that squeezes
    # all embeddings of a fresh network into a narrow cone
    return softplus(x) - np.log(2.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class EncoderParams:
    tensors: dict[str, np.ndarray]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int, embed_dim: int) -> "EncoderParams":
        def he(fan_out, fan_in):
            return rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)

        return cls({
            "W1": he(hidden, in_dim), "b1": np.zeros(hidden),
            "W2": he(embed_dim, hidden), "b2": np.zeros(embed_dim),
            "W3": he(embed_dim, embed_dim) / np.sqrt(2.0), "b3": np.zeros(embed_dim),
        })

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def in_dim(self) -> int:
        return self.tensors["W1"].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.tensors["W3"].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in PARAM_NAMES])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def forward(params: EncoderParams, X: np.ndarray, return_cache: bool = False):
    """Embed rows of ``X``; every output row has unit norm."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if not np.all(np.isfinite(X)):
        raise ValueError("encoder input contains non-finite values")
    t = params.tensors
    a1 = X @ t["W1"].T + t["b1"]
    h1 = softplus0(a1)
    b = h1 @ t["W2"].T + t["b2"]
    u = b @ t["W3"].T + t["b3"]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    z = u / norm
    if single:
        z = z[0]
    if return_cache:
        return z, (X, a1, h1, b, norm, z if not single else z[None, :])
    return z


def backward(params: EncoderParams, cache, dZ: np.ndarray):
    """Gradients of a scalar loss wrt every parameter and the input rows."""
    X, a1, h1, b, norm, z = cache
    dZ = np.atleast_2d(dZ)
    t = params.tensors
    # d normalize(u) = (I - z z^T) / |u|
    du = (dZ - z * np.sum(z * dZ, axis=1, keepdims=True)) / norm
    grads = {"W3": du.T @ b, "b3": du.sum(axis=0)}
    db = du @ t["W3"]
    grads["W2"] = db.T @ h1
    grads["b2"] = db.sum(axis=0)
    da1 = (db @ t["W2"]) * sigmoid(a1)
    grads["W1"] = da1.T @ X
    grads["b1"] = da1.sum(axis=0)
    dX = da1 @ t["W1"]
    return grads, dX


def input_jacobian(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """d z / d x for a single input vector, shape (embed_dim, in_dim)."""
    z, cache = forward(params, x, return_cache=True)
    rows = []
    for k in range(z.size):
        e = np.zeros((1, z.size))
        e[0, k] = 1.0
        rows.append(backward(params, cache, e)[1][0])
    return np.stack(rows)


@dataclass
class MomentumEncoder:
    params: EncoderParams
    momentum: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def momentum_update(online: EncoderParams, target: MomentumEncoder) -> MomentumEncoder:
    m = target.momentum
    new = {}
    for name, old in target.params.tensors.items():
        cur = online.tensors[name]
        if cur.shape != old.shape:
            raise ValueError(f"shape mismatch for {name}: {cur.shape} vs {old.shape}")
        new[name] = m * old + (1.0 - m) * cur
    return MomentumEncoder(EncoderParams(new), m)


@dataclass
class EmbeddingQueue:
    """Fixed-capacity FIFO of unit embeddings tagged with instance ids.

    Unlabeled entries carry label -1.
    """
    capacity: int
    dim: int
    vectors: np.ndarray = field(init=False)
    ids: np.ndarray = field(init=False)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self.vectors = np.zeros((0, self.dim))
        self.ids = np.zeros(0, dtype=int)
        self.labels = np.zeros(0, dtype=int)

    def __len__(self) -> int:
        return self.ids.size

    def push(self, ids, vectors, labels=None) -> "EmbeddingQueue":
        ids = np.atleast_1d(np.asarray(ids, dtype=int))
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        if labels is None:
            labels = np.full(ids.size, -1)
        labels = np.array([-1 if lab is None else lab for lab in np.atleast_1d(labels)], dtype=int)
        norms = np.linalg.norm(vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("queue entries must be unit-norm")
        self.vectors = np.concatenate([self.vectors, vectors])[-self.capacity:]
        self.ids = np.concatenate([self.ids, ids])[-self.capacity:]
        self.labels = np.concatenate([self.labels, labels])[-self.capacity:]
        return self

    def views(self, instance_id: int, label: int | None = None):
        """Return (Z-hat, Z-positive) for a query.

        Z-hat drops every entry carrying the query's id; Z-positive is the
        same-label subset of Z-hat and is empty for unlabeled queries.
        """
        keep = self.ids != instance_id
        hat = self.vectors[keep]
        if label is None or label < 0:
            pos = np.zeros((0, self.dim))
        else:
            pos = self.vectors[keep & (self.labels == label)]
        return hat, pos


def queue_push(queue: EmbeddingQueue, instance_id, z, label=None) -> EmbeddingQueue:
    return queue.push([instance_id], [z], [label])


def queue_views(queue: EmbeddingQueue, instance_id: int, label: int | None = None):
    return queue.views(instance_id, label)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """JSON checkpoint: a shape manifest plus flat value arrays."""
    payload = {
        "meta": meta or {},
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "tensors": {k: np.asarray(v).ravel().tolist() for k, v in tensors.items()},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    tensors = {k: np.asarray(v, dtype=float).reshape(payload["shapes"][k])
               for k, v in payload["tensors"].items()}
    return tensors, payload.get("meta", {})
