"""Soft attention over feature maps via pooled pairwise affinity.

A feature map F (D x H x W) is average-pooled at M output sizes, each
pooled map is embedded to depth d, and the concatenated pooled features
are correlated with an embedding of F to give the affinity A. A is
stacked with a channel-mean map G and squeezed into a single gate S that
multiplies every channel of F.

Every embedding is a 1x1 projection followed by per-channel
standardization over spatial positions with learnable scale and shift,
and a ReLU (omitted for the final squeeze). Projections carry no bias,
since the standardization would cancel it.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

NORM_EPS = 1e-5
STAGE_BASE_SIZES = (18, 12, 8)


def stage_weight(stg: int) -> tuple[float, int, int, int]:
    """Boundary weight and pool sizes for backbone stage ``stg`` in 1..4."""
    if stg not in (1, 2, 3, 4):
        raise ValueError("stage index must be in 1..4")
    w = min(0.25 * stg, 1.0)
    # built-in round is round-half-to-even
    s1, s2, s3 = (round(b / 2 ** (stg - 1)) for b in STAGE_BASE_SIZES)
    return w, s1, s2, s3


def pool_matrix(H: int, W: int, s: int) -> np.ndarray:
    """(H*W, s*s) matrix implementing adaptive average pooling to s x s."""
    if s > H or s > W:
        raise ValueError(f"pool size {s} exceeds spatial dims {H}x{W}")
    out = np.zeros((H * W, s * s))
    for a in range(s):
        r0, r1 = (a * H) // s, -(-((a + 1) * H) // s)
        for b in range(s):
            c0, c1 = (b * W) // s, -(-((b + 1) * W) // s)
            cells = [r * W + c for r in range(r0, r1) for c in range(c0, c1)]
            out[cells, a * s + b] = 1.0 / len(cells)
    return out


def _embed_names(M: int) -> list[str]:
    return [f"eta{i}" for i in range(M)] + ["phi", "psi"]


@dataclass
class SamParams:
    tensors: dict[str, np.ndarray]
    pool_sizes: tuple[int, ...]

    @classmethod
    def init(cls, rng: np.random.Generator, D: int, pool_sizes=(2, 2, 1), d: int | None = None) -> "SamParams":
        d = d if d is not None else max(1, D // 8)
        t = {}
        for name in _embed_names(len(pool_sizes)):
            t[f"{name}.W"] = rng.standard_normal((d, D)) / np.sqrt(D)
            t[f"{name}.gamma"] = np.ones(d)
            t[f"{name}.beta"] = np.zeros(d)
        L = sum(s * s for s in pool_sizes)
        t["nu.W"] = rng.standard_normal((1, L + 1)) / np.sqrt(L + 1)
        t["nu.gamma"] = np.ones(1)
        t["nu.beta"] = np.zeros(1)
        return cls(t, tuple(int(s) for s in pool_sizes))

    def copy(self) -> "SamParams":
        return SamParams({k: v.copy() for k, v in self.tensors.items()}, self.pool_sizes)

    @property
    def depth(self) -> int:
        return self.tensors["phi.W"].shape[0]


def _standardize(e):
    mu = e.mean(axis=1, keepdims=True)
    sd = np.sqrt(e.var(axis=1, keepdims=True) + NORM_EPS)
    return (e - mu) / sd, sd


def _standardize_backward(dn, n, sd):
    return (dn - dn.mean(axis=1, keepdims=True) - n * (dn * n).mean(axis=1, keepdims=True)) / sd


def _embed(t, name, X, relu=True):
    e = t[f"{name}.W"] @ X
    n, sd = _standardize(e)
    y = t[f"{name}.gamma"][:, None] * n + t[f"{name}.beta"][:, None]
    out = np.maximum(y, 0.0) if relu else y
    return out, (X, n, sd, y, relu)


def _embed_backward(t, name, cache, dout, grads):
    X, n, sd, y, relu = cache
    dy = dout * (y > 0) if relu else dout
    grads[f"{name}.gamma"] = grads.get(f"{name}.gamma", 0) + (dy * n).sum(axis=1)
    grads[f"{name}.beta"] = grads.get(f"{name}.beta", 0) + dy.sum(axis=1)
    dn = dy * t[f"{name}.gamma"][:, None]
    de = _standardize_backward(dn, n, sd)
    grads[f"{name}.W"] = grads.get(f"{name}.W", 0) + de @ X.T
    return t[f"{name}.W"].T @ de


def sam_forward(params: SamParams, F: np.ndarray, return_cache: bool = False):
    """Attention gate S (1 x H x W) and gated features O = S * F (D x H x W)."""
    F = np.asarray(F, dtype=float)
    D, H, W = F.shape
    if max(params.pool_sizes) > min(H, W):
        raise ValueError(f"pool size {max(params.pool_sizes)} exceeds spatial dims {H}x{W}")
    t = params.tensors
    F2 = F.reshape(D, H * W)
    pools, pool_caches = [], []
    for i, s in enumerate(params.pool_sizes):
        Pm = pool_matrix(H, W, s)
        Pi, c = _embed(t, f"eta{i}", F2 @ Pm)
        pools.append(Pi)
        pool_caches.append((Pm, c))
    P_bar = np.concatenate(pools, axis=1)           # d x L
    phi, phi_c = _embed(t, "phi", F2)               # d x N
    A = P_bar.T @ phi                               # L x N
    psi, psi_c = _embed(t, "psi", F2)
    G = psi.mean(axis=0, keepdims=True)             # 1 x N
    AG = np.vstack([A, G])
    logit, nu_c = _embed(t, "nu", AG, relu=False)
    S2 = 1.0 / (1.0 + np.exp(-logit))
    O2 = S2 * F2
    S, O = S2.reshape(1, H, W), O2.reshape(D, H, W)
    if return_cache:
        cache = dict(F2=F2, shape=(D, H, W), pool_caches=pool_caches, pools=pools, P_bar=P_bar,
                     phi=phi, phi_c=phi_c, psi_c=psi_c, nu_c=nu_c, S2=S2, A=A)
        return S, O, cache
    return S, O


def sam_backward(params: SamParams, cache, dS=None, dO=None):
    """Gradients wrt all SamParams and F given upstream dS and/or dO."""
    t = params.tensors
    D, H, W = cache["shape"]
    F2, S2 = cache["F2"], cache["S2"]
    dS2 = np.zeros_like(S2) if dS is None else np.asarray(dS, dtype=float).reshape(1, H * W).copy()
    dF2 = np.zeros_like(F2)
    if dO is not None:
        dO2 = np.asarray(dO, dtype=float).reshape(D, H * W)
        dS2 += (dO2 * F2).sum(axis=0, keepdims=True)
        dF2 += dO2 * S2
    grads: dict[str, np.ndarray] = {}
    dlogit = dS2 * S2 * (1.0 - S2)
    dAG = _embed_backward(t, "nu", cache["nu_c"], dlogit, grads)
    dA, dG = dAG[:-1], dAG[-1:]
    d = cache["phi"].shape[0]
    dpsi = np.repeat(dG / d, d, axis=0)
    dF2 += _embed_backward(t, "psi", cache["psi_c"], dpsi, grads)
    dphi = cache["P_bar"] @ dA
    dP_bar = cache["phi"] @ dA.T
    dF2 += _embed_backward(t, "phi", cache["phi_c"], dphi, grads)
    offset = 0
    for i, (Pm, c) in enumerate(cache["pool_caches"]):
        k = Pm.shape[1]
        dpooled = _embed_backward(t, f"eta{i}", c, dP_bar[:, offset:offset + k], grads)
        dF2 += dpooled @ Pm.T
        offset += k
    return grads, dF2.reshape(D, H, W)


def boundary_mask(M: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of the opposite mask value."""
    M = np.asarray(M).astype(bool)
    b = np.zeros_like(M)
    b[:-1, :] |= M[:-1, :] != M[1:, :]
    b[1:, :] |= M[1:, :] != M[:-1, :]
    b[:, :-1] |= M[:, :-1] != M[:, 1:]
    b[:, 1:] |= M[:, 1:] != M[:, :-1]
    return b


def boundary_distance(M: np.ndarray) -> np.ndarray:
    """Euclidean distance from each pixel to the nearest boundary pixel (inf if none)."""
    b = boundary_mask(M)
    if not b.any():
        return np.full(b.shape, np.inf)
    return ndimage.distance_transform_edt(~b)


def boundary_weights(M: np.ndarray, d_bar: float = 1.0, w: float = 0.25, is_pseudo: bool = True) -> np.ndarray:
    M = np.asarray(M)
    if not is_pseudo:
        return np.ones(M.shape)
    w = min(float(w), 1.0)
    dist = boundary_distance(M)
    return np.where(dist <= d_bar, w, 1.0)


def loss_att(S: np.ndarray, M: np.ndarray, W: np.ndarray):
    S = np.asarray(S, dtype=float)
    S2 = S.reshape(S.shape[-2:]) if S.ndim == 3 else S
    M = np.asarray(M, dtype=float)
    W = np.asarray(W, dtype=float)
    if S2.shape != M.shape or M.shape != W.shape:
        raise ValueError(f"shape mismatch: S {S.shape}, M {M.shape}, W {W.shape}")
    diff = S2 - M
    HW = M.size
    loss = float(np.sum(W * diff ** 2) / HW)
    grad = (2.0 * W * diff / HW).reshape(S.shape)
    return loss, grad


def multi_stage_loss_att(losses) -> float:
    """Equal-weight average of per-stage attention losses."""
    losses = list(losses)
    return float(np.mean(losses)) if losses else 0.0


def synthetic_pair(rng: np.random.Generator, D: int = 16, H: int = 16, W: int = 16,
                   noise: float = 0.5, is_pseudo: bool = True):
    """Random elliptical object on a distinct background, returned as (F, M)."""
    yy, xx = np.mgrid[0:H, 0:W]
    cy, cx = rng.uniform(0.3 * H, 0.7 * H), rng.uniform(0.3 * W, 0.7 * W)
    ry, rx = rng.uniform(0.15 * H, 0.3 * H), rng.uniform(0.15 * W, 0.3 * W)
    M = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(float)
    obj = rng.standard_normal(D)
    bg = rng.standard_normal(D)
    F = obj[:, None, None] * M + bg[:, None, None] * (1 - M) + noise * rng.standard_normal((D, H, W))
    return F, M


@dataclass
class SamTrainResult:
    params: SamParams
    losses: list[float]
    maps: list[np.ndarray]


def train_sam(rng: np.random.Generator, pairs, stage: int = 2, steps: int = 200, lr: float = 0.05,
              is_pseudo: bool = True, d_bar: float = 1.0, beta1: float = 0.9, beta2: float = 0.999) -> SamTrainResult:
    """Fit SAM parameters to (F, M) pairs by minimizing the mean attention loss.

    Adam-scaled gradient steps; ``losses[0]`` is the loss at initialization.
    """
    w, *sizes = stage_weight(stage)
    D = pairs[0][0].shape[0]
    params = SamParams.init(rng, D, tuple(sizes))
    weights = [boundary_weights(M, d_bar, w, is_pseudo) for _, M in pairs]
    m1 = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    losses = []
    for step in range(steps + 1):
        total = 0.0
        acc = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        for (F, M), Wm in zip(pairs, weights):
            S, _, cache = sam_forward(params, F, return_cache=True)
            loss, dS = loss_att(S, M, Wm)
            total += loss / len(pairs)
            g, _ = sam_backward(params, cache, dS=dS)
            for k, v in g.items():
                acc[k] += v / len(pairs)
        losses.append(total)
        if step == steps:
            break
        for k, g in acc.items():
            m1[k] = beta1 * m1[k] + (1 - beta1) * g
            m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
            mhat = m1[k] / (1 - beta1 ** (step + 1))
            vhat = m2[k] / (1 - beta2 ** (step + 1))
            params.tensors[k] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
    maps = [sam_forward(params, F)[0][0] for F, _ in pairs]
    return SamTrainResult(params, losses, maps)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary 8-bit PGM of an image with values in [0, 1]."""
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Reader for the three-line-header files ``write_pgm`` produces."""
    magic, dims, maxval, data = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    W, H = (int(v) for v in dims.split())
    return np.frombuffer(data[: W * H], dtype=np.uint8).reshape(H, W) / float(maxval)
