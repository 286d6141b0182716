"""Classification and metric-learning losses with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Mean cross-entropy against ``(1 - a) * onehot + a / C``.

    Returns ``(loss, dlogits)``.
    """
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.max(initial=0) >= c or labels.min(initial=0) < 0:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    target = np.full_like(logp, smoothing / c)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = float(-(target * logp).sum() / n)
    grad = (np.exp(logp) - target) / n
    return loss, grad.astype(logits.dtype, copy=False)


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    """Row-wise unit normalization; returns ``(u, cache)``."""
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    u = x / norm
    return u, (u, norm)


def l2_normalize_backward(du: np.ndarray, cache) -> np.ndarray:
    u, norm = cache
    return (du - u * (du * u).sum(axis=1, keepdims=True)) / norm


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance matrix (no dot-product expansion, so ties stay exact)."""
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@dataclass
class TripletSet:
    triplets: np.ndarray          # T x 3 of (anchor, positive, negative) indices
    margin: float

    def __len__(self) -> int:
        return len(self.triplets)


def mine_semi_hard(embeddings: np.ndarray, labels: np.ndarray, margin: float) -> TripletSet:
    """All triplets whose negative satisfies ``D_ap < D_an < D_ap + margin``.

    Every ordered anchor/positive pair of the same class is considered;
    triplets are returned in lexicographic ``(a, p, n)`` order.
    """
    labels = np.asarray(labels)
    d = pairwise_distances(embeddings)
    same = labels[:, None] == labels[None, :]
    out = []
    n = len(labels)
    for a in range(n):
        neg = ~same[a]
        if not neg.any():
            continue
        d_an = d[a]
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            d_ap = d[a, p]
            hits = np.flatnonzero(neg & (d_an > d_ap) & (d_an < d_ap + margin))
            out.extend((a, p, k) for k in hits)
    arr = np.array(out, dtype=np.int64).reshape(-1, 3)
    return TripletSet(arr, margin)


def triplet_loss(embeddings: np.ndarray, triplets: TripletSet, margin: float | None = None):
    """Mean hinge ``[D_ap - D_an + m]_+`` over the triplets; returns ``(loss, grad)``.

    Zero-length difference vectors get a zero subgradient.
    """
    m = triplets.margin if margin is None else margin
    grad = np.zeros_like(embeddings)
    if len(triplets) == 0:
        return 0.0, grad
    a, p, n = triplets.triplets.T
    vap = embeddings[a] - embeddings[p]
    van = embeddings[a] - embeddings[n]
    dap = np.sqrt((vap * vap).sum(axis=1))
    dan = np.sqrt((van * van).sum(axis=1))
    hinge = dap - dan + m
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).sum() / len(a))
    with np.errstate(invalid="ignore", divide="ignore"):
        uap = np.where(dap[:, None] > 0, vap / dap[:, None], 0.0)
        uan = np.where(dan[:, None] > 0, van / dan[:, None], 0.0)
    w = active[:, None] / len(a)
    np.add.at(grad, a, w * (uap - uan))
    np.add.at(grad, p, -w * uap)
    np.add.at(grad, n, w * uan)
    return loss, grad.astype(embeddings.dtype, copy=False)


def triplet_objective(raw: np.ndarray, labels: np.ndarray, margin: float):
    """Normalize raw embeddings, mine semi-hard triplets, and return ``(loss, draw, n_triplets)``."""
    u, cache = l2_normalize(raw)
    ts = mine_semi_hard(u, labels, margin)
    loss, du = triplet_loss(u, ts)
    return loss, l2_normalize_backward(du, cache), len(ts)
