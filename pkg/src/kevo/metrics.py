"""Evaluation metrics and the hypothesis diagnostics tracked across generations."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .engine import SeededRng
from .errors import DimensionError
from .losses import pairwise_distances


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def nearest_neighbors(embeddings: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other points; ties go to the lowest index."""
    d = pairwise_distances(embeddings)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray, k: int) -> float:
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise DimensionError("recall@k needs at least two points")
    nn = nearest_neighbors(embeddings, min(k, len(labels) - 1))
    hit = (labels[nn] == labels[:, None]).any(axis=1)
    return float(hit.mean())


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Seeded k-means++ / Lloyd iterations; returns cluster assignments.

    Stops when the Frobenius shift of the centers relative to their norm drops
    below ``tol``. An empty cluster is re-seeded at the point farthest from
    its assigned center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    k = min(k, n)
    rng = SeededRng(seed, "kmeans")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.choice(n, 1)[0])]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.choice(n, 1)[0])
        else:
            r = rng.uniform(0.0, total, None)
            idx = int(min(np.searchsorted(np.cumsum(closest), r, side="right"), n - 1))
        centers[i] = x[idx]
        closest = np.minimum(closest, ((x - centers[i]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                far = int(d2[np.arange(n), assign].argmax())
                new[c] = x[far]
                assign[far] = c
        shift = np.linalg.norm(new - centers)
        scale = max(np.linalg.norm(centers), 1e-12)
        centers = new
        if shift / scale < tol:
            break
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi_from_labels(truth: Sequence[int], clusters: Sequence[int]) -> float:
    """``I(truth, clusters) / sqrt(H(truth) H(clusters))`` with the degenerate-case rule."""
    truth = np.asarray(truth)
    clusters = np.asarray(clusters)
    n = len(truth)
    _, ti = np.unique(truth, return_inverse=True)
    _, ci = np.unique(clusters, return_inverse=True)
    table = np.zeros((ti.max() + 1, ci.max() + 1))
    np.add.at(table, (ti, ci), 1)
    ht = _entropy(table.sum(axis=1), n)
    hc = _entropy(table.sum(axis=0), n)
    if ht == 0.0 or hc == 0.0:
        return 1.0 if (ht == 0.0 and hc == 0.0) else 0.0
    nz = table > 0
    pij = table[nz] / n
    pi = (table.sum(axis=1, keepdims=True) / n).repeat(table.shape[1], axis=1)[nz]
    pj = (table.sum(axis=0, keepdims=True) / n).repeat(table.shape[0], axis=0)[nz]
    mi = float((pij * np.log(pij / (pi * pj))).sum())
    return max(0.0, min(1.0, mi / math.sqrt(ht * hc)))


def nmi_score(embeddings: np.ndarray, labels: np.ndarray, k: int | None = None, seed: int = 0) -> float:
    k = k or len(np.unique(labels))
    return nmi_from_labels(labels, kmeans(embeddings, k, seed))


def hypothesis_mean_abs(params: dict[str, np.ndarray], masks: dict[str, np.ndarray]
                        ) -> dict[str, tuple[float, float | None]]:
    """Per layer weight tensor: mean |w| over fit entries and over reset entries.

    ``masks`` maps weight keys to boolean fit masks (see
    :meth:`kevo.splitting.SplitMask.param_masks`). A layer with no reset
    entries reports ``None`` for the reset mean.
    """
    out = {}
    for key, m in masks.items():
        if not key.endswith(".weight"):
            continue
        w = np.abs(params[key].astype(np.float64))
        fit = float(w[m].mean()) if m.any() else float("nan")
        reset = float(w[~m].mean()) if (~m).any() else None
        out[key[:-len(".weight")]] = (fit, reset)
    return out


def h2d_metrics(series: Sequence[np.ndarray]) -> tuple[list[float], list[float]]:
    """Normalized Hamming distances between masks across generations.

    Returns ``(s_h2d, c_h2d)`` for generations 2..G: distance to the previous
    mask and to the first mask, each divided by the mask dimension.
    """
    if len(series) < 2:
        raise DimensionError("need at least two mask snapshots")
    flat = [np.asarray(h, dtype=bool).reshape(-1) for h in series]
    d = flat[0].size
    for i, h in enumerate(flat):
        if h.size != d:
            raise DimensionError(f"snapshot {i} has dimension {h.size}, expected {d}")
    s = [float(np.count_nonzero(flat[g - 1] ^ flat[g])) / d for g in range(1, len(flat))]
    c = [float(np.count_nonzero(flat[0] ^ flat[g])) / d for g in range(1, len(flat))]
    return s, c
