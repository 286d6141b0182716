"""Knowledge-evolution generation loop.

One run fixes a split mask, trains the dense network for ``e`` epochs, then
re-initializes the reset-hypothesis and trains again, ``g`` times in total.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import engine, graph as G
from .data import Dataset
from .engine import OptimizerState, SeededRng
from .errors import ConfigError, StructuralError, TrainingError
from .losses import cross_entropy, l2_normalize, triplet_objective
from .metrics import h2d_metrics, hypothesis_mean_abs, nmi_score, recall_at_k, top1_accuracy
from .splitting import SplitMask, compute_sparsity, extract_slim, kels_split, wels_split

log = logging.getLogger(__name__)

EMBEDDING_HEAD = "embedding"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float | None = None          # defaults to 0.256 (ce) or 0.0256 (triplet)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: str = "ce"                 # ce | smooth-ce | triplet
    smoothing: float = 0.1
    margin: float = 0.2
    generations: int = 5
    seed: int = 0
    technique: str = "kels"          # kels | wels
    split_rate: float = 0.5
    mask_policy: str = "fixed"       # fixed | resample
    reset_mode: str = "random"       # random | zeros
    classes_per_batch: int = 25
    samples_per_class: int = 5
    flip: bool = False
    crop_pad: int = 0

    def __post_init__(self):
        if self.lr is None:
            self.lr = 0.0256 if self.loss == "triplet" else 0.256
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.generations < 1:
            raise ConfigError(f"generations must be >= 1, got {self.generations}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.loss not in ("ce", "smooth-ce", "triplet"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.loss == "smooth-ce" and not (0 < self.smoothing < 1):
            raise ConfigError(f"smoothing must lie in (0, 1), got {self.smoothing}")
        if self.loss == "triplet" and self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.technique not in ("kels", "wels"):
            raise ConfigError(f"unknown split technique {self.technique!r}")
        if not (0 < self.split_rate < 1):
            raise ConfigError(f"split_rate must lie in (0, 1), got {self.split_rate}")
        if self.mask_policy not in ("fixed", "resample"):
            raise ConfigError(f"unknown mask policy {self.mask_policy!r}")
        if self.mask_policy == "resample" and self.technique != "wels":
            raise ConfigError("mask resampling each generation is only defined for WELS")
        if self.reset_mode not in ("random", "zeros"):
            raise ConfigError(f"unknown reset mode {self.reset_mode!r}")
        if self.loss == "triplet" and (self.classes_per_batch < 2 or self.samples_per_class < 2):
            raise ConfigError("triplet batches need >= 2 classes and >= 2 samples per class")

    @property
    def task(self) -> str:
        return "retrieval" if self.loss == "triplet" else "classification"


@dataclass
class GenerationLog:
    generation: int
    epoch_losses: list[float]
    dense_metric: dict[str, float]
    slim_metric: dict[str, float] | None
    sparsity: float
    hypothesis_stats: dict[str, tuple[float, float | None]]
    s_h2d: float | None = None
    c_h2d: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hypothesis_stats"] = {k: list(v) for k, v in self.hypothesis_stats.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationLog":
        d = dict(d)
        d["hypothesis_stats"] = {k: tuple(v) for k, v in d["hypothesis_stats"].items()}
        return cls(**d)


# --------------------------------------------------------------------------- #
# Re-initialization
# --------------------------------------------------------------------------- #

def reinit_reset(graph: G.NetworkGraph, params: dict[str, np.ndarray], mask: SplitMask,
                 seed: int, generation: int, reset_mode: str = "random") -> dict[str, np.ndarray]:
    """``W <- M * W + (1 - M) * W_r`` for every conv/linear weight and bias.

    ``W_r`` is drawn fresh from the stream ``"<param>/generation-<g>"`` (or is
    zero when ``reset_mode == "zeros"``). Batch-norm tensors and final-layer
    biases are carried over untouched.
    """
    masks = mask.param_masks(graph)
    out = dict(params)
    rng = SeededRng(seed, f"reinit/generation-{generation}")
    for key, m in masks.items():
        if key not in params:
            raise StructuralError(f"mask covers {key!r} but params do not")
        w = params[key]
        if m.shape != w.shape:
            raise StructuralError(f"mask for {key!r} has shape {m.shape}, param has {w.shape}")
        if m.all():
            continue
        if reset_mode == "zeros":
            fresh = np.zeros_like(w)
        else:
            fresh = G.init_param(graph, key, rng, w.dtype)
        out[key] = np.where(m, w, fresh)
    return out


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #

def _augment(x: np.ndarray, cfg: TrainConfig, rng: SeededRng) -> np.ndarray:
    if x.ndim != 4 or not (cfg.flip or cfg.crop_pad):
        return x
    x = x.copy()
    n, _, h, w = x.shape
    if cfg.flip:
        flip = rng.uniform(0.0, 1.0, n) < 0.5
        x[flip] = x[flip, :, :, ::-1]
    if cfg.crop_pad:
        p = cfg.crop_pad
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.choice((2 * p + 1) ** 2, n, replace=True)
        for i, o in enumerate(offs):
            dy, dx = divmod(int(o), 2 * p + 1)
            x[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return x


def _batches(data: Dataset, cfg: TrainConfig, rng: SeededRng) -> list[np.ndarray]:
    n = len(data)
    if cfg.loss == "triplet":
        classes = np.unique(data.y)
        pools = {c: np.flatnonzero(data.y == c) for c in classes}
        p = min(cfg.classes_per_batch, len(classes))
        k = cfg.samples_per_class
        n_batches = max(1, n // (p * k))
        out = []
        for b in range(n_batches):
            chosen = classes[rng.permutation(len(classes))[:p]]
            idx = []
            for c in chosen:
                pool = pools[c]
                idx.extend(pool[rng.choice(len(pool), min(k, len(pool)), replace=False)])
            out.append(np.array(idx))
        return out
    order = rng.permutation(n)
    out = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    return [b for b in out if len(b) > 1]


def batch_loss(graph: G.NetworkGraph, params, x, y, cfg: TrainConfig, train: bool = True):
    """Forward + loss + backward on one batch; returns ``(loss, grads)``."""
    out, caches = G.forward(graph, params, x, train=train, return_cache=True)
    if cfg.loss == "triplet":
        loss, dout, _ = triplet_objective(out, y, cfg.margin)
    else:
        loss, dout = cross_entropy(out, y, cfg.smoothing if cfg.loss == "smooth-ce" else 0.0)
    grads = G.backward(graph, caches, dout)
    grads.pop("__input__", None)
    return loss, grads


def train_generation(graph: G.NetworkGraph, params: dict[str, np.ndarray], data: Dataset,
                     cfg: TrainConfig, generation: int = 1
                     ) -> tuple[dict[str, np.ndarray], list[float]]:
    """Train for ``cfg.epochs`` epochs with SGD + cosine decay restarted at ``cfg.lr``.

    The input dict is not modified. The final-epoch parameters are returned
    together with the mean training loss of each epoch.
    """
    if len(data) == 0:
        raise ConfigError("empty training set")
    params = {k: v.copy() for k, v in params.items()}
    names = graph.trainable_names()
    state = OptimizerState.for_params(params, names, cfg.momentum, cfg.weight_decay)
    losses = []
    for epoch in range(cfg.epochs):
        lr = engine.cosine_lr(epoch, cfg.epochs, cfg.lr)
        rng = SeededRng(cfg.seed, f"shuffle/generation-{generation}/epoch-{epoch}")
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(data, cfg, rng)):
            x = _augment(data.x[idx], cfg, rng)
            with np.errstate(over="ignore", invalid="ignore"):    # divergence is caught just below
                loss, grads = batch_loss(graph, params, x, data.y[idx], cfg)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at generation {generation}, epoch {epoch}, batch {bi}")
            try:
                engine.sgd_momentum_step(params, grads, state, lr)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at generation {generation}, epoch {epoch}, batch {bi}") from None
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
        log.debug("generation %d epoch %d lr %.5f loss %.4f", generation, epoch, lr, losses[-1])
    return params, losses


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #

def predict(graph: G.NetworkGraph, params, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [G.forward(graph, params, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs)


def evaluate_model(graph: G.NetworkGraph, params, data: Dataset, task: str = "classification",
                   nmi_seed: int = 0) -> dict[str, float]:
    """Top-1 for classification; Recall@1, Recall@4 and NMI on unit-normalized embeddings for retrieval."""
    if len(data) == 0:
        raise ConfigError("empty evaluation set")
    head = graph[graph.output]
    if task == "retrieval":
        if head.name != EMBEDDING_HEAD:
            raise ConfigError("retrieval evaluation needs a graph with an embedding head")
        emb, _ = l2_normalize(predict(graph, params, data.x).astype(np.float64))
        return {"recall@1": recall_at_k(emb, data.y, 1), "recall@4": recall_at_k(emb, data.y, 4),
                "nmi": nmi_score(emb, data.y, seed=nmi_seed)}
    if task == "classification":
        if head.name == EMBEDDING_HEAD:
            raise ConfigError("classification evaluation needs a classifier head, found an embedding head")
        return {"top1": top1_accuracy(predict(graph, params, data.x), data.y)}
    raise ConfigError(f"unknown task {task!r}")


def primary_metric(metrics: dict[str, float] | None) -> float | None:
    if metrics is None:
        return None
    return metrics["top1"] if "top1" in metrics else metrics["recall@1"]


# --------------------------------------------------------------------------- #
# Generation loop
# --------------------------------------------------------------------------- #

def make_mask(graph: G.NetworkGraph, cfg: TrainConfig, generation: int) -> SplitMask:
    if cfg.technique == "kels":
        return kels_split(graph, cfg.split_rate)
    draw = generation if cfg.mask_policy == "resample" else 1
    return wels_split(graph, cfg.split_rate, SeededRng(cfg.seed, f"wels/generation-{draw}"))


@dataclass
class RunState:
    """Everything needed to continue a run after generation ``generation``."""
    generation: int
    params: dict[str, np.ndarray]
    mask: SplitMask
    first_mask: SplitMask
    prev_mask: SplitMask


def _mask_bits(graph, mask: SplitMask) -> np.ndarray:
    return np.concatenate([m.reshape(-1) for m in mask.param_masks(graph).values()])


def run_knowledge_evolution(graph: G.NetworkGraph, cfg: TrainConfig, train: Dataset, evaluation: Dataset,
                            on_generation: Callable[[GenerationLog, RunState], None] | None = None,
                            resume: RunState | None = None, stop_after: int | None = None
                            ) -> list[GenerationLog]:
    """Run ``cfg.generations`` generations of train / re-initialize.

    ``on_generation`` is called after each generation with its log and the
    trained (pre-reinit) state, which is what checkpoints store. Passing that
    state back as ``resume`` continues the run exactly as if it had never
    stopped.
    """
    cfg.validate()
    task = cfg.task
    if resume is None:
        params = G.init_params(graph, cfg.seed, stream="generation-0")
        mask = make_mask(graph, cfg, 1)
        first_mask = prev_mask = mask
        start = 1
    else:
        start = resume.generation + 1
        first_mask = resume.first_mask
        prev_mask = resume.mask
        mask = make_mask(graph, cfg, start)
        params = reinit_reset(graph, resume.params, mask, cfg.seed, resume.generation, cfg.reset_mode)
    logs: list[GenerationLog] = []
    last = cfg.generations if stop_after is None else min(stop_after, cfg.generations)
    for g in range(start, last + 1):
        t0 = time.perf_counter()
        params, losses = train_generation(graph, params, train, cfg, g)
        dense = evaluate_model(graph, params, evaluation, task)
        slim = None
        if mask.technique == "kels":
            sg, sp = extract_slim(graph, params, mask)
            slim = evaluate_model(sg, sp, evaluation, task)
        stats = hypothesis_mean_abs(params, mask.param_masks(graph))
        s_h2d = c_h2d = None
        if cfg.mask_policy == "resample" and g > 1:
            s, c = h2d_metrics([_mask_bits(graph, first_mask), _mask_bits(graph, prev_mask),
                                _mask_bits(graph, mask)])
            s_h2d, c_h2d = s[1], c[1]
        entry = GenerationLog(g, losses, dense, slim, compute_sparsity(mask, graph), stats,
                              s_h2d, c_h2d, time.perf_counter() - t0)
        logs.append(entry)
        log.info("generation %d dense %s slim %s", g, dense, slim)
        if on_generation is not None:
            on_generation(entry, RunState(g, params, mask, first_mask, prev_mask))
        if g < last:
            prev_mask = mask
            mask = make_mask(graph, cfg, g + 1)
            params = reinit_reset(graph, params, mask, cfg.seed, g, cfg.reset_mode)
    return logs
