"""Dense tensor primitives with hand-written backward passes.

Every layer is a pair of pure functions: ``*_forward`` returns the output and a
cache, ``*_backward`` consumes the upstream gradient and the cache. Tensors are
plain :class:`numpy.ndarray` objects; the dtype of the inputs is preserved, so
training runs in float32 and gradient checks in float64.

Convolution filters use the ``Co x k x k x Ci`` layout.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, TrainingError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# --------------------------------------------------------------------------- #
# Random streams
# --------------------------------------------------------------------------- #

class SeededRng:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    The key is hashed with SHA-256 and fed to a Philox generator, so the
    sequence depends only on the pair and not on how many other streams were
    drawn before it.
    """

    def __init__(self, seed: int, stream_id: str = ""):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = stream_id
        digest = hashlib.sha256(f"{self.seed}:{stream_id}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.stream_id}/{stream_id}" if self.stream_id else stream_id)

    def uniform(self, low, high, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, loc, scale, size) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id!r})"


def kaiming_uniform_init(shape: Sequence[int], fan_in: int, rng: SeededRng,
                         dtype=np.float32) -> np.ndarray:
    """Uniform on ``[-b, b]`` with ``b = sqrt(6 / fan_in)`` (rectifier gain)."""
    if fan_in <= 0:
        raise DimensionError(f"fan_in must be positive, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, tuple(shape)).astype(dtype)


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


def bias_uniform_init(shape: Sequence[int], fan_in: int, rng: SeededRng,
                      dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, tuple(shape)).astype(dtype)


# --------------------------------------------------------------------------- #
# Convolution
# --------------------------------------------------------------------------- #

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise DimensionError(
            f"spatial axis of size {size} too small for kernel {kernel}, "
            f"stride {stride}, padding {padding}")
    return out


def _check_conv(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int):
    if x.ndim != 4:
        raise DimensionError(f"conv input must be NCHW, got rank {x.ndim}")
    if w.ndim != 4 or w.shape[1] != w.shape[2]:
        raise DimensionError(f"conv filter must be Co x k x k x Ci, got {w.shape}")
    if x.shape[1] != w.shape[3]:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[1]} channels, filter expects {w.shape[3]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"bias axis mismatch: expected ({w.shape[0]},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                   stride: int = 1, padding: int = 0):
    _check_conv(x, w, b, stride, padding)
    n, ci, h, wd = x.shape
    co, k = w.shape[0], w.shape[1]
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    # windows: N x Ci x Ho x Wo x k x k
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(n * ho * wo, k * k * ci)
    wmat = w.reshape(co, k * k * ci)
    out = cols @ wmat.T
    if b is not None:
        out = out + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    cache = (x.shape, cols, w, b is not None, stride, padding, ho, wo)
    return out, cache


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dw, db)``; ``db`` is None for bias-free convs."""
    x_shape, cols, w, has_bias, stride, padding, ho, wo = cache
    n, ci, h, wd = x_shape
    co, k = w.shape[0], w.shape[1]
    g = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0) if has_bias else None
    dcols = (g @ w.reshape(co, k * k * ci)).reshape(n, ho, wo, k, k, ci)
    dxp = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


# --------------------------------------------------------------------------- #
# Batch norm
# --------------------------------------------------------------------------- #

def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      train: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Batch norm over N(,H,W) per channel.

    In train mode the running statistics are updated in place with an
    exponential moving average (unbiased batch variance, as in common
    frameworks).
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch norm input must be NC or NCHW, got rank {x.ndim}")
    c = x.shape[1]
    for name, arr in (("scale", gamma), ("shift", beta), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batch norm {name} has shape {arr.shape}, input has {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // c
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= (1 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
    denom = var + eps
    if np.any(denom <= 0):
        raise ArithmeticError("non-positive variance in batch norm")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    cache = (xhat, inv_std, gamma, axes, bshape, train)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, axes, bshape, train = cache
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma.reshape(bshape)
    if not train:
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------- #
# Linear
# --------------------------------------------------------------------------- #

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear expects N x Ci input and Co x Ci weight, got {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear bias has shape {b.shape}, expected ({w.shape[0]},)")
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout: np.ndarray, cache):
    x, w, has_bias = cache
    return dout @ w, dout.T @ x, (dout.sum(axis=0) if has_bias else None)


# --------------------------------------------------------------------------- #
# Structural ops
# --------------------------------------------------------------------------- #

def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dout: np.ndarray, cache):
    return dout * cache


def gap_forward(x: np.ndarray):
    if x.ndim != 4:
        raise DimensionError(f"global average pool expects NCHW, got rank {x.ndim}")
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dout: np.ndarray, cache):
    n, c, h, w = cache
    return np.broadcast_to((dout / (h * w))[:, :, None, None], cache).copy()


def maxpool_forward(x: np.ndarray, kernel: int = 3, stride: int = 2, padding: int = 1):
    if x.ndim != 4:
        raise DimensionError(f"max pool expects NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, arg, kernel, stride, padding)


def maxpool_backward(dout: np.ndarray, cache):
    shape, arg, kernel, stride, padding = cache
    n, c, h, w = shape
    ho, wo = arg.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    rows = (np.arange(ho) * stride)[None, None, :, None] + arg // kernel
    cols = (np.arange(wo) * stride)[None, None, None, :] + arg % kernel
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dxp, (ni, ci, rows, cols), dout)
    return dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp


def add_forward(xs: Sequence[np.ndarray]):
    if len(xs) < 2:
        raise DimensionError("add needs at least two operands")
    for i, x in enumerate(xs[1:], 1):
        if x.shape != xs[0].shape:
            raise DimensionError(f"add operand {i} has shape {x.shape}, operand 0 has {xs[0].shape}")
    out = xs[0].copy()
    for x in xs[1:]:
        out += x
    return out, len(xs)


def add_backward(dout: np.ndarray, cache):
    return [dout] * cache


def concat_forward(xs: Sequence[np.ndarray]):
    if len(xs) < 2:
        raise DimensionError("concat needs at least two operands")
    ref = xs[0].shape
    for i, x in enumerate(xs[1:], 1):
        if x.ndim != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat operand {i} has shape {x.shape}, incompatible with {ref} outside the channel axis")
    sizes = [x.shape[1] for x in xs]
    return np.concatenate(xs, axis=1), sizes


def concat_backward(dout: np.ndarray, cache):
    bounds = np.cumsum(cache)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(dout, bounds, axis=1)]


def structural_apply(kind: str, inputs: Sequence[np.ndarray], kernel: int = 3,
                     stride: int = 2, padding: int = 1):
    """Forward pass of a parameter-free node; returns ``(out, cache)``."""
    if kind == "maxpool":
        return maxpool_forward(inputs[0], kernel, stride, padding)
    if kind == "relu":
        return relu_forward(inputs[0])
    if kind == "gap":
        return gap_forward(inputs[0])
    if kind == "add":
        return add_forward(inputs)
    if kind == "concat":
        return concat_forward(inputs)
    raise DimensionError(f"unknown structural op {kind!r}")


def structural_backward(kind: str, dout: np.ndarray, cache) -> list[np.ndarray]:
    if kind == "maxpool":
        return [maxpool_backward(dout, cache)]
    if kind == "relu":
        return [relu_backward(dout, cache)]
    if kind == "gap":
        return [gap_backward(dout, cache)]
    if kind == "add":
        return add_backward(dout, cache)
    if kind == "concat":
        return concat_backward(dout, cache)
    raise DimensionError(f"unknown structural op {kind!r}")


# --------------------------------------------------------------------------- #
# Optimization
# --------------------------------------------------------------------------- #

@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], names: Sequence[str],
                   momentum: float = 0.9, weight_decay: float = 1e-4) -> "OptimizerState":
        return cls(momentum, weight_decay, {k: np.zeros_like(params[k]) for k in names})


def sgd_momentum_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: OptimizerState, lr: float) -> dict[str, np.ndarray]:
    """In-place SGD with heavy-ball momentum and L2 weight decay.

    ``v <- mu * v + (g + wd * w)``; ``w <- w - lr * v``. Weight decay is
    applied to every tensor in ``grads``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        w = params[name]
        if g.shape != w.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, param has {w.shape}")
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(w)
        v *= state.momentum
        v += g.astype(w.dtype, copy=False)
        if state.weight_decay:
            v += state.weight_decay * w
        w -= (lr * v).astype(w.dtype, copy=False)
    return params


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# --------------------------------------------------------------------------- #
# Gradient checking
# --------------------------------------------------------------------------- #

def finite_diff_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                      analytic: Mapping[str, np.ndarray], *, eps: float = 1e-6,
                      samples: int | None = 40, rng: SeededRng | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` is re-evaluated after each in-place perturbation of an entry
    of ``params``; it must be a pure function of those arrays. Relative error
    is ``|a - n| / max(1e-8, |a| + |n|)``. With ``samples`` set, that many
    coordinates per tensor are probed instead of all of them.
    """
    rng = rng or SeededRng(0, "finite-diff")
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, samples)
        ga = np.asarray(analytic[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = ga[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, float(err))
    return worst
