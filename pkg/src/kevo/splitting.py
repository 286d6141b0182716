"""Fit/reset split masks (KELS, WELS), sparsity, slim extraction and profiling."""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .engine import SeededRng
from .errors import ConfigError, StructuralError, UnsupportedTechniqueError
from .fileio import atomic_write
from .graph import LayerNode, NetworkGraph, validate_and_shape

MASK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConvSplit:
    keep_out: int
    keep_in: tuple[int, ...]


@dataclass(frozen=True)
class LinearSplit:
    keep_out: int
    keep_in: tuple[int, ...]


@dataclass(frozen=True)
class BnSplit:
    keep: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class WeightBitset:
    """Per-weight fit bits over the flattened weight (and optional bias) tensor."""
    shape: tuple[int, ...]
    bits: np.ndarray
    bias_bits: np.ndarray | None = None

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, WeightBitset):
            return NotImplemented
        same_bias = (self.bias_bits is None and other.bias_bits is None) or (
            self.bias_bits is not None and other.bias_bits is not None
            and np.array_equal(self.bias_bits, other.bias_bits))
        return self.shape == other.shape and np.array_equal(self.bits, other.bits) and same_bias


SplitSpec = Union[ConvSplit, LinearSplit, BnSplit, WeightBitset]


@dataclass
class SplitMask:
    technique: str
    split_rate: float
    specs: dict[str, SplitSpec] = field(default_factory=dict)

    def param_masks(self, graph: NetworkGraph) -> dict[str, np.ndarray]:
        """Boolean fit masks for every conv/linear weight and bias tensor.

        Batch-norm tensors are never part of the result: they are carried over
        whole between generations.
        """
        masks: dict[str, np.ndarray] = {}
        finals = graph.final_linears()
        shapes = graph.param_shapes()
        for node in graph.param_nodes():
            spec = self.specs.get(node.name)
            if spec is None:
                raise StructuralError(f"mask does not cover node {node.name!r}")
            wkey, bkey = f"{node.name}.weight", f"{node.name}.bias"
            if isinstance(spec, WeightBitset):
                if spec.shape != shapes[wkey]:
                    raise StructuralError(
                        f"bitset for {node.name!r} has shape {spec.shape}, weight is {shapes[wkey]}")
                masks[wkey] = spec.bits.reshape(spec.shape).astype(bool)
                if node.bias:
                    if node.name in finals or spec.bias_bits is None:
                        masks[bkey] = np.ones(shapes[bkey], dtype=bool)
                    else:
                        masks[bkey] = spec.bias_bits.astype(bool)
                continue
            m = np.zeros(shapes[wkey], dtype=bool)
            keep_in = list(spec.keep_in)
            n_out, n_in = shapes[wkey][0], shapes[wkey][-1]
            if spec.keep_out > n_out or (keep_in and max(keep_in) >= n_in):
                raise StructuralError(
                    f"mask for {node.name!r} does not fit weight of shape {shapes[wkey]}")
            if node.kind == "conv":
                m[:spec.keep_out, :, :, keep_in] = True
            else:
                m[np.ix_(np.arange(spec.keep_out), keep_in)] = True
            masks[wkey] = m
            if node.bias:
                b = np.zeros(shapes[bkey], dtype=bool)
                b[:node.out_channels if node.name in finals else spec.keep_out] = True
                masks[bkey] = b
        return masks


def _check_rate(split_rate: float) -> None:
    if not (0.0 < split_rate < 1.0):
        raise ConfigError(f"split rate must lie in (0, 1), got {split_rate}")


def kept_count(split_rate: float, channels: int) -> int:
    """``ceil(split_rate * channels)``, robust to float noise such as 0.7*10."""
    return max(1, min(channels, math.ceil(split_rate * channels - 1e-9)))


# --------------------------------------------------------------------------- #
# KELS
# --------------------------------------------------------------------------- #

def kels_split(graph: NetworkGraph, split_rate: float) -> SplitMask:
    """Kernel-level split: the first ceil(s*Ci) kernels of the first ceil(s*Co) filters.

    Kept-channel sets are propagated through the graph so that a conv fed by
    a concat keeps exactly the channels its producers kept, and the first conv
    keeps all input channels. Final linear layers keep every output row.
    """
    _check_rate(split_rate)
    return _propagate(graph, lambda c: kept_count(split_rate, c), "kels", split_rate)


def identity_mask(graph: NetworkGraph) -> SplitMask:
    """KELS-shaped mask that keeps everything (degenerate test hook)."""
    return _propagate(graph, lambda c: c, "kels", 1.0)


def _propagate(graph: NetworkGraph, count, technique: str, split_rate: float) -> SplitMask:
    if not graph.shapes:
        validate_and_shape(graph)
    finals = graph.final_linears()
    keep: dict[str, tuple[int, ...]] = {}
    specs: dict[str, SplitSpec] = {}
    for node in graph.nodes:
        k = node.kind
        if k == "input":
            keep[node.name] = tuple(range(node.out_channels))
        elif k == "conv":
            kin = keep[node.inputs[0]]
            kout = count(node.out_channels)
            specs[node.name] = ConvSplit(kout, kin)
            keep[node.name] = tuple(range(kout))
        elif k == "linear":
            kin = keep[node.inputs[0]]
            kout = node.out_channels if node.name in finals else count(node.out_channels)
            specs[node.name] = LinearSplit(kout, kin)
            keep[node.name] = tuple(range(kout))
        elif k == "bn":
            keep[node.name] = keep[node.inputs[0]]
            specs[node.name] = BnSplit(keep[node.name])
        elif k == "add":
            sets = [keep[p] for p in node.inputs]
            for p, s in zip(node.inputs[1:], sets[1:]):
                if s != sets[0]:
                    raise StructuralError(
                        f"add {node.name!r}: operands {node.inputs[0]!r} and {p!r} keep different channels")
            keep[node.name] = sets[0]
        elif k == "concat":
            merged, offset = [], 0
            for p in node.inputs:
                merged.extend(offset + c for c in keep[p])
                offset += graph.shapes[p][0]
            keep[node.name] = tuple(merged)
        else:
            keep[node.name] = keep[node.inputs[0]]
    return SplitMask(technique, split_rate, specs)


# --------------------------------------------------------------------------- #
# WELS
# --------------------------------------------------------------------------- #

def wels_popcount(split_rate: float, size: int) -> int:
    return int(math.floor(split_rate * size + 0.5))


def _random_bits(size: int, split_rate: float, rng: SeededRng) -> np.ndarray:
    bits = np.zeros(size, dtype=bool)
    bits[rng.choice(size, wels_popcount(split_rate, size))] = True
    return bits


def wels_split(graph: NetworkGraph, split_rate: float, rng: SeededRng) -> SplitMask:
    """Weight-level split: a uniform random bitset per weight tensor.

    Exactly ``round(s * |W|)`` entries are kept per tensor. Final-layer biases
    are always fit; batch-norm tensors are not masked.
    """
    _check_rate(split_rate)
    finals = graph.final_linears()
    shapes = graph.param_shapes()
    specs: dict[str, SplitSpec] = {}
    for node in graph.param_nodes():
        wkey = f"{node.name}.weight"
        shape = shapes[wkey]
        bits = _random_bits(math.prod(shape), split_rate, rng.child(wkey))
        bias_bits = None
        if node.bias and node.name not in finals:
            bkey = f"{node.name}.bias"
            bias_bits = _random_bits(node.out_channels, split_rate, rng.child(bkey))
        specs[node.name] = WeightBitset(shape, bits, bias_bits)
    return SplitMask("wels", split_rate, specs)


# --------------------------------------------------------------------------- #
# Sparsity
# --------------------------------------------------------------------------- #

def layer_sparsity(mask: SplitMask, graph: NetworkGraph) -> dict[str, float]:
    """Per conv/linear node: fraction of its weights (and biases) in the reset-hypothesis."""
    masks = mask.param_masks(graph)
    out = {}
    for node in graph.param_nodes():
        tensors = [m for k, m in masks.items() if k.rpartition(".")[0] == node.name]
        total = sum(m.size for m in tensors)
        out[node.name] = 1.0 - sum(int(m.sum()) for m in tensors) / total
    return out


def compute_sparsity(mask: SplitMask, graph: NetworkGraph) -> float:
    """Fraction of split (conv/linear) parameters outside the fit-hypothesis."""
    masks = mask.param_masks(graph)
    total = sum(m.size for m in masks.values())
    fit = sum(int(m.sum()) for m in masks.values())
    return 1.0 - fit / total if total else 0.0


# --------------------------------------------------------------------------- #
# Slim extraction
# --------------------------------------------------------------------------- #

def extract_slim(graph: NetworkGraph, params: dict[str, np.ndarray], mask: SplitMask
                 ) -> tuple[NetworkGraph, dict[str, np.ndarray]]:
    """Trim the dense network down to its fit-hypothesis.

    Returns a standalone graph and parameter dict. Batch-norm running
    statistics of kept channels are copied unchanged.
    """
    if mask.technique != "kels":
        raise UnsupportedTechniqueError(
            f"slim extraction needs a KELS mask, got {mask.technique!r}: "
            "weight-level masks do not remove whole channels")
    nodes: list[LayerNode] = []
    slim: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        spec = mask.specs.get(node.name)
        name = node.name
        if node.kind == "conv":
            kin = list(spec.keep_in)
            w = params[f"{name}.weight"][:spec.keep_out][:, :, :, kin]
            slim[f"{name}.weight"] = np.ascontiguousarray(w)
            if node.bias:
                slim[f"{name}.bias"] = params[f"{name}.bias"][:spec.keep_out].copy()
            nodes.append(LayerNode(name, "conv", node.inputs, spec.keep_out, len(kin),
                                   node.kernel, node.stride, node.padding, node.bias))
        elif node.kind == "linear":
            kin = list(spec.keep_in)
            slim[f"{name}.weight"] = np.ascontiguousarray(params[f"{name}.weight"][:spec.keep_out][:, kin])
            if node.bias:
                slim[f"{name}.bias"] = params[f"{name}.bias"][:spec.keep_out].copy()
            nodes.append(LayerNode(name, "linear", node.inputs, spec.keep_out, len(kin), bias=node.bias))
        elif node.kind == "bn":
            idx = list(spec.keep)
            for s in ("weight", "bias", "running_mean", "running_var"):
                slim[f"{name}.{s}"] = params[f"{name}.{s}"][idx].copy()
            nodes.append(LayerNode(name, "bn", node.inputs, len(idx)))
        else:
            nodes.append(node)
    out = NetworkGraph(nodes, graph.output)
    validate_and_shape(out)
    return out, slim


def masked_dense(graph: NetworkGraph, params: dict[str, np.ndarray], mask: SplitMask
                 ) -> dict[str, np.ndarray]:
    """Copy of ``params`` with every reset-hypothesis entry set to zero."""
    out = {k: v.copy() for k, v in params.items()}
    for key, m in mask.param_masks(graph).items():
        out[key][~m] = 0
    return out


# --------------------------------------------------------------------------- #
# Profiling
# --------------------------------------------------------------------------- #

@dataclass
class LayerProfile:
    name: str
    kind: str
    ops: int
    params: int


@dataclass
class ProfileReport:
    layers: list[LayerProfile]

    @property
    def total_ops(self) -> int:
        return sum(l.ops for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    def to_csv(self) -> str:
        rows = ["layer,kind,ops,params"]
        rows += [f"{l.name},{l.kind},{l.ops},{l.params}" for l in self.layers]
        rows.append(f"total,,{self.total_ops},{self.total_params}")
        return "\n".join(rows) + "\n"


def profile_network(graph: NetworkGraph, input_shape=None) -> ProfileReport:
    """Count operations and parameters for a single-sample forward pass in eval mode.

    Convention: a multiply-accumulate is two ops. conv = 2*Co*Ci*k*k*Ho*Wo
    (+Co*Ho*Wo with bias); linear = 2*Co*Ci (+Co); bn = 2 per element;
    relu, max-pool, add and gap one op per output (gap: per input) element.
    Parameters include batch-norm running statistics.
    """
    if input_shape is not None and tuple(input_shape) != graph.input_shape:
        inp = graph.input_node
        c, *hw = input_shape
        new_inp = LayerNode(inp.name, "input", out_channels=c, spatial=tuple(hw) if hw else None)
        graph = NetworkGraph([new_inp if n is inp else n for n in graph.nodes], graph.output)
    shapes = validate_and_shape(graph)
    pshapes = graph.param_shapes()
    layers = []
    for node in graph.nodes:
        out = shapes[node.name]
        n_params = sum(math.prod(s) for k, s in pshapes.items() if k.rpartition(".")[0] == node.name)
        k = node.kind
        if k == "conv":
            spatial = out[1] * out[2]
            ops = 2 * node.out_channels * node.in_channels * node.kernel ** 2 * spatial
            if node.bias:
                ops += node.out_channels * spatial
        elif k == "linear":
            ops = 2 * node.out_channels * node.in_channels + (node.out_channels if node.bias else 0)
        elif k == "bn":
            ops = 2 * math.prod(out)
        elif k == "gap":
            ops = math.prod(shapes[node.inputs[0]])
        elif k in ("relu", "maxpool", "add", "concat"):
            ops = 0 if k == "concat" else math.prod(out)
        else:
            ops = 0
        if k != "input":
            layers.append(LayerProfile(node.name, k, ops, n_params))
    return ProfileReport(layers)


# --------------------------------------------------------------------------- #
# Mask files
# --------------------------------------------------------------------------- #

def _b64(bits: np.ndarray) -> str:
    return base64.b64encode(np.packbits(bits.astype(bool)).tobytes()).decode("ascii")


def _unb64(text: str, size: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    return np.unpackbits(raw, count=size).astype(bool)


def mask_to_dict(mask: SplitMask) -> dict:
    specs = {}
    for name, spec in mask.specs.items():
        if isinstance(spec, ConvSplit):
            specs[name] = {"type": "conv", "keep_out": spec.keep_out, "keep_in": list(spec.keep_in)}
        elif isinstance(spec, LinearSplit):
            specs[name] = {"type": "linear", "keep_out": spec.keep_out, "keep_in": list(spec.keep_in)}
        elif isinstance(spec, BnSplit):
            specs[name] = {"type": "bn", "keep": list(spec.keep)}
        else:
            d = {"type": "bitset", "shape": list(spec.shape), "popcount": spec.popcount,
                 "bits": _b64(spec.bits)}
            if spec.bias_bits is not None:
                d["bias_size"] = int(spec.bias_bits.size)
                d["bias_bits"] = _b64(spec.bias_bits)
            specs[name] = d
    return {"format": "kevo-mask", "version": MASK_FORMAT_VERSION, "technique": mask.technique,
            "split_rate": mask.split_rate, "specs": specs}


def mask_from_dict(d: dict) -> SplitMask:
    if d.get("format") != "kevo-mask":
        raise ConfigError("not a kevo mask description")
    if d.get("version") != MASK_FORMAT_VERSION:
        raise ConfigError(f"unsupported mask version {d.get('version')}")
    specs: dict[str, SplitSpec] = {}
    for name, s in d["specs"].items():
        t = s["type"]
        if t == "conv":
            specs[name] = ConvSplit(int(s["keep_out"]), tuple(s["keep_in"]))
        elif t == "linear":
            specs[name] = LinearSplit(int(s["keep_out"]), tuple(s["keep_in"]))
        elif t == "bn":
            specs[name] = BnSplit(tuple(s["keep"]))
        elif t == "bitset":
            shape = tuple(s["shape"])
            bits = _unb64(s["bits"], math.prod(shape))
            if int(bits.sum()) != s["popcount"]:
                raise ConfigError(f"bitset for {name!r}: popcount mismatch")
            bias = _unb64(s["bias_bits"], s["bias_size"]) if "bias_bits" in s else None
            specs[name] = WeightBitset(shape, bits, bias)
        else:
            raise ConfigError(f"unknown split spec type {t!r}")
    return SplitMask(d["technique"], float(d["split_rate"]), specs)


def save_mask(mask: SplitMask, path) -> None:
    atomic_write(path, json.dumps(mask_to_dict(mask), indent=1).encode())


def load_mask(path) -> SplitMask:
    return mask_from_dict(json.loads(Path(path).read_text()))
