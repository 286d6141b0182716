"""Declarative network graphs: validation, shape inference, forward/backward.

A :class:`NetworkGraph` only describes the architecture. Weights live in a
flat ``params`` dict keyed ``"<node>.<tensor>"`` (``weight``, ``bias``,
``running_mean``, ``running_var``) so that split masks can be planned from the
graph alone.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from . import engine
from .engine import SeededRng
from .errors import ConfigError, DimensionError, StructuralError
from .fileio import atomic_write

KINDS = ("input", "conv", "bn", "linear", "relu", "maxpool", "gap", "add", "concat")
PARAM_KINDS = ("conv", "linear")
BUFFER_SUFFIXES = ("running_mean", "running_var")


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    out_channels: int | None = None      # conv / linear Co, bn C, input C
    in_channels: int | None = None       # conv / linear Ci
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False
    spatial: tuple[int, int] | None = None  # input H, W (None for flat input)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.inputs:
            d["inputs"] = list(self.inputs)
        if self.kind == "input":
            d["channels"] = self.out_channels
            if self.spatial is not None:
                d["height"], d["width"] = self.spatial
        elif self.kind == "conv":
            d.update(out_channels=self.out_channels, in_channels=self.in_channels,
                     kernel=self.kernel, stride=self.stride, padding=self.padding, bias=self.bias)
        elif self.kind == "linear":
            d.update(out_channels=self.out_channels, in_channels=self.in_channels, bias=self.bias)
        elif self.kind == "bn":
            d["channels"] = self.out_channels
        elif self.kind == "maxpool":
            d.update(kernel=self.kernel, stride=self.stride, padding=self.padding)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerNode":
        d = dict(d)
        try:
            name, kind = d.pop("name"), d.pop("kind")
        except KeyError as exc:
            raise ConfigError(f"graph node missing field {exc}") from None
        if kind not in KINDS:
            raise ConfigError(f"node {name!r}: unknown kind {kind!r}")
        inputs = tuple(d.pop("inputs", ()))
        kw: dict = {}
        if kind == "input":
            kw["out_channels"] = int(d.pop("channels"))
            if "height" in d or "width" in d:
                kw["spatial"] = (int(d.pop("height")), int(d.pop("width")))
        elif kind in ("conv", "linear"):
            kw["out_channels"] = int(d.pop("out_channels"))
            kw["in_channels"] = int(d.pop("in_channels"))
            kw["bias"] = bool(d.pop("bias", False))
            if kind == "conv":
                kw["kernel"] = int(d.pop("kernel"))
                kw["stride"] = int(d.pop("stride", 1))
                kw["padding"] = int(d.pop("padding", 0))
        elif kind == "bn":
            kw["out_channels"] = int(d.pop("channels"))
        elif kind == "maxpool":
            kw["kernel"] = int(d.pop("kernel", 3))
            kw["stride"] = int(d.pop("stride", 2))
            kw["padding"] = int(d.pop("padding", 1))
        if d:
            raise ConfigError(f"node {name!r}: unknown fields {sorted(d)}")
        return cls(name=name, kind=kind, inputs=inputs, **kw)


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    output: str
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._index = {n.name: n for n in self.nodes}

    def __getitem__(self, name: str) -> LayerNode:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def input_node(self) -> LayerNode:
        return next(n for n in self.nodes if n.kind == "input")

    @property
    def input_shape(self) -> tuple[int, ...]:
        n = self.input_node
        return (n.out_channels, *n.spatial) if n.spatial else (n.out_channels,)

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.inputs:
                succ[p].append(n.name)
        return succ

    def param_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind in PARAM_KINDS]

    def final_linears(self) -> set[str]:
        """Linear nodes from which no other conv/linear node is reachable."""
        succ = self.successors()
        final = set()
        for n in self.nodes:
            if n.kind != "linear":
                continue
            stack, seen, ok = list(succ[n.name]), set(), True
            while stack:
                s = stack.pop()
                if s in seen:
                    continue
                seen.add(s)
                if self[s].kind in PARAM_KINDS:
                    ok = False
                    break
                stack.extend(succ[s])
            if ok:
                final.add(n.name)
        return final

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for n in self.nodes:
            if n.kind == "conv":
                shapes[f"{n.name}.weight"] = (n.out_channels, n.kernel, n.kernel, n.in_channels)
                if n.bias:
                    shapes[f"{n.name}.bias"] = (n.out_channels,)
            elif n.kind == "linear":
                shapes[f"{n.name}.weight"] = (n.out_channels, n.in_channels)
                if n.bias:
                    shapes[f"{n.name}.bias"] = (n.out_channels,)
            elif n.kind == "bn":
                for s in ("weight", "bias", *BUFFER_SUFFIXES):
                    shapes[f"{n.name}.{s}"] = (n.out_channels,)
        return shapes

    def trainable_names(self) -> list[str]:
        return [k for k in self.param_shapes() if not k.endswith(BUFFER_SUFFIXES)]

    def to_dict(self) -> dict:
        return {"format": "kevo-graph", "version": 1, "output": self.output,
                "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        if d.get("format", "kevo-graph") != "kevo-graph":
            raise ConfigError(f"not a graph description: format={d.get('format')!r}")
        if "nodes" not in d:
            raise ConfigError("graph description has no 'nodes'")
        nodes = [LayerNode.from_dict(n) for n in d["nodes"]]
        output = d.get("output", nodes[-1].name if nodes else "")
        g = cls(nodes, output)
        validate_and_shape(g)
        return g


def save_graph(graph: NetworkGraph, path) -> None:
    atomic_write(path, yaml.safe_dump(graph.to_dict(), sort_keys=False).encode())


def load_graph(path) -> NetworkGraph:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: graph description must be a mapping")
    return NetworkGraph.from_dict(data)


# --------------------------------------------------------------------------- #
# Validation and shape inference
# --------------------------------------------------------------------------- #

def validate_and_shape(graph: NetworkGraph) -> dict[str, tuple[int, ...]]:
    """Infer per-node output shapes (batch axis excluded).

    Raises :class:`StructuralError` for empty graphs, duplicate names,
    dangling or forward references (which covers cycles), and
    :class:`DimensionError` for channel or spatial mismatches.
    """
    if not graph.nodes:
        raise StructuralError("empty graph")
    shapes: dict[str, tuple[int, ...]] = {}
    seen_names: set[str] = set()
    inputs = [n for n in graph.nodes if n.kind == "input"]
    if len(inputs) != 1:
        raise StructuralError(f"graph needs exactly one input node, found {len(inputs)}")
    for node in graph.nodes:
        if node.name in seen_names:
            raise StructuralError(f"duplicate node name {node.name!r}")
        seen_names.add(node.name)
        for p in node.inputs:
            if p not in graph:
                raise StructuralError(f"node {node.name!r}: dangling predecessor {p!r}")
            if p not in shapes:
                raise StructuralError(
                    f"node {node.name!r}: predecessor {p!r} does not precede it (cycle or bad order)")
        shapes[node.name] = _infer(node, [shapes[p] for p in node.inputs])
    if graph.output not in shapes:
        raise StructuralError(f"output node {graph.output!r} not in graph")
    succ = graph.successors()
    sinks = [n for n, s in succ.items() if not s]
    if sinks != [graph.output]:
        raise StructuralError(f"graph must have exactly one sink equal to the output, found {sinks}")
    graph.shapes = shapes
    return shapes


def _arity(node: LayerNode, ins: list, lo: int, hi: int | None = None):
    if len(ins) < lo or (hi is not None and len(ins) > hi):
        raise StructuralError(f"node {node.name!r} ({node.kind}) has {len(ins)} inputs")


def _infer(node: LayerNode, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    k = node.kind
    if k == "input":
        _arity(node, ins, 0, 0)
        if node.out_channels is None or node.out_channels < 1:
            raise DimensionError(f"input node {node.name!r} needs a positive channel count")
        return (node.out_channels, *node.spatial) if node.spatial else (node.out_channels,)
    if k == "conv":
        _arity(node, ins, 1, 1)
        s = ins[0]
        if len(s) != 3:
            raise DimensionError(f"conv {node.name!r} needs a C x H x W input, got {s}")
        if s[0] != node.in_channels:
            raise DimensionError(
                f"conv {node.name!r}: channel axis declares Ci={node.in_channels}, "
                f"predecessor {node.inputs[0]!r} produces {s[0]}")
        return (node.out_channels,
                engine.conv_output_size(s[1], node.kernel, node.stride, node.padding),
                engine.conv_output_size(s[2], node.kernel, node.stride, node.padding))
    if k == "linear":
        _arity(node, ins, 1, 1)
        s = ins[0]
        if len(s) != 1:
            raise DimensionError(f"linear {node.name!r} needs a flat input, got {s}")
        if s[0] != node.in_channels:
            raise DimensionError(
                f"linear {node.name!r}: declares Ci={node.in_channels}, "
                f"predecessor {node.inputs[0]!r} produces {s[0]}")
        return (node.out_channels,)
    if k == "bn":
        _arity(node, ins, 1, 1)
        if ins[0][0] != node.out_channels:
            raise DimensionError(
                f"bn {node.name!r}: declares C={node.out_channels}, "
                f"predecessor {node.inputs[0]!r} produces {ins[0][0]}")
        return ins[0]
    if k == "relu":
        _arity(node, ins, 1, 1)
        return ins[0]
    if k == "maxpool":
        _arity(node, ins, 1, 1)
        s = ins[0]
        if len(s) != 3:
            raise DimensionError(f"maxpool {node.name!r} needs a C x H x W input, got {s}")
        return (s[0],
                engine.conv_output_size(s[1], node.kernel, node.stride, node.padding),
                engine.conv_output_size(s[2], node.kernel, node.stride, node.padding))
    if k == "gap":
        _arity(node, ins, 1, 1)
        if len(ins[0]) != 3:
            raise DimensionError(f"gap {node.name!r} needs a C x H x W input, got {ins[0]}")
        return (ins[0][0],)
    if k == "add":
        _arity(node, ins, 2)
        for p, s in zip(node.inputs[1:], ins[1:]):
            if s != ins[0]:
                raise DimensionError(
                    f"add {node.name!r}: operand {node.inputs[0]!r} has shape {ins[0]} "
                    f"but operand {p!r} has shape {s}")
        return ins[0]
    if k == "concat":
        _arity(node, ins, 2)
        for p, s in zip(node.inputs[1:], ins[1:]):
            if len(s) != len(ins[0]) or s[1:] != ins[0][1:]:
                raise DimensionError(
                    f"concat {node.name!r}: operand {p!r} shape {s} disagrees with "
                    f"{node.inputs[0]!r} shape {ins[0]} outside the channel axis")
        return (sum(s[0] for s in ins), *ins[0][1:])
    raise ConfigError(f"unknown node kind {k!r}")


# --------------------------------------------------------------------------- #
# Architectures
# --------------------------------------------------------------------------- #

class _Builder:
    def __init__(self, input_shape: Sequence[int]):
        c, *hw = input_shape
        self.nodes = [LayerNode("input", "input", out_channels=c,
                                spatial=tuple(hw) if hw else None)]
        self.channels = {"input": c}

    def add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        return node.name

    def conv(self, name, src, co, k, stride=1, padding=None, bias=False):
        pad = k // 2 if padding is None else padding
        self.channels[name] = co
        return self.add(LayerNode(name, "conv", (src,), co, self.channels[src], k, stride, pad, bias))

    def bn(self, name, src):
        self.channels[name] = self.channels[src]
        return self.add(LayerNode(name, "bn", (src,), self.channels[src]))

    def relu(self, name, src):
        self.channels[name] = self.channels[src]
        return self.add(LayerNode(name, "relu", (src,)))

    def maxpool(self, name, src, k=3, stride=2, padding=1):
        self.channels[name] = self.channels[src]
        return self.add(LayerNode(name, "maxpool", (src,), kernel=k, stride=stride, padding=padding))

    def gap(self, name, src):
        self.channels[name] = self.channels[src]
        return self.add(LayerNode(name, "gap", (src,)))

    def linear(self, name, src, co, bias=True):
        self.channels[name] = co
        return self.add(LayerNode(name, "linear", (src,), co, self.channels[src], bias=bias))

    def add_op(self, name, srcs):
        self.channels[name] = self.channels[srcs[0]]
        return self.add(LayerNode(name, "add", tuple(srcs)))

    def concat(self, name, srcs):
        self.channels[name] = sum(self.channels[s] for s in srcs)
        return self.add(LayerNode(name, "concat", tuple(srcs)))

    def basic_block(self, prefix, src, planes, stride):
        out = self.conv(f"{prefix}.conv1", src, planes, 3, stride, 1)
        out = self.relu(f"{prefix}.relu1", self.bn(f"{prefix}.bn1", out))
        out = self.bn(f"{prefix}.bn2", self.conv(f"{prefix}.conv2", out, planes, 3, 1, 1))
        shortcut = src
        if stride != 1 or self.channels[src] != planes:
            shortcut = self.conv(f"{prefix}.downsample.0", src, planes, 1, stride, 0)
            shortcut = self.bn(f"{prefix}.downsample.1", shortcut)
        return self.relu(f"{prefix}.relu2", self.add_op(f"{prefix}.add", [out, shortcut]))

    def finish(self) -> NetworkGraph:
        g = NetworkGraph(self.nodes, self.nodes[-1].name)
        validate_and_shape(g)
        return g


def build_architecture(family: str, num_classes: int, input_shape: Sequence[int] = (3, 32, 32),
                       *, width: int | None = None, hidden: Sequence[int] = (),
                       branch_widths: Sequence[int] = (4, 6), embedding_dim: int | None = None
                       ) -> NetworkGraph:
    """Build one of the supported architecture families.

    ``width`` scales the channel counts of the small families. When
    ``embedding_dim`` is given the final linear layer emits embeddings of
    that size instead of ``num_classes`` logits (retrieval head).
    """
    if num_classes < 2:
        raise ConfigError(f"class count must be >= 2, got {num_classes}")
    out_dim = embedding_dim or num_classes
    head = "embedding" if embedding_dim else "fc"
    b = _Builder(input_shape)
    if family == "mlp":
        src = "input"
        if len(input_shape) != 1:
            raise ConfigError("mlp expects a flat input shape (C,)")
        for i, h in enumerate(hidden):
            src = b.relu(f"relu{i + 1}", b.linear(f"fc{i + 1}", src, h))
        b.linear(head, src, out_dim)
        return b.finish()
    if len(input_shape) != 3:
        raise ConfigError(f"{family} expects a C x H x W input shape")
    if family == "resnet18":
        w = width or 64
        x = b.conv("conv1", "input", w, 7, 2, 3)
        x = b.maxpool("maxpool", b.relu("relu", b.bn("bn1", x)))
        widths = (w, 2 * w, 4 * w, 8 * w)
        for li, planes in enumerate(widths, 1):
            for bi in range(2):
                stride = 2 if (bi == 0 and li > 1) else 1
                x = b.basic_block(f"layer{li}.{bi}", x, planes, stride)
        b.linear(head, b.gap("avgpool", x), out_dim)
        return b.finish()
    if family == "toy-resnet":
        w = width or 4
        x = b.relu("relu1", b.bn("bn1", b.conv("conv1", "input", w, 3, 1, 1)))
        x = b.basic_block("block1", x, 2 * w, 2)
        b.linear(head, b.gap("gap", x), out_dim)
        return b.finish()
    if family == "small-vgg-bn":
        w = width or 8
        plan = [(w, 1), (2 * w, 2), (4 * w, 2), (4 * w, 1), (8 * w, 2), (8 * w, 1), (8 * w, 2), (8 * w, 1)]
        x = "input"
        for i, (co, stride) in enumerate(plan, 1):
            x = b.conv(f"features.conv{i}", x, co, 3, stride, 1)
            x = b.relu(f"features.relu{i}", b.bn(f"features.bn{i}", x))
        b.linear(head, b.gap("gap", x), out_dim)
        return b.finish()
    if family == "concat-block":
        w = width or 8
        wa, wb = branch_widths
        stem = b.relu("stem.relu", b.bn("stem.bn", b.conv("stem.conv", "input", w, 3, 1, 1)))
        a = b.relu("a.relu", b.bn("a.bn", b.conv("a.conv", stem, wa, 3, 1, 1)))
        c = b.relu("b.relu", b.bn("b.bn", b.conv("b.conv", stem, wb, 3, 1, 1)))
        # concat followed by conv then bn
        x = b.concat("cat1", [a, c])
        x = b.relu("c.relu", b.bn("c.bn", b.conv("c.conv", x, w, 1, 1, 0)))
        # concat followed by bn then conv
        x = b.concat("cat2", [x, a])
        x = b.relu("d.relu", b.bn("d.bn", x))
        x = b.relu("e.relu", b.bn("e.bn", b.conv("e.conv", x, w, 3, 2, 1)))
        b.linear(head, b.gap("gap", x), out_dim)
        return b.finish()
    raise ConfigError(f"unknown architecture family {family!r}")


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #

def fan_in(graph: NetworkGraph, node_name: str) -> int:
    n = graph[node_name]
    if n.kind == "conv":
        return n.in_channels * n.kernel * n.kernel
    if n.kind == "linear":
        return n.in_channels
    raise StructuralError(f"node {node_name!r} has no fan-in")


def init_param(graph: NetworkGraph, key: str, rng: SeededRng, dtype=np.float32) -> np.ndarray:
    """Fresh value for one parameter tensor from its own stream."""
    node_name, _, suffix = key.rpartition(".")
    shape = graph.param_shapes()[key]
    node = graph[node_name]
    if node.kind == "bn":
        fill = 1.0 if suffix in ("weight", "running_var") else 0.0
        return np.full(shape, fill, dtype=dtype)
    if suffix == "weight":
        return engine.kaiming_uniform_init(shape, fan_in(graph, node_name), rng.child(key), dtype)
    return engine.bias_uniform_init(shape, fan_in(graph, node_name), rng.child(key), dtype)


def init_params(graph: NetworkGraph, seed: int, dtype=np.float32, stream: str = "init") -> dict[str, np.ndarray]:
    rng = SeededRng(seed, stream)
    return {k: init_param(graph, k, rng, dtype) for k in graph.param_shapes()}


# --------------------------------------------------------------------------- #
# Execution
# --------------------------------------------------------------------------- #

def forward(graph: NetworkGraph, params: dict[str, np.ndarray], x: np.ndarray,
            train: bool = False, return_cache: bool = False):
    """Run the graph on a batch. Train mode updates bn running stats in place."""
    if not graph.shapes:
        validate_and_shape(graph)
    if tuple(x.shape[1:]) != graph.input_shape:
        raise DimensionError(f"input batch has sample shape {tuple(x.shape[1:])}, "
                             f"graph expects {graph.input_shape}")
    acts: dict[str, np.ndarray] = {}
    caches: dict[str, object] = {}
    for node in graph.nodes:
        k, name = node.kind, node.name
        ins = [acts[p] for p in node.inputs]
        if k == "input":
            out, cache = x, None
        elif k == "conv":
            out, cache = engine.conv2d_forward(ins[0], params[f"{name}.weight"],
                                               params.get(f"{name}.bias"), node.stride, node.padding)
        elif k == "linear":
            out, cache = engine.linear_forward(ins[0], params[f"{name}.weight"], params.get(f"{name}.bias"))
        elif k == "bn":
            out, cache = engine.batchnorm_forward(
                ins[0], params[f"{name}.weight"], params[f"{name}.bias"],
                params[f"{name}.running_mean"], params[f"{name}.running_var"], train)
        else:
            out, cache = engine.structural_apply(k, ins, node.kernel, node.stride, node.padding)
        acts[name] = out
        if return_cache:
            caches[name] = cache
    out = acts[graph.output]
    return (out, caches) if return_cache else out


def backward(graph: NetworkGraph, caches: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all trainable params given the gradient w.r.t. the output."""
    grads: dict[str, np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {graph.output: dout}
    for node in reversed(graph.nodes):
        g = upstream.pop(node.name, None)
        if g is None or node.kind == "input":
            if node.kind == "input" and g is not None:
                grads["__input__"] = g
            continue
        name, cache = node.name, caches[node.name]
        if node.kind == "conv":
            dx, dw, db = engine.conv2d_backward(g, cache)
            grads[f"{name}.weight"] = dw
            if db is not None:
                grads[f"{name}.bias"] = db
            dxs = [dx]
        elif node.kind == "linear":
            dx, dw, db = engine.linear_backward(g, cache)
            grads[f"{name}.weight"] = dw
            if db is not None:
                grads[f"{name}.bias"] = db
            dxs = [dx]
        elif node.kind == "bn":
            dx, dgamma, dbeta = engine.batchnorm_backward(g, cache)
            grads[f"{name}.weight"] = dgamma
            grads[f"{name}.bias"] = dbeta
            dxs = [dx]
        else:
            dxs = engine.structural_backward(node.kind, g, cache)
        for p, d in zip(node.inputs, dxs):
            if p in upstream:
                upstream[p] = upstream[p] + d
            else:
                upstream[p] = d
    return grads
