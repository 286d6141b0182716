import numpy as np

from kevo.graph import LayerNode, NetworkGraph, build_architecture, validate_and_shape


def random_chain(rng: np.random.Generator, classes: int = 3) -> NetworkGraph:
    """Conv/bn/relu chain with random widths, kernels and strides, optional hidden linear."""
    c_in = int(rng.integers(1, 4))
    nodes = [LayerNode("input", "input", out_channels=c_in, spatial=(8, 8))]
    prev, c = "input", c_in
    for i in range(int(rng.integers(1, 4))):
        co = int(rng.integers(2, 9))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2])) if i else 1
        bias = bool(rng.integers(0, 2))
        nodes.append(LayerNode(f"conv{i}", "conv", (prev,), co, c, k, stride, k // 2, bias))
        nodes.append(LayerNode(f"bn{i}", "bn", (f"conv{i}",), co))
        nodes.append(LayerNode(f"relu{i}", "relu", (f"bn{i}",)))
        prev, c = f"relu{i}", co
    nodes.append(LayerNode("gap", "gap", (prev,)))
    prev = "gap"
    if rng.integers(0, 2):
        h = int(rng.integers(3, 9))
        nodes.append(LayerNode("hidden", "linear", (prev,), h, c, bias=True))
        nodes.append(LayerNode("hrelu", "relu", ("hidden",)))
        prev, c = "hrelu", h
    nodes.append(LayerNode("fc", "linear", (prev,), classes, c, bias=True))
    g = NetworkGraph(nodes, "fc")
    validate_and_shape(g)
    return g


def random_graph(rng: np.random.Generator, family: str) -> NetworkGraph:
    if family == "chain":
        return random_chain(rng)
    if family == "residual":
        return build_architecture("toy-resnet", int(rng.integers(2, 6)), (3, 8, 8), width=int(rng.integers(2, 7)))
    if family == "concat":
        return build_architecture("concat-block", int(rng.integers(2, 6)), (2, 8, 8), width=int(rng.integers(2, 7)),
                                  branch_widths=(int(rng.integers(1, 7)), int(rng.integers(1, 7))))
    raise ValueError(family)


def randomize_params(graph, rng: np.random.Generator, dtype=np.float64):
    """Random weights and non-trivial bn statistics."""
    params = {}
    for k, s in graph.param_shapes().items():
        if k.endswith("running_var"):
            params[k] = rng.uniform(0.5, 2.0, s).astype(dtype)
        elif k.endswith("running_mean"):
            params[k] = rng.normal(0, 0.5, s).astype(dtype)
        else:
            params[k] = rng.normal(0, 0.5, s).astype(dtype)
    return params


def channel_trace_oracle(graph, split_rate):
    """Independent KELS geometry: trace each conv/linear input channel back to its producer.

    Returns node -> (keep_out, keep_in list).
    """
    import math
    finals = graph.final_linears()

    def kept(c):
        return max(1, min(c, math.ceil(split_rate * c - 1e-9)))

    def source(node_name, ch):
        """(producer node, channel) for channel ``ch`` of ``node_name``'s output."""
        n = graph[node_name]
        if n.kind in ("input", "conv", "linear"):
            return n.name, ch
        if n.kind == "concat":
            for p in n.inputs:
                width = graph.shapes[p][0]
                if ch < width:
                    return source(p, ch)
                ch -= width
            raise AssertionError
        # bn / relu / gap / maxpool / add: channel-preserving; add operands agree
        return source(n.inputs[0], ch)

    def is_kept(producer, ch):
        n = graph[producer]
        if n.kind == "input":
            return True
        if n.kind == "linear" and n.name in finals:
            return True
        return ch < kept(n.out_channels)

    out = {}
    for n in graph.param_nodes():
        ins = [c for c in range(n.in_channels) if is_kept(*source(n.inputs[0], c))]
        ko = n.out_channels if n.name in finals else kept(n.out_channels)
        out[n.name] = (ko, ins)
    return out
