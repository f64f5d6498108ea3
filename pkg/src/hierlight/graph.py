"""Compile a resolved model description into an executable DAG and run it."""

from dataclasses import dataclass
import math

import numpy as np

from . import blocks
from .blocks import HFCCConfig, IRDCBConfig, LDownConfig
from .errors import CompileError, ConfigError, ConsistencyError, ShapeError

__all__ = ["GraphNode", "Graph", "compile_model", "forward", "dump_dot", "IMAGE_CHANNELS"]

IMAGE_CHANNELS = 3
IMAGE = -1  # source index of the network input


@dataclass(frozen=True)
class GraphNode:
    index: int
    kind: str
    inputs: tuple
    block: blocks.Block
    out_shapes: tuple  # one (n, c, h, w) per block output

    @property
    def out_shape(self):
        return self.out_shapes[0]


@dataclass(frozen=True)
class Graph:
    name: str
    imgsz: int
    nodes: tuple
    taps: dict  # tap name -> (node index, output slot)
    scale: str = None
    spec: object = None

    @property
    def input_shape(self):
        return (1, IMAGE_CHANNELS, self.imgsz, self.imgsz)

    def param_specs(self):
        """(qualified name, shape) for every stored tensor, in canonical order."""
        out = []
        for node in self.nodes:
            for local, shape in node.block.params.items():
                out.append((f"node{node.index}.{local}", shape))
        return out

    def trainable_names(self):
        return {f"node{n.index}.{local}" for n in self.nodes for local in n.block.trainable_names()}

    def node_params(self, store, node):
        prefix = f"node{node.index}."
        return {local: store[prefix + local] for local in node.block.params}

    def consumers(self):
        uses = {n.index: 0 for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src != IMAGE:
                    uses[src] += 1
        for node_idx, _ in self.taps.values():
            uses[node_idx] += 1
        return uses


def _build_block(node, in_channels):
    a = node.args
    kind = node.kind
    c1 = in_channels[0]
    if kind in ("Conv", "C2f", "C3", "SPPF"):
        return blocks.build_baseline(kind, c1, **a)
    if kind == "IRDCB":
        return blocks.build_irdcb(IRDCBConfig(c1, a["out"], a.get("t", 2), a.get("n", 2)))
    if kind == "LDown":
        return blocks.build_ldown(LDownConfig(c1, a["out"], a.get("k", 3), a.get("s", 2)))
    if kind == "HFCC":
        return blocks.build_hfcc(HFCCConfig(c1, a["out"]))
    if kind == "Upsample":
        return blocks.build_upsample(c1, a.get("scale", 2))
    if kind == "Concat":
        return blocks.build_concat(in_channels)
    if kind == "Detect":
        return blocks.build_detect(in_channels, a.get("classes", 10), a.get("reg_max", 16))
    raise ConfigError(f"unknown kind {kind!r}")


def compile_model(spec, imgsz=640):
    """Build the executable graph and infer every node's output shape."""
    if imgsz < 1:
        raise CompileError(f"image size must be positive, got {imgsz}")
    shapes = {IMAGE: (1, IMAGE_CHANNELS, imgsz, imgsz)}
    nodes = []
    for ns in spec.nodes:
        inputs = ns.resolved_sources()
        if len(inputs) != 1 and ns.kind not in ("Concat", "Detect"):
            raise CompileError(f"node {ns.index} ({ns.kind}) takes exactly one input")
        in_shapes = [shapes[i] for i in inputs]
        if ns.kind == "Concat":
            ref = in_shapes[0]
            for src, shp in zip(inputs[1:], in_shapes[1:]):
                if shp[2:] != ref[2:]:
                    raise CompileError(
                        f"node {ns.index} (Concat): input node {inputs[0]} is {ref[2]}x{ref[3]} "
                        f"but input node {src} is {shp[2]}x{shp[3]}"
                    )
        try:
            block = _build_block(ns, [s[1] for s in in_shapes])
            out_shapes = tuple(block.output_shapes(in_shapes))
        except (ConfigError, ShapeError) as exc:
            raise CompileError(f"node {ns.index} ({ns.kind}): {exc}") from None
        shapes[ns.index] = out_shapes[0]
        nodes.append(GraphNode(ns.index, ns.kind, inputs, block, out_shapes))

    taps = _taps(nodes, imgsz)
    graph = Graph(spec.name, imgsz, tuple(nodes), taps, getattr(spec, "scale", None), spec)
    unused = [i for i, uses in graph.consumers().items() if uses == 0]
    if unused:
        raise CompileError(f"node {unused[0]} output is never consumed")
    return graph


def _taps(nodes, imgsz):
    detect = [n for n in nodes if n.kind == "Detect"]
    if not detect:
        return {"output": (nodes[-1].index, 0)} if nodes else {}
    det = detect[0]
    by_index = {n.index: n for n in nodes}
    taps = {}
    prev = 0
    for slot, src in enumerate(det.inputs):
        h = by_index[src].out_shape[2] if src != IMAGE else imgsz
        stride = imgsz / h
        level = math.log2(stride)
        if stride <= prev or level != int(level):
            raise CompileError(
                f"node {det.index} (Detect): input {slot} has stride {stride:g}; "
                "strides must be ascending powers of two"
            )
        prev = stride
        taps[f"P{int(level)}"] = (src, 0)
        taps[f"P{int(level)}-head"] = (det.index, slot)
    return taps


def head_strides(graph):
    """Stride of every head level, ascending."""
    return sorted(2 ** int(k[1:]) for k in graph.taps if k.startswith("P") and not k.endswith("-head"))


def check_store(graph, store):
    for name, shape in graph.param_specs():
        if name not in store:
            raise ConsistencyError(f"weights lack tensor {name!r}")
        if tuple(store[name].shape) != tuple(shape):
            raise ConsistencyError(f"tensor {name!r} has shape {tuple(store[name].shape)}, graph expects {shape}")
    extra = set(store) - {n for n, _ in graph.param_specs()}
    if extra:
        raise ConsistencyError(f"weights contain unknown tensor {sorted(extra)[0]!r}")


def forward(graph, store, x, order=None):
    """Run the network and return every tap as ``{name: array}``.

    `order` may give any topological ordering of node indices; intermediates
    are released as soon as their last consumer has run.
    """
    check_store(graph, store)
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != graph.input_shape[1:]:
        raise ShapeError(f"input shape {x.shape} does not match compiled {graph.input_shape}")
    by_index = {n.index: n for n in graph.nodes}
    if order is None:
        order = [n.index for n in graph.nodes]
    remaining = graph.consumers()
    tapped = {}
    for name, (idx, slot) in graph.taps.items():
        tapped.setdefault(idx, []).append((name, slot))
    values = {IMAGE: [x]}
    done = set()
    result = {}
    for idx in order:
        node = by_index[idx]
        missing = [s for s in node.inputs if s != IMAGE and s not in done]
        if missing:
            raise ConsistencyError(f"node {idx} scheduled before its input node {missing[0]}")
        inputs = [values[s][0] for s in node.inputs]
        outs = node.block.forward(inputs, graph.node_params(store, node))
        values[idx] = outs
        done.add(idx)
        for name, slot in tapped.get(idx, ()):
            result[name] = outs[slot]
        for s in node.inputs:
            if s == IMAGE:
                continue
            remaining[s] -= 1
            if remaining[s] == 0:
                del values[s]
    return {name: result[name] for name in graph.taps}


def dump_dot(graph):
    """Graphviz text with one vertex per node and one edge per input."""
    lines = [f'digraph "{graph.name}" {{', "  rankdir=TB;"]
    for n in graph.nodes:
        shape = "x".join(str(d) for d in n.out_shape[1:])
        lines.append(f'  n{n.index} [label="{n.index}: {n.kind}\\n{shape}"];')
    for n in graph.nodes:
        for src in n.inputs:
            if src != IMAGE:
                lines.append(f"  n{src} -> n{n.index};")
    lines.append("}")
    return "\n".join(lines) + "\n"
