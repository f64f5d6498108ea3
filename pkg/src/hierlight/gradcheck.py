"""Finite-difference verification of the analytic gradients.

Every check evaluates the scalar objective ``L = sum(R * f(x))`` for a fixed
random ``R`` in float64 and compares the reverse-mode gradient against
central differences with step ``h``.  The ``fanout`` check also verifies the
multi-consumer gradient rule: the gradient at a feature read by several
fusion nodes equals the sum of the gradients obtained with all but one
consumer edge detached.
"""

from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .blocks import HFCCConfig, IRDCBConfig, LDownConfig
from .dsl import parse_model
from .graph import IMAGE, compile_model

__all__ = [
    "GradCheckReport",
    "BLOCKS",
    "GROUPS",
    "gradcheck",
    "graph_forward",
    "graph_backward",
    "relative_error",
]

TOLERANCE = 1e-4
STEP = 1e-3


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float = TOLERANCE
    groups: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric):
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||) of one group."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _random_params(block, rng):
    params = {}
    for name, shape in block.params.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = int(np.prod(shape[1:]))
            b = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-b, b, shape)
        elif leaf == "gamma":
            params[name] = rng.uniform(0.5, 1.5, shape)
        elif leaf == "var":
            params[name] = rng.uniform(0.5, 1.5, shape)
        else:  # beta, mean, bias
            params[name] = rng.normal(0.0, 0.5, shape)
    return params


def _sample(size, limit, rng):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def _fd(fn, arr, coords, h):
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for j, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + h
        plus = fn()
        flat[idx] = orig - h
        minus = fn()
        flat[idx] = orig
        out[j] = (plus - minus) / (2 * h)
    return out


def check_block(block, input_shapes, seed=0, max_coords=48, h=STEP, name=None, params=None):
    """Compare block.backward against central differences."""
    rng = np.random.default_rng(seed)
    inputs = [rng.normal(size=s) for s in input_shapes]
    if params is None:
        params = _random_params(block, rng)
    out_shapes = block.output_shapes(input_shapes)
    rs = [rng.normal(size=s) for s in out_shapes]

    def loss():
        outs = block.forward(inputs, params)
        return sum(float(np.sum(r * o)) for r, o in zip(rs, outs))

    g_in, g_par = block.backward(inputs, params, rs)
    groups = {}
    for i, x in enumerate(inputs):
        coords = _sample(x.size, max_coords, rng)
        groups[f"input{i}"] = relative_error(g_in[i].reshape(-1)[coords], _fd(loss, x, coords, h))
    for pname in block.trainable_names():
        arr = params[pname]
        coords = _sample(arr.size, max_coords, rng)
        analytic = g_par.get(pname, np.zeros(arr.shape)).reshape(-1)[coords]
        groups[pname] = relative_error(analytic, _fd(loss, arr, coords, h))
    return GradCheckReport(name or block.kind, max(groups.values()), groups=groups)


# -- whole-graph reverse mode -----------------------------------------------------


def graph_forward(graph, params, x):
    """Forward pass keeping every node output (for gradient work)."""
    values = {IMAGE: [x]}
    for node in graph.nodes:
        values[node.index] = node.block.forward([values[s][0] for s in node.inputs], params[node.index])
    return values


def graph_backward(graph, params, x, tap_grads, detach=()):
    """Reverse-mode sweep over a compiled graph.

    `params` maps node index to that node's local parameter dict.
    `tap_grads` maps tap name to its upstream gradient. `detach` holds
    ``(consumer_node, input_slot)`` edges that block gradient flow.
    Returns (per-node output gradients incl. IMAGE, per-node param grads).
    """
    values = graph_forward(graph, params, x)
    grads = {}
    for tap, g in tap_grads.items():
        node_idx, slot = graph.taps[tap]
        grads.setdefault(node_idx, [None] * len(values[node_idx]))
        grads[node_idx][slot] = np.asarray(g, dtype=np.float64)
    param_grads = {}
    for node in reversed(graph.nodes):
        g_out = grads.get(node.index)
        if g_out is None or all(g is None for g in g_out):
            continue
        ins = [values[s][0] for s in node.inputs]
        g_in, g_par = node.block.backward(ins, params[node.index], g_out)
        param_grads[node.index] = g_par
        for slot, (src, gi) in enumerate(zip(node.inputs, g_in)):
            if (node.index, slot) in detach:
                continue
            acc = grads.setdefault(src, [None])
            acc[0] = gi if acc[0] is None else acc[0] + gi
    return grads, param_grads


FANOUT_MODEL = """\
model fanout
layer 0 from=-1 Conv out=8 k=3 s=1
layer 1 from=0 HFCC out=4
layer 2 from=0 LDown out=4 k=3 s=2
layer 3 from=2 Upsample scale=2
layer 4 from=1,3 Concat
layer 5 from=4 IRDCB out=8 t=2 n=1
"""


def check_fanout(seed=0, size=8, max_coords=48, h=STEP):
    """Gradient at a feature with two consumers equals the sum over consumers."""
    rng = np.random.default_rng(seed)
    graph = compile_model(parse_model(FANOUT_MODEL, strict=False), imgsz=size)
    params = {n.index: _random_params(n.block, rng) for n in graph.nodes}
    x = rng.normal(size=graph.input_shape)
    out_shape = graph.nodes[-1].out_shape
    r = rng.normal(size=out_shape)
    shared = 0
    consumers = [(n.index, slot) for n in graph.nodes for slot, s in enumerate(n.inputs) if s == shared]

    full, _ = graph_backward(graph, params, x, {"output": r})
    per_path = []
    for keep in consumers:
        detach = {e for e in consumers if e != keep}
        g, _ = graph_backward(graph, params, x, {"output": r}, detach=detach)
        per_path.append(g[shared][0])
    groups = {"path_sum": relative_error(full[shared][0], sum(per_path))}

    def loss():
        return float(np.sum(r * graph_forward(graph, params, x)[graph.nodes[-1].index][0]))

    coords = _sample(x.size, max_coords, rng)
    groups["input"] = relative_error(full[IMAGE][0].reshape(-1)[coords], _fd(loss, x, coords, h))
    return GradCheckReport("fanout", max(groups.values()), groups=groups)


def _linear_chain():
    b = blocks._Builder("LinearChain", [4])
    v = b.conv(0, "a", 6, 1, bn=False, act=False)
    b.conv(v, "b", 3, 1, bn=False, act=False)
    return b.block()


def check_linear_chain(seed=0, h=STEP):
    """1x1 conv chain with L = sum(out); finite differences are exact up to rounding."""
    block = _linear_chain()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 4, 3, 3))
    params = _random_params(block, rng)
    ones = np.ones(block.output_shapes([x.shape])[0])

    def loss():
        return float(np.sum(block.forward([x], params)[0]))

    g_in, g_par = block.backward([x], params, [ones])
    groups = {"input0": relative_error(g_in[0], _fd(loss, x, np.arange(x.size), h))}
    for pname in block.trainable_names():
        arr = params[pname]
        groups[pname] = relative_error(g_par[pname], _fd(loss, arr, np.arange(arr.size), h))
    return GradCheckReport("linear-chain", max(groups.values()), tolerance=1e-10, groups=groups)


BLOCKS = {
    "conv": lambda: (blocks.build_conv(3, 6, k=3, s=2), [(1, 3, 7, 7)]),
    "dwconv": lambda: (blocks.build_conv(6, 6, k=3, s=1, g=6, kind="DWConv"), [(1, 6, 5, 5)]),
    "hfcc": lambda: (blocks.build_hfcc(HFCCConfig(8, 4)), [(1, 8, 5, 5)]),
    "ldown": lambda: (blocks.build_ldown(LDownConfig(6, 8, 3, 2)), [(1, 6, 8, 8)]),
    "irdcb": lambda: (blocks.build_irdcb(IRDCBConfig(16, 16, 2, 2)), [(1, 16, 6, 6)]),
    "irdcb-proj": lambda: (blocks.build_irdcb(IRDCBConfig(8, 16, 2, 2)), [(1, 8, 6, 6)]),
    "upsample": lambda: (blocks.build_upsample(3, 2), [(1, 3, 3, 3)]),
    "concat": lambda: (blocks.build_concat([2, 3]), [(1, 2, 3, 3), (1, 3, 3, 3)]),
    "c2f": lambda: (blocks.build_baseline("C2f", 6, out=8, n=1, shortcut=1), [(1, 6, 5, 5)]),
    "sppf": lambda: (blocks.build_baseline("SPPF", 8, out=4, k=5), [(1, 8, 6, 6)]),
}
SPECIAL = {"fanout": check_fanout, "linear-chain": check_linear_chain}

GROUPS = {
    "conv": ["conv", "dwconv", "linear-chain"],
    "hfcc": ["hfcc"],
    "ldown": ["ldown"],
    "irdcb": ["irdcb", "irdcb-proj"],
    "upsample": ["upsample", "concat"],
    "fanout": ["fanout"],
}
GROUPS["all"] = [b for key in ("conv", "hfcc", "ldown", "irdcb", "upsample", "fanout") for b in GROUPS[key]]


def gradcheck(block_id, shape=None, seed=0):
    """Run one registered check; `shape` overrides the default input shapes."""
    if block_id in SPECIAL:
        return SPECIAL[block_id](seed=seed)
    if block_id not in BLOCKS:
        raise KeyError(f"unknown block {block_id!r}; known: {sorted(BLOCKS) + sorted(SPECIAL)}")
    block, shapes = BLOCKS[block_id]()
    if shape is not None:
        shapes = [tuple(shape)]
    return check_block(block, shapes, seed=seed, name=block_id)
