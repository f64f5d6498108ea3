"""Composite network blocks expressed as small graphs of primitive ops.

A :class:`Block` is an immutable description: a list of :class:`Step` records
over a value list that starts with the block inputs and grows by one entry per
step.  The same description drives forward evaluation, reverse-mode
gradients, shape inference and cost accounting, so all four always agree.

Parameter names are local to the block (``"expand.weight"``,
``"filter.1.gamma"``, ...).  The graph runtime prefixes them with the node
index.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError

__all__ = [
    "Step",
    "Block",
    "IRDCBConfig",
    "LDownConfig",
    "HFCCConfig",
    "build_conv",
    "build_irdcb",
    "build_ldown",
    "build_hfcc",
    "build_baseline",
    "build_upsample",
    "build_concat",
    "build_detect",
    "BN_EPS",
]

BN_EPS = 1e-3
TRAINABLE_LEAVES = ("weight", "bias", "gamma", "beta")


@dataclass(frozen=True)
class Step:
    op: str
    inputs: tuple
    stage: str = None
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Block:
    kind: str
    in_channels: tuple
    out_channels: tuple
    steps: tuple
    outputs: tuple
    params: dict  # local name -> shape, in declaration order

    @property
    def n_inputs(self):
        return len(self.in_channels)

    @property
    def c_out(self):
        return self.out_channels[0]

    @property
    def has_residual(self):
        return any(s.op == "add" and 0 in s.inputs for s in self.steps)

    def trainable_names(self):
        return [n for n in self.params if n.rsplit(".", 1)[1] in TRAINABLE_LEAVES]

    def num_params(self):
        return sum(math.prod(self.params[n]) for n in self.trainable_names())

    # -- evaluation -------------------------------------------------------

    def forward(self, inputs, params, keep=False):
        """Evaluate the block. Returns the output list, plus all values if `keep`."""
        if len(inputs) != self.n_inputs:
            raise ShapeError(f"{self.kind}: expected {self.n_inputs} inputs, got {len(inputs)}")
        for i, (x, c) in enumerate(zip(inputs, self.in_channels)):
            if np.shape(x)[1] != c:
                raise ShapeError(f"{self.kind}: input {i} axis c is {np.shape(x)[1]}, expected {c}")
        values = list(inputs)
        for step in self.steps:
            values.append(_forward_step(step, [values[j] for j in step.inputs], params))
        outs = [values[j] for j in self.outputs]
        return (outs, values) if keep else outs

    def backward(self, inputs, params, grad_outputs, detach=()):
        """Reverse-mode gradients.

        `grad_outputs` is one upstream gradient (or None) per block output.
        `detach` holds ``(step_index, input_slot)`` edges that do not
        propagate gradient.  Returns ``(grad_inputs, grad_params)``.
        """
        _, values = self.forward(inputs, params, keep=True)
        grads = [None] * len(values)
        for j, g in zip(self.outputs, grad_outputs):
            if g is not None:
                grads[j] = _accum(grads[j], np.asarray(g, dtype=np.float64))
        grad_params = {}
        n_in = self.n_inputs
        for si in range(len(self.steps) - 1, -1, -1):
            step = self.steps[si]
            g = grads[n_in + si]
            if g is None:
                continue
            ins = [values[j] for j in step.inputs]
            g_ins, g_par = _backward_step(step, ins, params, g)
            for name, val in g_par.items():
                grad_params[name] = _accum(grad_params.get(name), val)
            for slot, (j, gi) in enumerate(zip(step.inputs, g_ins)):
                if gi is None or (si, slot) in detach:
                    continue
                grads[j] = _accum(grads[j], gi)
        g_inputs = [g if g is not None else np.zeros(np.shape(x)) for g, x in zip(grads[:n_in], inputs)]
        return g_inputs, grad_params

    # -- static analysis --------------------------------------------------

    def infer_shapes(self, input_shapes):
        """Shapes of every value (inputs first) for the given input shapes."""
        shapes = [tuple(s) for s in input_shapes]
        for step in self.steps:
            shapes.append(_step_shape(step, [shapes[j] for j in step.inputs]))
        return shapes

    def output_shapes(self, input_shapes):
        shapes = self.infer_shapes(input_shapes)
        return [shapes[j] for j in self.outputs]

    def flops(self, input_shapes):
        shapes = self.infer_shapes(input_shapes)
        n_in = self.n_inputs
        return sum(_step_flops(s, shapes[n_in + i]) for i, s in enumerate(self.steps))


def _accum(acc, val):
    return val if acc is None else acc + val


# -- per-step semantics ------------------------------------------------------


def _forward_step(step, xs, params):
    a = step.attrs
    op = step.op
    if op == "conv":
        bias = params[f"{step.stage}.bias"] if a["bias"] else None
        return ops.conv2d(xs[0], params[f"{step.stage}.weight"], bias, a["s"], a["p"], a["g"])
    if op == "bn":
        st = step.stage
        return ops.batchnorm_infer(
            xs[0], params[f"{st}.gamma"], params[f"{st}.beta"], params[f"{st}.mean"], params[f"{st}.var"], BN_EPS
        )
    if op == "silu":
        return ops.silu(xs[0])
    if op == "add":
        return ops.add(xs[0], xs[1])
    if op == "concat":
        return ops.concat_channels(*xs)
    if op == "slice":
        return ops.channel_slice(xs[0], a["start"], a["stop"])
    if op == "upsample":
        return ops.upsample_nearest(xs[0], a["scale"])
    if op == "maxpool":
        return ops.maxpool2d(xs[0], a["k"], a["s"], a["p"])
    raise ConfigError(f"unknown op {op!r}")


def _backward_step(step, xs, params, g):
    a = step.attrs
    op = step.op
    if op == "conv":
        st = step.stage
        gx, gw, gb = ops.conv2d_backward(xs[0], params[f"{st}.weight"], g, a["s"], a["p"], a["g"], a["bias"])
        gp = {f"{st}.weight": gw}
        if a["bias"]:
            gp[f"{st}.bias"] = gb
        return [gx], gp
    if op == "bn":
        st = step.stage
        gx, gg, gb = ops.batchnorm_backward(
            xs[0], params[f"{st}.gamma"], params[f"{st}.mean"], params[f"{st}.var"], g, BN_EPS
        )
        return [gx], {f"{st}.gamma": gg, f"{st}.beta": gb}
    if op == "silu":
        return [ops.silu_backward(xs[0], g)], {}
    if op == "add":
        return [g, g], {}
    if op == "concat":
        bounds = np.cumsum([0] + [np.shape(x)[1] for x in xs])
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))], {}
    if op == "slice":
        gx = np.zeros(np.shape(xs[0]))
        gx[:, a["start"] : a["stop"]] = g
        return [gx], {}
    if op == "upsample":
        return [ops.upsample_backward(g, a["scale"])], {}
    if op == "maxpool":
        return [ops.maxpool2d_backward(xs[0], a["k"], a["s"], a["p"], g)], {}
    raise ConfigError(f"unknown op {op!r}")


def _step_shape(step, shapes):
    a = step.attrs
    op = step.op
    n, c, h, w = shapes[0]
    if op == "conv":
        if c != a["c_in"]:
            raise ShapeError(f"conv {step.stage}: axis c is {c}, expected {a['c_in']}")
        ho, wo = ops.out_size(h, a["k"], a["s"], a["p"]), ops.out_size(w, a["k"], a["s"], a["p"])
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv {step.stage}: spatial size {h}x{w} too small")
        return (n, a["c_out"], ho, wo)
    if op in ("bn", "silu"):
        return shapes[0]
    if op == "add":
        if shapes[0] != shapes[1]:
            raise ShapeError(f"add: shapes differ, {shapes[0]} vs {shapes[1]}")
        return shapes[0]
    if op == "concat":
        for other in shapes[1:]:
            if (other[0], other[2], other[3]) != (n, h, w):
                raise ShapeError(f"concat: spatial shapes differ, {shapes[0]} vs {other}")
        return (n, sum(s[1] for s in shapes), h, w)
    if op == "slice":
        return (n, a["stop"] - a["start"], h, w)
    if op == "upsample":
        return (n, c, h * a["scale"], w * a["scale"])
    if op == "maxpool":
        return (n, c, ops.out_size(h, a["k"], a["s"], a["p"]), ops.out_size(w, a["k"], a["s"], a["p"]))
    raise ConfigError(f"unknown op {op!r}")


def _step_flops(step, out_shape):
    numel = math.prod(out_shape)
    a = step.attrs
    if step.op == "conv":
        # 2 * MACs; bias add not counted
        return 2 * (a["c_in"] // a["g"]) * a["k"] * a["k"] * numel
    if step.op == "bn":
        return 2 * numel
    if step.op in ("silu", "add"):
        return numel
    if step.op == "maxpool":
        return (a["k"] * a["k"] - 1) * numel
    return 0


# -- builder helper ------------------------------------------------------------


class _Builder:
    def __init__(self, kind, in_channels):
        self.kind = kind
        self.in_channels = tuple(int(c) for c in in_channels)
        self.steps = []
        self.params = {}
        self.channels = list(self.in_channels)

    def _add(self, op, inputs, stage=None, c=None, **attrs):
        self.steps.append(Step(op, tuple(inputs), stage, attrs))
        self.channels.append(c if c is not None else self.channels[inputs[0]])
        return len(self.channels) - 1

    def conv(self, src, stage, c2, k=1, s=1, g=1, bn=True, act=True, bias=False):
        """Conv2d (+ BN (+ SiLU)); padding is k // 2."""
        c1 = self.channels[src]
        if c1 % g or c2 % g:
            raise ConfigError(f"{self.kind}.{stage}: groups={g} must divide channels {c1}->{c2}")
        self.params[f"{stage}.weight"] = (c2, c1 // g, k, k)
        if bias:
            self.params[f"{stage}.bias"] = (c2,)
        v = self._add("conv", [src], stage, c2, c_in=c1, c_out=c2, k=k, s=s, p=k // 2, g=g, bias=bias)
        if bn:
            for leaf in ("gamma", "beta", "mean", "var"):
                self.params[f"{stage}.{leaf}"] = (c2,)
            v = self._add("bn", [v], stage)
        if act:
            v = self._add("silu", [v])
        return v

    def concat(self, srcs):
        return self._add("concat", srcs, c=sum(self.channels[j] for j in srcs))

    def add(self, a, b):
        if self.channels[a] != self.channels[b]:
            raise ConfigError(f"{self.kind}: residual add over {self.channels[a]} vs {self.channels[b]} channels")
        return self._add("add", [a, b])

    def slice(self, src, start, stop):
        return self._add("slice", [src], c=stop - start, start=start, stop=stop)

    def block(self, outputs=None):
        if outputs is None:
            outputs = [len(self.channels) - 1]
        return Block(
            kind=self.kind,
            in_channels=self.in_channels,
            out_channels=tuple(self.channels[j] for j in outputs),
            steps=tuple(self.steps),
            outputs=tuple(outputs),
            params=dict(self.params),
        )


def _positive(name, value, minimum=1):
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")


# -- lightweight blocks ---------------------------------------------------------


@dataclass(frozen=True)
class IRDCBConfig:
    c1: int
    c2: int
    t: float = 2.0
    n: int = 2

    @property
    def hidden(self):
        """Expanded width: floor(c1 * t)."""
        return math.floor(self.c1 * self.t)

    @property
    def residual(self):
        return self.c1 == self.c2


@dataclass(frozen=True)
class LDownConfig:
    c1: int
    c2: int
    k: int = 3
    s: int = 2


@dataclass(frozen=True)
class HFCCConfig:
    c_in: int
    c_out: int


def build_conv(c1, c2, k=1, s=1, g=1, kind="Conv"):
    _positive("c1", c1)
    _positive("c2", c2)
    _positive("k", k)
    _positive("s", s)
    b = _Builder(kind, [c1])
    b.conv(0, "conv", c2, k, s, g)
    return b.block()


def build_irdcb(cfg):
    """Inverted residual depthwise block.

    1x1 expand to floor(c1*t) channels (BN, SiLU), `n` depthwise 3x3 filters
    (BN, SiLU each), linear 1x1 compress to c2 (BN only).  The input is added
    back when c1 == c2.
    """
    _positive("c1", cfg.c1)
    _positive("c2", cfg.c2)
    _positive("n", cfg.n)
    if cfg.t < 1:
        raise ConfigError(f"expansion factor t must be >= 1, got {cfg.t}")
    hidden = cfg.hidden
    if hidden < 1:
        raise ConfigError(f"expanded width floor({cfg.c1} * {cfg.t}) is 0")
    b = _Builder("IRDCB", [cfg.c1])
    v = b.conv(0, "expand", hidden, 1)
    for i in range(cfg.n):
        v = b.conv(v, f"filter.{i}", hidden, 3, 1, g=hidden)
    v = b.conv(v, "compress", cfg.c2, 1, act=False)
    if cfg.residual:
        b.add(0, v)
    return b.block()


def build_ldown(cfg):
    """Depthwise k x k stride-s conv (BN) followed by a 1x1 conv (BN, SiLU)."""
    _positive("c1", cfg.c1)
    _positive("c2", cfg.c2)
    _positive("k", cfg.k)
    if cfg.s < 2:
        raise ConfigError(f"LDown stride must be >= 2, got {cfg.s}")
    b = _Builder("LDown", [cfg.c1])
    v = b.conv(0, "dw", cfg.c1, cfg.k, cfg.s, g=cfg.c1, act=False)
    b.conv(v, "pw", cfg.c2, 1)
    return b.block()


def build_hfcc(cfg):
    _positive("c_in", cfg.c_in)
    _positive("c_out", cfg.c_out)
    if cfg.c_out > cfg.c_in:
        raise ConfigError(f"HFCC must compress channels, got {cfg.c_in} -> {cfg.c_out}")
    return build_conv(cfg.c_in, cfg.c_out, 1, kind="HFCC")


# -- baseline blocks -------------------------------------------------------------


def _bottleneck(b, src, stage, c, shortcut, k1, k2):
    v = b.conv(src, f"{stage}.cv1", c, k1)
    v = b.conv(v, f"{stage}.cv2", c, k2)
    return b.add(src, v) if shortcut else v


def _c2f(c1, c2, n=1, shortcut=False):
    c = c2 // 2
    b = _Builder("C2f", [c1])
    v = b.conv(0, "cv1", 2 * c, 1)
    ys = [b.slice(v, 0, c), b.slice(v, c, 2 * c)]
    for i in range(n):
        ys.append(_bottleneck(b, ys[-1], f"m.{i}", c, shortcut, 3, 3))
    b.conv(b.concat(ys), "cv2", c2, 1)
    return b.block()


def _c3(c1, c2, n=1, shortcut=True):
    c = c2 // 2
    b = _Builder("C3", [c1])
    v = b.conv(0, "cv1", c, 1)
    for i in range(n):
        v = _bottleneck(b, v, f"m.{i}", c, shortcut, 1, 3)
    w = b.conv(0, "cv2", c, 1)
    b.conv(b.concat([v, w]), "cv3", c2, 1)
    return b.block()


def _sppf(c1, c2, k=5):
    c = c1 // 2
    b = _Builder("SPPF", [c1])
    ys = [b.conv(0, "cv1", c, 1)]
    for _ in range(3):
        ys.append(b._add("maxpool", [ys[-1]], k=k, s=1, p=k // 2))
    b.conv(b.concat(ys), "cv2", c2, 1)
    return b.block()


def build_baseline(kind, c1, **args):
    """YOLOv8-style Conv, C2f, C3 and SPPF blocks.

    `args` uses the model-file keys: ``out``, ``k``, ``s``, ``n``, ``shortcut``.
    """
    out = args.get("out")
    if kind == "Conv":
        return build_conv(c1, out, args.get("k", 1), args.get("s", 1))
    if kind in ("C2f", "C3"):
        _positive("n", args.get("n", 1))
        if out < 2:
            raise ConfigError(f"{kind} needs at least 2 output channels, got {out}")
        maker = _c2f if kind == "C2f" else _c3
        default_sc = kind == "C3"
        return maker(c1, out, args.get("n", 1), bool(args.get("shortcut", default_sc)))
    if kind == "SPPF":
        return _sppf(c1, out, args.get("k", 5))
    raise ConfigError(f"unknown baseline block kind {kind!r}")


# -- structural blocks -------------------------------------------------------------


def build_upsample(c, scale=2):
    if scale < 2:
        raise ConfigError(f"upsample scale must be >= 2, got {scale}")
    b = _Builder("Upsample", [c])
    b._add("upsample", [0], scale=scale)
    return b.block()


def build_concat(channels):
    if len(channels) < 2:
        raise ConfigError(f"Concat needs at least 2 inputs, got {len(channels)}")
    b = _Builder("Concat", channels)
    b.concat(list(range(len(channels))))
    return b.block()


def build_detect(channels, classes=10, reg_max=16):
    """Anchor-free decoupled head, one box and one class branch per level.

    Each output has ``4 * reg_max + classes`` channels: distance-bin logits
    for left/top/right/bottom followed by class logits.
    """
    _positive("classes", classes)
    _positive("reg_max", reg_max)
    ch = list(channels)
    c_box = max(16, ch[0] // 4, reg_max * 4)
    c_cls = max(ch[0], min(classes, 100))
    b = _Builder("Detect", ch)
    outs = []
    for i in range(len(ch)):
        v = b.conv(i, f"box.{i}.0", c_box, 3)
        v = b.conv(v, f"box.{i}.1", c_box, 3)
        box = b.conv(v, f"box.{i}.2", 4 * reg_max, 1, bn=False, act=False, bias=True)
        v = b.conv(i, f"cls.{i}.0", c_cls, 3)
        v = b.conv(v, f"cls.{i}.1", c_cls, 3)
        cls = b.conv(v, f"cls.{i}.2", classes, 1, bn=False, act=False, bias=True)
        outs.append(b.concat([box, cls]))
    return b.block(outputs=outs)
