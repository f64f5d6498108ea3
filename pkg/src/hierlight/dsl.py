"""Line-oriented architecture description format.

Example::

    model tiny
    scale s depth=0.33 width=0.5 max_channels=1024
    layer 0 from=-1 Conv out=64 k=3 s=2
    layer 1 from=-1 IRDCB out=64 t=2 n=2

``from=-1`` refers to the previous layer (the image for layer 0).  Comments
start with ``#``; blank lines are ignored.
"""

from dataclasses import dataclass, field, replace
import math
import re

from .errors import ConfigError, ParseError

__all__ = [
    "KINDS",
    "NodeSpec",
    "ScaleSpec",
    "ModelSpec",
    "parse_model",
    "serialize_model",
    "apply_scale",
    "load_model",
    "override_args",
]

# allowed keys per kind; keys in the first set are required
KINDS = {
    "Conv": ({"out"}, {"out", "k", "s"}),
    "C2f": ({"out"}, {"out", "n", "shortcut"}),
    "C3": ({"out"}, {"out", "n", "shortcut"}),
    "SPPF": ({"out"}, {"out", "k"}),
    "IRDCB": ({"out"}, {"out", "t", "n"}),
    "LDown": ({"out"}, {"out", "k", "s"}),
    "HFCC": ({"out"}, {"out"}),
    "Upsample": (set(), {"scale"}),
    "Concat": (set(), set()),
    "Detect": (set(), {"classes", "reg_max"}),
}
# keys that may carry a fractional value
FLOAT_KEYS = {"t"}
REPEATED_KINDS = ("C2f", "C3")

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*$")
_INT = re.compile(r"-?\d+$")
_FLOAT = re.compile(r"-?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


@dataclass(frozen=True)
class NodeSpec:
    index: int
    sources: tuple  # raw "from" list, -1 = previous layer
    kind: str
    args: dict = field(default_factory=dict)

    def resolved_sources(self):
        """Absolute input indices; -1 only survives for layer 0 (the image)."""
        return tuple(self.index - 1 if s == -1 else s for s in self.sources)


@dataclass(frozen=True)
class ScaleSpec:
    name: str
    depth: float
    width: float
    max_channels: int

    def __post_init__(self):
        if self.name not in ("n", "s", "m"):
            raise ConfigError(f"scale name must be n, s or m, got {self.name!r}")
        for label, v in (("depth", self.depth), ("width", self.width)):
            if not 0 < v <= 1:
                raise ConfigError(f"{label} multiplier must be in (0, 1], got {v}")
        if self.max_channels <= 0 or self.max_channels % 8:
            raise ConfigError(f"max_channels must be a positive multiple of 8, got {self.max_channels}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    nodes: tuple
    scales: dict = field(default_factory=dict)
    scale: str = None  # set once apply_scale has resolved the spec

    @property
    def detect(self):
        for node in self.nodes:
            if node.kind == "Detect":
                return node
        return None

    @property
    def classes(self):
        d = self.detect
        return d.args.get("classes", 10) if d is not None else 10


def _split_kv(tok, lineno, col):
    if "=" not in tok:
        raise ParseError(f"expected KEY=VALUE, got {tok!r}", lineno, col)
    key, _, val = tok.partition("=")
    if not key or not val:
        raise ParseError(f"malformed key=value {tok!r}", lineno, col)
    return key, val


def _int(val, lineno, col, what):
    if not _INT.match(val):
        raise ParseError(f"{what}: expected an integer, got {val!r}", lineno, col)
    return int(val)


def _number(val, lineno, col, what):
    if _INT.match(val):
        return int(val)
    if _FLOAT.match(val):
        return float(val)
    raise ParseError(f"{what}: expected a number, got {val!r}", lineno, col)


def _tokens(line):
    """Whitespace-separated tokens with 1-based start columns."""
    return [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]


def parse_model(text, strict=True):
    """Parse model text into a validated :class:`ModelSpec`.

    With `strict`, the model must contain exactly one Detect layer fed by
    three or four inputs.  Test fixtures pass ``strict=False``.
    """
    name = None
    scales = {}
    nodes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        toks = _tokens(line)
        if not toks:
            continue
        head, col = toks[0]
        if name is None:
            if head != "model" or len(toks) != 2 or not _IDENT.match(toks[1][0]):
                raise ParseError("file must start with 'model NAME'", lineno, col)
            name = toks[1][0]
            continue
        if head == "scale":
            if nodes:
                raise ParseError("scale lines must precede layers", lineno, col)
            scales_entry = _parse_scale(toks, lineno)
            if scales_entry.name in scales:
                raise ParseError(f"duplicate scale {scales_entry.name!r}", lineno, col)
            scales[scales_entry.name] = scales_entry
        elif head == "layer":
            nodes.append(_parse_layer(toks, lineno, len(nodes)))
        else:
            raise ParseError(f"unknown statement {head!r}", lineno, col)
    if name is None:
        raise ParseError("empty model description", 1, 1)
    if not nodes:
        raise ParseError("model has no layers")
    spec = ModelSpec(name, tuple(nodes), scales)
    validate(spec, strict)
    return spec


def _parse_scale(toks, lineno):
    if len(toks) != 5:
        raise ParseError("expected 'scale NAME depth=F width=F max_channels=I'", lineno, toks[0][1])
    sname, col = toks[1]
    if sname not in ("n", "s", "m"):
        raise ParseError(f"scale name must be n, s or m, got {sname!r}", lineno, col)
    vals = {}
    for (tok, col), key in zip(toks[2:], ("depth", "width", "max_channels")):
        k, v = _split_kv(tok, lineno, col)
        if k != key:
            raise ParseError(f"expected {key}=..., got {k!r}", lineno, col)
        vals[k] = _int(v, lineno, col, k) if key == "max_channels" else float(_number(v, lineno, col, k))
    try:
        return ScaleSpec(sname, vals["depth"], vals["width"], vals["max_channels"])
    except ConfigError as exc:
        raise ParseError(str(exc), lineno, toks[1][1]) from None


def _parse_layer(toks, lineno, expected_index):
    if len(toks) < 4:
        raise ParseError("expected 'layer INDEX from=LIST KIND [KEY=VALUE ...]'", lineno, toks[0][1])
    idx_tok, col = toks[1]
    index = _int(idx_tok, lineno, col, "layer index")
    if index < expected_index:
        raise ParseError(f"duplicate layer index {index}", lineno, col)
    if index != expected_index:
        raise ParseError(f"expected layer index {expected_index}, got {index}", lineno, col)

    from_tok, col = toks[2]
    key, val = _split_kv(from_tok, lineno, col)
    if key != "from":
        raise ParseError(f"expected from=..., got {key!r}", lineno, col)
    sources = []
    for part in val.split(","):
        src = _int(part, lineno, col, "from")
        if src < -1:
            raise ParseError(f"from index {src} not allowed (only -1 is relative)", lineno, col)
        if src >= index:
            raise ParseError(f"forward reference: layer {index} takes input from layer {src}", lineno, col)
        sources.append(src)

    kind, col = toks[3]
    if kind not in KINDS:
        raise ParseError(f"unknown layer kind {kind!r}", lineno, col)
    required, allowed = KINDS[kind]
    args = {}
    for tok, col in toks[4:]:
        k, v = _split_kv(tok, lineno, col)
        if k not in allowed:
            raise ParseError(f"{kind} does not accept key {k!r}", lineno, col)
        if k in args:
            raise ParseError(f"duplicate key {k!r}", lineno, col)
        args[k] = _number(v, lineno, col, k) if k in FLOAT_KEYS else _int(v, lineno, col, k)
    missing = required - set(args)
    if missing:
        raise ParseError(f"{kind} requires {', '.join(sorted(missing))}", lineno, toks[3][1])

    n_src = len(sources)
    if kind == "Concat" and n_src < 2:
        raise ParseError("Concat requires at least 2 inputs", lineno, toks[2][1])
    if kind not in ("Concat", "Detect") and n_src != 1:
        raise ParseError(f"{kind} takes exactly 1 input, got {n_src}", lineno, toks[2][1])
    if index == 0 and sources != [-1]:
        raise ParseError("layer 0 must read from=-1 (the image)", lineno, toks[2][1])
    return NodeSpec(index, tuple(sources), kind, args)


def validate(spec, strict=True):
    for node in spec.nodes:
        for src in node.resolved_sources():
            if src >= node.index:
                raise ParseError(f"layer {node.index}: forward reference to {src}")
    if strict:
        detects = [n for n in spec.nodes if n.kind == "Detect"]
        if len(detects) != 1:
            raise ParseError(f"model must contain exactly one Detect layer, found {len(detects)}")
        if len(detects[0].sources) not in (3, 4):
            raise ParseError(f"Detect takes 3 or 4 inputs, got {len(detects[0].sources)}")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_model(spec):
    """Canonical text: fixed statement order, keys sorted, no comments."""
    lines = [f"model {spec.name}"]
    for sname in ("n", "s", "m"):
        sc = spec.scales.get(sname)
        if sc is not None:
            lines.append(
                f"scale {sc.name} depth={_fmt(float(sc.depth))} width={_fmt(float(sc.width))} "
                f"max_channels={sc.max_channels}"
            )
    for node in spec.nodes:
        parts = [f"layer {node.index}", "from=" + ",".join(str(s) for s in node.sources), node.kind]
        parts += [f"{k}={_fmt(node.args[k])}" for k in sorted(node.args)]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def scale_channels(out, scale):
    """Width-scaled channel count rounded to the nearest multiple of 8."""
    c = 8 * _round_half_up(min(out, scale.max_channels) * scale.width / 8)
    if c <= 0:
        raise ConfigError(f"channel count {out} scales to {c} at width {scale.width}")
    return c


def scale_repeats(n, scale):
    return max(_round_half_up(n * scale.depth), 1)


def apply_scale(spec, scale):
    """Resolve channel widths and C2f/C3 repeat counts for one size profile.

    `scale` is a :class:`ScaleSpec` or the name of a profile declared in the
    model file.  IRDCB's ``n`` counts depthwise layers and is left unchanged.
    """
    if isinstance(scale, str):
        if scale not in spec.scales:
            raise ConfigError(f"model {spec.name!r} declares no scale {scale!r}")
        scale = spec.scales[scale]
    nodes = []
    for node in spec.nodes:
        args = dict(node.args)
        if "out" in args:
            args["out"] = scale_channels(args["out"], scale)
        if node.kind in REPEATED_KINDS and "n" in args:
            args["n"] = scale_repeats(args["n"], scale)
        nodes.append(replace(node, args=args))
    return replace(spec, nodes=tuple(nodes), scale=scale.name)


def load_model(path, scale=None, strict=True):
    """Read a model file, optionally resolving it at a named scale."""
    with open(path, encoding="utf-8") as fh:
        spec = parse_model(fh.read(), strict=strict)
    return apply_scale(spec, scale) if scale is not None else spec


def override_args(spec, kind, **args):
    """Copy of `spec` with `args` set on every node of `kind` (e.g. IRDCB t and n)."""
    nodes = tuple(replace(n, args={**n.args, **args}) if n.kind == kind else n for n in spec.nodes)
    return replace(spec, nodes=nodes)
