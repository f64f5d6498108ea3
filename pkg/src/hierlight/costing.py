"""Static parameter and FLOP accounting over compiled graphs.

Conventions:

* params: conv weights, conv biases and BN gamma/beta. BN running
  statistics are buffers, not parameters.
* FLOPs: convolutions cost 2 * MACs; BN costs 2 and SiLU / residual add 1
  per output element; max-pooling costs k*k - 1 comparisons per output
  element; upsample, concat and channel slicing are free.
"""

from dataclasses import dataclass, field
import csv
import io
import json
import math

from .errors import ConfigError
from .graph import compile_model

__all__ = ["CostRow", "CostReport", "count_params", "count_flops", "analyze", "render_report", "round_half_up"]


@dataclass(frozen=True)
class CostRow:
    node: int
    kind: str
    out_shape: tuple
    params: int
    flops: int


@dataclass(frozen=True)
class CostReport:
    rows: tuple = ()
    input_size: int = 640
    scale: str = None
    name: str = ""

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def params_m(self):
        return self.params / 1e6

    @property
    def gflops(self):
        return self.flops / 1e9


def round_half_up(x, digits=1):
    q = 10**digits
    return math.floor(x * q + 0.5) / q


def _node_flops(node, shapes):
    return node.block.flops([shapes[s] for s in node.inputs])


def analyze(graph):
    """Per-node parameter and FLOP counts at the graph's compiled input size."""
    shapes = {-1: graph.input_shape}
    rows = []
    for node in graph.nodes:
        flops = _node_flops(node, shapes)
        shapes[node.index] = node.out_shape
        rows.append(CostRow(node.index, node.kind, node.out_shape, node.block.num_params(), flops))
    return CostReport(tuple(rows), graph.imgsz, graph.scale, graph.name)


def count_params(graph):
    return analyze(graph)


def count_flops(graph, input_size=None):
    """Like :func:`analyze`, recompiling first if `input_size` differs."""
    if input_size is not None and input_size != graph.imgsz:
        graph = compile_model(graph.spec, input_size)
    return analyze(graph)


def _shape_str(shape):
    return "x".join(str(d) for d in shape)


def render_report(report, fmt="text"):
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "kind", "out_shape", "params", "flops"])
        for r in report.rows:
            w.writerow([r.node, r.kind, _shape_str(r.out_shape), r.params, r.flops])
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "model": report.name,
            "scale": report.scale,
            "input_size": report.input_size,
            "rows": [
                {"node": r.node, "kind": r.kind, "out_shape": list(r.out_shape), "params": r.params, "flops": r.flops}
                for r in report.rows
            ],
            "total": {
                "params": report.params,
                "flops": report.flops,
                "params_m": round_half_up(report.params_m),
                "gflops": round_half_up(report.gflops),
            },
        }
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "text":
        head = f"{'node':>4}  {'kind':<8} {'output':<16} {'params':>12} {'flops':>16}"
        lines = [head, "-" * len(head)]
        for r in report.rows:
            lines.append(f"{r.node:>4}  {r.kind:<8} {_shape_str(r.out_shape[1:]):<16} {r.params:>12,} {r.flops:>16,}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<31} {report.params:>12,} {report.flops:>16,}")
        title = report.name + (f" ({report.scale})" if report.scale else "")
        lines.append(
            f"{title}: {round_half_up(report.params_m):.1f}M params, "
            f"{round_half_up(report.gflops):.1f} GFLOPs at {report.input_size}x{report.input_size}"
        )
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")
