"""``hierlight`` command-line interface.

Exit codes: 0 success, 1 check failure, 2 input error, 3 consistency error.
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from importlib import resources
import os
import sys

from threadpoolctl import threadpool_limits

from .costing import analyze, render_report
from .detect import DecodeConfig, letterbox, postprocess, to_json_line
from .dsl import apply_scale, parse_model
from .errors import ConsistencyError, HierlightError
from .gradcheck import BLOCKS, GROUPS, SPECIAL, gradcheck
from .graph import check_store, compile_model, dump_dot, forward, head_strides
from .ppm import read_ppm
from .weights import init_weights, load_weights, save_weights

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_CONSISTENCY = 0, 1, 2, 3
SCALES = ("n", "s", "m")


class CliInputError(HierlightError):
    pass


def threads_from_env():
    """HIERLIGHT_THREADS as an int; 0 (or unset) means automatic."""
    raw = os.environ.get("HIERLIGHT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliInputError(f"HIERLIGHT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliInputError(f"HIERLIGHT_THREADS must be >= 0, got {n}")
    return n


def resolve_model_path(name):
    """A file path, or the stem of a model bundled with the package."""
    if os.path.exists(name):
        return name
    bundled = resources.files("hierlight") / "models" / f"{name}.model"
    if not name.endswith(".model") and os.sep not in name and bundled.is_file():
        return str(bundled)
    return name


def _read_text(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliInputError(f"cannot open {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise CliInputError(f"cannot open {path}: not UTF-8 text") from None


def load_graph(model, scale=None, imgsz=640, strict=False):
    path = resolve_model_path(model)
    spec = parse_model(_read_text(path), strict=strict)
    if scale is not None:
        spec = apply_scale(spec, scale)
    return compile_model(spec, imgsz)


def cmd_analyze(args, out):
    graph = load_graph(args.model, args.scale, args.imgsz)
    out.write(render_report(analyze(graph), args.format))
    return EXIT_OK


def cmd_init(args, out):
    graph = load_graph(args.model, args.scale, args.imgsz)
    store = init_weights(graph, args.seed)
    try:
        save_weights(store, args.output)
    except OSError as exc:
        raise CliInputError(f"cannot write {args.output}: {exc.strerror}") from None
    total = store.num_trainable(graph.trainable_names())
    out.write(f"wrote {args.output}: {len(store)} tensors, {total} params\n")
    return EXIT_OK


def _detect_one(graph, store, path, cfg):
    image = read_ppm(path)
    x, transform = letterbox(image, graph.imgsz)
    taps = forward(graph, store, x)
    heads = [taps[f"P{s.bit_length() - 1}-head"] for s in cfg.strides]
    return [to_json_line(path, d) for d in postprocess(heads, transform, cfg)]


def cmd_run(args, out):
    # detection needs a real multi-level head, so parse strictly here
    graph = load_graph(args.model, args.scale, args.imgsz, strict=True)
    try:
        store = load_weights(args.weights)
    except OSError as exc:
        raise CliInputError(f"cannot open {args.weights}: {exc.strerror}") from None
    check_store(graph, store)
    detect = next(n for n in graph.nodes if n.kind == "Detect")
    classes = detect.block.params["cls.0.2.bias"][0]
    cfg = DecodeConfig(
        strides=tuple(head_strides(graph)), conf_thresh=args.conf, iou_thresh=args.iou, classes=classes
    )
    for path in args.images:
        if not os.path.isfile(path):
            raise CliInputError(f"cannot open {path}: no such file")
    workers = threads_from_env() or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=min(workers, len(args.images))) as pool:
        # map preserves input order
        for lines in pool.map(lambda p: _detect_one(graph, store, p, cfg), args.images):
            for line in lines:
                out.write(line + "\n")
    return EXIT_OK


def _gradcheck_ids(block):
    return GROUPS[block] if block in GROUPS else [block]


def cmd_gradcheck(args, out):
    failed = []
    out.write(f"{'check':<14} {'max rel err':>12}  result\n")
    for block_id in _gradcheck_ids(args.block):
        rep = gradcheck(block_id, seed=args.seed)
        out.write(f"{block_id:<14} {rep.max_rel_error:>12.3e}  {'pass' if rep.passed else 'FAIL'}\n")
        if not rep.passed:
            failed.append(rep)
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error / r.tolerance)
        sys.stderr.write(
            f"gradcheck failed: worst relative error {worst.max_rel_error:.3e} in {worst.op} "
            f"(tolerance {worst.tolerance:g})\n"
        )
        return EXIT_CHECK
    return EXIT_OK


def cmd_dump_graph(args, out):
    graph = load_graph(args.model, args.scale, args.imgsz)
    out.write(dump_dot(graph))
    return EXIT_OK


def _probability(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="hierlight", description="Cost analysis, inference and gradient checks.")
    sub = p.add_subparsers(dest="command", required=True)

    def model_cmd(name, help_text, fn):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("model", help="model file, or the name of a bundled model (e.g. hierlight)")
        sp.add_argument("--scale", choices=SCALES, default=None, help="size profile declared in the model file")
        sp.add_argument("--imgsz", type=_positive, default=640)
        sp.set_defaults(func=fn)
        return sp

    a = model_cmd("analyze", "per-node parameter and FLOP report", cmd_analyze)
    a.add_argument("--format", choices=("text", "csv", "json"), default="text")

    i = model_cmd("init", "write deterministic initial weights", cmd_init)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("-o", "--output", required=True)

    r = model_cmd("run", "detect objects in P6 PPM images", cmd_run)
    r.add_argument("weights")
    r.add_argument("images", nargs="+")
    r.add_argument("--conf", type=_probability, default=0.25)
    r.add_argument("--iou", type=_probability, default=0.45)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--block", choices=sorted(set(GROUPS) | set(BLOCKS) | set(SPECIAL)), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    model_cmd("dump-graph", "Graphviz DOT of the compiled graph", cmd_dump_graph)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        threads = threads_from_env()
        with threadpool_limits(limits=threads) if threads else nullcontext():
            return args.func(args, out)
    except ConsistencyError as exc:
        sys.stderr.write(f"hierlight: {exc}\n")
        return EXIT_CONSISTENCY
    except HierlightError as exc:
        sys.stderr.write(f"hierlight: {exc}\n")
        return EXIT_INPUT


def entry():
    try:
        code = main()
        sys.stdout.flush()
    except BrokenPipeError:
        # downstream closed early (e.g. `| head`); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        code = EXIT_OK
    sys.exit(code)
