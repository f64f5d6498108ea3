"""Lightweight multi-scale detector: model language, numpy runtime and cost accounting."""

from .blocks import HFCCConfig, IRDCBConfig, LDownConfig, build_hfcc, build_irdcb, build_ldown
from .costing import CostReport, analyze, count_flops, count_params, render_report
from .detect import DecodeConfig, Detection, decode, letterbox, nms, postprocess, unletterbox
from .dsl import apply_scale, load_model, override_args, parse_model, serialize_model
from .errors import (
    CompileError,
    ConfigError,
    ConsistencyError,
    FormatError,
    HierlightError,
    InputError,
    ParseError,
    ShapeError,
)
from .graph import compile_model, dump_dot, forward
from .weights import init_weights, load_weights, save_weights

__version__ = "0.1.0"
