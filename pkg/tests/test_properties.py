"""Randomized property checks driven by hypothesis."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierlight import ops
from hierlight.blocks import IRDCBConfig, build_irdcb
from hierlight.detect import box_iou, letterbox, nms, unletterbox
from hierlight.dsl import ScaleSpec, parse_model, scale_channels, scale_repeats, serialize_model
from hierlight.errors import ConfigError
from hierlight.weights import dump_weights, parse_weights
from oracles import brute_nms, naive_conv2d

FAST = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def boxes(draw, n_min=1, n_max=40):
    n = draw(st.integers(n_min, n_max))
    xy = draw(arrays(np.float64, (n, 2), elements=st.floats(0, 100, allow_nan=False)))
    wh = draw(arrays(np.float64, (n, 2), elements=st.floats(0.5, 50, allow_nan=False)))
    return np.concatenate([xy, xy + wh], axis=1)


@FAST
@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    m = box_iou(a, b)
    np.testing.assert_allclose(m, box_iou(b, a).T)
    assert ((m >= 0) & (m <= 1)).all()
    np.testing.assert_array_equal(np.diag(box_iou(a, a)), 1.0)


@FAST
@given(boxes(n_max=60), st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_nms_equals_brute_force(b, seed, thresh):
    rng = np.random.default_rng(seed)
    # coarse scores so that ties exercise the class/x1 tie-break
    scores = rng.integers(1, 6, len(b)) / 6
    classes = rng.integers(0, 3, len(b))
    keep = nms(b, scores, classes, thresh)
    assert keep.tolist() == brute_nms(b, scores, classes, thresh)
    kept = set(keep.tolist())
    for i in kept:
        for j in kept:
            if i < j and classes[i] == classes[j]:
                assert box_iou(b[i], b[j])[0, 0] <= thresh


@FAST
@given(
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(3, 7),
    st.sampled_from([1, 3]),
    st.integers(1, 2),
    st.integers(0, 1),
    st.booleans(),
    st.integers(0, 2**32 - 1),
)
def test_conv_matches_naive_loops(cg, og_mult, size, k, stride, pad, depthwise, seed):
    rng = np.random.default_rng(seed)
    groups = cg * og_mult if depthwise else 1
    c_in = groups if depthwise else cg
    c_out = groups * og_mult if depthwise else og_mult
    x = rng.integers(-4, 5, size=(1, c_in, size, size)).astype(np.float64)
    w = rng.integers(-3, 4, size=(c_out, c_in // groups, k, k)).astype(np.float64)
    if size + 2 * pad < k:
        return
    got = ops.conv2d(x, w, stride=stride, padding=pad, groups=groups)
    np.testing.assert_array_equal(got, naive_conv2d(x, w, stride=stride, padding=pad, groups=groups))


@FAST
@given(st.integers(1, 2048), st.floats(0.05, 1.0), st.sampled_from([256, 512, 768, 1024]))
def test_scaled_channels_are_multiples_of_eight(out, width, cap):
    spec = ScaleSpec("s", 0.33, width, cap)
    if min(out, cap) * width < 4:
        # nearest multiple of 8 is zero
        with pytest.raises(ConfigError):
            scale_channels(out, spec)
        return
    c = scale_channels(out, spec)
    assert c % 8 == 0 and 0 < c <= cap
    assert abs(c - min(out, cap) * width) <= 4


@FAST
@given(st.integers(1, 12), st.floats(0.1, 1.0))
def test_scaled_repeats_at_least_one(n, depth):
    r = scale_repeats(n, ScaleSpec("s", depth, 0.5, 1024))
    assert 1 <= r <= n


@st.composite
def chain_models(draw):
    lines = ["model gen", "scale s depth=0.33 width=0.5 max_channels=1024"]
    n = draw(st.integers(1, 8))
    for i in range(n):
        kind = draw(st.sampled_from(["Conv", "IRDCB", "LDown", "C2f", "HFCC"]))
        out = draw(st.sampled_from([8, 16, 32, 64]))
        if kind == "Conv":
            extra = f" k={draw(st.sampled_from([1, 3]))} s={draw(st.integers(1, 2))}"
        elif kind == "IRDCB":
            extra = f" t={draw(st.sampled_from(['1', '1.5', '2', '4']))} n={draw(st.integers(1, 3))}"
        elif kind == "LDown":
            extra = " k=3 s=2"
        elif kind == "C2f":
            extra = f" n={draw(st.integers(1, 3))} shortcut={draw(st.integers(0, 1))}"
        else:
            extra = ""
        lines.append(f"layer {i} from=-1 {kind} out={out}{extra}")
    return "\n".join(lines) + "\n"


@FAST
@given(chain_models())
def test_parse_serialize_fixed_point(text):
    spec = parse_model(text, strict=False)
    canon = serialize_model(spec)
    assert parse_model(canon, strict=False) == spec
    assert serialize_model(parse_model(canon, strict=False)) == canon


@FAST
@given(st.lists(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 3)),
                       elements=st.floats(width=32, allow_nan=False)), min_size=1, max_size=5))
def test_weights_round_trip_any_payload(tensors):
    store = {f"t{i}.weight": a for i, a in enumerate(tensors)}
    back = parse_weights(dump_weights(store))
    assert list(back) == list(store)
    for k in store:
        assert back[k].tobytes() == store[k].tobytes() and back[k].shape == store[k].shape


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 900), st.integers(1, 900))
def test_unletterbox_inverts_apply(h, w):
    _, t = letterbox(np.zeros((h, w, 3), np.uint8), 64)
    pts = np.array([[0, 0, w, h], [w * 0.25, h * 0.75, w * 0.5, h]], float)
    np.testing.assert_allclose(unletterbox(t.apply(pts), t), pts, atol=1e-4)
    assert t.pad_x >= 0 and t.pad_y >= 0


@FAST
@given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([1, 1.25, 1.5, 2, 3, 4]), st.integers(1, 4))
def test_irdcb_residual_iff_equal_channels(c1, c2, t, n):
    block = build_irdcb(IRDCBConfig(c1, c2, t, n))
    assert block.has_residual == (c1 == c2)
    hid = int(np.floor(c1 * t))
    assert block.num_params() == c1 * hid + 2 * hid + n * 11 * hid + hid * c2 + 2 * c2
