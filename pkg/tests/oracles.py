"""Deliberately naive reference implementations used as test oracles."""

import math

import numpy as np


def naive_conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """Six nested loops over (n, c_out, y, x, c_in, ky, kx), accumulating in float64."""
    n, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    og = c_out // groups
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for co in range(c_out):
            g = co // og
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[co])
                    for ci in range(cg):
                        for ky in range(k):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - padding
                                if 0 <= ix < wd:
                                    acc += float(x[b, g * cg + ci, iy, ix]) * float(w[co, ci, ky, kx])
                    out[b, co, oy, ox] = acc
    return out


def naive_maxpool(x, k, s, p):
    n, c, h, w = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -math.inf
                    for ky in range(k):
                        for kx in range(k):
                            iy, ix = oy * s + ky - p, ox * s + kx - p
                            if 0 <= iy < h and 0 <= ix < w:
                                best = max(best, x[b, ch, iy, ix])
                    out[b, ch, oy, ox] = best
    return out


def index_upsample(x, s):
    """out(c, y, x) = in(c, floor(y / s), floor(x / s)) evaluated index by index."""
    n, c, h, w = x.shape
    out = np.empty((n, c, h * s, w * s), dtype=x.dtype)
    for y in range(h * s):
        for xx in range(w * s):
            out[:, :, y, xx] = x[:, :, y // s, xx // s]
    return out


def brute_nms(boxes, scores, classes, thresh):
    """O(n^2) greedy suppression with explicit pairwise IoU."""
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], classes[i], boxes[i][0]))
    suppressed = [False] * n
    keep = []
    for a_pos, a in enumerate(order):
        if suppressed[a]:
            continue
        keep.append(a)
        for b in order[a_pos + 1 :]:
            if classes[b] == classes[a] and iou_scalar(boxes[a], boxes[b]) > thresh:
                suppressed[b] = True
    return keep


def iou_scalar(a, b):
    if tuple(a) == tuple(b):
        return 1.0
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    area = lambda r: max(0.0, r[2] - r[0]) * max(0.0, r[3] - r[1])
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def enumerate_params(block):
    """Trainable parameter count by walking the declared weight arrays."""
    total = 0
    for name, shape in block.params.items():
        if name.rsplit(".", 1)[1] in ("weight", "bias", "gamma", "beta"):
            total += int(np.prod(shape))
    return total


def iou_matrix(boxes):
    """All-pairs IoU by explicit broadcasting; identical rows count as 1."""
    b = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = (b[:, i] for i in range(4))
    iw = np.maximum(0.0, np.minimum(x2[:, None], x2[None]) - np.maximum(x1[:, None], x1[None]))
    ih = np.maximum(0.0, np.minimum(y2[:, None], y2[None]) - np.maximum(y1[:, None], y1[None]))
    inter = iw * ih
    area = np.maximum(0.0, x2 - x1) * np.maximum(0.0, y2 - y1)
    union = area[:, None] + area[None] - inter
    out = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    same = (b[:, None, :] == b[None, :, :]).all(axis=-1)
    return np.where(same, 1.0, out)


def brute_nms_matrix(boxes, scores, classes, thresh):
    """Same greedy walk as brute_nms, reading IoU from a precomputed table."""
    n = len(boxes)
    table = iou_matrix(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], classes[i], boxes[i][0]))
    suppressed = [False] * n
    keep = []
    for a_pos, a in enumerate(order):
        if suppressed[a]:
            continue
        keep.append(a)
        for b in order[a_pos + 1 :]:
            if classes[b] == classes[a] and table[a, b] > thresh:
                suppressed[b] = True
    return keep


def random_conv_case(rng, integer):
    """Random conv2d arguments covering dense, grouped and depthwise regimes."""
    regime = rng.choice(["dense", "grouped", "depthwise"])
    k = int(rng.choice([1, 2, 3, 5]))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k // 2 + 1))
    if regime == "depthwise":
        g = int(rng.integers(2, 6))
        c_in = c_out = g
    elif regime == "grouped":
        g = int(rng.integers(2, 4))
        c_in, c_out = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
    else:
        g, c_in, c_out = 1, int(rng.integers(1, 5)), int(rng.integers(1, 5))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    n = int(rng.integers(1, 3))
    if integer:
        x = rng.integers(-4, 5, (n, c_in, h, w)).astype(np.float32)
        wt = rng.integers(-3, 4, (c_out, c_in // g, k, k)).astype(np.float32)
        b = rng.integers(-5, 6, c_out).astype(np.float32)
    else:
        x = rng.normal(size=(n, c_in, h, w)).astype(np.float32)
        wt = rng.normal(size=(c_out, c_in // g, k, k)).astype(np.float32)
        b = rng.normal(size=c_out).astype(np.float32)
    return x, wt, (b if rng.random() < 0.5 else None), s, p, g
