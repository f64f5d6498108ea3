"""Anchor-free box decoding, class-aware NMS and letterboxing."""

from dataclasses import dataclass
import json

import numpy as np
from scipy.special import expit, softmax

from .errors import ConfigError, InputError, ShapeError

__all__ = [
    "VISDRONE_CLASSES",
    "Detection",
    "DecodeConfig",
    "LetterboxTransform",
    "InputError",
    "dfl_expectation",
    "decode",
    "box_iou",
    "nms",
    "letterbox",
    "unletterbox",
    "clip_boxes",
    "postprocess",
    "to_json_line",
]

VISDRONE_CLASSES = (
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
)


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class DecodeConfig:
    reg_max: int = 16
    strides: tuple = (4, 8, 16, 32)
    conf_thresh: float = 0.25
    iou_thresh: float = 0.45
    classes: int = 10
    max_det: int = 300

    def __post_init__(self):
        if list(self.strides) != sorted(set(self.strides)):
            raise ConfigError(f"strides must be strictly ascending, got {self.strides}")
        for name in ("conf_thresh", "iou_thresh"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.reg_max < 1 or self.classes < 1:
            raise ConfigError("reg_max and classes must be positive")


def dfl_expectation(logits, axis=-1):
    """Expected bin index under softmax(logits) along `axis`."""
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax(logits, axis=axis)
    bins = np.arange(logits.shape[axis], dtype=np.float64)
    shape = [1] * logits.ndim
    shape[axis] = -1
    return (p * bins.reshape(shape)).sum(axis=axis)


def decode(heads, cfg=DecodeConfig()):
    """Turn raw head maps into candidate boxes in network-input pixels.

    `heads` is a sequence of (1, 4*reg_max + classes, h, w) arrays ordered
    like ``cfg.strides``.  Each cell keeps its best class if that class's
    sigmoid score exceeds ``cfg.conf_thresh``.  Returns ``(boxes, scores,
    class_ids)`` with boxes as (N, 4) x1, y1, x2, y2.
    """
    if len(heads) != len(cfg.strides):
        raise ShapeError(f"expected {len(cfg.strides)} head maps, got {len(heads)}")
    expected_c = 4 * cfg.reg_max + cfg.classes
    all_boxes, all_scores, all_cls = [], [], []
    for level, (head, stride) in enumerate(zip(heads, cfg.strides)):
        head = np.asarray(head, dtype=np.float64)
        if head.ndim != 4 or head.shape[0] != 1:
            raise ShapeError(f"head {level}: expected shape (1, C, h, w), got {head.shape}")
        if head.shape[1] != expected_c:
            raise ShapeError(f"head {level}: axis c is {head.shape[1]}, expected 4*{cfg.reg_max}+{cfg.classes}")
        _, _, h, w = head.shape
        cls_logit = head[0, 4 * cfg.reg_max :].reshape(cfg.classes, -1)
        best = cls_logit.argmax(axis=0)
        score = expit(cls_logit[best, np.arange(h * w)])
        keep = np.flatnonzero(score > cfg.conf_thresh)
        if keep.size == 0:
            continue
        box_logit = head[0, : 4 * cfg.reg_max].reshape(4, cfg.reg_max, -1)[:, :, keep]
        dist = dfl_expectation(box_logit, axis=1) * stride  # (4, k): left, top, right, bottom
        ys, xs = np.divmod(keep, w)
        cx = (xs + 0.5) * stride
        cy = (ys + 0.5) * stride
        all_boxes.append(np.stack([cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]], axis=1))
        all_scores.append(score[keep])
        all_cls.append(best[keep])
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(all_boxes), np.concatenate(all_scores), np.concatenate(all_cls).astype(np.int64)


def box_iou(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    same = np.all(a[:, None, :] == b[None, :, :], axis=-1)
    return np.where(same, 1.0, iou)


def nms(boxes, scores, class_ids, iou_thresh=0.45, max_det=None):
    """Greedy class-aware suppression; returns kept indices in rank order.

    Candidates are ranked by score (descending), then class id, then x1.
    A candidate is dropped when its IoU with an already kept box of the same
    class exceeds `iou_thresh`.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    order = np.lexsort((boxes[:, 0], class_ids, -scores))
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(int(i))
        if max_det is not None and len(keep) >= max_det:
            break
        rest = order[pos + 1 :]
        cand = alive[pos + 1 :] & (class_ids[rest] == class_ids[i])
        if cand.any():
            iou = box_iou(boxes[i], boxes[rest[cand]])[0]
            idx = np.flatnonzero(cand)
            alive[pos + 1 + idx[iou > iou_thresh]] = False
    return np.array(keep, dtype=np.int64)


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int  # left
    pad_y: int  # top
    src_h: int
    src_w: int
    size: int

    def apply(self, boxes):
        """Map source-image coordinates into the letterboxed frame."""
        b = np.asarray(boxes, dtype=np.float64).copy()
        b[..., 0::2] = b[..., 0::2] * self.scale + self.pad_x
        b[..., 1::2] = b[..., 1::2] * self.scale + self.pad_y
        return b


def _resize_bilinear(img, out_h, out_w):
    # half-pixel centres, edge clamping
    h, w = img.shape[:2]
    src = img.astype(np.float64)

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(out_h, h)
    x0, x1, fx = axis(out_w, w)
    rows = src[y0] * (1 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def letterbox(image, size=640, pad_value=114):
    """Aspect-preserving resize onto a size x size canvas.

    `image` is an (H, W, 3) uint8 array. Returns the (1, 3, size, size)
    float32 input scaled to [0, 1] and the :class:`LetterboxTransform`.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise InputError(f"image has a zero dimension: {h}x{w}")
    r = min(size / h, size / w)
    new_w = min(size, max(1, int(round(w * r))))
    new_h = min(size, max(1, int(round(h * r))))
    if (new_h, new_w) == (h, w):
        resized = image.astype(np.float64)
    else:
        resized = _resize_bilinear(image, new_h, new_w)
    pad_x = (size - new_w) // 2
    pad_y = (size - new_h) // 2
    canvas = np.full((size, size, 3), float(pad_value))
    canvas[pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    tensor = (canvas / 255.0).astype(np.float32).transpose(2, 0, 1)[None]
    return np.ascontiguousarray(tensor), LetterboxTransform(r, pad_x, pad_y, h, w, size)


def unletterbox(boxes, transform):
    """Inverse of :meth:`LetterboxTransform.apply` (no clipping)."""
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[..., 0::2] = (b[..., 0::2] - transform.pad_x) / transform.scale
    b[..., 1::2] = (b[..., 1::2] - transform.pad_y) / transform.scale
    return b


def clip_boxes(boxes, height, width):
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[..., 0::2] = np.clip(b[..., 0::2], 0, width)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, height)
    return b


def postprocess(heads, transform, cfg=DecodeConfig()):
    """decode -> NMS -> map back to the source image -> clip."""
    boxes, scores, cls = decode(heads, cfg)
    keep = nms(boxes, scores, cls, cfg.iou_thresh, cfg.max_det)
    out = clip_boxes(unletterbox(boxes[keep], transform), transform.src_h, transform.src_w)
    dets = []
    for b, s, c in zip(out, scores[keep], cls[keep]):
        if b[2] > b[0] and b[3] > b[1]:
            dets.append(Detection(float(b[0]), float(b[1]), float(b[2]), float(b[3]), int(c), float(s)))
    return dets


def to_json_line(image_name, det, labels=VISDRONE_CLASSES):
    label = labels[det.class_id] if det.class_id < len(labels) else f"class{det.class_id}"
    box = ", ".join(f"{v:.4f}" for v in det.box)
    return (
        f'{{"image": {json.dumps(image_name)}, "class": {det.class_id}, "label": {json.dumps(label)}, '
        f'"score": {det.score:.4f}, "box": [{box}]}}'
    )
