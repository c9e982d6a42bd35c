"""Anchors, box geometry, target assignment, losses, NMS and the shared per-level head.

Boxes are ``(x_min, y_min, x_max, y_max)`` in input-image pixels, stored as
rows of float arrays. Widths are ``x_max - x_min`` (continuous coordinates,
no +1 convention).

Anchor ordering on a level follows the head's output layout flattened as
(y, x, anchor): ``index = (y * W + x) * A + a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import Conv2d, ConvSpec, ReLU, accumulate, sigmoid

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1

# exp() guard when decoding size deltas
_MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    image_id: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be finite and in [0, 1], got {self.score}")


@dataclass
class AnchorLayout:
    """``ratios`` are width:height. ``assignment`` is ``"per_level"`` (scale i on level i) or ``"all"``."""

    scales: tuple[float, ...] = (8, 16, 32, 64, 128)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    assignment: str = "per_level"

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.assignment not in ("per_level", "all"):
            raise ConfigError(f"unknown anchor assignment {self.assignment!r}")
        if min(self.scales) <= 0 or min(self.ratios) <= 0:
            raise ConfigError("anchor scales and ratios must be positive")

    def scales_for_level(self, level: int, num_levels: int) -> tuple[float, ...]:
        if self.assignment == "all":
            return self.scales
        if len(self.scales) != num_levels:
            raise ConfigError(
                f"per-level assignment needs one scale per level: {len(self.scales)} scales, {num_levels} levels"
            )
        return (self.scales[level],)

    def anchors_per_cell(self, num_levels: int) -> int:
        per_level = 1 if self.assignment == "per_level" else len(self.scales)
        if self.assignment == "per_level" and len(self.scales) != num_levels:
            raise ConfigError(
                f"per-level assignment needs one scale per level: {len(self.scales)} scales, {num_levels} levels"
            )
        return per_level * len(self.ratios)


def cell_anchors(scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Zero-centred anchors, scale-major then ratio; area of each is scale**2."""
    out = []
    for s in scales:
        for r in ratios:
            w, h = s * math.sqrt(r), s / math.sqrt(r)
            out.append((-w / 2, -h / 2, w / 2, h / 2))
    return np.array(out, dtype=np.float64)


def generate_anchors(layout: AnchorLayout, level_shapes, level_strides) -> list[np.ndarray]:
    """One (H*W*A, 4) array per level, anchors centred at ``(cell + 0.5) * stride``."""
    if len(level_shapes) != len(level_strides):
        raise ShapeError("level_shapes and level_strides differ in length")
    n_levels = len(level_shapes)
    out = []
    for lvl, ((h, w), stride) in enumerate(zip(level_shapes, level_strides)):
        base = cell_anchors(layout.scales_for_level(lvl, n_levels), layout.ratios)
        ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        centres = np.stack([xs, ys, xs, ys], axis=-1).reshape(-1, 1, 4)
        out.append((centres + base[None]).reshape(-1, 4))
    return out


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _arr(box) -> np.ndarray:
    return box.as_array() if isinstance(box, BoundingBox) else np.asarray(box, dtype=np.float64)


def area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    return float(iou_matrix(_arr(a), _arr(b))[0, 0])


def encode_box(anchor, target) -> np.ndarray:
    """Deltas ``(dx, dy, dw, dh)``: centre offsets over anchor size, log size ratios. Broadcasts over rows."""
    a, t = _arr(anchor), _arr(target)
    aw, ah = a[..., 2] - a[..., 0], a[..., 3] - a[..., 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("degenerate anchor")
    tw, th = t[..., 2] - t[..., 0], t[..., 3] - t[..., 1]
    acx, acy = a[..., 0] + 0.5 * aw, a[..., 1] + 0.5 * ah
    tcx, tcy = t[..., 0] + 0.5 * tw, t[..., 1] + 0.5 * th
    return np.stack([(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=-1)


def decode_box(anchor, deltas, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of ``encode_box``; ``image_size=(height, width)`` clamps the result to the image."""
    a, d = _arr(anchor), np.asarray(deltas, dtype=np.float64)
    aw, ah = a[..., 2] - a[..., 0], a[..., 3] - a[..., 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("degenerate anchor")
    acx, acy = a[..., 0] + 0.5 * aw, a[..., 1] + 0.5 * ah
    cx, cy = acx + d[..., 0] * aw, acy + d[..., 1] * ah
    w = aw * np.exp(np.minimum(d[..., 2], _MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[..., 3], _MAX_LOG_SCALE))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        height, width = image_size
        out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
        out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out


# ---------------------------------------------------------------------------
# target assignment and sampling
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    labels: np.ndarray  # (A,) POSITIVE / NEGATIVE / IGNORE
    matched: np.ndarray  # (A,) ground-truth index per anchor, -1 where none
    max_iou: np.ndarray  # (A,)


def assign_targets(anchors, gt_boxes, pos_iou: float = 0.7, neg_iou: float = 0.3) -> Assignment:
    """Label anchors by IoU with ground truth.

    Positive when the anchor's best IoU is ``>= pos_iou``, or when it attains
    the best IoU of some ground-truth box (every tied anchor counts, so each
    box that overlaps any anchor gets at least one positive). Negative when best IoU ``< neg_iou`` and
    not forced positive; ignore otherwise. ``matched`` is the anchor's
    best-IoU box (lowest index on ties), except that an anchor forced positive
    matches the highest-index box that forced it.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if len(gt) == 0:
        return Assignment(np.full(n, NEGATIVE, dtype=np.int64), np.full(n, -1, dtype=np.int64), np.zeros(n))
    ious = iou_matrix(anchors, gt)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best < neg_iou] = NEGATIVE
    labels[best >= pos_iou] = POSITIVE
    gt_best = ious.max(axis=0)
    for g in range(len(gt)):
        if gt_best[g] <= 0:
            continue
        forced = np.flatnonzero(ious[:, g] == gt_best[g])
        labels[forced] = POSITIVE
        matched[forced] = g
    return Assignment(labels, matched.astype(np.int64), best)


def sample_anchors(
    labels: np.ndarray, rng: np.random.Generator, batch_size: int = 256, positive_fraction: float = 0.5
) -> np.ndarray:
    """Boolean mask of anchors contributing to the loss: up to ``batch_size``, at most half positive."""
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    mask = np.zeros(len(labels), dtype=bool)
    if n_pos:
        mask[rng.choice(pos, size=n_pos, replace=False)] = True
    if n_neg:
        mask[rng.choice(neg, size=n_neg, replace=False)] = True
    return mask


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    total: float
    classification: float
    regression: float
    grad_logits: np.ndarray
    grad_deltas: np.ndarray
    terms: np.ndarray  # per-anchor contribution to ``total``; zero for unsampled anchors


def smooth_l1(x: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 value and derivative."""
    ax = np.abs(x)
    small = ax < beta
    val = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return val, grad


def detection_loss(
    class_logits,
    box_deltas,
    labels,
    target_deltas,
    sampled,
    beta: float = 1.0 / 9.0,
    regression_weight: float = 1.0,
) -> LossResult:
    """Binary cross-entropy over sampled anchors plus smooth-L1 over sampled positives.

    The classification term is averaged over the sampled anchors, the
    regression term (summed over the four deltas) over sampled positives.
    """
    logits = np.asarray(class_logits, dtype=np.float64).reshape(-1)
    deltas = np.asarray(box_deltas, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels).reshape(-1)
    sampled = np.asarray(sampled, dtype=bool).reshape(-1)
    target = np.asarray(target_deltas, dtype=np.float64).reshape(-1, 4)
    if not (len(logits) == len(deltas) == len(labels) == len(sampled) == len(target)):
        raise ShapeError("logits, deltas, labels, sample mask and targets must align with the anchors")
    n_sampled = int(sampled.sum())
    if n_sampled == 0:
        raise ValueError("no sampled anchors: the loss is undefined")
    if np.any(labels[sampled] == IGNORE):
        raise ValueError("ignored anchors cannot be sampled")

    y = (labels == POSITIVE).astype(np.float64)
    z = logits[sampled]
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    bce = np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0) - z * y[sampled]
    terms = np.zeros_like(logits)
    terms[sampled] = bce / n_sampled
    cls = float(bce.sum() / n_sampled)
    g_logits = np.zeros_like(logits)
    g_logits[sampled] = (sigmoid(z) - y[sampled]) / n_sampled

    pos = sampled & (labels == POSITIVE)
    n_pos = int(pos.sum())
    g_deltas = np.zeros_like(deltas)
    reg = 0.0
    if n_pos:
        val, grad = smooth_l1(deltas[pos] - target[pos], beta)
        reg = float(val.sum() / n_pos)
        terms[pos] += regression_weight * val.sum(axis=1) / n_pos
        g_deltas[pos] = regression_weight * grad / n_pos
    total = cls + regression_weight * reg
    return LossResult(total, cls, reg, g_logits, g_deltas, terms)


# ---------------------------------------------------------------------------
# non-maximum suppression
# ---------------------------------------------------------------------------


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(
    boxes,
    scores,
    iou_threshold: float = 0.7,
    score_threshold: float = 0.0,
    max_out: int | None = None,
) -> np.ndarray:
    """Greedy suppression. Returns kept indices in non-increasing score order.

    A box is suppressed when its IoU with an already-kept box exceeds
    ``iou_threshold``; boxes scoring below ``score_threshold`` are dropped first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = score_order(scores)
    order = order[scores[order] >= score_threshold]
    keep: list[int] = []
    areas = area(boxes)
    while order.size:
        i = order[0]
        keep.append(int(i))
        if max_out is not None and len(keep) >= max_out:
            break
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[ov <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms_detections(
    detections: Sequence[Detection],
    iou_threshold: float = 0.7,
    score_threshold: float = 0.0,
    max_out: int | None = None,
) -> list[Detection]:
    if not detections:
        return []
    boxes = np.stack([d.box.as_array() for d in detections])
    scores = np.array([d.score for d in detections])
    return [detections[i] for i in nms(boxes, scores, iou_threshold, score_threshold, max_out)]


# ---------------------------------------------------------------------------
# head network
# ---------------------------------------------------------------------------


def init_head_params(in_channels: int, head_channels: int, anchors_per_cell: int,
                     rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    a = anchors_per_cell
    return {
        "head.conv.weight": rng.normal(0, np.sqrt(2.0 / (9 * in_channels)), (head_channels, in_channels, 3, 3)).astype(dtype),
        "head.conv.bias": np.zeros(head_channels, dtype),
        "head.cls.weight": rng.normal(0, 0.01, (a, head_channels, 1, 1)).astype(dtype),
        "head.cls.bias": np.zeros(a, dtype),
        "head.reg.weight": rng.normal(0, 0.01, (4 * a, head_channels, 1, 1)).astype(dtype),
        "head.reg.bias": np.zeros(4 * a, dtype),
    }


class DetectionHead:
    """3x3 conv + ReLU, then sibling 1x1 objectness and delta convs. Weights are shared by all levels."""

    def __init__(self):
        self._tape: tuple | None = None

    def forward(self, x: np.ndarray, params) -> tuple[np.ndarray, np.ndarray]:
        """Returns logits (N, H*W*A) and deltas (N, H*W*A, 4)."""
        conv, act, cls, reg = Conv2d(ConvSpec.same(3)), ReLU(), Conv2d(), Conv2d()
        h = act.forward(conv.forward(x, params["head.conv.weight"], params["head.conv.bias"]))
        logits = cls.forward(h, params["head.cls.weight"], params["head.cls.bias"])
        deltas = reg.forward(h, params["head.reg.weight"], params["head.reg.bias"])
        self._tape = (conv, act, cls, reg, logits.shape)
        n, a, hh, ww = logits.shape
        flat_logits = logits.transpose(0, 2, 3, 1).reshape(n, -1)
        flat_deltas = deltas.reshape(n, a, 4, hh, ww).transpose(0, 3, 4, 1, 2).reshape(n, -1, 4)
        return flat_logits, flat_deltas

    def backward(self, g_logits: np.ndarray, g_deltas: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        conv, act, cls, reg, (n, a, hh, ww) = self._tape
        gl = g_logits.reshape(n, hh, ww, a).transpose(0, 3, 1, 2)
        gd = g_deltas.reshape(n, hh, ww, a, 4).transpose(0, 3, 4, 1, 2).reshape(n, 4 * a, hh, ww)
        gh1, dw, db = cls.backward(np.ascontiguousarray(gl))
        accumulate(grads, "head.cls.weight", dw)
        accumulate(grads, "head.cls.bias", db)
        gh2, dw, db = reg.backward(np.ascontiguousarray(gd))
        accumulate(grads, "head.reg.weight", dw)
        accumulate(grads, "head.reg.bias", db)
        (g,) = act.backward(gh1 + gh2)
        gx, dw, db = conv.backward(g)
        accumulate(grads, "head.conv.weight", dw)
        accumulate(grads, "head.conv.bias", db)
        return gx
