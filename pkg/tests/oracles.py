"""Brute-force reference implementations used as test oracles.

Written with plain Python loops and no calls into the package under test, so
that agreement with the vectorised code is evidence rather than tautology.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0, dilation=1):
    """Direct convolution: loop over batch, out channel, output pixel and every tap."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - ((kh - 1) * dilation + 1)) // stride + 1
    wo = (wd + 2 * pad - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride - pad + u * dilation
                                xx = j * stride - pad + v * dilation
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[bi, c, y, xx] * w[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out


def inflate_kernel(w, dilation):
    """Insert ``dilation - 1`` zeros between taps along both spatial axes."""
    cout, cin, kh, kw = w.shape
    out = np.zeros((cout, cin, (kh - 1) * dilation + 1, (kw - 1) * dilation + 1))
    out[:, :, ::dilation, ::dilation] = w
    return out


def mean_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1))
    for i in range(n):
        for k in range(c):
            s = 0.0
            for y in range(h):
                for z in range(w):
                    s += x[i, k, y, z]
            out[i, k, 0, 0] = s / (h * w)
    return out


def channel_max_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, 1, h, w))
    for i in range(n):
        for y in range(h):
            for z in range(w):
                out[i, 0, y, z] = max(x[i, k, y, z] for k in range(c))
    return out


def upsample_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for i in range(n):
        for k in range(c):
            for y in range(2 * h):
                for z in range(2 * w):
                    out[i, k, y, z] = x[i, k, y // 2, z // 2]
    return out


def concat_loops(parts):
    n, _, h, w = parts[0].shape
    total = sum(p.shape[1] for p in parts)
    out = np.zeros((n, total, h, w))
    k0 = 0
    for p in parts:
        for k in range(p.shape[1]):
            out[:, k0 + k] = p[:, k]
        k0 += p.shape[1]
    return out


def sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy_nms(boxes, scores, threshold):
    """Quadratic greedy NMS: repeatedly take the best remaining box, drop everything overlapping it."""
    alive = list(range(len(scores)))
    keep = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        alive = [i for i in alive if i != best and box_iou(boxes[best], boxes[i]) <= threshold]
    return keep


def assign_labels(anchors, gts, pos_iou=0.7, neg_iou=0.3):
    """Exhaustive IoU matrix labelling: 1 positive, 0 negative, -1 ignore."""
    n = len(anchors)
    if len(gts) == 0:
        return [0] * n
    m = [[box_iou(a, g) for g in gts] for a in anchors]
    labels = []
    for row in m:
        best = max(row)
        labels.append(1 if best >= pos_iou else (0 if best < neg_iou else -1))
    for g in range(len(gts)):
        col = [m[i][g] for i in range(n)]
        top = max(col)
        if top > 0:
            for i in range(n):
                if col[i] == top:
                    labels[i] = 1
    return labels


def greedy_match(dets, gts, threshold=0.5):
    """dets: list of (box, score) already in processing order. Returns TP flags and GT hit flags."""
    hit = [False] * len(gts)
    tp = []
    for box, _ in dets:
        best, best_iou = -1, threshold
        for g, gbox in enumerate(gts):
            if hit[g]:
                continue
            v = box_iou(box, gbox)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            hit[best] = True
        tp.append(best >= 0)
    return tp, hit
