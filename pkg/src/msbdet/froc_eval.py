"""FROC evaluation: greedy matching, score sweep, fixed-FP-rate and size-bucketed sensitivity.

Detections are matched per image in the deterministic order (score
descending, then image id, then input order). Because greedy matching only
ever looks at higher-scoring detections, one matching pass gives the
TP/FP flags for every score threshold at once.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detection_head import BoundingBox, Detection, iou_matrix

DEFAULT_FP_RATES = (0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    box: BoundingBox
    diameter_mm: float

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise ValueError(f"diameter_mm must be positive, got {self.diameter_mm}")

    def to_json(self) -> dict:
        b = self.box
        return {"image_id": self.image_id, "box": [b.x_min, b.y_min, b.x_max, b.y_max],
                "diameter_mm": self.diameter_mm}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Annotation":
        return cls(str(obj["image_id"]), BoundingBox(*map(float, obj["box"])), float(obj["diameter_mm"]))


@dataclass(frozen=True)
class SizeBuckets:
    """Lower-inclusive diameter bins: (0, e0), [e0, e1), ..., [e_last, inf)."""

    edges: tuple[float, ...] = (10.0, 30.0, 60.0, 100.0)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])) or (self.edges and self.edges[0] <= 0):
            raise ValueError(f"bucket edges must be positive and strictly increasing: {self.edges}")

    @property
    def labels(self) -> list[str]:
        e = [f"{x:g}" for x in self.edges]
        return [f"<{e[0]}", *(f"{a}-{b}" for a, b in zip(e, e[1:])), f">{e[-1]}"]

    def index(self, diameter_mm: float) -> int:
        return int(np.searchsorted(self.edges, diameter_mm, side="right"))


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fp_per_image: np.ndarray
    sensitivity: np.ndarray
    num_images: int
    num_lesions: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(f), float(s)) for f, s in zip(self.fp_per_image, self.sensitivity)]

    def to_json(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_lesions": self.num_lesions,
            "points": [
                {"threshold": float(t), "fp_per_image": float(f), "sensitivity": float(s)}
                for t, f, s in zip(self.thresholds, self.fp_per_image, self.sensitivity)
            ],
        }


@dataclass
class MatchResult:
    is_tp: np.ndarray  # per detection, aligned with the input order
    hit: np.ndarray  # per annotation
    hit_score: np.ndarray  # score of the detection that claimed each annotation, nan if none


def match_detections(
    detections: Sequence[Detection], annotations: Sequence[Annotation], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy matching within one image.

    Detections are visited by descending score (input order on ties); each
    claims the unmatched annotation with the highest IoU, provided that IoU
    is at least ``iou_threshold`` (lowest annotation index on IoU ties).
    """
    n_det, n_ann = len(detections), len(annotations)
    is_tp = np.zeros(n_det, dtype=bool)
    hit = np.zeros(n_ann, dtype=bool)
    hit_score = np.full(n_ann, np.nan)
    if n_det == 0 or n_ann == 0:
        return MatchResult(is_tp, hit, hit_score)
    scores = np.array([d.score for d in detections], dtype=np.float64)
    ious = iou_matrix(np.stack([d.box.as_array() for d in detections]),
                      np.stack([a.box.as_array() for a in annotations]))
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(hit, -1.0, ious[i])
        j = int(cand.argmax())
        if cand[j] >= iou_threshold:
            is_tp[i] = True
            hit[j] = True
            hit_score[j] = scores[i]
    return MatchResult(is_tp, hit, hit_score)


def _group(items: Iterable, key=lambda x: x.image_id) -> dict[str, list]:
    out: dict[str, list] = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def _as_grouped(x) -> dict[str, list]:
    if isinstance(x, Mapping):
        return {str(k): list(v) for k, v in x.items()}
    return _group(x)


@dataclass
class _Sweep:
    scores: np.ndarray  # every detection, in sweep order
    is_tp: np.ndarray
    annotations: list[Annotation] = field(default_factory=list)
    hit_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_images: int = 0


def _sweep(detections, annotations, iou_threshold: float, image_ids=None) -> _Sweep:
    dets = _as_grouped(detections)
    anns = _as_grouped(annotations)
    ids = sorted(set(image_ids) if image_ids is not None else set(dets) | set(anns))
    if not ids:
        raise ValueError("at least one image is required")
    rows = []  # (-score, image_id, input index, is_tp)
    all_anns: list[Annotation] = []
    hit_scores = []
    for image_id in ids:
        d, a = dets.get(image_id, []), anns.get(image_id, [])
        m = match_detections(d, a, iou_threshold)
        rows.extend((-det.score, image_id, k, bool(tp)) for k, (det, tp) in enumerate(zip(d, m.is_tp)))
        all_anns.extend(a)
        hit_scores.extend(m.hit_score)
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    scores = np.array([-r[0] for r in rows], dtype=np.float64)
    is_tp = np.array([r[3] for r in rows], dtype=bool)
    return _Sweep(scores, is_tp, all_anns, np.array(hit_scores, dtype=np.float64), len(ids))


def _curve(sw: _Sweep) -> FrocCurve:
    n_les = len(sw.annotations)
    if n_les == 0:
        raise ValueError("no annotations in the evaluation set: sensitivity is undefined")
    tp = np.cumsum(sw.is_tp)
    fp = np.cumsum(~sw.is_tp)
    # last index of each run of equal scores = operating point at that threshold
    last = np.flatnonzero(np.r_[sw.scores[1:] != sw.scores[:-1], True]) if len(sw.scores) else np.zeros(0, int)
    return FrocCurve(
        thresholds=sw.scores[last],
        fp_per_image=fp[last] / sw.num_images,
        sensitivity=tp[last] / n_les,
        num_images=sw.num_images,
        num_lesions=n_les,
    )


def froc(detections, annotations, iou_threshold: float = 0.5, image_ids=None) -> FrocCurve:
    """One operating point per distinct score, ordered by descending threshold.

    ``detections``/``annotations`` are flat iterables or ``{image_id: [...]}``
    mappings. Images are the union of ids seen, or ``image_ids`` if given
    (pass it so images with neither detections nor lesions still count).
    """
    return _curve(_sweep(detections, annotations, iou_threshold, image_ids))


def sensitivity_at(curve: FrocCurve, fp_rates: Sequence[float] = DEFAULT_FP_RATES,
                   mode: str = "step") -> list[float]:
    """Sensitivity at each FP rate.

    ``step``: best sensitivity among points with ``fp_per_image <= rate`` (0 if
    none). ``interp``: linear interpolation of the curve's upper envelope,
    anchored at (0, 0).
    """
    fp, sens = np.asarray(curve.fp_per_image), np.asarray(curve.sensitivity)
    if mode == "step":
        return [float(sens[fp <= r].max()) if np.any(fp <= r) else 0.0 for r in fp_rates]
    if mode == "interp":
        xs, ys = [0.0], [0.0]
        for f, s in zip(fp, sens):
            if f == xs[-1]:
                ys[-1] = max(ys[-1], s)
            else:
                xs.append(float(f))
                ys.append(max(float(s), ys[-1]))
        return [float(np.interp(r, xs, ys)) for r in fp_rates]
    raise ValueError(f"unknown mode {mode!r}")


def threshold_at(curve: FrocCurve, fp_rate: float) -> float:
    """Lowest score threshold whose operating point stays within ``fp_rate``; +inf if none does."""
    ok = np.flatnonzero(curve.fp_per_image <= fp_rate)
    return float(curve.thresholds[ok[-1]]) if len(ok) else float("inf")


def size_bucketed_sensitivity(
    detections,
    annotations,
    buckets: SizeBuckets = SizeBuckets(),
    fp_rate: float = 4.0,
    iou_threshold: float = 0.5,
    image_ids=None,
) -> dict[str, float | None]:
    """Per-bucket sensitivity at the single global threshold allowed by ``fp_rate``.

    Buckets without lesions map to ``None``.
    """
    sw = _sweep(detections, annotations, iou_threshold, image_ids)
    thr = threshold_at(_curve(sw), fp_rate)
    matched = np.zeros(len(buckets.edges) + 1, dtype=int)
    total = np.zeros_like(matched)
    for ann, s in zip(sw.annotations, sw.hit_scores):
        b = buckets.index(ann.diameter_mm)
        total[b] += 1
        matched[b] += bool(s >= thr)  # nan compares False
    return {lab: (float(m / t) if t else None) for lab, m, t in zip(buckets.labels, matched, total)}


def bucket_counts(detections, annotations, buckets: SizeBuckets = SizeBuckets(), fp_rate: float = 4.0,
                  iou_threshold: float = 0.5, image_ids=None) -> dict[str, tuple[int, int]]:
    """(matched, total) per bucket at the same threshold ``size_bucketed_sensitivity`` uses."""
    sw = _sweep(detections, annotations, iou_threshold, image_ids)
    thr = threshold_at(_curve(sw), fp_rate)
    out = {lab: [0, 0] for lab in buckets.labels}
    for ann, s in zip(sw.annotations, sw.hit_scores):
        cell = out[buckets.labels[buckets.index(ann.diameter_mm)]]
        cell[0] += bool(s >= thr)
        cell[1] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}


# ---------------------------------------------------------------------------
# file formats and reports
# ---------------------------------------------------------------------------


def write_ground_truth(path: str | Path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a in annotations:
            f.write(json.dumps(a.to_json()) + "\n")


def read_ground_truth(path: str | Path) -> list[Annotation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(Annotation.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad annotation record: {exc}") from exc
    return out


def format_detections_csv(detections: Iterable[Detection]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for d in detections:
        b = d.box
        w.writerow([d.image_id, repr(b.x_min), repr(b.y_min), repr(b.x_max), repr(b.y_max), repr(d.score)])
    return buf.getvalue()


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    Path(path).write_text(format_detections_csv(detections), encoding="utf-8")


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                x0, y0, x1, y1, s = map(float, row[1:])
                out.append(Detection(BoundingBox(x0, y0, x1, y1), s, row[0]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass
class EvalReport:
    curve: FrocCurve
    fp_rates: tuple[float, ...]
    sensitivities: list[float]
    bucket_fp_rate: float
    buckets: dict[str, float | None]
    bucket_totals: dict[str, tuple[int, int]]

    def to_json(self) -> dict:
        return {
            "fp_rates": list(self.fp_rates),
            "sensitivity": self.sensitivities,
            "bucket_fp_rate": self.bucket_fp_rate,
            "size_buckets": self.buckets,
            "bucket_counts": {k: list(v) for k, v in self.bucket_totals.items()},
            "froc": self.curve.to_json(),
        }

    def to_text(self, method: str = "model") -> str:
        def cell(v):
            return "-" if v is None else f"{v:.3f}"

        width = max(12, len(method) + 2)
        lines = [
            f"Sensitivity at FPs per image ({self.curve.num_images} images, {self.curve.num_lesions} lesions)",
            "Method".ljust(width) + "".join(f"{r:>8g}" for r in self.fp_rates),
            method.ljust(width) + "".join(f"{s:>8.3f}" for s in self.sensitivities),
            "",
            f"Sensitivity at {self.bucket_fp_rate:g} FPs per image by lesion diameter (mm)",
            "Method".ljust(width) + "".join(f"{lab:>9}" for lab in self.buckets),
            method.ljust(width) + "".join(f"{cell(v):>9}" for v in self.buckets.values()),
        ]
        return "\n".join(lines) + "\n"


def evaluate(
    detections,
    annotations,
    fp_rates: Sequence[float] = DEFAULT_FP_RATES,
    iou_threshold: float = 0.5,
    buckets: SizeBuckets = SizeBuckets(),
    bucket_fp_rate: float = 4.0,
    image_ids=None,
    mode: str = "step",
) -> EvalReport:
    detections, annotations = list(detections), list(annotations)
    curve = froc(detections, annotations, iou_threshold, image_ids)
    return EvalReport(
        curve=curve,
        fp_rates=tuple(fp_rates),
        sensitivities=sensitivity_at(curve, fp_rates, mode),
        bucket_fp_rate=bucket_fp_rate,
        buckets=size_bucketed_sensitivity(detections, annotations, buckets, bucket_fp_rate, iou_threshold, image_ids),
        bucket_totals=bucket_counts(detections, annotations, buckets, bucket_fp_rate, iou_threshold, image_ids),
    )
