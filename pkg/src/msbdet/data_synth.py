"""Synthetic 3-slice phantoms with elliptical pseudo-lesions, and their on-disk dataset form.

Each image index draws from its own generator seeded with ``(spec.seed,
index)``, so a dataset is a pure function of the spec and the split counts
and images can be generated in any order.

Lesions are axis-aligned ellipses, which keeps the annotation box tight and
makes its long side equal to the lesion's long axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .detection_head import BoundingBox
from .errors import ConfigError, CorruptionError
from .froc_eval import Annotation, write_ground_truth

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
_U16 = 65535


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 512
    lesions_per_image: tuple[int, int] = (1, 3)
    d_min_mm: float = 4.0
    d_max_mm: float = 360.0
    mm_per_pixel: float = 0.8
    noise_level: float = 0.02
    seed: int = 0
    aspect_range: tuple[float, float] = (0.6, 1.0)  # short/long axis ratio
    contrast_range: tuple[float, float] = (0.25, 0.45)
    edge_softness_px: float = 1.0
    slice_attenuation: float = 0.85
    slice_jitter: float = 0.05
    placement_retries: int = 50

    def __post_init__(self):
        lo, hi = self.lesions_per_image
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad lesions_per_image range {self.lesions_per_image}")
        if not 0 < self.d_min_mm < self.d_max_mm:
            raise ConfigError("need 0 < d_min_mm < d_max_mm")
        if self.mm_per_pixel <= 0 or self.image_size < 8:
            raise ConfigError("mm_per_pixel must be positive and image_size at least 8")
        if self.d_max_mm / self.mm_per_pixel > self.image_size:
            raise ConfigError(
                f"largest lesion ({self.d_max_mm / self.mm_per_pixel:.1f} px) does not fit a {self.image_size} px image"
            )
        if self.noise_level < 0:
            raise ConfigError("noise_level must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomSpec":
        d = dict(d)
        for k in ("lesions_per_image", "aspect_range", "contrast_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Lesion:
    cx: float
    cy: float
    semi_x: float
    semi_y: float
    contrast: float

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.cx - self.semi_x, self.cy - self.semi_y, self.cx + self.semi_x, self.cy + self.semi_y)

    def diameter_mm(self, mm_per_pixel: float) -> float:
        return 2.0 * max(self.semi_x, self.semi_y) * mm_per_pixel


def _rng(spec: PhantomSpec, index: int) -> np.random.Generator:
    if index < 0:
        raise ValueError("image index must be non-negative")
    return np.random.default_rng([spec.seed, index])


def sample_lesions(spec: PhantomSpec, rng: np.random.Generator) -> tuple[list[Lesion], int]:
    """Place non-overlapping lesions; returns (placed, requested)."""
    size = spec.image_size
    lo, hi = spec.lesions_per_image
    requested = int(rng.integers(lo, hi + 1))
    placed: list[Lesion] = []
    boxes: list[np.ndarray] = []
    log_lo, log_hi = math.log(spec.d_min_mm), math.log(spec.d_max_mm)
    for _ in range(requested):
        d_px = math.exp(rng.uniform(log_lo, log_hi)) / spec.mm_per_pixel
        long_semi = d_px / 2
        short_semi = long_semi * rng.uniform(*spec.aspect_range)
        semi_x, semi_y = (long_semi, short_semi) if rng.random() < 0.5 else (short_semi, long_semi)
        contrast = rng.uniform(*spec.contrast_range)
        for _ in range(spec.placement_retries):
            cx = rng.uniform(semi_x, size - semi_x)
            cy = rng.uniform(semi_y, size - semi_y)
            box = np.array([cx - semi_x, cy - semi_y, cx + semi_x, cy + semi_y])
            if all(_disjoint(box, b) for b in boxes):
                boxes.append(box)
                placed.append(Lesion(cx, cy, semi_x, semi_y, contrast))
                break
    return placed, requested


def _disjoint(a: np.ndarray, b: np.ndarray, margin: float = 2.0) -> bool:
    return a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size), 0.35)
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.02, 0.06) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    return img


def _lesion_profile(les: Lesion, size: int, softness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5  # pixel centres
    rho = np.sqrt(((xx - les.cx) / les.semi_x) ** 2 + ((yy - les.cy) / les.semi_y) ** 2)
    # signed distance to the rim in pixels (approximate, exact for circles)
    dist = (1.0 - rho) * min(les.semi_x, les.semi_y)
    return 0.5 * (1.0 + np.tanh(dist / (2.0 * softness)))


def render_phantom(spec: PhantomSpec, lesions: Sequence[Lesion], rng: np.random.Generator) -> np.ndarray:
    """Stack of shape (1, 3, S, S) with values in [0, 1]; slice 1 is the annotated centre slice."""
    size = spec.image_size
    bg = _background(size, rng)
    slices = [bg.copy() for _ in range(3)]
    for les in lesions:
        prof = les.contrast * _lesion_profile(les, size, spec.edge_softness_px)
        slices[1] += prof
        for k in (0, 2):
            slices[k] += prof * spec.slice_attenuation * (1.0 + spec.slice_jitter * rng.standard_normal())
    stack = np.stack(slices)
    if spec.noise_level:
        stack = stack + spec.noise_level * rng.standard_normal(stack.shape)
    return np.clip(stack, 0.0, 1.0)[None]


def _annotations(spec: PhantomSpec, lesions: Sequence[Lesion], image_id: str) -> list[Annotation]:
    return [Annotation(image_id, les.box, les.diameter_mm(spec.mm_per_pixel)) for les in lesions]


def image_id_for(index: int) -> str:
    return f"img{index:06d}"


def generate_phantom(spec: PhantomSpec, image_index: int, image_id: str | None = None
                     ) -> tuple[np.ndarray, list[Annotation]]:
    rng = _rng(spec, image_index)
    lesions, _ = sample_lesions(spec, rng)
    image_id = image_id or image_id_for(image_index)
    return render_phantom(spec, lesions, rng), _annotations(spec, lesions, image_id)


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    spec: PhantomSpec
    images: list[dict]

    @property
    def mm_per_pixel(self) -> float:
        return self.spec.mm_per_pixel

    @property
    def seed(self) -> int:
        return self.spec.seed

    def split(self, name: str) -> list[dict]:
        return [r for r in self.images if r["split"] == name]

    def annotations(self, split: str | None = None) -> list[Annotation]:
        recs = self.images if split is None else self.split(split)
        return [Annotation.from_json(a) for r in recs for a in r["annotations"]]

    @staticmethod
    def annotations_for(record: Mapping) -> list[Annotation]:
        return [Annotation.from_json(a) for a in record["annotations"]]

    def image_ids(self, split: str | None = None) -> list[str]:
        recs = self.images if split is None else self.split(split)
        return [r["image_id"] for r in recs]

    def to_json(self) -> dict:
        return {
            "format": "msbdet-dataset/1",
            "mm_per_pixel": self.spec.mm_per_pixel,
            "seed": self.spec.seed,
            "spec": asdict(self.spec),
            "images": self.images,
        }


def _to_u16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * _U16).astype(np.uint16)


def write_dataset(spec: PhantomSpec, counts: Mapping[str, int], out_dir: str | Path) -> DatasetManifest:
    """Render every split to ``out_dir``: three 16-bit PNGs per stack, a JSON manifest, per-split JSONL ground truth."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown split names {sorted(unknown)}")
    records = []
    index = 0
    for split in SPLITS:
        for _ in range(int(counts.get(split, 0))):
            rng = _rng(spec, index)
            lesions, requested = sample_lesions(spec, rng)
            stack = render_phantom(spec, lesions, rng)
            image_id = image_id_for(index)
            files = []
            for s in range(3):
                name = f"images/{image_id}_{s}.png"
                Image.fromarray(_to_u16(stack[0, s])).save(out / name)
                files.append(name)
            records.append({
                "image_id": image_id,
                "index": index,
                "split": split,
                "files": files,
                "requested_lesions": requested,
                "placed_lesions": len(lesions),
                "annotations": [a.to_json() for a in _annotations(spec, lesions, image_id)],
            })
            index += 1
    manifest = DatasetManifest(out, spec, records)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=1), encoding="utf-8")
    for split in SPLITS:
        if counts.get(split):
            write_ground_truth(out / f"{split}_annotations.jsonl", manifest.annotations(split))
    return manifest


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: manifest is not valid JSON: {exc}") from exc
    try:
        return DatasetManifest(path.parent, PhantomSpec.from_dict(doc["spec"]), list(doc["images"]))
    except (KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: manifest is missing field {exc}") from exc


def load_stack(manifest: DatasetManifest, record: Mapping, normalize: bool = True) -> np.ndarray:
    slices = []
    for name in record["files"]:
        p = manifest.root / name
        if not p.is_file():
            raise CorruptionError(f"image file listed in manifest is missing: {p}")
        with Image.open(p) as im:
            arr = np.asarray(im)
        if arr.shape != (manifest.spec.image_size,) * 2:
            raise CorruptionError(f"{p}: shape {arr.shape} does not match image_size {manifest.spec.image_size}")
        slices.append(arr.astype(np.float64) / _U16)
    stack = np.stack(slices)[None]
    if normalize:
        stack = normalize_stack(stack)
    return stack


def normalize_stack(stack: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole stack."""
    std = stack.std()
    return (stack - stack.mean()) / (std if std > 0 else 1.0)


def load_dataset(manifest: DatasetManifest | str | Path, split: str | None = None, normalize: bool = True
                 ) -> Iterator[tuple[np.ndarray, list[Annotation]]]:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    recs = manifest.images if split is None else manifest.split(split)
    for rec in recs:
        anns = [Annotation.from_json(a) for a in rec["annotations"]]
        yield load_stack(manifest, rec, normalize), anns
