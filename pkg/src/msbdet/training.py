"""Training, inference and the desk-scale ablation runner."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import RunConfig
from .data_synth import DatasetManifest, load_stack, read_manifest, write_dataset
from .detection_head import BoundingBox, Detection
from .froc_eval import EvalReport, evaluate
from .model import Detector
from .serialization import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class SGD:
    """Momentum SGD with L2 weight decay on weights (biases excluded)."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.weight_decay and name.endswith(".weight"):
                g = g + self.weight_decay * params[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - self.lr * v


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]


def _gt_array(anns) -> np.ndarray:
    if not anns:
        return np.zeros((0, 4))
    return np.array([[a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max] for a in anns])


def train(
    cfg: RunConfig,
    images: Sequence[np.ndarray],
    annotations: Sequence[Sequence],
    on_step: Callable[[int, int, float, dict], None] | None = None,
) -> TrainResult:
    """Train from scratch on in-memory stacks of shape (1, 3, S, S).

    Deterministic in ``cfg.seed``: parameter init, epoch shuffles and anchor
    sampling all derive from it.
    """
    det = Detector(cfg.detector())
    params = det.init_params(cfg.seed)
    opt_cfg = cfg.optimizer
    opt = SGD(opt_cfg.learning_rate, opt_cfg.momentum, opt_cfg.weight_decay)
    gts = [_gt_array(a) for a in annotations]
    losses: list[float] = []
    step = 0
    for epoch in range(opt_cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        order = rng.permutation(len(images))
        for lo in range(0, len(order), opt_cfg.batch_size):
            idx = order[lo: lo + opt_cfg.batch_size]
            x = np.concatenate([images[i] for i in idx])
            targets = det.targets(x.shape[2:], [gts[i] for i in idx], rng)
            loss, grads, parts = det.loss_and_grad(x, params, targets)
            clip_gradients(grads, opt_cfg.grad_clip)
            opt.step(params, grads)
            losses.append(loss)
            if on_step is not None:
                on_step(epoch, step, loss, parts)
            step += 1
        log.info("epoch %d: mean loss %.4f", epoch, float(np.mean(losses[-len(order):])) if len(order) else 0.0)
    return TrainResult(params, losses)


def predict_detections(cfg: RunConfig, params, images: Iterable[np.ndarray], image_ids: Iterable[str],
                       batch_size: int = 8) -> list[Detection]:
    det = Detector(cfg.detector())
    out: list[Detection] = []
    images, image_ids = list(images), list(image_ids)
    for lo in range(0, len(images), batch_size):
        x = np.concatenate(images[lo: lo + batch_size])
        for image_id, (boxes, scores) in zip(image_ids[lo: lo + batch_size], det.predict(x, params)):
            for b, s in zip(boxes, scores):
                out.append(Detection(BoundingBox(*map(float, b)), float(s), image_id))
    return out


def load_split(manifest: DatasetManifest, split: str):
    recs = manifest.split(split)
    images = [load_stack(manifest, r) for r in recs]
    anns = [manifest.annotations_for(r) for r in recs]
    return images, anns, [r["image_id"] for r in recs]


def ensure_dataset(cfg: RunConfig, root: str | Path) -> DatasetManifest:
    root = Path(root)
    if (root / "manifest.json").is_file():
        return read_manifest(root)
    return write_dataset(cfg.phantom, cfg.split_counts, root)


def params_to_checkpoint(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v) for k, v in params.items()}


def checkpoint_to_params(tensors: dict[str, np.ndarray], cfg: RunConfig) -> dict[str, np.ndarray]:
    """Restore exact shapes (snapshots store everything as rank 4) against a fresh init."""
    ref = Detector(cfg.detector()).init_params(0)
    missing = set(ref) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    out = {}
    for name, arr in ref.items():
        t = tensors[name]
        if t.size != arr.size:
            raise ValueError(f"checkpoint tensor {name} has {t.size} values, model expects {arr.size}")
        out[name] = t.reshape(arr.shape).astype(np.float64)
    return out


def save_params(path: str | Path, params) -> None:
    save_checkpoint(path, params_to_checkpoint(params))


def load_params(path: str | Path, cfg: RunConfig) -> dict[str, np.ndarray]:
    return checkpoint_to_params(load_checkpoint(path), cfg)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRun:
    model: str
    seed: int
    report: EvalReport


def run_ablation(
    cfg: RunConfig,
    manifest: DatasetManifest,
    models: Sequence[str] = ("fpn", "fpn+msb"),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> list[AblationRun]:
    """Train each (model, seed) on the train split and evaluate on the test split."""
    train_x, train_a, _ = load_split(manifest, "train")
    test_x, test_a, test_ids = load_split(manifest, "test")
    flat_test = [a for anns in test_a for a in anns]
    runs = []
    for model in models:
        for seed in seeds:
            run_cfg = cfg.replace(model=model, seed=seed)
            res = train(run_cfg, train_x, train_a)
            dets = predict_detections(run_cfg, res.params, test_x, test_ids)
            report = evaluate(dets, flat_test, cfg.fp_rates, cfg.iou_thresh, image_ids=test_ids)
            log.info("%s seed %d: %s", model, seed, report.sensitivities)
            runs.append(AblationRun(model, seed, report))
    return runs


def _cell(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def _median(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def ablation_table(runs: Sequence[AblationRun], fp_rates: Sequence[float]) -> dict:
    """Per-model medians over seeds of the FROC sensitivities and the size-bucket sensitivities."""
    models = list(dict.fromkeys(r.model for r in runs))
    rows = {}
    for model in models:
        reports = [r.report for r in runs if r.model == model]
        labels = list(reports[0].buckets)
        rows[model] = {
            "seeds": [r.seed for r in runs if r.model == model],
            "sensitivity": [_median(rep.sensitivities[k] for rep in reports) for k in range(len(fp_rates))],
            "size_buckets": {lab: _median(rep.buckets[lab] for rep in reports) for lab in labels},
            "per_seed_sensitivity": [rep.sensitivities for rep in reports],
            "per_seed_size_buckets": [rep.buckets for rep in reports],
        }
    width = max([12] + [len(m) + 2 for m in models])
    labels = list(rows[models[0]]["size_buckets"]) if models else []
    lines = ["Median sensitivity over seeds at FPs per image",
             "Method".ljust(width) + "".join(f"{r:>8g}" for r in fp_rates)]
    lines += [m.ljust(width) + "".join(f"{_cell(v):>8}" for v in rows[m]["sensitivity"]) for m in models]
    bucket_rate = runs[0].report.bucket_fp_rate if runs else 4.0
    lines += ["", f"Median sensitivity at {bucket_rate:g} FPs per image by lesion diameter (mm)",
              "Method".ljust(width) + "".join(f"{lab:>9}" for lab in labels)]
    lines += [m.ljust(width) + "".join(f"{_cell(v):>9}" for v in rows[m]["size_buckets"].values()) for m in models]
    return {"json": {"fp_rates": list(fp_rates), "models": rows}, "text": "\n".join(lines) + "\n"}
