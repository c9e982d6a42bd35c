"""End-to-end detector: feature pyramid, optional per-level booster, shared anchor head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detection_head import (
    POSITIVE,
    AnchorLayout,
    DetectionHead,
    assign_targets,
    decode_box,
    detection_loss,
    encode_box,
    generate_anchors,
    init_head_params,
    nms,
    sample_anchors,
)
from .errors import ConfigError
from .fpn import BackboneConfig, FeaturePyramid, init_backbone_params
from .msb import HdcConfig, MsbBlock, MsbConfig, MsbParams, init_msb_params
from .tensor_core import sigmoid

# Row labels of the ablation table; every booster variant shares the HDC filter.
VARIANTS = {
    "fpn": None,
    "fpn+hdc": MsbConfig(channel_attention=False, spatial_attention=False),
    "fpn+hdc+ch": MsbConfig(channel_attention=True, spatial_attention=False),
    "fpn+hdc+sp": MsbConfig(channel_attention=False, spatial_attention=True),
    "fpn+msb": MsbConfig(channel_attention=True, spatial_attention=True),
}


@dataclass
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hdc: HdcConfig = field(default_factory=HdcConfig)
    variant: str = "fpn+msb"
    msb_input: str = "fused"  # "fused" (P_i) or "down" (C_i^D)
    gate_activation: str | None = "sigmoid"
    residual: bool = False
    anchors: AnchorLayout = field(default_factory=AnchorLayout)
    head_channels: int = 32
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    anchor_batch: int = 256
    positive_fraction: float = 0.5
    nms_iou: float = 0.7
    pre_nms_top_k: int = 1000
    max_detections: int = 50
    min_box_size: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.msb_input not in ("fused", "down"):
            raise ConfigError(f"msb_input must be 'fused' or 'down', got {self.msb_input!r}")
        # raises if the anchor layout does not fit the pyramid
        self.anchors.anchors_per_cell(self.backbone.num_levels)

    @property
    def msb_config(self) -> MsbConfig | None:
        base = VARIANTS[self.variant]
        if base is None:
            return None
        return MsbConfig(
            channel_attention=base.channel_attention,
            spatial_attention=base.spatial_attention,
            gate_activation=self.gate_activation,
            residual=self.residual,
        )

    @property
    def head_in_channels(self) -> int:
        return self.backbone.pyramid_channels if self.msb_config is None else self.hdc.out_channels


class Detector:
    """Stateless apart from the per-call tape; parameters live in a flat name -> array dict."""

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self.pyramid = FeaturePyramid(cfg.backbone)
        msb_cfg = cfg.msb_config
        self.blocks = [] if msb_cfg is None else [MsbBlock(cfg.hdc, msb_cfg) for _ in range(cfg.backbone.num_levels)]
        self.heads = [DetectionHead() for _ in range(cfg.backbone.num_levels)]
        self._anchor_cache: dict[tuple, list[np.ndarray]] = {}

    def init_params(self, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        params = init_backbone_params(cfg.backbone, rng, dtype)
        for i in range(len(self.blocks)):
            msb = init_msb_params(cfg.backbone.pyramid_channels, cfg.hdc, rng, dtype)
            params.update(msb.to_dict(f"msb{i + 1}"))
        params.update(
            init_head_params(cfg.head_in_channels, cfg.head_channels,
                             cfg.anchors.anchors_per_cell(cfg.backbone.num_levels), rng, dtype)
        )
        return params

    def anchors(self, image_hw: tuple[int, int]) -> list[np.ndarray]:
        key = tuple(image_hw)
        if key not in self._anchor_cache:
            strides = self.cfg.backbone.level_strides
            shapes = [(image_hw[0] // s, image_hw[1] // s) for s in strides]
            self._anchor_cache[key] = generate_anchors(self.cfg.anchors, shapes, strides)
        return self._anchor_cache[key]

    # -- forward / backward -------------------------------------------------

    def features(self, x: np.ndarray, params) -> list[np.ndarray]:
        pyr = self.pyramid.forward(x, params)
        maps = pyr.fused if self.cfg.msb_input == "fused" else pyr.down
        if not self.blocks:
            return maps
        return [blk.forward(m, MsbParams.from_dict(params, f"msb{i + 1}")) for i, (blk, m) in enumerate(zip(self.blocks, maps))]

    def forward(self, x: np.ndarray, params) -> tuple[np.ndarray, np.ndarray]:
        """Logits (N, A_total) and deltas (N, A_total, 4) over all levels, anchors in ``anchors()`` order."""
        feats = self.features(x, params)
        outs = [head.forward(f, params) for head, f in zip(self.heads, feats)]
        self._split = [o[0].shape[1] for o in outs]
        return np.concatenate([o[0] for o in outs], axis=1), np.concatenate([o[1] for o in outs], axis=1)

    def backward(self, g_logits: np.ndarray, g_deltas: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        bounds = np.cumsum([0, *self._split])
        g_feats = []
        for head, lo, hi in zip(self.heads, bounds[:-1], bounds[1:]):
            g_feats.append(head.backward(g_logits[:, lo:hi], g_deltas[:, lo:hi], grads))
        if self.blocks:
            g_feats = [blk.backward(g, grads, f"msb{i + 1}") for i, (blk, g) in enumerate(zip(self.blocks, g_feats))]
        if self.cfg.msb_input == "fused":
            self.pyramid.backward(g_feats, grads)
        else:
            self.pyramid.backward([np.zeros_like(g) for g in g_feats], grads, grad_down=g_feats)
        return grads

    def kink_margin(self) -> float:
        """Distance of the last forward pass from the nearest non-differentiable point.

        The smallest |pre-activation| over every ReLU, and the smallest top-two
        gap of every channel max-pool.
        """
        acts = [self.pyramid._tape["stem_act"], *(act for _, act in self.pyramid._tape["stages"])]
        acts += [h._tape[1] for h in self.heads]
        return min([a.margin for a in acts] + [blk.kink_margin() for blk in self.blocks])

    # -- training -----------------------------------------------------------

    def targets(self, image_hw, gt_boxes: list[np.ndarray], rng: np.random.Generator):
        """Per-image (labels, target deltas, sample mask), each over all anchors."""
        anchors = np.concatenate(self.anchors(image_hw))
        out = []
        for gt in gt_boxes:
            gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
            asg = assign_targets(anchors, gt, self.cfg.pos_iou, self.cfg.neg_iou)
            tgt = np.zeros((len(anchors), 4))
            pos = asg.labels == POSITIVE
            if pos.any():
                tgt[pos] = encode_box(anchors[pos], gt[asg.matched[pos]])
            mask = sample_anchors(asg.labels, rng, self.cfg.anchor_batch, self.cfg.positive_fraction)
            out.append((asg.labels, tgt, mask))
        return out

    def loss_and_grad(self, x: np.ndarray, params, targets) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
        logits, deltas = self.forward(x, params)
        n = x.shape[0]
        g_logits = np.zeros_like(logits)
        g_deltas = np.zeros_like(deltas)
        total = cls = reg = 0.0
        terms = np.zeros(logits.shape)
        for i, (labels, tgt, mask) in enumerate(targets):
            res = detection_loss(logits[i], deltas[i], labels, tgt, mask)
            total += res.total / n
            cls += res.classification / n
            reg += res.regression / n
            terms[i] = res.terms / n
            g_logits[i] = res.grad_logits / n
            g_deltas[i] = res.grad_deltas / n
        grads = self.backward(g_logits, g_deltas)
        for name, value in params.items():
            # filters switched off by the variant (e.g. channel attention in fpn+hdc+sp)
            grads.setdefault(name, np.zeros_like(value))
        return total, grads, {"classification": cls, "regression": reg, "terms": terms}

    # -- inference ----------------------------------------------------------

    def predict(self, x: np.ndarray, params) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per image: (boxes (K, 4), scores (K,)) after decoding, clamping and NMS."""
        cfg = self.cfg
        logits, deltas = self.forward(x, params)
        hw = x.shape[2:]
        level_anchors = self.anchors(hw)
        bounds = np.cumsum([0, *[len(a) for a in level_anchors]])
        results = []
        for i in range(x.shape[0]):
            boxes_all, scores_all = [], []
            for anchors, lo, hi in zip(level_anchors, bounds[:-1], bounds[1:]):
                s = sigmoid(logits[i, lo:hi])
                top = np.argsort(-s, kind="stable")[: cfg.pre_nms_top_k]
                boxes_all.append(decode_box(anchors[top], deltas[i, lo:hi][top], image_size=hw))
                scores_all.append(s[top])
            boxes = np.concatenate(boxes_all)
            scores = np.concatenate(scores_all)
            wh = boxes[:, 2:] - boxes[:, :2]
            ok = (wh >= cfg.min_box_size).all(axis=1)
            boxes, scores = boxes[ok], scores[ok]
            keep = nms(boxes, scores, cfg.nms_iou, 0.0, cfg.max_detections)
            results.append((boxes[keep], scores[keep]))
        return results
