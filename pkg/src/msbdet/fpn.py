"""Desk-scale feature pyramid: plain strided CNN backbone, lateral 1x1 maps, top-down fusion.

Level ``i`` (1-based) sits at stride ``2**(i + 1)``. The bottom-up pathway
produces the lateral maps ``C_i^D``; the top-down pathway replicates the
coarsest map upward with nearest-neighbour 2x upsampling to give ``C_i^U``;
fusion is a plain elementwise sum ``P_i = C_i^D + C_i^U``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import Add, Conv2d, ConvSpec, ReLU, UpsampleNearest2x, accumulate, check_feature_map

_STRIDE2 = ConvSpec(dilation=1, stride=2, padding=1)
_SAME3 = ConvSpec.same(3)
_POINT = ConvSpec()


@dataclass
class BackboneConfig:
    input_channels: int = 3
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    num_levels: int = 4
    stem_channels: int = 8
    pyramid_channels: int = 32
    smooth: bool = False  # optional 3x3 conv after fusion; off to keep fusion a pure sum

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.num_levels < 1:
            raise ConfigError("num_levels must be at least 1")
        if len(self.stage_channels) != self.num_levels:
            raise ConfigError(
                f"stage_channels has {len(self.stage_channels)} entries for {self.num_levels} levels"
            )
        if min(self.input_channels, self.stem_channels, self.pyramid_channels, *self.stage_channels) < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def level_strides(self) -> list[int]:
        return [2 ** (i + 1) for i in range(1, self.num_levels + 1)]


@dataclass
class Pyramid:
    down: list[np.ndarray]
    up: list[np.ndarray]
    fused: list[np.ndarray] = field(default_factory=list)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""

    def conv(cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)

    p = {
        "fpn.stem.weight": conv(cfg.stem_channels, cfg.input_channels, 3),
        "fpn.stem.bias": np.zeros(cfg.stem_channels, dtype),
    }
    cin = cfg.stem_channels
    for i, cout in enumerate(cfg.stage_channels, start=1):
        p[f"fpn.stage{i}.weight"] = conv(cout, cin, 3)
        p[f"fpn.stage{i}.bias"] = np.zeros(cout, dtype)
        p[f"fpn.lateral{i}.weight"] = conv(cfg.pyramid_channels, cout, 1)
        p[f"fpn.lateral{i}.bias"] = np.zeros(cfg.pyramid_channels, dtype)
        if cfg.smooth:
            p[f"fpn.smooth{i}.weight"] = conv(cfg.pyramid_channels, cfg.pyramid_channels, 3)
            p[f"fpn.smooth{i}.bias"] = np.zeros(cfg.pyramid_channels, dtype)
        cin = cout
    return p


def _check_input(x: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    x = check_feature_map(x, "image_stack")
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected {cfg.input_channels} input channels, got {x.shape[1]}")
    largest = cfg.level_strides[-1]
    if x.shape[2] % largest or x.shape[3] % largest:
        raise ShapeError(
            f"input size {x.shape[2]}x{x.shape[3]} is not divisible by the largest stride {largest}"
        )
    return x


def _check_geometry(down_maps: list[np.ndarray]) -> None:
    if not down_maps:
        raise ShapeError("empty pyramid")
    for fine, coarse in zip(down_maps[:-1], down_maps[1:]):
        if fine.shape[:2] != coarse.shape[:2] or fine.shape[2:] != (2 * coarse.shape[2], 2 * coarse.shape[3]):
            raise ShapeError(f"levels {fine.shape} and {coarse.shape} are not a factor-2 step")


class FeaturePyramid:
    """Bottom-up + top-down pathways with retained state for a manual backward pass."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self._tape: dict | None = None

    def bottom_up(self, x: np.ndarray, params) -> list[np.ndarray]:
        cfg = self.cfg
        x = _check_input(x, cfg)
        tape = {"stem": Conv2d(_STRIDE2), "stem_act": ReLU(), "stages": [], "laterals": []}
        h = tape["stem_act"].forward(tape["stem"].forward(x, params["fpn.stem.weight"], params["fpn.stem.bias"]))
        down = []
        for i in range(1, cfg.num_levels + 1):
            conv, act, lat = Conv2d(_STRIDE2), ReLU(), Conv2d(_POINT)
            h = act.forward(conv.forward(h, params[f"fpn.stage{i}.weight"], params[f"fpn.stage{i}.bias"]))
            down.append(lat.forward(h, params[f"fpn.lateral{i}.weight"], params[f"fpn.lateral{i}.bias"]))
            tape["stages"].append((conv, act))
            tape["laterals"].append(lat)
        self._tape = tape
        return down

    def top_down_fuse(self, down_maps: list[np.ndarray], params=None) -> Pyramid:
        _check_geometry(down_maps)
        n = len(down_maps)
        up: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        ups, adds, smooths = [None] * n, [None] * n, [None] * n
        up[-1] = down_maps[-1]
        for i in range(n - 2, -1, -1):
            ups[i] = UpsampleNearest2x()
            up[i] = ups[i].forward(up[i + 1])
        fused = []
        for i in range(n):
            adds[i] = Add()
            p = adds[i].forward(down_maps[i], up[i])
            if self.cfg.smooth:
                smooths[i] = Conv2d(_SAME3)
                p = smooths[i].forward(p, params[f"fpn.smooth{i + 1}.weight"], params[f"fpn.smooth{i + 1}.bias"])
            fused.append(p)
        if self._tape is None:
            self._tape = {}
        self._tape.update(ups=ups, adds=adds, smooths=smooths)
        return Pyramid(down=list(down_maps), up=up, fused=fused)

    def forward(self, x: np.ndarray, params) -> Pyramid:
        return self.top_down_fuse(self.bottom_up(x, params), params)

    def backward(self, grad_fused: list[np.ndarray], grads: dict[str, np.ndarray], grad_down=None) -> np.ndarray:
        """Accumulate parameter gradients into ``grads``; return the input gradient.

        ``grad_down`` optionally adds gradients that reach ``C_i^D`` directly
        (when a consumer reads the lateral maps rather than the fused ones).
        """
        tape = self._tape
        n = len(grad_fused)
        g_down: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        g_up: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        for i in range(n):
            g = grad_fused[i]
            if self.cfg.smooth:
                g, dw, db = tape["smooths"][i].backward(g)
                accumulate(grads, f"fpn.smooth{i + 1}.weight", dw)
                accumulate(grads, f"fpn.smooth{i + 1}.bias", db)
            g_down[i], g_up[i] = tape["adds"][i].backward(g)
        # C^U at level i is upsampled from level i + 1; walk fine -> coarse
        for i in range(n - 1):
            (g,) = tape["ups"][i].backward(g_up[i])
            g_up[i + 1] = g_up[i + 1] + g
        g_down[-1] = g_down[-1] + g_up[-1]
        if grad_down is not None:
            g_down = [a + b for a, b in zip(g_down, grad_down)]

        g_h = None
        for i in range(n, 0, -1):
            conv, act = tape["stages"][i - 1]
            gl, dw, db = tape["laterals"][i - 1].backward(g_down[i - 1])
            accumulate(grads, f"fpn.lateral{i}.weight", dw)
            accumulate(grads, f"fpn.lateral{i}.bias", db)
            g = gl if g_h is None else gl + g_h
            (g,) = act.backward(g)
            g_h, dw, db = conv.backward(g)
            accumulate(grads, f"fpn.stage{i}.weight", dw)
            accumulate(grads, f"fpn.stage{i}.bias", db)
        (g,) = tape["stem_act"].backward(g_h)
        gx, dw, db = tape["stem"].backward(g)
        accumulate(grads, "fpn.stem.weight", dw)
        accumulate(grads, "fpn.stem.bias", db)
        return gx


def bottom_up(image_stack: np.ndarray, params, cfg: BackboneConfig) -> list[np.ndarray]:
    return FeaturePyramid(cfg).bottom_up(image_stack, params)


def top_down_fuse(down_maps: list[np.ndarray], params=None, cfg: BackboneConfig | None = None) -> list[np.ndarray]:
    cfg = cfg or BackboneConfig(num_levels=len(down_maps), stage_channels=(1,) * len(down_maps))
    return FeaturePyramid(cfg).top_down_fuse(down_maps, params).fused
