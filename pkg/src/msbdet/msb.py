"""Multi-scale booster block applied to one pyramid level.

Pipeline::

    H    = concat(D_r1(x), D_r2(x), D_r3(x), M(x))   # one shared 3x3 filter for all D_r
    Hch  = sigmoid(conv1x1(avgpool(H))) * H          # channel gate, shape (N, 4C, 1, 1)
    out  = sigmoid(conv3x3(maxpool_c(Hch))) * Hch    # spatial gate, shape (N, 1, H, W)

The dilated branches use zero padding ``r * (k - 1) / 2`` so every branch
keeps the input resolution and the concatenation is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import (
    Add,
    BroadcastMul,
    ChannelMaxPool,
    Concat,
    Conv2d,
    ConvSpec,
    Filter,
    GlobalAvgPool,
    Sigmoid,
    accumulate,
    check_feature_map,
)

_POINT = ConvSpec()
_SAME3 = ConvSpec.same(3)


@dataclass
class HdcConfig:
    dilation_rates: tuple[int, ...] = (1, 2, 3)
    kernel_size: int = 3
    branch_channels: int = 32

    def __post_init__(self):
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if len(self.dilation_rates) != 3:
            raise ConfigError(f"exactly three dilation rates are required, got {self.dilation_rates}")
        if self.dilation_rates[0] < 1 or any(b <= a for a, b in zip(self.dilation_rates, self.dilation_rates[1:])):
            raise ConfigError(f"dilation rates must be >= 1 and strictly increasing: {self.dilation_rates}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("kernel_size must be a positive odd number")
        if self.branch_channels < 1:
            raise ConfigError("branch_channels must be positive")

    @property
    def out_channels(self) -> int:
        return 4 * self.branch_channels


@dataclass
class MsbConfig:
    """Which stages of the block run, and how gates are squashed.

    ``gate_activation=None`` uses the raw attention convolution output as the
    gate (ablation only; the gate is then unbounded). ``residual=True`` adds
    ``Hch`` back onto the spatially gated map.
    """

    channel_attention: bool = True
    spatial_attention: bool = True
    gate_activation: str | None = "sigmoid"
    residual: bool = False

    def __post_init__(self):
        if self.gate_activation not in ("sigmoid", None):
            raise ConfigError(f"unknown gate activation {self.gate_activation!r}")


@dataclass
class MsbParams:
    shared_filter: Filter
    mapping_filter: Filter
    channel_attn_filter: Filter
    spatial_attn_filter: Filter

    def __post_init__(self):
        s, m = self.shared_filter, self.mapping_filter
        if m.kernel_size != (1, 1) or m.out_channels != s.out_channels or m.in_channels != s.in_channels:
            raise ShapeError("mapping filter must be 1x1 with the shared filter's in/out channels")
        width = 4 * s.out_channels
        ca = self.channel_attn_filter
        if ca.kernel_size != (1, 1) or ca.in_channels != width or ca.out_channels != width:
            raise ShapeError(f"channel attention filter must be 1x1, {width} -> {width}")
        sa = self.spatial_attn_filter
        if sa.kernel_size != (3, 3) or sa.in_channels != 1 or sa.out_channels != 1:
            raise ShapeError("spatial attention filter must be 3x3, 1 -> 1")

    _FIELDS = ("shared_filter", "mapping_filter", "channel_attn_filter", "spatial_attn_filter")

    def to_dict(self, prefix: str = "msb") -> dict[str, np.ndarray]:
        out = {}
        for name in self._FIELDS:
            f = getattr(self, name)
            out[f"{prefix}.{name}.weight"] = f.weight
            if f.bias is not None:
                out[f"{prefix}.{name}.bias"] = f.bias
        return out

    @classmethod
    def from_dict(cls, params, prefix: str = "msb") -> "MsbParams":
        return cls(*(Filter(params[f"{prefix}.{n}.weight"], params.get(f"{prefix}.{n}.bias")) for n in cls._FIELDS))

    @property
    def hdc_parameter_count(self) -> int:
        return self.shared_filter.size + self.mapping_filter.size


def init_msb_params(in_channels: int, cfg: HdcConfig, rng: np.random.Generator, dtype=np.float64) -> MsbParams:
    c, k = cfg.branch_channels, cfg.kernel_size
    width = cfg.out_channels

    def he(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)

    return MsbParams(
        shared_filter=Filter(he((c, in_channels, k, k)), np.zeros(c, dtype)),
        mapping_filter=Filter(he((c, in_channels, 1, 1)), np.zeros(c, dtype)),
        channel_attn_filter=Filter(he((width, width, 1, 1)), np.zeros(width, dtype)),
        spatial_attn_filter=Filter(he((1, 1, 3, 3)), np.zeros(1, dtype)),
    )


def _branch_specs(cfg: HdcConfig) -> list[ConvSpec]:
    return [ConvSpec.same(cfg.kernel_size, r) for r in cfg.dilation_rates]


class MsbBlock:
    """One level's booster with retained state; ``use_hdc=False`` is never constructed (plain FPN skips the block)."""

    def __init__(self, hdc: HdcConfig, cfg: MsbConfig | None = None):
        self.hdc = hdc
        self.cfg = cfg or MsbConfig()
        self._tape: dict | None = None

    def _gate(self, raw: np.ndarray, tape_key: str) -> np.ndarray:
        if self.cfg.gate_activation == "sigmoid":
            op = Sigmoid()
            self._tape[tape_key] = op
            return op.forward(raw)
        self._tape[tape_key] = None
        return raw

    def hdc_forward(self, x: np.ndarray, params: MsbParams) -> np.ndarray:
        x = check_feature_map(x, "level_map")
        if x.shape[1] != params.shared_filter.in_channels:
            raise ShapeError(
                f"level map has {x.shape[1]} channels, shared filter expects {params.shared_filter.in_channels}"
            )
        if params.shared_filter.kernel_size != (self.hdc.kernel_size,) * 2:
            raise ShapeError("shared filter kernel does not match HdcConfig.kernel_size")
        self._tape = {}
        sf, mf = params.shared_filter, params.mapping_filter
        branches = [Conv2d(spec) for spec in _branch_specs(self.hdc)]
        mapping, cat = Conv2d(_POINT), Concat()
        outs = [op.forward(x, sf.weight, sf.bias) for op in branches]
        outs.append(mapping.forward(x, mf.weight, mf.bias))
        self._tape.update(branches=branches, mapping=mapping, concat=cat)
        return cat.forward(*outs)

    def channel_attention_gate(self, h: np.ndarray, params: MsbParams) -> np.ndarray:
        ca = params.channel_attn_filter
        if h.shape[1] != ca.in_channels:
            raise ShapeError(f"HDC map has {h.shape[1]} channels, channel attention expects {ca.in_channels}")
        pool, conv = GlobalAvgPool(), Conv2d(_POINT)
        self._tape.update(ch_pool=pool, ch_conv=conv)
        return self._gate(conv.forward(pool.forward(h), ca.weight, ca.bias), "ch_act")

    def spatial_attention_gate(self, hch: np.ndarray, params: MsbParams) -> np.ndarray:
        sa = params.spatial_attn_filter
        pool, conv = ChannelMaxPool(), Conv2d(_SAME3)
        self._tape.update(sp_pool=pool, sp_conv=conv)
        return self._gate(conv.forward(pool.forward(hch), sa.weight, sa.bias), "sp_act")

    def forward(self, x: np.ndarray, params: MsbParams) -> np.ndarray:
        h = self.hdc_forward(x, params)
        if self.cfg.channel_attention:
            gate = self.channel_attention_gate(h, params)
            mul = BroadcastMul()
            self._tape["ch_mul"] = mul
            h = mul.forward(h, gate)
        if self.cfg.spatial_attention:
            gate = self.spatial_attention_gate(h, params)
            mul = BroadcastMul()
            self._tape["sp_mul"] = mul
            out = mul.forward(h, gate)
            if self.cfg.residual:
                add = Add()
                self._tape["residual"] = add
                out = add.forward(out, h)
            return out
        return h

    def backward(self, grad: np.ndarray, grads: dict[str, np.ndarray], prefix: str = "msb") -> np.ndarray:
        """Accumulate MsbParams gradients into ``grads`` under ``prefix``; return the input gradient."""
        t = self._tape
        if self.cfg.spatial_attention:
            g_h = 0.0
            if self.cfg.residual:
                grad, g_h = t["residual"].backward(grad)
            g_in, g_gate = t["sp_mul"].backward(grad)
            g_h = g_h + g_in
            if t["sp_act"] is not None:
                (g_gate,) = t["sp_act"].backward(g_gate)
            g_pool, dw, db = t["sp_conv"].backward(g_gate)
            accumulate(grads, f"{prefix}.spatial_attn_filter.weight", dw)
            accumulate(grads, f"{prefix}.spatial_attn_filter.bias", db)
            (g,) = t["sp_pool"].backward(g_pool)
            grad = g_h + g
        if self.cfg.channel_attention:
            g_in, g_gate = t["ch_mul"].backward(grad)
            if t["ch_act"] is not None:
                (g_gate,) = t["ch_act"].backward(g_gate)
            g_pool, dw, db = t["ch_conv"].backward(g_gate)
            accumulate(grads, f"{prefix}.channel_attn_filter.weight", dw)
            accumulate(grads, f"{prefix}.channel_attn_filter.bias", db)
            (g,) = t["ch_pool"].backward(g_pool)
            grad = g_in + g
        parts = t["concat"].backward(grad)
        gx = None
        for op, g in zip(t["branches"], parts[:3]):
            gi, dw, db = op.backward(g)
            accumulate(grads, f"{prefix}.shared_filter.weight", dw)
            accumulate(grads, f"{prefix}.shared_filter.bias", db)
            gx = gi if gx is None else gx + gi
        gi, dw, db = t["mapping"].backward(parts[3])
        accumulate(grads, f"{prefix}.mapping_filter.weight", dw)
        accumulate(grads, f"{prefix}.mapping_filter.bias", db)
        return gx + gi

    def kink_margin(self) -> float:
        """Distance of the last forward pass from the channel max-pool's argmax switch."""
        pool = (self._tape or {}).get("sp_pool")
        return np.inf if pool is None else pool.margin

    def branch_weight_grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-branch (weight, bias) gradients from the last backward, as if the filter were untied."""
        return [op.last_param_grads for op in self._tape["branches"]]


# functional wrappers -------------------------------------------------------


def hdc_forward(level_map, params: MsbParams, cfg: HdcConfig) -> np.ndarray:
    return MsbBlock(cfg).hdc_forward(level_map, params)


def channel_attention_gate(hdc_map, params: MsbParams, cfg: MsbConfig | None = None) -> np.ndarray:
    block = MsbBlock(HdcConfig(branch_channels=params.shared_filter.out_channels), cfg)
    block._tape = {}
    return block.channel_attention_gate(check_feature_map(hdc_map), params)


def apply_channel_attention(hdc_map, gate) -> np.ndarray:
    hdc_map, gate = check_feature_map(hdc_map), np.asarray(gate)
    if gate.shape != (hdc_map.shape[0], hdc_map.shape[1], 1, 1):
        raise ShapeError(f"channel gate shape {gate.shape} does not match map {hdc_map.shape}")
    return BroadcastMul().forward(hdc_map, gate)


def spatial_attention_gate(ch_map, params: MsbParams, cfg: MsbConfig | None = None) -> np.ndarray:
    block = MsbBlock(HdcConfig(branch_channels=params.shared_filter.out_channels), cfg)
    block._tape = {}
    return block.spatial_attention_gate(check_feature_map(ch_map), params)


def msb_forward(level_map, params: MsbParams, cfg: HdcConfig, msb_cfg: MsbConfig | None = None) -> np.ndarray:
    return MsbBlock(cfg, msb_cfg).forward(level_map, params)
