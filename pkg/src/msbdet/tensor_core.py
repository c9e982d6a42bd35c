"""Dense NCHW tensors: forward primitives, per-op backward passes, gradient checking.

Feature maps are plain rank-4 ``numpy`` arrays laid out as (batch, channels,
height, width). Every forward function allocates a fresh output and never
writes into its arguments.

Each primitive has two faces:

* a pure function (``conv2d``, ``global_avg_pool``, ...) for inference, and
* an op class (``Conv2d``, ``GlobalAvgPool``, ...) whose ``forward`` retains
  what ``backward`` needs. Model code composes these by hand; there is no
  autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, StateError

__all__ = [
    "Filter",
    "ConvSpec",
    "check_feature_map",
    "conv2d",
    "conv2d_direct",
    "global_avg_pool",
    "channel_max_pool",
    "elementwise_add",
    "broadcast_mul",
    "concat_channels",
    "slice_channels",
    "upsample_nearest2x",
    "sigmoid",
    "relu",
    "Conv2d",
    "GlobalAvgPool",
    "ChannelMaxPool",
    "Add",
    "BroadcastMul",
    "Concat",
    "UpsampleNearest2x",
    "Sigmoid",
    "ReLU",
    "accumulate",
    "finite_difference_check",
    "gradient_errors",
    "relative_error",
]


@dataclass
class Filter:
    """Convolution weights of shape (out, in, kh, kw) with an optional bias per output channel."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        if self.weight.ndim != 4:
            raise ShapeError(f"filter weight must be rank 4, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match {self.out_channels} output channels"
                )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def size(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def copy(self) -> "Filter":
        return Filter(self.weight.copy(), None if self.bias is None else self.bias.copy())


@dataclass(frozen=True)
class ConvSpec:
    dilation: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.dilation < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(
                f"invalid conv spec: dilation={self.dilation}, stride={self.stride}, padding={self.padding}"
            )

    @classmethod
    def same(cls, kernel_size: int, dilation: int = 1) -> "ConvSpec":
        """Stride-1 spec whose zero padding keeps height and width unchanged."""
        return cls(dilation=dilation, stride=1, padding=dilation * (kernel_size - 1) // 2)


def check_feature_map(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_geometry(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    check_feature_map(x)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"filter expects {weight.shape[1]} input channels, input has {x.shape[1]}")
    out = []
    for axis, k in ((2, weight.shape[2]), (3, weight.shape[3])):
        extent = (k - 1) * spec.dilation + 1
        padded = x.shape[axis] + 2 * spec.padding
        if extent > padded:
            raise ConfigError(
                f"effective kernel extent {extent} exceeds padded input extent {padded}"
            )
        out.append((padded - extent) // spec.stride + 1)
    return out[0], out[1]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _columns(x: np.ndarray, kh: int, kw: int, spec: ConvSpec) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, kh, kw) holding every receptive-field tap."""
    d, s = spec.dilation, spec.stride
    xp = _pad(x, spec.padding)
    ext_h, ext_w = (kh - 1) * d + 1, (kw - 1) * d + 1
    win = sliding_window_view(xp, (ext_h, ext_w), axis=(2, 3))
    return win[:, :, ::s, ::s, ::d, ::d]


def _bias_or_none(filt: Filter | np.ndarray, bias):
    if isinstance(filt, Filter):
        return filt.weight, filt.bias
    return np.asarray(filt), bias


def conv2d(x, filt: Filter | np.ndarray, spec: ConvSpec = ConvSpec(), bias=None) -> np.ndarray:
    """Zero-padded dilated cross-correlation.

    ``out[n, o, y, x] = sum_{c,i,j} in[n, c, y*s + i*r - p, x*s + j*r - p] * W[o, c, i, j] + b[o]``
    """
    weight, bias = _bias_or_none(filt, bias)
    _conv_geometry(x, weight, spec)
    cols = _columns(x, weight.shape[2], weight.shape[3], spec)
    out = np.tensordot(weight, cols, axes=([1, 2, 3], [1, 4, 5])).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_direct(x, filt: Filter | np.ndarray, spec: ConvSpec = ConvSpec(), bias=None) -> np.ndarray:
    """Reference convolution: explicit loops over output pixels and kernel taps."""
    weight, bias = _bias_or_none(filt, bias)
    ho, wo = _conv_geometry(x, weight, spec)
    n, _, _, _ = x.shape
    cout, _, kh, kw = weight.shape
    d, s = spec.dilation, spec.stride
    xp = _pad(x, spec.padding)
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, weight))
    for oy in range(ho):
        for ox in range(wo):
            acc = np.zeros((n, cout), dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = xp[:, :, oy * s + i * d, ox * s + j * d]
                    acc += tap @ weight[:, :, i, j].T
            out[:, :, oy, ox] = acc
    if bias is not None:
        out += bias[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# pooling, arithmetic, reshaping
# ---------------------------------------------------------------------------


def global_avg_pool(x) -> np.ndarray:
    """Mean over (H, W); returns shape (N, C, 1, 1) so it feeds a 1x1 conv directly."""
    x = check_feature_map(x)
    return x.mean(axis=(2, 3), keepdims=True)


def channel_max_pool(x) -> np.ndarray:
    x = check_feature_map(x)
    return x.max(axis=1, keepdims=True)


def elementwise_add(a, b) -> np.ndarray:
    a, b = check_feature_map(a, "a"), check_feature_map(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def _gate_kind(x: np.ndarray, gate: np.ndarray) -> str:
    n, c, h, w = x.shape
    if gate.ndim == 4 and gate.shape[0] == n:
        if gate.shape[1:] == (c, 1, 1):
            return "channel"
        if gate.shape[1:] == (1, h, w):
            return "spatial"
    raise ShapeError(
        f"gate shape {gate.shape} is neither a channel gate ({n}, {c}, 1, 1) "
        f"nor a spatial gate ({n}, 1, {h}, {w})"
    )


def broadcast_mul(x, gate) -> np.ndarray:
    x = check_feature_map(x)
    gate = np.asarray(gate)
    _gate_kind(x, gate)
    return x * gate


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("nothing to concatenate")
    ref = check_feature_map(parts[0], "parts[0]")
    for k, p in enumerate(parts[1:], start=1):
        p = check_feature_map(p, f"parts[{k}]")
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(f"part {k} has shape {p.shape}, incompatible with {ref.shape}")
    return np.concatenate(parts, axis=1)


def slice_channels(x, sizes: Sequence[int]) -> list[np.ndarray]:
    """Split along channels into consecutive blocks of the given sizes (inverse of concat)."""
    x = check_feature_map(x)
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum([0, *sizes])
    return [x[:, lo:hi].copy() for lo, hi in zip(bounds[:-1], bounds[1:])]


def upsample_nearest2x(x) -> np.ndarray:
    x = check_feature_map(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


# ---------------------------------------------------------------------------
# ops with backward passes
# ---------------------------------------------------------------------------


class _Op:
    """Base for ops that retain forward state.

    ``backward`` returns one gradient per forward argument (conv also returns
    weight and bias gradients).
    """

    _saved: tuple | None = None

    def _require(self):
        if self._saved is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._saved


class Conv2d(_Op):
    def __init__(self, spec: ConvSpec = ConvSpec()):
        self.spec = spec

    def forward(self, x, weight, bias=None):
        x = np.asarray(x)
        self._saved = (x, np.asarray(weight), bias is not None)
        return conv2d(x, weight, self.spec, bias=bias)

    def backward(self, grad):
        x, weight, has_bias = self._require()
        cout, cin, kh, kw = weight.shape
        spec = self.spec
        d, s, p = spec.dilation, spec.stride, spec.padding
        cols = _columns(x, kh, kw, spec)
        if grad.shape != (x.shape[0], cout, cols.shape[2], cols.shape[3]):
            raise ShapeError(f"upstream gradient shape {grad.shape} does not match conv output")
        dw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        db = grad.sum(axis=(0, 2, 3)) if has_bias else None
        # (Cin, kh, kw, N, Ho, Wo)
        dcols = np.tensordot(weight, grad, axes=([0], [1]))
        n, _, h, w = x.shape
        ho, wo = grad.shape[2], grad.shape[3]
        dxp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=np.result_type(x, weight, grad))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s] += (
                    dcols[:, i, j].transpose(1, 0, 2, 3)
                )
        dx = dxp[:, :, p: p + h, p: p + w] if p else dxp
        self.last_param_grads = (dw, db)
        return np.ascontiguousarray(dx), dw, db


class GlobalAvgPool(_Op):
    def forward(self, x):
        x = check_feature_map(x)
        self._saved = (x.shape,)
        return global_avg_pool(x)

    def backward(self, grad):
        (shape,) = self._require()
        h, w = shape[2], shape[3]
        return (np.broadcast_to(grad / (h * w), shape).copy(),)


class ChannelMaxPool(_Op):
    """Max over channels. Ties send the whole gradient to the lowest channel index.

    ``margin`` records the smallest gap between the largest and second-largest
    channel at any pixel (infinite for one channel); below it, a probe can
    switch the argmax.
    """

    margin: float = np.inf

    def forward(self, x):
        x = check_feature_map(x)
        idx = x.argmax(axis=1)
        self._saved = (x.shape, idx)
        if x.shape[1] > 1:
            top2 = np.partition(x, x.shape[1] - 2, axis=1)[:, -2:]
            self.margin = float((top2[:, 1] - top2[:, 0]).min())
        return np.take_along_axis(x, idx[:, None], axis=1)

    def backward(self, grad):
        shape, idx = self._require()
        dx = np.zeros(shape, dtype=grad.dtype)
        np.put_along_axis(dx, idx[:, None], grad, axis=1)
        return (dx,)


class Add(_Op):
    def forward(self, a, b):
        out = elementwise_add(a, b)
        self._saved = ()
        return out

    def backward(self, grad):
        self._require()
        return grad.copy(), grad.copy()


class BroadcastMul(_Op):
    def forward(self, x, gate):
        x, gate = np.asarray(x), np.asarray(gate)
        out = broadcast_mul(x, gate)
        self._saved = (x, gate, _gate_kind(x, gate))
        return out

    def backward(self, grad):
        x, gate, kind = self._require()
        dx = grad * gate
        prod = grad * x
        dgate = prod.sum(axis=(2, 3), keepdims=True) if kind == "channel" else prod.sum(axis=1, keepdims=True)
        return dx, dgate


class Concat(_Op):
    def forward(self, *parts):
        out = concat_channels(parts)
        self._saved = ([p.shape[1] for p in parts],)
        return out

    def backward(self, grad):
        (sizes,) = self._require()
        return tuple(slice_channels(grad, sizes))


class UpsampleNearest2x(_Op):
    def forward(self, x):
        out = upsample_nearest2x(x)
        self._saved = ()
        return out

    def backward(self, grad):
        self._require()
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


class Sigmoid(_Op):
    def forward(self, x):
        out = sigmoid(x)
        self._saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self._require()
        return (grad * out * (1.0 - out),)


class ReLU(_Op):
    """``margin`` records the smallest |input| seen, i.e. the distance to the kink.

    Central differences are only meaningful when every probe stays on one side
    of the kink, so gradient checks use it to reject probe points.
    """

    margin: float = np.inf

    def forward(self, x):
        x = np.asarray(x)
        self._saved = (x > 0,)
        self.margin = float(np.abs(x).min())
        return relu(x)

    def backward(self, grad):
        (mask,) = self._require()
        return (grad * mask,)


def accumulate(grads: dict, name: str, g) -> None:
    """Add ``g`` into ``grads[name]`` without touching any array already stored there."""
    if g is None:
        return
    grads[name] = grads[name] + g if name in grads else g


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


LossAndGrad = Callable[[Mapping[str, np.ndarray]], "tuple[float, Mapping[str, np.ndarray]]"]


def gradient_errors(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-4,
    max_cells: int | None = None,
    seed: int = 0,
    analytic_fn: LossAndGrad | None = None,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per parameter.

    ``loss_and_grad(params)`` must return ``(loss, grads)`` with ``grads`` keyed
    like ``params``. ``loss`` may be an array of additive terms instead of
    their sum: differences are then taken term by term before summing, so the
    rounding noise scales with the individual terms rather than the total. The caller's arrays are never modified; probing happens on
    copies. ``max_cells`` caps the number of probed cells per parameter
    (chosen with a seeded generator); ``None`` probes every cell.
    ``analytic_fn``, when given, supplies the analytic gradients instead of
    ``loss_and_grad`` (e.g. a lower-precision evaluation of the same loss).
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    work = {k: np.array(v, copy=True) for k, v in params.items()}
    loss0, grads = (analytic_fn or loss_and_grad)(work)
    if not np.all(np.isfinite(loss0)):
        raise FloatingPointError(f"loss is not finite at the probe point: {loss0}")
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        cells = np.arange(flat.size)
        if max_cells is not None and flat.size > max_cells:
            cells = np.sort(rng.choice(flat.size, size=max_cells, replace=False))
        analytic = np.asarray(grads[name]).reshape(-1)[cells]
        numeric = np.empty(len(cells))
        for k, cell in enumerate(cells):
            orig = flat[cell]
            flat[cell] = orig + epsilon
            lp = loss_and_grad(work)[0]
            flat[cell] = orig - epsilon
            lm = loss_and_grad(work)[0]
            flat[cell] = orig
            if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(lm))):
                raise FloatingPointError(f"loss became non-finite while probing {name}[{cell}]")
            numeric[k] = np.sum(np.asarray(lp) - np.asarray(lm)) / (2 * epsilon)
        errors[name] = float(relative_error(analytic, numeric).max()) if len(cells) else 0.0
    return errors


def finite_difference_check(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-4,
    max_cells: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over all probed cells."""
    errs = gradient_errors(loss_and_grad, params, epsilon, max_cells, seed)
    return max(errs.values(), default=0.0)
