"""Central-difference checks for every op with a backward pass, the booster block and the full detector.

Each check builds a small float64 problem ``(params -> (loss, grads), params)``
that :func:`run_checks` hands to :func:`gradient_errors`. Single ops use a
fixed random projection ``sum(out * probe)`` as the loss so every output cell
matters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .detection_head import AnchorLayout, DetectionHead, detection_loss, init_head_params
from .fpn import BackboneConfig
from .model import Detector, DetectorConfig
from .msb import HdcConfig, MsbBlock, MsbConfig, MsbParams, init_msb_params

EPSILON = 1e-4
OP_TOL = 1e-5
PIPELINE_TOL = 1e-4
FLOAT32_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    worst_param: str = ""

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _projection_loss(op_fn, names):
    """Loss = sum(out * probe) for a fixed random probe; grads from the op's backward."""
    state = {}

    def fn(params):
        out, backward = op_fn(params)
        if "probe" not in state:
            state["probe"] = np.random.default_rng(99).normal(size=out.shape).astype(out.dtype)
        probe = state["probe"]
        grads = backward(probe)
        return float((out * probe).sum()), dict(zip(names, grads))

    return fn


def _unary(op_cls, x, **kw):
    def op_fn(p):
        op = op_cls(**kw)
        return op.forward(p["x"]), op.backward
    return _projection_loss(op_fn, ["x"]), {"x": x}


def check_conv2d(rng, dilation=2, stride=1):
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    spec = tc.ConvSpec(dilation=dilation, stride=stride, padding=dilation)

    def op_fn(p):
        op = tc.Conv2d(spec)
        return op.forward(p["x"], p["w"], p["b"]), op.backward

    return _projection_loss(op_fn, ["x", "w", "b"]), {"x": x, "w": w, "b": b}


def check_global_avg_pool(rng):
    return _unary(tc.GlobalAvgPool, rng.normal(size=(2, 3, 4, 5)))


def check_channel_max_pool(rng):
    # well-separated channels so no probe crosses an argmax switch
    return _unary(tc.ChannelMaxPool, rng.permutation(2 * 4 * 3 * 3).reshape(2, 4, 3, 3) * 0.1)


def check_upsample(rng):
    return _unary(tc.UpsampleNearest2x, rng.normal(size=(1, 2, 3, 3)))


def check_sigmoid(rng):
    return _unary(tc.Sigmoid, rng.normal(size=(1, 2, 3, 3)))


def check_relu(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    return _unary(tc.ReLU, np.where(np.abs(x) < 0.1, x + np.sign(x) * 0.1, x))


def check_add(rng):
    def op_fn(p):
        op = tc.Add()
        return op.forward(p["a"], p["b"]), op.backward
    a, b = (rng.normal(size=(1, 2, 3, 3)) for _ in range(2))
    return _projection_loss(op_fn, ["a", "b"]), {"a": a, "b": b}


def check_broadcast_mul(rng):
    """A channel gate and a spatial gate applied in sequence."""
    def op_fn(p):
        by_channel, by_pixel = tc.BroadcastMul(), tc.BroadcastMul()
        out = by_pixel.forward(by_channel.forward(p["x"], p["channel_gate"]), p["spatial_gate"])

        def backward(g):
            g_mid, g_sp = by_pixel.backward(g)
            g_x, g_ch = by_channel.backward(g_mid)
            return g_x, g_ch, g_sp
        return out, backward

    params = {
        "x": rng.normal(size=(2, 3, 4, 4)),
        "channel_gate": rng.uniform(0.1, 0.9, size=(2, 3, 1, 1)),
        "spatial_gate": rng.uniform(0.1, 0.9, size=(2, 1, 4, 4)),
    }
    return _projection_loss(op_fn, list(params)), params


def check_concat(rng):
    def op_fn(p):
        op = tc.Concat()
        return op.forward(p["a"], p["b"]), op.backward
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    return _projection_loss(op_fn, ["a", "b"]), {"a": a, "b": b}


def check_detection_loss(rng):
    n = 24
    labels = rng.choice([1, 0, -1], size=n)
    labels[:3] = 1
    sampled = labels != -1
    target = rng.normal(scale=0.5, size=(n, 4))
    deltas0 = target + rng.choice([-1, 1], size=(n, 4)) * rng.uniform(0.2, 1.0, size=(n, 4))

    def fn(p):
        res = detection_loss(p["logits"], p["deltas"], labels, target, sampled)
        return res.total, {"logits": res.grad_logits, "deltas": res.grad_deltas}

    return fn, {"logits": rng.normal(size=n), "deltas": deltas0}


def check_head(rng):
    head_params = init_head_params(4, 5, 3, rng)
    x = rng.normal(size=(2, 4, 4, 4))
    head = DetectionHead()
    probe_rng = np.random.default_rng(7)
    pl = probe_rng.normal(size=(2, 48))
    pd = probe_rng.normal(size=(2, 48, 4))

    def fn(p):
        logits, deltas = head.forward(p["x"], p)
        grads: dict = {}
        gx = head.backward(pl, pd, grads)
        grads["x"] = gx
        return float((logits * pl).sum() + (deltas * pd).sum()), grads

    return fn, {"x": x, **head_params}


def msb_problem(rng, dtype=np.float64, rates=(1, 2, 3), branch=2, in_ch=3, size=6, msb_cfg: MsbConfig | None = None,
                min_margin: float = 1e-3, max_tries: int = 200):
    """Random level map, params and block; loss is the plain sum of the block output.

    Inputs are redrawn until the channel max-pool's top-two gap is at least
    ``min_margin`` everywhere, so no probe switches its argmax.
    """
    hdc = HdcConfig(dilation_rates=rates, branch_channels=branch)
    block = MsbBlock(hdc, msb_cfg)
    for _ in range(max_tries):
        params = init_msb_params(in_ch, hdc, rng, dtype).to_dict("msb")
        # non-zero biases so their gradients are exercised
        for k in params:
            if k.endswith(".bias"):
                params[k] = rng.normal(scale=0.1, size=params[k].shape).astype(dtype)
        x = rng.normal(size=(2, in_ch, size, size)).astype(dtype)
        block.forward(x, MsbParams.from_dict(params, "msb"))
        if block.kink_margin() >= min_margin:
            break
    else:
        raise RuntimeError(f"no kink-free probe point found in {max_tries} tries")

    def fn(p):
        out = block.forward(p["x"], MsbParams.from_dict(p, "msb"))
        grads: dict = {}
        grads["x"] = block.backward(np.ones_like(out), grads, "msb")
        for name, value in p.items():
            grads.setdefault(name, np.zeros_like(value))  # stages switched off by msb_cfg
        return float(out.sum()), grads

    return fn, {"x": x, **params}


def check_msb(rng):
    return msb_problem(rng)


def detector_problem(seed: int = 0, variant: str = "fpn+msb", dtype=np.float64, min_margin: float = 3e-3,
                     max_tries: int = 200, msb_input: str = "fused", residual: bool = False):
    """Tiny detector + fixed targets whose probe point sits at least ``min_margin`` from every kink."""
    cfg = DetectorConfig(
        backbone=BackboneConfig(stage_channels=(3, 4), num_levels=2, stem_channels=3, pyramid_channels=3),
        hdc=HdcConfig(branch_channels=2),
        anchors=AnchorLayout(scales=(8, 16)),
        head_channels=3,
        variant=variant,
        msb_input=msb_input,
        residual=residual,
    )
    det = Detector(cfg)
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        params = det.init_params(int(rng.integers(1 << 31)), dtype)
        for k in params:
            if k.endswith(".bias"):
                params[k] = rng.normal(scale=0.1, size=params[k].shape).astype(dtype)
        x = rng.normal(size=(2, 3, 16, 16)).astype(dtype)
        det.forward(x, params)
        if det.kink_margin() >= min_margin:
            break
    else:
        raise RuntimeError(f"no kink-free probe point found in {max_tries} tries")
    gts = [np.array([[2.0, 2.0, 9.0, 10.0]]), np.array([[4.0, 1.0, 15.0, 12.0]])]
    targets = det.targets((16, 16), gts, rng)

    def fn(p):
        # per-anchor terms keep the difference noise well below the 1e-8 floor
        _, grads, parts = det.loss_and_grad(x, p, targets)
        return parts["terms"], grads

    return fn, params


def check_detector(rng):
    return detector_problem(int(rng.integers(1 << 16)))


CHECKS: dict[str, tuple[Callable, float]] = {
    "conv2d": (check_conv2d, OP_TOL),
    "conv2d_stride2": (lambda r: check_conv2d(r, dilation=1, stride=2), OP_TOL),
    "global_avg_pool": (check_global_avg_pool, OP_TOL),
    "channel_max_pool": (check_channel_max_pool, OP_TOL),
    "elementwise_add": (check_add, OP_TOL),
    "broadcast_mul": (check_broadcast_mul, OP_TOL),
    "concat_channels": (check_concat, OP_TOL),
    "upsample_nearest2x": (check_upsample, OP_TOL),
    "sigmoid": (check_sigmoid, OP_TOL),
    "relu": (check_relu, OP_TOL),
    "detection_loss": (check_detection_loss, OP_TOL),
    "detection_head": (check_head, OP_TOL),
    "msb_pipeline": (check_msb, PIPELINE_TOL),
    "fpn_msb_head": (check_detector, PIPELINE_TOL),
}


def _in_float32(fn):
    """Evaluate ``fn`` on float32 copies of the parameters; grads come back as float64."""
    def wrapped(params):
        loss, grads = fn({k: np.asarray(v, dtype=np.float32) for k, v in params.items()})
        return np.asarray(loss, dtype=np.float64), {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    return wrapped


def run_checks(precision: str = "float64", seed: int = 0, names=None, epsilon: float = EPSILON) -> list[CheckResult]:
    """Run the named checks (all by default) and report each one's worst relative error.

    In float32 mode the analytic gradients are computed in float32 and compared
    against float64 central differences under ``FLOAT32_TOL``; a warning is
    issued because the strict tolerances only hold in float64.
    """
    if precision not in ("float64", "float32"):
        raise ValueError(f"precision must be 'float64' or 'float32', got {precision!r}")
    if names is not None:
        unknown = set(names) - set(CHECKS)
        if unknown:
            raise KeyError(f"unknown checks: {sorted(unknown)}")
    if precision == "float32":
        warnings.warn(
            f"float32 gradient check: analytic gradients are compared against float64 differences "
            f"at the relaxed tolerance {FLOAT32_TOL:g}",
            RuntimeWarning,
            stacklevel=2,
        )
    results = []
    for i, (name, (build, tol)) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        fn, params = build(np.random.default_rng([seed, i]))
        if precision == "float32":
            errs = tc.gradient_errors(fn, params, epsilon, analytic_fn=_in_float32(fn))
            tol = FLOAT32_TOL
        else:
            errs = tc.gradient_errors(fn, params, epsilon)
        worst = max(errs, key=errs.get)
        results.append(CheckResult(name, errs[worst], tol, worst))
    return results
