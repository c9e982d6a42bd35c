"""Fixed-seed inputs for the golden snapshots, plus loop-oracle renderings of them.

``python tests/golden_cases.py`` rewrites ``tests/golden/*.msbt`` from the
oracle path; the tests compare the package's fast path against those files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from msbdet.fpn import BackboneConfig, init_backbone_params
from msbdet.msb import HdcConfig, init_msb_params
from oracles import conv2d_loops, sigmoid_scalar

GOLDEN = Path(__file__).parent / "golden"

FPN_CFG = BackboneConfig(input_channels=3, stage_channels=(4, 6, 8), num_levels=3, stem_channels=4,
                         pyramid_channels=5)
MSB_HDC = HdcConfig(dilation_rates=(1, 2, 3), branch_channels=3)


def fpn_case():
    rng = np.random.default_rng(2024)
    params = init_backbone_params(FPN_CFG, rng)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    x = rng.normal(size=(1, 3, 32, 32))
    return x, params


def msb_case():
    rng = np.random.default_rng(7)
    params = init_msb_params(4, MSB_HDC, rng)
    for f in (params.shared_filter, params.mapping_filter, params.channel_attn_filter, params.spatial_attn_filter):
        f.bias = rng.normal(scale=0.1, size=f.bias.shape)
    x = rng.normal(size=(1, 4, 9, 9))
    return x, params


def relu(a):
    return np.maximum(a, 0.0)


def fpn_oracle(x, params, cfg=FPN_CFG):
    h = relu(conv2d_loops(x, params["fpn.stem.weight"], params["fpn.stem.bias"], stride=2, pad=1))
    down = []
    for i in range(1, cfg.num_levels + 1):
        h = relu(conv2d_loops(h, params[f"fpn.stage{i}.weight"], params[f"fpn.stage{i}.bias"], stride=2, pad=1))
        down.append(conv2d_loops(h, params[f"fpn.lateral{i}.weight"], params[f"fpn.lateral{i}.bias"]))
    up = [None] * len(down)
    up[-1] = down[-1]
    for i in range(len(down) - 2, -1, -1):
        up[i] = np.kron(up[i + 1], np.ones((1, 1, 2, 2)))
    return [d + u for d, u in zip(down, up)]


def msb_oracle(x, params, rates=(1, 2, 3)):
    sf, mf, ca, sa = params.shared_filter, params.mapping_filter, params.channel_attn_filter, params.spatial_attn_filter
    branches = [conv2d_loops(x, sf.weight, sf.bias, pad=r, dilation=r) for r in rates]
    branches.append(conv2d_loops(x, mf.weight, mf.bias))
    h = np.concatenate(branches, axis=1)
    pooled = h.mean(axis=(2, 3), keepdims=True)
    gate = np.vectorize(sigmoid_scalar)(conv2d_loops(pooled, ca.weight, ca.bias))
    hch = h * gate
    sp = np.vectorize(sigmoid_scalar)(conv2d_loops(hch.max(axis=1, keepdims=True), sa.weight, sa.bias, pad=1))
    return hch * sp


def main():
    from msbdet.serialization import save_checkpoint, save_tensor

    GOLDEN.mkdir(exist_ok=True)
    x, p = fpn_case()
    save_checkpoint(GOLDEN / "fpn_pyramid.msbt", {f"P{i + 1}": m for i, m in enumerate(fpn_oracle(x, p))})
    x, p = msb_case()
    save_tensor(GOLDEN / "msb_output.msbt", msb_oracle(x, p))


if __name__ == "__main__":
    main()
