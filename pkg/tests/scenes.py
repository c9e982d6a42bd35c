"""Random micro-scenes with integer box corners, so every IoU is one exact division."""

import numpy as np


def random_boxes(rng: np.random.Generator, n: int, extent: int = 32, max_side: int = 16) -> np.ndarray:
    x0 = rng.integers(0, extent, size=n)
    y0 = rng.integers(0, extent, size=n)
    w = rng.integers(1, max_side + 1, size=n)
    h = rng.integers(1, max_side + 1, size=n)
    return np.stack([x0, y0, x0 + w, y0 + h], axis=1).astype(np.float64)


def micro_scene(rng: np.random.Generator):
    """(anchors, gts, det boxes, det scores) with small random sizes and some duplicate scores."""
    anchors = random_boxes(rng, int(rng.integers(1, 25)))
    gts = random_boxes(rng, int(rng.integers(0, 4)))
    boxes = random_boxes(rng, int(rng.integers(1, 15)))
    scores = rng.integers(0, 8, size=len(boxes)) / 8.0  # coarse grid forces ties
    return anchors, gts, boxes, scores
