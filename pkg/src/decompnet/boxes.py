"""Box and mask overlap helpers.

Boxes are (x, y, w, h) with (x, y) the centre; coordinates may be normalized
or in pixels as long as both operands agree.
"""

import numpy as np

from .errors import ShapeError


def to_corners(box):
    x, y, w, h = box
    return x - w / 2, y - h / 2, x + w / 2, y + h / 2


def iou_box(a, b) -> float:
    """Intersection over union of two centre-format boxes; 0 for degenerate boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        return 0.0
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(min(1.0, inter / union))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two (n, 4) arrays of centre-format boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    inter = np.clip(hi - lo, 0, None).prod(axis=2)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None] - inter
    valid = (area_a[:, None] > 0) & (area_b[None] > 0) & (union > 0)
    return np.where(valid, inter / np.where(union > 0, union, 1), 0.0)


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    """|a and b| / |a or b| for binary maps; 0 when the union is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_bbox(mask: np.ndarray) -> tuple:
    """Tight normalized centre-format box around the nonzero pixels of ``mask``."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    h, w = mask.shape
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    return ((c0 + c1) / 2 / w, (r0 + r1) / 2 / h, (c1 - c0) / w, (r1 - r0) / h)


def box_pixel_mask(box, height: int, width: int) -> np.ndarray:
    """Binary mask of the pixels covered by a normalized box.

    Edges are mapped to pixel indices with round-half-up, and at least one
    pixel is always covered.
    """
    x0, y0, x1, y1 = to_corners(box)
    c0 = int(np.clip(np.floor(x0 * width + 0.5), 0, width - 1))
    r0 = int(np.clip(np.floor(y0 * height + 0.5), 0, height - 1))
    c1 = int(np.clip(np.floor(x1 * width + 0.5), c0 + 1, width))
    r1 = int(np.clip(np.floor(y1 * height + 0.5), r0 + 1, height))
    out = np.zeros((height, width), dtype=bool)
    out[r0:r1, c0:c1] = True
    return out
