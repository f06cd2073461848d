"""Mask regression losses and optimal assignment of predictions to ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, make_op

_EPS = 1e-8


@dataclass
class LossConfig:
    lam: float = 1.0    # pixel weight offset for per-map distances
    gamma: float = 1.0  # pixel weight offset for the summed-map (stop) distance
    eta: float = 1.0    # scale of the stop term

    def __post_init__(self):
        if min(self.lam, self.gamma, self.eta) < 0:
            raise ValueError(f"loss hyperparameters must be nonnegative: {self}")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "gamma": self.gamma, "eta": self.eta}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(d["lambda"], d["gamma"], d["eta"])


@dataclass
class MatchResult:
    assignment: tuple   # assignment[t] = ground-truth index matched to prediction t
    total_cost: float


def _target(y, like: Tensor) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else y
    return np.asarray(y, dtype=like.dtype)


def _distance(x: np.ndarray, y: np.ndarray, p: float, axes=None):
    """sqrt(sum (y + p) * (x - y)^2) and the weighted residual (y + p) * (x - y)."""
    diff = x - y
    wdiff = (y + p) * diff
    return np.sqrt((wdiff * diff).sum(axis=axes)), wdiff


def weighted_distance(x: Tensor, y, p: float) -> Tensor:
    """Pixel-weighted L2 distance between a map and a nonnegative target map.

    Weights y + p make foreground errors cost more, which keeps the all-zero
    map from being a cheap solution.  The gradient is taken as 0 at x == y.
    """
    y = _target(y, x)
    if x.shape != y.shape:
        raise ShapeError(f"weighted_distance: {x.shape} vs {y.shape}")
    d, wdiff = _distance(x.data, y, p)

    def grad_fn(g):
        return (g * wdiff / max(float(d), _EPS),)

    return make_op(np.asarray(d, dtype=x.dtype), (x,), grad_fn, "weighted_distance")


def category_loss(response_maps: Tensor, targets, cfg: LossConfig) -> Tensor:
    """Sum over images and categories of the weighted distance to the summed masks.

    response_maps and targets are (N, C, h, w).
    """
    y = _target(targets, response_maps)
    if response_maps.ndim != 4 or y.shape != response_maps.shape:
        raise ShapeError(f"category_loss: maps {response_maps.shape} vs targets {y.shape}")
    d, wdiff = _distance(response_maps.data, y, cfg.lam, axes=(2, 3))

    def grad_fn(g):
        return (g * wdiff / np.maximum(d, _EPS)[:, :, None, None],)

    return make_op(np.asarray(d.sum(), dtype=y.dtype), (response_maps,), grad_fn, "category_loss")


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost perfect matching of rows (predictions) to columns (ground truth).

    Shortest augmenting path with row/column potentials, O(n^3).  Columns are
    scanned in ascending order with strict comparisons, so ties go to the
    lowest ground-truth index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    n = cost.shape[0]
    if n == 0:
        return MatchResult((), 0.0)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)   # owner[j] = row (1-based) holding column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta, j1 = np.inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                reduced = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if reduced < minv[j]:
                    minv[j] = reduced
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[owner[j] - 1] = j - 1
    total = math.fsum(cost[t, assignment[t]] for t in range(n))
    return MatchResult(tuple(assignment), total)


def squared_l2_costs(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    p = preds.reshape(len(preds), -1).astype(np.float64)
    t = targets.reshape(len(targets), -1).astype(np.float64)
    return ((p[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)


def instance_loss(instance_maps: Sequence[Tensor], gt_masks, cfg: LossConfig,
                  return_match: bool = False):
    """Matched per-instance distances plus the eta-weighted distance of the sums.

    Predictions are matched to masks by plain squared L2; the matching is a
    constant for backpropagation.  The value does not depend on the order of
    either sequence: per-instance terms are summed exactly and map sums are
    accumulated over values sorted per pixel.
    """
    maps = list(instance_maps)
    masks = np.asarray(gt_masks)
    if len(maps) == 0 or len(maps) != len(masks):
        raise ValueError(f"instance_loss: {len(maps)} predictions for {len(masks)} ground-truth masks")
    shape = maps[0].shape
    dtype = maps[0].dtype
    if any(g.shape != shape for g in maps) or masks[0].size != maps[0].size:
        raise ShapeError(f"instance_loss: prediction shape {shape} vs masks {masks.shape[1:]}")
    preds = np.stack([g.data.reshape(masks.shape[1:]) for g in maps])
    masks = masks.astype(dtype)

    match = hungarian_match(squared_l2_costs(preds, masks))
    matched = masks[list(match.assignment)]
    per_d, per_w = _distance(preds, matched, cfg.lam, axes=tuple(range(1, preds.ndim)))
    pred_sum = np.sort(preds, axis=0).sum(axis=0)
    mask_sum = np.sort(masks, axis=0).sum(axis=0)
    sum_d, sum_w = _distance(pred_sum, mask_sum, cfg.gamma)
    value = math.fsum(per_d.tolist()) + cfg.eta * float(sum_d)

    def grad_fn(g):
        shared = cfg.eta * sum_w / max(float(sum_d), _EPS)
        return tuple((g * (per_w[t] / max(float(per_d[t]), _EPS) + shared)).reshape(shape)
                     for t in range(len(maps)))

    loss = make_op(np.asarray(value, dtype=dtype), maps, grad_fn, "instance_loss")
    return (loss, match) if return_match else loss


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Sum over coordinates of 0.5 d^2 where |d| < 1, else |d| - 0.5."""
    y = _target(target, pred)
    if pred.shape != y.shape:
        raise ShapeError(f"smooth_l1: {pred.shape} vs {y.shape}")
    d = pred.data - y
    ad = np.abs(d)
    value = np.where(ad < 1, 0.5 * d * d, ad - 0.5).sum()

    def grad_fn(g):
        return (g * np.clip(d, -1.0, 1.0),)

    return make_op(np.asarray(value, dtype=pred.dtype), (pred,), grad_fn, "smooth_l1")
