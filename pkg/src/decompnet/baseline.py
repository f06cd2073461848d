"""Sliding-window CNN detector used as the reference point for the recurrent pipeline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence

import cv2
import numpy as np

from . import tensor as T
from .boxes import iou_matrix
from .checkpoint import ModelCheckpoint
from .dataset import Sample
from .errors import DependencyError
from .evaluation import nms
from .inference import Detection
from .layers import Dense, Module
from .networks import CATEGORY_LAYERS, _blocks
from .tensor import Tensor


@dataclass
class BaselineConfig:
    window_sizes: tuple = (14, 24, 35, 45, 56)
    step: int = 5
    nms_iou: float = 0.3
    input_size: int = 28
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    neg_per_pos: int = 3
    batch_size: int = 32
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.window_sizes = tuple(int(s) for s in self.window_sizes)
        if any(b <= a for a, b in zip(self.window_sizes, self.window_sizes[1:])):
            raise ValueError(f"window sizes must be strictly increasing: {self.window_sizes}")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if self.batch_size < self.neg_per_pos + 1:
            raise ValueError("batch_size must hold at least one positive and its negatives")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def enumerate_windows(height: int, width: int, sizes: Sequence[int], step: int) -> np.ndarray:
    """All square windows fully inside the image, as (x0, y0, size) pixel rows.

    For each size the grid is centred so the leftover margin is split evenly.
    """
    rows = []
    for s in sizes:
        if s > height or s > width:
            continue
        ox = ((width - s) % step) // 2
        oy = ((height - s) % step) // 2
        for y in range(oy, height - s + 1, step):
            for x in range(ox, width - s + 1, step):
                rows.append((x, y, s))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def windows_to_boxes(windows: np.ndarray, height: int, width: int) -> np.ndarray:
    """(x0, y0, size) pixel windows as normalized centre-format boxes."""
    w = windows.astype(np.float64)
    return np.stack([(w[:, 0] + w[:, 2] / 2) / width, (w[:, 1] + w[:, 2] / 2) / height,
                     w[:, 2] / width, w[:, 2] / height], axis=1)


def window_recall(samples: Sequence[Sample], cfg: BaselineConfig, iou: float = 0.5) -> float:
    """Fraction of ground-truth boxes whose best window overlaps them by at least ``iou``."""
    hits = total = 0
    cache = {}
    for s in samples:
        h, w = s.image.shape
        if (h, w) not in cache:
            cache[h, w] = windows_to_boxes(enumerate_windows(h, w, cfg.window_sizes, cfg.step), h, w)
        gt = np.array([o.bbox for o in s.objects]).reshape(-1, 4)
        if len(gt):
            best = iou_matrix(gt, cache[h, w]).max(axis=1)
            hits += int((best >= iou).sum())
            total += len(gt)
    return hits / total if total else 0.0


def extract_patches(image: np.ndarray, windows: np.ndarray, size: int) -> np.ndarray:
    """Crop each window and resize it to ``size`` x ``size``; returns (n, 1, size, size) in [0, 1]."""
    out = np.empty((len(windows), 1, size, size), dtype=np.float32)
    for k, (x, y, s) in enumerate(windows):
        crop = image[y:y + s, x:x + s]
        interp = cv2.INTER_AREA if s > size else cv2.INTER_LINEAR
        out[k, 0] = cv2.resize(crop, (size, size), interpolation=interp).astype(np.float32) / 255.0
    return out


class BaselineClassifier(Module):
    """The category net's convolutional trunk, global average pooling, and a softmax layer."""

    def __init__(self, n_classes: int, rng: np.random.Generator):
        self.trunk = _blocks([spec for spec in CATEGORY_LAYERS if spec[0] == "conv"], rng)
        self.head = Dense(CATEGORY_LAYERS[5][2], n_classes, rng, gain=1.0)
        self.trained = False
        self.assign_names()

    def forward(self, x: Tensor) -> Tensor:
        for block in self.trunk:
            x = block(x)
        return self.head(x.mean(axis=(2, 3)))

    def predict(self, patches: np.ndarray, batch: int = 256) -> np.ndarray:
        """Class probabilities, eval mode, no graph."""
        self.eval()
        with T.no_grad():
            logits = [self(Tensor(patches[s:s + batch])).data for s in range(0, len(patches), batch)]
        return T.softmax(np.concatenate(logits)) if logits else np.zeros((0, self.head.weight.shape[1]))


class PatchSampler:
    """Balanced batches of labelled windows: label 0 is background, k + 1 is category k."""

    def __init__(self, samples: Sequence[Sample], categories: Sequence[int], cfg: BaselineConfig,
                 rng: np.random.Generator):
        self.samples = [s for s in samples if s.objects]
        if not self.samples:
            raise ValueError("no annotated objects to sample from")
        self.categories = list(categories)
        self.cfg, self.rng = cfg, rng

    def _gt(self, s: Sample) -> tuple:
        h, w = s.image.shape
        boxes = np.array([o.bbox for o in s.objects]) * [w, h, w, h]
        return boxes, [self.categories.index(o.category) + 1 for o in s.objects]

    def positive(self) -> tuple:
        for _ in range(1000):
            s = self.samples[self.rng.integers(len(self.samples))]
            h, w = s.image.shape
            boxes, labels = self._gt(s)
            j = self.rng.integers(len(boxes))
            cx, cy, bw, bh = boxes[j]
            side = int(round(np.sqrt(bw * bh) * np.exp(self.rng.uniform(-0.25, 0.25))))
            side = int(np.clip(side, 4, min(h, w)))
            x = int(round(cx + self.rng.uniform(-0.15, 0.15) * side - side / 2))
            y = int(round(cy + self.rng.uniform(-0.15, 0.15) * side - side / 2))
            if x < 0 or y < 0 or x + side > w or y + side > h:
                continue
            ious = iou_matrix([[x + side / 2, y + side / 2, side, side]], boxes)[0]
            if ious.argmax() == j and ious[j] >= self.cfg.pos_iou:
                return s, (x, y, side), labels[j]
        raise RuntimeError("could not draw a positive window; check pos_iou")

    def negative(self) -> tuple:
        lo, hi = self.cfg.window_sizes[0], self.cfg.window_sizes[-1]
        for _ in range(1000):
            s = self.samples[self.rng.integers(len(self.samples))]
            h, w = s.image.shape
            side = int(self.rng.integers(lo, min(hi, h, w) + 1))
            x = int(self.rng.integers(0, w - side + 1))
            y = int(self.rng.integers(0, h - side + 1))
            boxes, _ = self._gt(s)
            if iou_matrix([[x + side / 2, y + side / 2, side, side]], boxes).max() < self.cfg.neg_iou:
                return s, (x, y, side), 0
        raise RuntimeError("could not draw a background window; images are too crowded")

    def batch(self) -> tuple:
        n_pos = max(1, self.cfg.batch_size // (self.cfg.neg_per_pos + 1))
        draws = [self.positive() for _ in range(n_pos)]
        draws += [self.negative() for _ in range(self.cfg.batch_size - n_pos)]
        x = np.concatenate([extract_patches(s.image, np.array([win]), self.cfg.input_size)
                            for s, win, _ in draws])
        return x, np.array([label for _, _, label in draws])


def train_baseline_classifier(samples: Sequence[Sample], categories: Sequence[int],
                              cfg: BaselineConfig, log=None) -> BaselineClassifier:
    rng = np.random.default_rng(cfg.seed)
    model = BaselineClassifier(len(categories) + 1, rng)
    sampler = PatchSampler(samples, categories, cfg, rng)
    opt = T.SGD(model.parameters(), cfg.lr, cfg.momentum)
    model.train()
    for step in range(cfg.steps):
        x, y = sampler.batch()
        loss = T.softmax_cross_entropy(model(Tensor(x)), y)
        loss.backward()
        opt.step()
        if log is not None and step % 50 == 0:
            log({"stage": "baseline", "epoch": 0, "batch": step, "loss": loss.item()})
    model.eval()
    model.trained = True
    return model


def classifier_to_checkpoint(model: BaselineClassifier, categories: Sequence[int],
                             cfg: BaselineConfig) -> ModelCheckpoint:
    return ModelCheckpoint(model.state_dict(), {"kind": "baseline", "categories": list(categories),
                                                "baseline": cfg.to_dict()})


def classifier_from_checkpoint(ckpt: ModelCheckpoint) -> BaselineClassifier:
    if ckpt.metadata.get("kind") != "baseline":
        raise DependencyError("checkpoint does not hold a baseline classifier")
    model = BaselineClassifier(len(ckpt.metadata["categories"]) + 1, np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    model.eval()
    model.trained = True
    return model


def sliding_window_detect(classifier: Optional[BaselineClassifier], image: np.ndarray, image_id: int,
                          categories: Sequence[int], cfg: BaselineConfig) -> List[Detection]:
    """Classify every window, keep non-background argmax windows, then suppress per category."""
    if classifier is None or not getattr(classifier, "trained", False):
        raise DependencyError("sliding-window detection needs a trained classifier")
    h, w = image.shape
    windows = enumerate_windows(h, w, cfg.window_sizes, cfg.step)
    probs = classifier.predict(extract_patches(image, windows, cfg.input_size))
    labels = probs.argmax(axis=1)
    boxes = windows_to_boxes(windows, h, w)
    out = []
    for k, cat in enumerate(categories, start=1):
        idx = np.flatnonzero(labels == k)
        kept = nms(boxes[idx], probs[idx, k], cfg.nms_iou)
        out += [Detection(image_id, cat, tuple(boxes[idx[j]]), float(probs[idx[j], k])) for j in kept]
    return out
