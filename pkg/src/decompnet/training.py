"""Staged training: category net, instance net, box regressor, then everything jointly."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import ModelCheckpoint
from .dataset import Sample, instance_masks, map_size
from .errors import DependencyError
from .losses import (LossConfig, category_loss, hungarian_match, instance_loss, smooth_l1, squared_l2_costs,
                     weighted_distance)
from .layers import Module, recalibrate_batchnorm
from .networks import DecompNet, ModelConfig
from .tensor import Tensor

STAGES = ("category", "instance", "bbox", "finetune")
PREREQUISITES = {
    "category": (),
    "instance": ("category",),
    "bbox": ("category", "instance"),
    "finetune": ("category", "instance", "bbox"),
}


@dataclass
class StageConfig:
    epochs: int = 10
    lr: float = 0.01


@dataclass
class TrainConfig:
    batch_size: int = 16
    optimizer: str = "sgd"
    momentum: float = 0.9
    clip_norm: Optional[float] = None
    lr_decay: float = 0.1
    plateau_patience: int = 3
    warmup_epochs: int = 1
    warmup_lambda: float = 0.3
    final_lambda: float = 1.0
    eta: float = 1.0
    # Extra recurrent steps past the instance count, each pulled toward the empty map.
    extra_unroll: int = 1
    bbox_gt_fraction: float = 0.5
    resolution: str = "half"
    rnn_width: int = 2048
    bbox_hidden: int = 4096
    max_samples: Optional[int] = None
    seed: int = 0
    category: StageConfig = field(default_factory=StageConfig)
    instance: StageConfig = field(default_factory=StageConfig)
    bbox: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=lambda: StageConfig(epochs=2, lr=0.001))

    def __post_init__(self):
        for name in STAGES:
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, StageConfig(**value))
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.extra_unroll < 0:
            raise ValueError("extra_unroll must be >= 0")
        if not 0.0 <= self.bbox_gt_fraction <= 1.0:
            raise ValueError("bbox_gt_fraction must be in [0, 1]")

    def loss_config(self, epoch: int) -> LossConfig:
        """Pixel-weight offsets start small and are raised once warmup ends."""
        lam = self.warmup_lambda if epoch <= self.warmup_epochs else self.final_lambda
        return LossConfig(lam=lam, gamma=lam, eta=self.eta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainingSet:
    """Images and per-category targets at map resolution, ready for batching."""

    def __init__(self, samples: Sequence[Sample], categories: Sequence[int], resolution: str = "half"):
        if not samples:
            raise ValueError("training set is empty")
        self.samples = list(samples)
        self.categories = tuple(int(c) for c in categories)
        self.resolution = resolution
        self.image_size = samples[0].image.shape[0]
        self.map_size = map_size(self.image_size, resolution)
        self.images = np.stack([s.image for s in samples])[:, None].astype(np.float32) / 255.0
        self.masks = {}
        self.boxes = {}
        for i, s in enumerate(samples):
            for ci, c in enumerate(self.categories):
                self.masks[i, ci] = instance_masks(s, c, resolution)
                self.boxes[i, ci] = np.array([o.bbox for o in s.objects_of(c)], dtype=np.float64).reshape(-1, 4)
        self.targets = np.stack([[self.masks[i, ci].sum(axis=0) for ci in range(len(self.categories))]
                                 for i in range(len(samples))]).astype(np.float32)

    def __len__(self):
        return len(self.samples)

    def count(self, i: int, ci: int) -> int:
        return len(self.masks[i, ci])

    def items(self, include_empty: bool = False) -> list:
        return [(i, ci) for i in range(len(self)) for ci in range(len(self.categories))
                if include_empty or self.count(i, ci) > 0]


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _sequence_loss(maps: Sequence[Tensor], masks: np.ndarray, lc: LossConfig, return_match: bool = False):
    """Matched loss over the first len(masks) maps; any later map is a stop step with an empty target.

    Stop steps stay outside the matching so an empty target can never claim
    an early step.
    """
    n = len(masks)
    loss, match = None, None
    if n:
        loss, match = instance_loss(maps[:n], masks, lc, return_match=True)
    for g in maps[n:]:
        term = weighted_distance(g, np.zeros(g.shape), lc.lam)
        loss = term if loss is None else loss + term
    return (loss, match) if return_match else loss


class Trainer:
    """Runs one stage at a time on a :class:`DecompNet`."""

    def __init__(self, model: DecompNet, data: TrainingSet, cfg: TrainConfig,
                 log: Optional[Callable[[dict], None]] = None):
        self.model, self.data, self.cfg = model, data, cfg
        self.log = log or (lambda record: None)
        self.rng = np.random.default_rng(cfg.seed)

    # ----------------------------------------------------------- generic loop

    def _fit(self, stage: str, module: Module, batches: Callable, batch_loss: Callable) -> list:
        """batch_loss(batch, loss_cfg) returns (summed loss tensor, item count).

        Batch-norm statistics are re-estimated over one extra pass at the end.
        """
        scfg: StageConfig = getattr(self.cfg, stage)
        if self.cfg.optimizer == "adam":
            opt = T.Adam(module.parameters(), scfg.lr, clip_norm=self.cfg.clip_norm)
        else:
            opt = T.SGD(module.parameters(), scfg.lr, self.cfg.momentum, self.cfg.clip_norm)
        history = []
        best, since = math.inf, 0
        for epoch in range(1, scfg.epochs + 1):
            lc = self.cfg.loss_config(epoch)
            if epoch == self.cfg.warmup_epochs + 1:
                best, since = math.inf, 0
            total, count = 0.0, 0
            for b, batch in enumerate(batches()):
                loss, n = batch_loss(batch, lc)
                if n == 0:
                    continue
                (loss * (1.0 / n)).backward()
                opt.step()
                total += loss.item()
                count += n
                self.log({"stage": stage, "epoch": epoch, "batch": b, "loss": loss.item() / n})
            mean = total / max(count, 1)
            history.append({"epoch": epoch, **lc.to_dict(), "loss": mean, "lr": opt.lr})
            if mean < best * (1 - 1e-4):
                best, since = mean, 0
            else:
                since += 1
                if since >= self.cfg.plateau_patience:
                    opt.lr *= self.cfg.lr_decay
                    since = 0
        if history:
            with recalibrate_batchnorm(module):
                for batch in batches():
                    batch_loss(batch, lc)
        return history

    # ---------------------------------------------------------------- stages

    def train_category(self) -> list:
        net, data = self.model.category, self.data
        net.train()

        def batch_loss(idx, lc):
            f = net(Tensor(data.images[idx]))
            return category_loss(f, data.targets[idx], lc), len(idx)

        return self._fit("category", net,
                         lambda: _batches(len(data), self.cfg.batch_size, self.rng), batch_loss)

    def category_maps(self) -> np.ndarray:
        """Frozen category-net responses for the whole set, (N, C, h, w)."""
        net = self.model.category
        net.eval()
        out = []
        with T.no_grad():
            for start in range(0, len(self.data), 64):
                out.append(net(Tensor(self.data.images[start:start + 64])).data)
        return np.concatenate(out)

    def train_instance(self) -> list:
        inst, data, extra = self.model.instance, self.data, self.cfg.extra_unroll
        before = [p.data.copy() for p in self.model.category.parameters()]
        f = self.category_maps()
        items = data.items(include_empty=extra > 0)
        inst.train()

        def batch_loss(idx, lc):
            chosen = [items[k] for k in idx]
            x = Tensor(np.stack([f[i, ci][None] for i, ci in chosen]))
            steps = max(data.count(i, ci) for i, ci in chosen) + extra
            maps = inst.unroll(x, steps)
            total = None
            for b, (i, ci) in enumerate(chosen):
                n = data.count(i, ci) + extra
                term = _sequence_loss([maps[t][b, 0] for t in range(n)], data.masks[i, ci], lc)
                total = term if total is None else total + term
            return total, len(chosen)

        history = self._fit("instance", inst,
                            lambda: _batches(len(items), self.cfg.batch_size, self.rng), batch_loss)
        after = self.model.category.parameters()
        if any(not np.array_equal(a, p.data) for a, p in zip(before, after)):
            raise RuntimeError("category parameters changed during instance training")
        return history

    def objects(self) -> list:
        return [(i, ci, t) for i, ci in self.data.items() for t in range(self.data.count(i, ci))]

    def instance_maps(self) -> np.ndarray:
        """Frozen instance-net maps aligned with :meth:`objects` through the loss matching."""
        f = self.category_maps()
        inst, data = self.model.instance, self.data
        inst.eval()
        out = {}
        items = data.items()
        with T.no_grad():
            for start in range(0, len(items), 64):
                chunk = items[start:start + 64]
                steps = max(data.count(i, ci) for i, ci in chunk)
                maps = inst.unroll(Tensor(np.stack([f[i, ci][None] for i, ci in chunk])), steps)
                for b, (i, ci) in enumerate(chunk):
                    n = data.count(i, ci)
                    preds = np.stack([maps[t].data[b, 0] for t in range(n)])
                    match = hungarian_match(squared_l2_costs(preds, data.masks[i, ci]))
                    for t in range(n):
                        out[i, ci, match.assignment[t]] = preds[t]
        return np.stack([out[key] for key in self.objects()])

    def train_bbox(self) -> list:
        data, reg = self.data, self.model.bbox
        objects = self.objects()
        gt_maps = np.stack([data.masks[i, ci][t] for i, ci, t in objects]).astype(np.float32)
        boxes = np.stack([data.boxes[i, ci][t] for i, ci, t in objects])
        net_maps = self.instance_maps() if self.cfg.bbox_gt_fraction < 1 else gt_maps
        reg.train()

        def batch_loss(idx, lc):
            use_gt = self.rng.random(len(idx)) < self.cfg.bbox_gt_fraction
            maps = np.where(use_gt[:, None, None], gt_maps[idx], net_maps[idx])[:, None]
            return smooth_l1(reg(Tensor(maps)), boxes[idx]), len(idx)

        return self._fit("bbox", reg,
                         lambda: _batches(len(objects), self.cfg.batch_size, self.rng), batch_loss)

    def train_finetune(self) -> list:
        model, data, extra = self.model, self.data, self.cfg.extra_unroll
        model.train()
        n_cat = len(data.categories)

        def batch_loss(idx, lc):
            f = model.category(Tensor(data.images[idx]))
            total = category_loss(f, data.targets[idx], lc)
            chosen = [(b, ci) for b, i in enumerate(idx) for ci in range(n_cat)
                      if extra > 0 or data.count(i, ci) > 0]
            if not chosen:
                return total, len(idx)
            rows = np.array([b for b, _ in chosen])
            cols = np.array([ci for _, ci in chosen])
            x = f[rows, cols].reshape(len(chosen), 1, *f.shape[2:])
            steps = max(data.count(idx[b], ci) for b, ci in chosen) + extra
            maps = model.instance.unroll(x, steps)
            matched, targets = [], []
            for k, (b, ci) in enumerate(chosen):
                i = idx[b]
                n = data.count(i, ci)
                preds = [maps[t][k, 0] for t in range(n + extra)]
                term, match = _sequence_loss(preds, data.masks[i, ci], lc, return_match=True)
                total = total + term
                for t in range(n):
                    matched.append(maps[t][k:k + 1])
                    targets.append(data.boxes[i, ci][match.assignment[t]])
            if matched:
                pred_boxes = model.bbox(T.concat(matched, axis=0))
                total = total + smooth_l1(pred_boxes, np.stack(targets))
            return total, len(idx)

        return self._fit("finetune", model,
                         lambda: _batches(len(data), self.cfg.batch_size, self.rng), batch_loss)


def evaluate_category_loss(model: DecompNet, data: TrainingSet, lc: LossConfig) -> float:
    """Mean per-image category loss in eval mode."""
    model.category.eval()
    total = 0.0
    with T.no_grad():
        for start in range(0, len(data), 64):
            f = model.category(Tensor(data.images[start:start + 64]))
            total += category_loss(f, data.targets[start:start + 64], lc).item()
    return total / len(data)


def check_prerequisites(stage: str, init: Optional[ModelCheckpoint]) -> list:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    done = list(init.metadata.get("stages", [])) if init is not None else []
    missing = [s for s in PREREQUISITES[stage] if s not in done]
    if missing:
        raise DependencyError(f"stage {stage!r} needs a checkpoint that completed: {', '.join(missing)}")
    return done


def train_stage(stage: str, samples: Sequence[Sample], categories: Sequence[int], cfg: TrainConfig,
                init: Optional[ModelCheckpoint] = None,
                log: Optional[Callable[[dict], None]] = None) -> ModelCheckpoint:
    """Train one stage and return a checkpoint carrying every sub-network."""
    done = check_prerequisites(stage, init)
    if cfg.max_samples is not None:
        samples = list(samples)[:cfg.max_samples]
    data = TrainingSet(samples, categories, cfg.resolution)
    if init is not None:
        model = DecompNet.from_checkpoint(init)
        if model.cfg.category.map_size != data.map_size or \
                model.cfg.category.n_categories != len(data.categories):
            raise ValueError("initial checkpoint does not fit this dataset's image size or categories")
    else:
        model = DecompNet(ModelConfig.for_images(data.image_size, len(data.categories), cfg.resolution,
                                                 cfg.rnn_width, cfg.bbox_hidden, cfg.seed))
    trainer = Trainer(model, data, cfg, log)
    history = getattr(trainer, f"train_{stage}")()
    model.eval()
    last = history[-1]["epoch"] if history else 0
    meta = {
        "stage": stage,
        "stages": [s for s in done if s != stage] + [stage],
        "epoch": last,
        "loss_config": cfg.loss_config(max(last, 1)).to_dict(),
        "schedule": [{k: h[k] for k in ("epoch", "lambda", "gamma", "eta")} for h in history],
        "history": history,
        "categories": list(data.categories),
        "train": cfg.to_dict(),
    }
    return model.to_checkpoint(meta)
