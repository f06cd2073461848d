"""Full-pipeline inference: category maps, recurrent decomposition with a stop test, boxes or masks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import box_pixel_mask
from .checkpoint import load_checkpoint
from .dataset import Sample, rle_decode, rle_encode
from .errors import DependencyError
from .networks import DecompNet, bbox_regress
from .tensor import Tensor

STAGE_ORDER = ("finetune", "bbox", "instance", "category")


@dataclass
class InferenceConfig:
    stop_threshold: float = 0.2
    max_unroll: int = 12
    delta: float = 0.1           # activation floor for the segmentation score
    mask_threshold: float = 0.1  # binarization of instance maps into masks
    batch_size: int = 32

    def __post_init__(self):
        if self.max_unroll < 1:
            raise ValueError("max_unroll must be >= 1")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must be in [0, 1)")


@dataclass
class Detection:
    image_id: int
    category: int
    bbox: tuple
    score: float

    def to_record(self) -> dict:
        return {"image_id": int(self.image_id), "category": int(self.category),
                "bbox": [float(v) for v in self.bbox], "score": float(self.score)}


@dataclass
class SegInstance:
    image_id: int
    category: int
    mask: np.ndarray
    score: float

    def to_record(self) -> dict:
        return {"image_id": int(self.image_id), "category": int(self.category),
                "mask_rle": rle_encode(self.mask), "size": list(self.mask.shape),
                "score": float(self.score)}


def stop_condition(g, threshold: float = 0.2) -> bool:
    """A map with no activation reaching the threshold ends the sequence."""
    return float(np.max(g)) < threshold


def detection_score(g: np.ndarray, box) -> float:
    """Mean activation inside the box at map resolution; negative activations count as 0."""
    g = np.maximum(np.asarray(g, dtype=np.float64), 0.0)
    inside = box_pixel_mask(box, *g.shape)
    return float(g[inside].sum() / inside.sum())


def segmentation_score(g: np.ndarray, delta: float = 0.1) -> float:
    """Mean of the activations above ``delta``; 0 when there are none."""
    g = np.asarray(g, dtype=np.float64)
    above = g[g > delta]
    return float(above.mean()) if above.size else 0.0


def upsample_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a map-resolution mask to image resolution."""
    fy = -(-height // mask.shape[0])
    fx = -(-width // mask.shape[1])
    return np.repeat(np.repeat(mask, fy, axis=0), fx, axis=1)[:height, :width]


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return arr[:, None].astype(T.default_dtype())


def decompose(model: DecompNet, images, cfg: InferenceConfig) -> list:
    """Accepted instance maps: result[image][category index] is a list of (h, w) arrays.

    Each category's sequence is unrolled independently and stops at the
    first map that fails the activation test, or after ``max_unroll`` maps.
    """
    if model is None:
        raise DependencyError("no trained model loaded")
    x = _as_batch(images)
    n_cat = model.cfg.category.n_categories
    model.eval()
    out = [[[] for _ in range(n_cat)] for _ in range(len(x))]
    with T.no_grad():
        f = np.concatenate([model.category(Tensor(x[s:s + cfg.batch_size])).data
                            for s in range(0, len(x), cfg.batch_size)])
        pairs = [(i, c) for i in range(len(x)) for c in range(n_cat)]
        for s in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[s:s + cfg.batch_size]
            maps = Tensor(np.stack([f[i, c][None] for i, c in chunk]))
            features = model.instance.encode(maps)
            state = model.instance.initial_state(len(chunk))
            active = np.ones(len(chunk), dtype=bool)
            for _ in range(cfg.max_unroll):
                g, state = model.instance.step(features, state)
                for k, (i, c) in enumerate(chunk):
                    if not active[k]:
                        continue
                    gk = g.data[k, 0]
                    if stop_condition(gk, cfg.stop_threshold):
                        active[k] = False
                    else:
                        out[i][c].append(gk.copy())
                if not active.any():
                    break
    return out


def _categories(model: DecompNet, categories: Optional[Sequence[int]]) -> list:
    n = model.cfg.category.n_categories
    cats = list(categories) if categories is not None else list(range(n))
    if len(cats) != n:
        raise ValueError(f"model has {n} categories but {len(cats)} labels were given")
    return cats


def detect(model: DecompNet, images, image_ids: Sequence[int], cfg: InferenceConfig = None,
           categories: Optional[Sequence[int]] = None) -> List[Detection]:
    cfg = cfg or InferenceConfig()
    cats = _categories(model, categories)
    maps = decompose(model, images, cfg)
    flat = [(image_ids[i], cats[c], g) for i, per in enumerate(maps) for c, gs in enumerate(per) for g in gs]
    if not flat:
        return []
    boxes = bbox_regress(model.bbox, np.stack([g for _, _, g in flat])[:, None])
    return [Detection(iid, cat, tuple(float(v) for v in box), detection_score(g, box))
            for (iid, cat, g), box in zip(flat, boxes)]


def segment(model: DecompNet, images, image_ids: Sequence[int], cfg: InferenceConfig = None,
            categories: Optional[Sequence[int]] = None) -> List[SegInstance]:
    cfg = cfg or InferenceConfig()
    cats = _categories(model, categories)
    h, w = np.asarray(images).shape[-2:]
    results = []
    for i, per in enumerate(decompose(model, images, cfg)):
        for c, gs in enumerate(per):
            for g in gs:
                mask = g > cfg.mask_threshold
                if mask.any():
                    results.append(SegInstance(image_ids[i], cats[c], upsample_mask(mask, h, w),
                                               segmentation_score(g, cfg.delta)))
    return results


def ground_truth_results(samples: Sequence[Sample], task: str) -> list:
    """Ground truth in the result exchange format, each with score 1."""
    records = []
    for s in samples:
        for o in s.objects:
            if task == "detect":
                records.append(Detection(s.id, o.category, tuple(o.bbox), 1.0).to_record())
            else:
                records.append(SegInstance(s.id, o.category, o.mask.astype(bool), 1.0).to_record())
    return records


def write_results(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            rec = r.to_record() if hasattr(r, "to_record") else r
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_results(path) -> list:
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "image_id" not in rec or "score" not in rec or not ("bbox" in rec or "mask_rle" in rec):
                raise ValueError(f"{path}:{n}: result record needs image_id, score and bbox or mask_rle")
            if "mask_rle" in rec:
                rec["mask"] = rle_decode(rec["mask_rle"], tuple(rec["size"])).astype(bool)
            records.append(rec)
    return records


def load_model(path):
    """(model, metadata) from a checkpoint file, or the most advanced stage found in a directory."""
    path = Path(path)
    if path.is_dir():
        for stage in STAGE_ORDER:
            candidate = path / f"{stage}.dcmp"
            if candidate.exists():
                path = candidate
                break
        else:
            raise DependencyError(f"no checkpoint (*.dcmp) found in {path}")
    if not path.exists():
        raise DependencyError(f"checkpoint {path} does not exist")
    ckpt = load_checkpoint(path)
    return DecompNet.from_checkpoint(ckpt), ckpt.metadata


def require_stages(metadata: dict, task: str) -> None:
    needed = ("category", "instance", "bbox") if task == "detect" else ("category", "instance")
    done = metadata.get("stages", [])
    missing = [s for s in needed if s not in done]
    if missing:
        raise DependencyError(f"{task} needs trained {', '.join(missing)} network(s)")
