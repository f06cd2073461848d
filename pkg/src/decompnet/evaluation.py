"""Precision-recall evaluation, average precision, and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .boxes import iou_box, iou_mask
from .dataset import Sample
from .errors import ConsistencyError, FormatError


@dataclass
class PRCurve:
    scores: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    average_precision: float
    category: int = -1
    iou_threshold: float = 0.5
    n_ground_truth: int = 0
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if len(recall) == 0:
        return 0.0
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def pr_curve(detections: Sequence[dict], ground_truth: Dict[int, list], iou_threshold: float = 0.5,
             kind: str = "box", category: int = -1) -> PRCurve:
    """Rank detections by score and match each to the best still-unmatched ground truth.

    ``detections`` are dicts with ``image_id``, ``score`` and ``bbox`` or
    ``mask``; ``ground_truth`` maps every image id to its boxes or masks.
    Equal scores keep their input order.
    """
    if kind not in ("box", "mask"):
        raise ValueError(f"kind must be 'box' or 'mask', got {kind!r}")
    key, overlap = ("bbox", iou_box) if kind == "box" else ("mask", iou_mask)
    for d in detections:
        if d["image_id"] not in ground_truth:
            raise ConsistencyError(f"detection refers to unknown image id {d['image_id']}")
    n_gt = sum(len(v) for v in ground_truth.values())
    order = sorted(range(len(detections)), key=lambda k: -detections[k]["score"])
    used = {iid: np.zeros(len(v), dtype=bool) for iid, v in ground_truth.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, k in enumerate(order):
        d = detections[k]
        gts = ground_truth[d["image_id"]]
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts):
            if used[d["image_id"]][j]:
                continue
            o = overlap(d[key], gt)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_threshold:
            used[d["image_id"]][best_j] = True
            tp[rank] = True
    ctp = np.cumsum(tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.arange(1, len(tp) + 1)
    scores = np.array([detections[k]["score"] for k in order], dtype=np.float64)
    ap = average_precision(recall, precision) if n_gt else 0.0
    return PRCurve(scores, recall, precision, ap, category, iou_threshold, n_gt, tp)


def nms(boxes: Sequence, scores: Sequence[float], iou_threshold: float = 0.3) -> List[int]:
    """Indices kept by greedy suppression, highest score first; ties keep input order."""
    order = sorted(range(len(scores)), key=lambda k: -scores[k])
    kept = []
    for k in order:
        if all(iou_box(boxes[k], boxes[j]) <= iou_threshold for j in kept):
            kept.append(k)
    return kept


def ground_truth_index(samples: Sequence[Sample], category: int, kind: str = "box") -> Dict[int, list]:
    out = {}
    for s in samples:
        objs = s.objects_of(category)
        out[s.id] = [tuple(o.bbox) for o in objs] if kind == "box" else [o.mask.astype(bool) for o in objs]
    return out


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w") as fh:
        fh.write(f"# AP={curve.average_precision:.6f}\n")
        fh.write(f"# category={curve.category} iou={curve.iou_threshold:g} n_gt={curve.n_ground_truth}\n")
        fh.write("score,recall,precision\n")
        for s, r, p in zip(curve.scores, curve.recall, curve.precision):
            fh.write(f"{s:.6f},{r:.6f},{p:.6f}\n")


def read_pr_csv(path) -> dict:
    """{"ap", "score", "recall", "precision"} from a file written by :func:`write_pr_csv`."""
    ap = None
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# AP="):
                    ap = float(line[5:])
                continue
            if line.startswith("score"):
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise FormatError(f"bad PR row {line!r} on line {n}", path=path) from None
    if ap is None:
        raise FormatError("missing '# AP=' header", path=path)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return {"ap": ap, "score": arr[:, 0], "recall": arr[:, 1], "precision": arr[:, 2]}
