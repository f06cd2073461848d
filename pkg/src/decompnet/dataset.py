"""MNIST ingestion and the multi-digit scene generator.

On-disk layout written by :func:`synth_dataset`::

    <root>/meta.json
    <root>/{train,test}/images/<id:06d>.pgm      binary P5, maxval 255
    <root>/{train,test}/annotations.jsonl        one sample per line

Each annotation line is ``{"id", "objects": [{"category", "bbox", "mask_rle",
"scale"}]}`` with ``bbox`` a normalized centre-format box and ``mask_rle`` the
row-major run lengths of the binary mask, starting with a run of zeros.
"""

from __future__ import annotations

import dataclasses
import gzip
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np

from .boxes import iou_box, mask_bbox
from .errors import ConsistencyError, FormatError, TruncatedFileError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SPLITS = ("train", "test")


# ------------------------------------------------------------------ MNIST IDX


@dataclass
class MnistArchive:
    images: np.ndarray  # (n, 28, 28) uint8
    labels: np.ndarray  # (n,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def indices_of(self, categories: Sequence[int]) -> dict:
        return {c: np.flatnonzero(self.labels == c) for c in categories}


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0, path=path)
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims).copy()


def load_idx(images_path, labels_path) -> MnistArchive:
    """Read an MNIST image/label file pair (optionally gzipped)."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images_path} holds {images.shape[0]} images "
                               f"but {labels_path} holds {labels.shape[0]} labels")
    return MnistArchive(images, labels)


def write_idx(archive: MnistArchive, images_path, labels_path) -> None:
    n, rows, cols = archive.images.shape
    opener = lambda p: gzip.GzipFile(p, "wb", mtime=0) if str(p).endswith(".gz") else open(p, "wb")
    with opener(images_path) as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(np.ascontiguousarray(archive.images, dtype=np.uint8).tobytes())
    with opener(labels_path) as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(np.ascontiguousarray(archive.labels, dtype=np.uint8).tobytes())


def find_idx_pair(directory, prefix: str):
    """Locate ``<prefix>-images-idx3-ubyte[.gz]`` and its label file."""
    directory = Path(directory)
    for suffix in ("", ".gz"):
        img = directory / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = directory / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    return None


def load_mnist_dir(directory) -> dict:
    """Archives for each split found in an MNIST directory.

    Standard names are ``train-*`` and ``t10k-*``; when only one pair exists
    it serves both splits.
    """
    found = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        pair = find_idx_pair(directory, prefix)
        if pair:
            found[split] = load_idx(*pair)
    if not found:
        for path in sorted(Path(directory).glob("*-images-idx3-ubyte*")):
            prefix = path.name.split("-images-")[0]
            pair = find_idx_pair(directory, prefix)
            if pair:
                found["train"] = load_idx(*pair)
                break
    if not found:
        raise FileNotFoundError(f"no MNIST IDX files in {directory}")
    found.setdefault("train", found.get("test"))
    found.setdefault("test", found["train"])
    return found


# -------------------------------------------------------------------- scenes


@dataclass
class SynthConfig:
    image_size: int = 100
    n_objects: tuple = (5, 10)
    categories: tuple = (3, 6, 9)
    scale: tuple = (0.5, 2.0)
    max_pair_iou: float = 0.2
    n_strokes: int = 30
    stroke_window: int = 20
    stroke_intensity: tuple = (128, 255)
    max_attempts: int = 100
    train_size: int = 30000
    test_size: int = 10000
    seed: int = 0

    def __post_init__(self):
        self.n_objects = tuple(int(v) for v in self.n_objects)
        self.categories = tuple(int(v) for v in self.categories)
        self.scale = tuple(float(v) for v in self.scale)
        self.stroke_intensity = tuple(int(v) for v in self.stroke_intensity)
        lo, hi = self.n_objects
        if not 1 <= lo <= hi:
            raise ValueError(f"n_objects range {self.n_objects} is empty")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError(f"scale range {self.scale} is empty")
        if not self.categories:
            raise ValueError("no categories configured")
        if self.image_size < 1 or self.train_size < 0 or self.test_size < 0:
            raise ValueError("sizes must be positive")
        if round(28 * self.scale[1]) > self.image_size:
            raise ValueError(f"digits at scale {self.scale[1]} do not fit a {self.image_size} px image")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass
class SceneObject:
    category: int
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    bbox: tuple       # normalized (x, y, w, h), centre format
    scale: float

    def __eq__(self, other):
        return (isinstance(other, SceneObject) and self.category == other.category
                and tuple(self.bbox) == tuple(other.bbox) and self.scale == other.scale
                and np.array_equal(self.mask, other.mask))


@dataclass
class Sample:
    id: int
    image: np.ndarray  # (H, W) uint8
    objects: List[SceneObject] = field(default_factory=list)

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.id == other.id
                and np.array_equal(self.image, other.image) and self.objects == other.objects)

    def count(self, category: int) -> int:
        return sum(o.category == category for o in self.objects)

    def objects_of(self, category: int) -> list:
        return [o for o in self.objects if o.category == category]


def sample_rng(seed: int, split: str, sample_id: int) -> np.random.Generator:
    """Per-sample generator so serial and parallel generation agree."""
    return np.random.default_rng([int(seed), SPLITS.index(split), int(sample_id)])


def scale_digit(digit: np.ndarray, scale: float) -> np.ndarray:
    size = max(1, int(round(digit.shape[0] * scale)))
    if size == digit.shape[0]:
        return digit.copy()
    return cv2.resize(digit, (size, size), interpolation=cv2.INTER_LINEAR)


def render_strokes(image: np.ndarray, n: int, rng: np.random.Generator,
                   window: int = 20, intensity=(128, 255)) -> np.ndarray:
    """Overlay ``n`` one-pixel quadratic pen strokes, composed by per-pixel max.

    Each stroke passes through three uniform points inside a random
    ``window`` x ``window`` square.
    """
    out = image.copy()
    h, w = out.shape
    ts = np.linspace(0.0, 1.0, 4 * window)
    # Lagrange basis through t = 0, 0.5, 1.
    basis = np.stack([2 * (ts - 0.5) * (ts - 1), -4 * ts * (ts - 1), 2 * ts * (ts - 0.5)], axis=1)
    for _ in range(n):
        top = rng.integers(0, max(1, h - window + 1))
        left = rng.integers(0, max(1, w - window + 1))
        pts = rng.uniform(0, window - 1, size=(3, 2)) + (top, left)
        curve = np.rint(basis @ pts).astype(int)
        rows = np.clip(curve[:, 0], 0, h - 1)
        cols = np.clip(curve[:, 1], 0, w - 1)
        value = rng.integers(intensity[0], intensity[1] + 1)
        out[rows, cols] = np.maximum(out[rows, cols], value)
    return out


def _try_place(archive, pools, cfg: SynthConfig, rng) -> Optional[tuple]:
    size = cfg.image_size
    count = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    image = np.zeros((size, size), dtype=np.uint8)
    objects = []
    for _ in range(count):
        category = cfg.categories[int(rng.integers(len(cfg.categories)))]
        digit = archive.images[pools[category][int(rng.integers(len(pools[category])))]]
        scale = float(rng.uniform(*cfg.scale))
        patch = scale_digit(digit, scale)
        support = patch > 0
        if not support.any():
            return None
        s = patch.shape[0]
        for _attempt in range(cfg.max_attempts):
            top = int(rng.integers(0, size - s + 1))
            left = int(rng.integers(0, size - s + 1))
            mask = np.zeros((size, size), dtype=np.uint8)
            mask[top:top + s, left:left + s] = support
            bbox = mask_bbox(mask)
            if all(iou_box(bbox, o.bbox) <= cfg.max_pair_iou for o in objects):
                break
        else:
            return None
        view = image[top:top + s, left:left + s]
        np.maximum(view, patch, out=view)
        objects.append(SceneObject(category, mask, bbox, scale))
    return image, objects


def synth_sample(archive: MnistArchive, cfg: SynthConfig, rng: np.random.Generator,
                 sample_id: int = 0) -> Sample:
    """Draw one scene; placement failures restart the whole scene."""
    pools = archive.indices_of(cfg.categories)
    for c, pool in pools.items():
        if len(pool) == 0:
            raise ValueError(f"archive holds no digit {c}")
    while True:
        placed = _try_place(archive, pools, cfg, rng)
        if placed is not None:
            break
    image, objects = placed
    image = render_strokes(image, cfg.n_strokes, rng, cfg.stroke_window, cfg.stroke_intensity)
    return Sample(sample_id, image, objects)


def _synth_one(args):
    archive, cfg, split, sample_id = args
    return synth_sample(archive, cfg, sample_rng(cfg.seed, split, sample_id), sample_id)


def synth_split(archive: MnistArchive, cfg: SynthConfig, split: str, count: int,
                workers: int = 1) -> List[Sample]:
    jobs = [(archive, cfg, split, i) for i in range(count)]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_synth_one, jobs, chunksize=64))
    return [_synth_one(job) for job in jobs]


# ------------------------------------------------------------------ storage


def rle_encode(mask: np.ndarray) -> List[int]:
    """Row-major run lengths of a binary mask, beginning with a zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple) -> np.ndarray:
    values = np.arange(len(runs)) % 2
    flat = np.repeat(values, runs).astype(np.uint8)
    if flat.size != shape[0] * shape[1]:
        raise FormatError(f"RLE covers {flat.size} pixels, expected {shape[0] * shape[1]}")
    return flat.reshape(shape)


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise FormatError("expected binary PGM with maxval 255", offset=0, path=path)
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:]
    if len(data) < w * h:
        raise TruncatedFileError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def annotation_record(sample: Sample) -> dict:
    return {
        "id": int(sample.id),
        "objects": [
            {"category": int(o.category), "bbox": [float(v) for v in o.bbox],
             "mask_rle": rle_encode(o.mask), "scale": float(o.scale)}
            for o in sample.objects
        ],
    }


def write_split(samples: Sequence[Sample], split_dir) -> None:
    split_dir = Path(split_dir)
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    try:
        with open(split_dir / "annotations.jsonl", "w") as fh:
            for s in samples:
                write_pgm(split_dir / "images" / f"{s.id:06d}.pgm", s.image)
                fh.write(json.dumps(annotation_record(s), separators=(",", ":")) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset split {split_dir}: {exc}") from exc


def read_split(split_dir, limit: Optional[int] = None) -> List[Sample]:
    split_dir = Path(split_dir)
    samples = []
    with open(split_dir / "annotations.jsonl") as fh:
        for line in fh:
            if limit is not None and len(samples) >= limit:
                break
            rec = json.loads(line)
            image = read_pgm(split_dir / "images" / f"{rec['id']:06d}.pgm")
            objects = [SceneObject(o["category"], rle_decode(o["mask_rle"], image.shape),
                                   tuple(o["bbox"]), o.get("scale", 1.0)) for o in rec["objects"]]
            samples.append(Sample(rec["id"], image, objects))
    return samples


def read_meta(root) -> SynthConfig:
    with open(Path(root) / "meta.json") as fh:
        return SynthConfig(**json.load(fh)["synth"])


def synth_dataset(archives, cfg: SynthConfig, root, workers: Optional[int] = None) -> None:
    """Generate and write both splits.

    ``archives`` is one :class:`MnistArchive` or a ``{"train", "test"}`` mapping.
    """
    if isinstance(archives, MnistArchive):
        archives = {"train": archives, "test": archives}
    if workers is None:
        workers = int(os.environ.get("DECOMP_THREADS", os.cpu_count() or 1))
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", cfg.train_size), ("test", cfg.test_size)):
        samples = synth_split(archives[split], cfg, split, count, workers)
        write_split(samples, root / split)
    with open(root / "meta.json", "w") as fh:
        json.dump({"synth": cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------- targets


def downsample2(arr: np.ndarray) -> np.ndarray:
    """2x2 area average over the last two axes; odd extents are zero padded."""
    h, w = arr.shape[-2:]
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, h % 2), (0, w % 2)]
    a = np.pad(arr.astype(np.float32), pad)
    return a.reshape(*a.shape[:-2], a.shape[-2] // 2, 2, a.shape[-1] // 2, 2).mean(axis=(-3, -1))


def map_size(image_size: int, resolution: str) -> int:
    if resolution == "full":
        return image_size
    if resolution == "half":
        return (image_size + 1) // 2
    raise ValueError(f"unknown resolution {resolution!r}")


def instance_masks(sample: Sample, category: int, resolution: str = "full") -> np.ndarray:
    """(T, h, w) ground-truth masks of one category at map resolution."""
    h = map_size(sample.image.shape[0], resolution)
    w = map_size(sample.image.shape[1], resolution)
    masks = [o.mask.astype(np.float32) for o in sample.objects_of(category)]
    if not masks:
        return np.zeros((0, h, w), dtype=np.float32)
    stack = np.stack(masks)
    return downsample2(stack) if resolution == "half" else stack


def target_map(sample: Sample, category: int, resolution: str = "full") -> np.ndarray:
    """Sum of the category's instance masks; overlaps carry values >= 2."""
    return instance_masks(sample, category, resolution).sum(axis=0)
