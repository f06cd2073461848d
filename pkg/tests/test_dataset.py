import gzip
import itertools
import struct

import numpy as np
import pytest

from decompnet.boxes import iou_box, mask_bbox
from decompnet.dataset import (MnistArchive, SynthConfig, downsample2, load_idx, read_split,
                               render_strokes, rle_decode, rle_encode, sample_rng, scale_digit,
                               synth_dataset, synth_sample, synth_split, target_map, write_idx)
from decompnet.errors import ConsistencyError, FormatError, TruncatedFileError


def check_sample(sample, cfg):
    assert sample.image.shape == (cfg.image_size, cfg.image_size)
    assert sample.image.dtype == np.uint8
    assert cfg.n_objects[0] <= len(sample.objects) <= cfg.n_objects[1]
    for obj in sample.objects:
        assert obj.category in cfg.categories
        assert cfg.scale[0] <= obj.scale <= cfg.scale[1]
        assert set(np.unique(obj.mask)) <= {0, 1} and obj.mask.any()
        assert obj.bbox == mask_bbox(obj.mask)
        assert all(0 <= v <= 1 for v in obj.bbox)
        assert (sample.image[obj.mask > 0] > 0).all()
    for a, b in itertools.combinations(sample.objects, 2):
        assert iou_box(a.bbox, b.bbox) <= cfg.max_pair_iou


class TestIdx:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arc = MnistArchive(rng.integers(0, 256, (7, 28, 28), dtype=np.uint8),
                           rng.integers(0, 10, 7, dtype=np.uint8))
        write_idx(arc, tmp_path / "i", tmp_path / "l")
        back = load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(back.images, arc.images)
        np.testing.assert_array_equal(back.labels, arc.labels)

    def test_fixture_header(self, mnist):
        assert mnist.images.shape == (5000, 28, 28)
        assert np.bincount(mnist.labels).tolist() == [500] * 10

    def test_wrong_magic(self, tmp_path):
        arc = MnistArchive(np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8))
        write_idx(arc, tmp_path / "i", tmp_path / "l")
        with pytest.raises(FormatError):
            load_idx(tmp_path / "l", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        write_idx(MnistArchive(np.zeros((3, 28, 28), np.uint8), np.zeros(3, np.uint8)),
                  tmp_path / "i", tmp_path / "l")
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes(2))
        with pytest.raises(ConsistencyError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_truncated(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 10, 28, 28) + bytes(100))
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 10) + bytes(10))
        with pytest.raises(TruncatedFileError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_gzip(self, tmp_path):
        arc = MnistArchive(np.ones((2, 28, 28), np.uint8), np.array([3, 6], np.uint8))
        write_idx(arc, tmp_path / "i.gz", tmp_path / "l.gz")
        assert gzip.open(tmp_path / "i.gz").read(4) == struct.pack(">I", 0x803)
        assert load_idx(tmp_path / "i.gz", tmp_path / "l.gz").labels.tolist() == [3, 6]


class TestSynthSample:
    def test_invariants_over_seeds(self, mnist):
        cfg = SynthConfig()
        for i in range(300):
            check_sample(synth_sample(mnist, cfg, sample_rng(1, "train", i), i), cfg)

    def test_degenerate_single_digit(self, mnist):
        cfg = SynthConfig(n_objects=(1, 1), n_strokes=0, scale=(1.0, 1.0), categories=(3,))
        s = synth_sample(mnist, cfg, np.random.default_rng(2))
        (obj,) = s.objects
        np.testing.assert_array_equal(s.image > 0, obj.mask > 0)
        rows, cols = np.nonzero(obj.mask)
        top, left = rows.min(), cols.min()
        digits = mnist.images[mnist.labels == 3]
        r0 = np.nonzero(digits.any(axis=2))
        # The image is one pasted digit of the archive.
        found = False
        for d in digits:
            dr, dc = np.nonzero(d)
            if dr.size == rows.size:
                oy, ox = top - dr.min(), left - dc.min()
                if 0 <= oy <= 72 and 0 <= ox <= 72:
                    pasted = np.zeros_like(s.image)
                    pasted[oy:oy + 28, ox:ox + 28] = d
                    if np.array_equal(pasted, s.image):
                        found = True
                        break
        assert found

    def test_deterministic(self, mnist):
        cfg = SynthConfig()
        a = synth_sample(mnist, cfg, sample_rng(3, "test", 17), 17)
        b = synth_sample(mnist, cfg, sample_rng(3, "test", 17), 17)
        assert a == b

    def test_parallel_matches_serial(self, mnist):
        cfg = SynthConfig(train_size=6, test_size=0)
        assert synth_split(mnist, cfg, "train", 6, workers=1) == synth_split(mnist, cfg, "train", 6, workers=2)

    def test_missing_category(self):
        arc = MnistArchive(np.ones((2, 28, 28), np.uint8), np.array([1, 2], np.uint8))
        with pytest.raises(ValueError):
            synth_sample(arc, SynthConfig(), np.random.default_rng(0))

    def test_no_vanished_objects(self, mnist):
        cfg = SynthConfig()
        min_support = min(np.count_nonzero(scale_digit(d, cfg.scale[0]))
                          for d in mnist.images[np.isin(mnist.labels, cfg.categories)])
        for i in range(50):
            s = synth_sample(mnist, cfg, sample_rng(4, "train", i), i)
            assert sum(int(o.mask.sum()) for o in s.objects) >= len(s.objects) * min_support


class TestStrokes:
    def test_zero_strokes(self):
        img = np.random.default_rng(0).integers(0, 256, (100, 100), dtype=np.uint8)
        np.testing.assert_array_equal(render_strokes(img, 0, np.random.default_rng(1)), img)

    def test_thirty_strokes_change_image(self):
        img = np.zeros((100, 100), np.uint8)
        out = render_strokes(img, 30, np.random.default_rng(2))
        assert np.count_nonzero(out != img) > 0
        assert out[out > 0].min() >= 128

    def test_never_darkens(self):
        img = np.random.default_rng(3).integers(0, 256, (50, 50), dtype=np.uint8)
        assert (render_strokes(img, 30, np.random.default_rng(4)) >= img).all()

    def test_ground_truth_untouched(self, mnist):
        base = SynthConfig(n_strokes=0)
        noisy = SynthConfig(n_strokes=30)
        a = synth_sample(mnist, base, sample_rng(5, "train", 0))
        b = synth_sample(mnist, noisy, sample_rng(5, "train", 0))
        assert a.objects == b.objects
        assert not np.array_equal(a.image, b.image)


class TestStorage:
    @pytest.mark.parametrize("mask", [
        np.zeros((3, 4)), np.ones((3, 4)),
        np.array([[1, 0, 0], [1, 1, 0]]), np.array([[0, 0, 1], [1, 1, 1]]),
    ])
    def test_rle_roundtrip(self, mask):
        runs = rle_encode(mask)
        assert sum(runs) == mask.size
        np.testing.assert_array_equal(rle_decode(runs, mask.shape), mask)

    def test_rle_starts_with_zero_run(self):
        assert rle_encode(np.array([[1, 1, 0]])) == [0, 2, 1]

    def test_write_read_roundtrip(self, mnist, tmp_path):
        cfg = SynthConfig(train_size=10, test_size=5, seed=7)
        synth_dataset(mnist, cfg, tmp_path, workers=1)
        for split, n in (("train", 10), ("test", 5)):
            back = read_split(tmp_path / split)
            assert len(back) == n
            assert back == synth_split(mnist, cfg, split, n)
        assert (tmp_path / "train" / "images" / "000009.pgm").read_bytes().startswith(b"P5\n100 100\n255\n")

    def test_byte_identical_reruns(self, mnist, tmp_path):
        cfg = SynthConfig(train_size=8, test_size=3, seed=11)
        synth_dataset(mnist, cfg, tmp_path / "a", workers=1)
        synth_dataset(mnist, cfg, tmp_path / "b", workers=1)
        for rel in ("train/annotations.jsonl", "test/annotations.jsonl", "meta.json", "train/images/000004.pgm"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_default_split_sizes(self):
        cfg = SynthConfig()
        assert (cfg.train_size, cfg.test_size) == (30000, 10000)

    def test_unwritable_root(self, mnist, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            synth_dataset(mnist, SynthConfig(train_size=1, test_size=1), blocker / "sub", workers=1)


class TestTargetMap:
    def _sample(self, masks, cats):
        from decompnet.dataset import Sample, SceneObject
        objs = [SceneObject(c, m.astype(np.uint8), mask_bbox(m), 1.0) for m, c in zip(masks, cats)]
        return Sample(0, np.zeros(masks[0].shape, np.uint8), objs)

    def test_disjoint(self):
        a, b = np.zeros((6, 6)), np.zeros((6, 6))
        a[0:2, 0:2] = 1
        b[4:6, 3:6] = 1
        t = target_map(self._sample([a, b], [3, 3]), 3)
        np.testing.assert_array_equal(t, a + b)
        assert t.max() == 1

    def test_overlap_sums(self):
        a, b = np.zeros((6, 6)), np.zeros((6, 6))
        a[0:3, 0:3] = 1
        b[2:5, 2:5] = 1
        t = target_map(self._sample([a, b], [6, 6]), 6)
        assert t[2, 2] == 2 and (t == 2).sum() == 1

    def test_absent_category(self):
        a = np.ones((4, 4))
        assert not target_map(self._sample([a], [3]), 9).any()

    def test_half_resolution_area_average(self):
        a = np.zeros((4, 4))
        a[0, 0] = a[0, 1] = a[3, 3] = 1
        t = target_map(self._sample([a], [3]), 3, "half")
        np.testing.assert_array_equal(t, [[0.5, 0], [0, 0.25]])

    def test_odd_size_halves_up(self):
        assert downsample2(np.ones((5, 5))).shape == (3, 3)

    def test_support_within_image(self, mnist):
        cfg = SynthConfig(n_strokes=0)
        s = synth_sample(mnist, cfg, sample_rng(8, "train", 0))
        total = sum(target_map(s, c) for c in cfg.categories)
        assert ((total > 0) <= (s.image > 0)).all()
