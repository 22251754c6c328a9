import os
import struct

import numpy as np
import pytest

from i2x import datasets
from i2x.datasets import GlyphSpec, LabeledDataset, SharedStroke, Stroke
from i2x.errors import (
    BadFractionError,
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    SpecOverflowError,
    TruncatedFileError,
)


def write_idx_pair(tmp_path, pixels, labels):
    """Hand-built IDX fixture, byte for byte."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    images_path.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + pixels.tobytes())
    labels_path.write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    return images_path, labels_path


class TestLoadIdx:
    def test_three_image_fixture_round_trips(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(0))
        pixels = rng.integers(0, 256, size=(3, 4, 5), dtype=np.uint8)
        img_p, lab_p = write_idx_pair(tmp_path, pixels, [0, 2, 1])
        d = datasets.load_idx(img_p, lab_p)
        assert d.size == 3 and d.class_count == 3
        np.testing.assert_array_equal(np.round(d.images[..., 0] * 255).astype(np.uint8),
                                      pixels)
        np.testing.assert_array_equal(d.labels, [0, 2, 1])

    def test_zero_record_pair(self, tmp_path):
        img_p = tmp_path / "images.idx"
        lab_p = tmp_path / "labels.idx"
        img_p.write_bytes(struct.pack(">IIII", 0x803, 0, 4, 4))
        lab_p.write_bytes(struct.pack(">II", 0x801, 0))
        with pytest.raises(EmptyDatasetError):
            datasets.load_idx(img_p, lab_p)

    def test_bad_magic(self, tmp_path):
        img_p, lab_p = write_idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        raw = bytearray(img_p.read_bytes())
        raw[0] ^= 0xFF
        img_p.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            datasets.load_idx(img_p, lab_p)

    def test_count_mismatch(self, tmp_path):
        img_p, _ = write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1])
        lab_p = tmp_path / "short-labels.idx"
        lab_p.write_bytes(struct.pack(">II", 0x801, 1) + bytes([0]))
        with pytest.raises(CountMismatchError):
            datasets.load_idx(img_p, lab_p)

    def test_truncated_file(self, tmp_path):
        img_p, lab_p = write_idx_pair(tmp_path, np.zeros((2, 3, 3), np.uint8), [0, 1])
        img_p.write_bytes(img_p.read_bytes()[:-5])
        with pytest.raises(TruncatedFileError):
            datasets.load_idx(img_p, lab_p)

    def test_save_load_round_trip(self, tmp_path):
        d, _ = datasets.gen_glyphs(datasets.builtin_glyph_spec("pair"), 5, seed=1)
        datasets.save_idx(d, tmp_path / "im.idx", tmp_path / "lb.idx")
        loaded = datasets.load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
        assert loaded.size == d.size
        np.testing.assert_array_equal(loaded.labels, d.labels)
        # quantization to bytes, then exact round trip
        assert np.abs(loaded.images - d.images).max() <= 0.5 / 255

    @pytest.mark.skipif("I2X_MNIST_DIR" not in os.environ,
                        reason="set I2X_MNIST_DIR to a directory with MNIST IDX files")
    def test_canonical_mnist(self):
        root = os.environ["I2X_MNIST_DIR"]
        d = datasets.load_idx(os.path.join(root, "train-images-idx3-ubyte"),
                              os.path.join(root, "train-labels-idx1-ubyte"))
        assert d.size == 60000
        assert d.images.shape[1:] == (28, 28, 1)
        assert d.class_count == 10


def tiny_dataset(n, classes=10, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return LabeledDataset(
        images=rng.random((n, 2, 2, 1)),
        labels=np.arange(n) % classes,
        sample_ids=np.arange(n),
        class_count=classes,
    )


class TestSampleExplanationSet:
    def test_count_at_ten_percent(self):
        d = tiny_dataset(60000)
        sub = datasets.sample_explanation_set(d, 0.1, seed=42)
        assert sub.size == 6000

    def test_identity_fraction(self):
        d = tiny_dataset(50)
        sub = datasets.sample_explanation_set(d, 1.0, seed=0)
        np.testing.assert_array_equal(sub.sample_ids, d.sample_ids)
        np.testing.assert_array_equal(sub.images, d.images)

    def test_seed_determinism(self):
        d = tiny_dataset(100)
        first = datasets.sample_explanation_set(d, 0.1, seed=7)
        second = datasets.sample_explanation_set(d, 0.1, seed=7)
        other = datasets.sample_explanation_set(d, 0.1, seed=8)
        np.testing.assert_array_equal(first.sample_ids, second.sample_ids)
        assert not np.array_equal(first.sample_ids, other.sample_ids)

    def test_order_preserved(self):
        d = tiny_dataset(200)
        sub = datasets.sample_explanation_set(d, 0.25, seed=3)
        assert np.all(np.diff(sub.sample_ids) > 0)

    def test_rejects_bad_fraction(self):
        d = tiny_dataset(10)
        for fraction in (0.0, -0.1, 1.5):
            with pytest.raises(BadFractionError):
                datasets.sample_explanation_set(d, fraction, seed=0)

    @pytest.mark.parametrize("seed", [1, 2, 3, 4])
    def test_classes_survive_ten_percent(self, seed):
        d = tiny_dataset(1000, classes=10)
        sub = datasets.sample_explanation_set(d, 0.1, seed=seed)
        assert set(sub.labels.tolist()) == set(range(10))


class TestGenGlyphs:
    def test_noiseless_matches_rasterized_strokes(self):
        spec = GlyphSpec(
            classes=[[Stroke("vbar", 4, 10, 12)], [Stroke("hbar", 10, 4, 12)]],
            noise=0.0,
        )
        d, masks = datasets.gen_glyphs(spec, per_class=3, seed=0)
        for i in range(d.size):
            expected = np.zeros((28, 28))
            for mask in masks.for_sample(i).values():
                expected[mask] = 1.0
            np.testing.assert_array_equal(d.images[i, :, :, 0], expected)

    def test_shared_stroke_exact_half(self):
        spec = GlyphSpec(
            classes=[[Stroke("vbar", 4, 10, 12)], [Stroke("hbar", 10, 4, 12)]],
            shared_stroke=SharedStroke(Stroke("diag", 4, 4, 6), (0, 1), 0.5),
        )
        for per_class in (7, 10):
            d, masks = datasets.gen_glyphs(spec, per_class=per_class, seed=5)
            for c in (0, 1):
                carried = masks.shared_carriers[d.labels == c].sum()
                assert carried == per_class // 2

    def test_seed_determinism(self):
        spec = datasets.builtin_glyph_spec("pair")
        d1, _ = datasets.gen_glyphs(spec, per_class=4, seed=3)
        d2, _ = datasets.gen_glyphs(spec, per_class=4, seed=3)
        assert d1.images.tobytes() == d2.images.tobytes()
        d3, _ = datasets.gen_glyphs(spec, per_class=4, seed=4)
        assert d1.images.tobytes() != d3.images.tobytes()

    def test_overflow_rejected(self):
        spec = GlyphSpec(classes=[[Stroke("hbar", 0, 20, 12)], [Stroke("vbar", 0, 0, 4)]])
        with pytest.raises(SpecOverflowError):
            datasets.gen_glyphs(spec, per_class=1, seed=0)

    def test_masks_match_stroke_pixels_exactly(self):
        spec = datasets.builtin_glyph_spec("pair")
        _, masks = datasets.gen_glyphs(spec, per_class=2, seed=0)
        for name, mask in masks.stroke_masks.items():
            source = spec.shared_stroke.stroke if name == "shared" else None
            if source is None:
                c, j = name.split("/")
                source = spec.classes[int(c[1:])][int(j[1:])]
            np.testing.assert_array_equal(mask, source.rasterize(28, 28))

    def test_stroke_pixels_saturate_under_noise(self):
        spec = datasets.builtin_glyph_spec("pair")
        d, masks = datasets.gen_glyphs(spec, per_class=3, seed=2)
        for i in range(d.size):
            for mask in masks.for_sample(i).values():
                assert np.all(d.images[i, :, :, 0][mask] == 1.0)

    def test_digits_preset_generates_ten_classes(self):
        spec = datasets.builtin_glyph_spec("digits")
        d, masks = datasets.gen_glyphs(spec, per_class=3, seed=0)
        assert d.class_count == 10
        assert set(d.labels.tolist()) == set(range(10))
        shared_labels = set(d.labels[masks.shared_carriers].tolist())
        assert shared_labels <= {2, 7}

    def test_glyph_spec_json_round_trip(self):
        spec = datasets.builtin_glyph_spec("digits")
        clone = GlyphSpec.from_json(spec.to_json())
        d1, _ = datasets.gen_glyphs(spec, per_class=2, seed=9)
        d2, _ = datasets.gen_glyphs(clone, per_class=2, seed=9)
        assert d1.images.tobytes() == d2.images.tobytes()
