import io
import json

import numpy as np
import pytest
from PIL import Image

from nanovlm.imaging import (CATEGORIES, IMAGE_SIZE, NUM_PATCHES, PATCH_DIM,
                             ImageChannelError, ImageFormatError, decode_image,
                             load_manifest, load_normalize, normalize_array,
                             patchify, synth_micrograph, unpatchify,
                             write_fixture_set)


def make_ppm(value=128, w=64, h=48):
    header = f"P6\n{w} {h}\n255\n".encode()
    return header + bytes([value]) * (w * h * 3)


def make_png(array):
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


class TestLoadNormalize:
    def test_all_255_maps_to_one(self):
        out = load_normalize(make_ppm(255))
        assert out.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
        assert np.allclose(out, 1.0)

    def test_all_zero_maps_to_minus_one(self):
        assert np.allclose(load_normalize(make_ppm(0)), -1.0)

    def test_mid_gray_formula(self):
        out = load_normalize(make_ppm(128))
        assert np.allclose(out, (128 / 255 - 0.5) / 0.5, atol=1e-6)
        assert np.allclose(out, 0.0039, atol=1e-3)

    def test_values_in_range(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(100, 130, 3), dtype=np.uint8)
        out = load_normalize(make_png(img))
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_png_rgb(self):
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        img[:, :, 0] = 255
        out = load_normalize(make_png(img))
        assert np.allclose(out[:, :, 0], 1.0) and np.allclose(out[:, :, 1], -1.0)

    def test_grayscale_png_replicated(self):
        gray = (np.arange(32 * 32).reshape(32, 32) % 256).astype(np.uint8)
        out = load_normalize(make_png(gray))
        assert np.array_equal(out[:, :, 0], out[:, :, 1])
        assert np.array_equal(out[:, :, 1], out[:, :, 2])

    def test_pgm_replicated(self):
        data = b"P5\n10 10\n255\n" + bytes(range(100))
        out = load_normalize(data)
        assert np.array_equal(out[:, :, 0], out[:, :, 2])

    def test_rgba_rejected(self):
        img = np.zeros((16, 16, 4), dtype=np.uint8)
        with pytest.raises(ImageChannelError):
            load_normalize(make_png(img))

    def test_garbage_rejected(self):
        with pytest.raises(ImageFormatError):
            load_normalize(b"not an image at all")

    def test_truncated_ppm_rejected(self):
        with pytest.raises(ImageFormatError):
            load_normalize(b"P6\n64 48\n255\n\x00\x00")

    def test_normalization_invertible_on_grid(self):
        values = np.arange(256, dtype=np.uint8)
        img = np.stack([values.reshape(16, 16)] * 3, axis=2)
        out = normalize_array(np.repeat(np.repeat(img, 14, 0), 14, 1))
        recovered = np.round((out * 0.5 + 0.5) * 255).astype(np.uint8)
        # constant-block image survives bilinear resize on block interiors
        assert recovered.min() >= 0 and recovered.max() <= 255


class TestPatchify:
    def test_counts_and_dims(self):
        img = np.random.default_rng(0).standard_normal((IMAGE_SIZE, IMAGE_SIZE, 3)).astype(np.float32)
        patches = patchify(img)
        assert patches.shape == (NUM_PATCHES, PATCH_DIM)

    def test_partition_bijection_bitwise(self):
        img = np.random.default_rng(1).standard_normal((IMAGE_SIZE, IMAGE_SIZE, 3)).astype(np.float32)
        assert np.array_equal(unpatchify(patchify(img)), img)

    def test_constant_image_identical_patches(self):
        img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 0.25, dtype=np.float32)
        patches = patchify(img)
        assert np.array_equal(patches, np.tile(patches[0], (NUM_PATCHES, 1)))

    def test_row_major_order(self):
        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
        img[0:32, 32:64, :] = 1.0  # second patch of the first row
        patches = patchify(img)
        assert patches[1].sum() == 32 * 32 * 3
        assert patches[0].sum() == 0

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((100, 100, 3)))
        with pytest.raises(ValueError):
            unpatchify(np.zeros((10, 10)))


class TestSynthMicrograph:
    def test_deterministic(self):
        assert synth_micrograph("particles", 7) == synth_micrograph("particles", 7)

    def test_categories_differ(self):
        assert synth_micrograph("particles", 7) != synth_micrograph("fibres", 7)

    def test_seeds_differ(self):
        assert synth_micrograph("particles", 7) != synth_micrograph("particles", 8)

    def test_unknown_category_rejected(self):
        with pytest.raises(ValueError):
            synth_micrograph("galaxies", 0)

    def test_all_categories_decode(self):
        for category in CATEGORIES:
            img = decode_image(synth_micrograph(category, 3))
            assert img.shape == (256, 256, 3)
            assert img.dtype == np.uint8

    def test_patterned_surface_mean_band(self):
        # band frozen from a 12-seed sweep of the generator (103..125 observed)
        for seed in (0, 11, 1234):
            img = decode_image(synth_micrograph("patterned_surface", seed))
            assert 95.0 <= img.mean() <= 135.0


def _trivial_features(img: np.ndarray) -> np.ndarray:
    gray = img[:, :, 0].astype(np.float64) / 255.0
    dy = np.abs(np.diff(gray, axis=0)).mean()
    dx = np.abs(np.diff(gray, axis=1)).mean()
    return np.array([gray.mean(), gray.std(), dy, dx,
                     gray.var(axis=0).mean(), gray.var(axis=1).mean()])


def test_categories_linearly_separable_by_probe():
    from sklearn.linear_model import LogisticRegression
    xs, ys = [], []
    for ci, category in enumerate(CATEGORIES):
        for i in range(10):
            img = decode_image(synth_micrograph(category, 5000 + i))
            xs.append(_trivial_features(img))
            ys.append(ci)
    xs = np.asarray(xs)
    xs = (xs - xs.mean(axis=0)) / (xs.std(axis=0) + 1e-9)
    probe = LogisticRegression(max_iter=5000).fit(xs, ys)
    assert probe.score(xs, ys) >= 0.95


def test_fixture_set_manifest(tmp_path):
    entries = write_fixture_set(tmp_path, per_category=2, seed=1,
                                categories=["particles", "fibres"])
    assert len(entries) == 4
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    loaded = load_manifest(tmp_path / "manifest.json")
    assert loaded == entries
    for entry in loaded:
        assert (tmp_path / entry["path"]).exists()
