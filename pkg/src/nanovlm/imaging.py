"""Image IO, normalization, patch tokenization, and synthetic micrographs.

Real inputs are PNG (via Pillow) or binary PPM/PGM (parsed here so tests can
stay dependency-light). The synthetic generator produces one deterministic
grayscale-like texture family per nanomaterial category, designed so the ten
classes are trivially separable; it stands in for microscope data in every
offline run.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 224
PATCH_SIZE = 32
PATCHES_PER_SIDE = IMAGE_SIZE // PATCH_SIZE
NUM_PATCHES = PATCHES_PER_SIDE ** 2
PATCH_DIM = PATCH_SIZE * PATCH_SIZE * 3

CATEGORIES = [
    "biological",
    "tips",
    "fibres",
    "porous_sponge",
    "films",
    "patterned_surface",
    "nanowires",
    "particles",
    "mems",
    "powder",
]


class ImageFormatError(Exception):
    pass


class ImageChannelError(ImageFormatError):
    pass


# ---------------------------------------------------------------------------
# loading and normalization


def _parse_pnm(data: bytes) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5), maxval 255, to an (H, W, 3) uint8 array."""
    if not data[:2] in (b"P5", b"P6"):
        raise ImageFormatError("not a binary PPM/PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise ImageFormatError("truncated PPM/PGM header")
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise ImageFormatError("malformed PPM/PGM header")
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    channels = 3 if data[:2] == b"P6" else 1
    need = width * height * channels
    if len(data) - pos < need:
        raise ImageFormatError("truncated PPM/PGM raster")
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = raster.reshape(height, width, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)  # grayscale replicated to RGB
    return img


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG or binary PPM/PGM bytes to (H, W, 3) uint8."""
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(io.BytesIO(data)) as im:
                if im.mode == "L":
                    im = im.convert("RGB")  # replicated grayscale path
                if im.mode != "RGB":
                    raise ImageChannelError(f"unsupported PNG mode {im.mode}; need RGB or L")
                return np.asarray(im, dtype=np.uint8)
        except ImageChannelError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"PNG decode failed: {exc}") from exc
    if data[:2] in (b"P5", b"P6"):
        return _parse_pnm(data)
    raise ImageFormatError("unrecognized image format (need PNG or binary PPM/PGM)")


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resample, float32 output."""
    h, w = img.shape[:2]
    src = img.astype(np.float32)
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def load_normalize(data: bytes) -> np.ndarray:
    """Bytes -> (224, 224, 3) float32 in [-1, 1].

    Resizes bilinearly, then maps each channel x -> (x/255 - 0.5) / 0.5.
    """
    img = decode_image(data)
    resized = _resize_bilinear(img, IMAGE_SIZE, IMAGE_SIZE)
    return ((resized / 255.0) - 0.5) / 0.5


def normalize_array(img: np.ndarray) -> np.ndarray:
    """Same normalization for an already-decoded uint8 array (test hook)."""
    resized = _resize_bilinear(img, IMAGE_SIZE, IMAGE_SIZE)
    return ((resized / 255.0) - 0.5) / 0.5


# ---------------------------------------------------------------------------
# patch tokenization


def patchify(img: np.ndarray) -> np.ndarray:
    """(224, 224, 3) image -> (49, 3072) row-major non-overlapping patches.

    Each patch is the channel-last flattening of a 32x32x3 tile; the partition
    is lossless (see unpatchify).
    """
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected ({IMAGE_SIZE}, {IMAGE_SIZE}, 3) image, got {img.shape}")
    p = PATCHES_PER_SIDE
    tiles = img.reshape(p, PATCH_SIZE, p, PATCH_SIZE, 3)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(NUM_PATCHES, PATCH_DIM)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    if patches.shape != (NUM_PATCHES, PATCH_DIM):
        raise ValueError(f"expected ({NUM_PATCHES}, {PATCH_DIM}) patches, got {patches.shape}")
    p = PATCHES_PER_SIDE
    tiles = patches.reshape(p, p, PATCH_SIZE, PATCH_SIZE, 3)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(IMAGE_SIZE, IMAGE_SIZE, 3)


# ---------------------------------------------------------------------------
# synthetic micrographs


def _segment(canvas, p0, p1, width, value):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = p1[0] - p0[0], p1[1] - p0[1]
    length2 = max(dy * dy + dx * dx, 1e-9)
    t = ((yy - p0[0]) * dy + (xx - p0[1]) * dx) / length2
    t = np.clip(t, 0.0, 1.0)
    dist2 = (yy - (p0[0] + t * dy)) ** 2 + (xx - (p0[1] + t * dx)) ** 2
    canvas[dist2 <= width * width] = value


def _disk(canvas, cy, cx, r, value):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value


def _ellipse(canvas, cy, cx, ry, rx, angle, value):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (yy - cy) * ca + (xx - cx) * sa
    v = -(yy - cy) * sa + (xx - cx) * ca
    canvas[(u / ry) ** 2 + (v / rx) ** 2 <= 1.0] = value


def _tex_biological(rng, h, w):
    canvas = np.full((h, w), 0.30) + 0.04 * rng.standard_normal((h, w))
    for _ in range(rng.integers(5, 9)):
        _ellipse(canvas, rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w,
                 rng.uniform(25, 60), rng.uniform(25, 60), rng.uniform(0, np.pi),
                 rng.uniform(0.55, 0.75))
    return gaussian_filter(canvas, 4.0)


def _tex_tips(rng, h, w):
    canvas = np.full((h, w), 0.12) + 0.02 * rng.standard_normal((h, w))
    apex_y = rng.uniform(0.55, 0.8) * h
    apex_x = rng.uniform(0.35, 0.65) * w
    half_base = rng.uniform(0.18, 0.3) * w
    yy, xx = np.mgrid[0:h, 0:w]
    frac = np.clip(1.0 - yy / apex_y, 0.0, 1.0)  # wide at the top, point at apex
    inside = (yy <= apex_y) & (np.abs(xx - apex_x) <= half_base * frac)
    canvas[inside] = 0.85
    return gaussian_filter(canvas, 1.5)


def _tex_fibres(rng, h, w):
    canvas = np.full((h, w), 0.22) + 0.02 * rng.standard_normal((h, w))
    for _ in range(rng.integers(28, 40)):
        angle = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        half = rng.uniform(80, 160)
        p0 = (cy - half * np.sin(angle), cx - half * np.cos(angle))
        p1 = (cy + half * np.sin(angle), cx + half * np.cos(angle))
        _segment(canvas, p0, p1, rng.uniform(1.0, 2.0), rng.uniform(0.7, 0.9))
    return gaussian_filter(canvas, 0.7)


def _tex_porous_sponge(rng, h, w):
    noise = gaussian_filter(rng.standard_normal((h, w)), 8.0)
    canvas = np.where(noise > np.quantile(noise, 0.45), 0.78, 0.15)
    return gaussian_filter(canvas, 1.0)


def _tex_films(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, np.pi)
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    canvas = 0.55 + 0.17 * (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-9)
    canvas = canvas + 0.015 * np.sin(2 * np.pi * yy / rng.uniform(50, 90))
    canvas = canvas + 0.01 * rng.standard_normal((h, w))
    return gaussian_filter(canvas, 2.0)


def _tex_patterned_surface(rng, h, w):
    period = int(rng.integers(22, 31))
    duty = rng.uniform(0.5, 0.65)
    yy, xx = np.mgrid[0:h, 0:w]
    py = ((yy + rng.integers(0, period)) % period) < period * duty
    px = ((xx + rng.integers(0, period)) % period) < period * duty
    canvas = np.where(py & px, 0.80, 0.25) + 0.02 * rng.standard_normal((h, w))
    return canvas


def _tex_nanowires(rng, h, w):
    canvas = np.full((h, w), 0.18) + 0.02 * rng.standard_normal((h, w))
    angle = np.pi / 2 + rng.uniform(-0.26, 0.26)  # near vertical
    n = rng.integers(35, 55)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        p0 = (cy - 200 * np.sin(angle), cx - 200 * np.cos(angle))
        p1 = (cy + 200 * np.sin(angle), cx + 200 * np.cos(angle))
        _segment(canvas, p0, p1, rng.uniform(0.8, 1.6), rng.uniform(0.65, 0.85))
    return gaussian_filter(canvas, 0.5)


def _tex_particles(rng, h, w):
    canvas = np.full((h, w), 0.20) + 0.02 * rng.standard_normal((h, w))
    for _ in range(rng.integers(35, 60)):
        _disk(canvas, rng.uniform(0, h), rng.uniform(0, w),
              rng.uniform(4, 9), rng.uniform(0.7, 0.95))
    return gaussian_filter(canvas, 0.6)


def _tex_mems(rng, h, w):
    canvas = np.full((h, w), 0.32) + 0.02 * rng.standard_normal((h, w))
    for _ in range(rng.integers(3, 6)):
        y0 = int(rng.uniform(0.05, 0.6) * h)
        x0 = int(rng.uniform(0.05, 0.6) * w)
        hh = int(rng.uniform(0.15, 0.35) * h)
        ww = int(rng.uniform(0.15, 0.35) * w)
        canvas[y0:y0 + hh, x0:x0 + ww] = 0.55
        canvas[y0:y0 + hh, x0:x0 + 3] = 0.78
        canvas[y0:y0 + hh, x0 + ww - 3:x0 + ww] = 0.78
        canvas[y0:y0 + 3, x0:x0 + ww] = 0.78
        canvas[y0 + hh - 3:y0 + hh, x0:x0 + ww] = 0.78
    for _ in range(rng.integers(2, 5)):
        if rng.random() < 0.5:
            y = int(rng.uniform(0, h - 2))
            canvas[y:y + 2, :] = 0.72
        else:
            x = int(rng.uniform(0, w - 2))
            canvas[:, x:x + 2] = 0.72
    return canvas


def _tex_powder(rng, h, w):
    noise = gaussian_filter(rng.standard_normal((h, w)), 0.8)
    canvas = np.full((h, w), 0.50)
    canvas[noise > np.quantile(noise, 0.60)] = 0.68
    canvas[noise < np.quantile(noise, 0.20)] = 0.33
    return canvas


_GENERATORS = {
    "biological": _tex_biological,
    "tips": _tex_tips,
    "fibres": _tex_fibres,
    "porous_sponge": _tex_porous_sponge,
    "films": _tex_films,
    "patterned_surface": _tex_patterned_surface,
    "nanowires": _tex_nanowires,
    "particles": _tex_particles,
    "mems": _tex_mems,
    "powder": _tex_powder,
}


def synth_micrograph(category: str, seed: int, size: int = 256) -> bytes:
    """Deterministic procedural micrograph for a category, as PNG bytes."""
    if category not in _GENERATORS:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    canvas = _GENERATORS[category](rng, size, size)
    gray = np.clip(canvas * 255.0, 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return buf.getvalue()


def write_fixture_set(out_dir, per_category: int, seed: int,
                      categories: list[str] | None = None) -> list[dict]:
    """Generate a labeled image set plus manifest.json; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci, category in enumerate(categories or CATEGORIES):
        for i in range(per_category):
            img_seed = seed * 100003 + ci * 1009 + i
            name = f"{category}_{i:04d}.png"
            (out_dir / name).write_bytes(synth_micrograph(category, img_seed))
            entries.append({"category": category, "seed": img_seed, "path": name})
    manifest = {"schema_version": 1, "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return entries


def load_manifest(path) -> list[dict]:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    return manifest["images"]
