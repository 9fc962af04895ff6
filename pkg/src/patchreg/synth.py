"""Deterministic synthetic digit corpus in MNIST IDX format.

Renders digit glyphs with seeded size, position, stroke and rotation
jitter plus pixel noise, then writes standard IDX file pairs. The corpus
stands in for MNIST on machines without the original files; everything
downstream consumes it through the same IDX loader.

Rendering is deterministic for a fixed seed and Pillow version. Each
sample derives its own generator from (seed, index), so the corpus is
independent of generation order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, save_mnist_idx
from .exceptions import ConfigError

__all__ = ["render_digit", "make_corpus", "write_idx_corpus"]

_SUPER = 56  # render at 2x and downsample for soft antialiased strokes
_FONT_CACHE: dict[int, ImageFont.FreeTypeFont] = {}


def _font(size: int) -> ImageFont.FreeTypeFont:
    if size not in _FONT_CACHE:
        _FONT_CACHE[size] = ImageFont.load_default(size=size)
    return _FONT_CACHE[size]


def render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """One (size, size) uint8 grayscale image of `digit`, white on black."""
    big = _SUPER * size // 28
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    font_px = int(rng.integers(34, 50) * size / 28)
    stroke = int(rng.integers(0, 3))
    cx = big / 2 + float(rng.uniform(-5, 5))
    cy = big / 2 + float(rng.uniform(-5, 5))
    draw.text((cx, cy), str(digit), fill=255, font=_font(font_px), anchor="mm",
              stroke_width=stroke, stroke_fill=255)
    angle = float(rng.uniform(-22, 22))
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
    small = canvas.resize((size, size), Image.BILINEAR)
    arr = np.asarray(small, dtype=np.float64)
    arr += rng.normal(0.0, 8.0, size=arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8)


def make_corpus(n: int, seed: int, size: int = 28):
    """(images uint8 (n, size, size), labels int64 (n,)) with uniform labels."""
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        labels[i] = rng.integers(0, 10)
        images[i] = render_digit(int(labels[i]), rng, size=size)
    return images, labels


def write_idx_corpus(out_dir, n_train: int = 12000, n_test: int = 2000, seed: int = 0) -> dict:
    """Write train and test IDX pairs under out_dir; returns the four paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = make_corpus(n_train, np.random.SeedSequence([seed, 0]).generate_state(1)[0])
    test_images, test_labels = make_corpus(n_test, np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    paths = {
        "train_images": out / TRAIN_IMAGES,
        "train_labels": out / TRAIN_LABELS,
        "test_images": out / TEST_IMAGES,
        "test_labels": out / TEST_LABELS,
    }
    save_mnist_idx(train_images, train_labels, paths["train_images"], paths["train_labels"])
    save_mnist_idx(test_images, test_labels, paths["test_images"], paths["test_labels"])
    return paths
