"""GlyphSigns: a seeded 8-class synthetic sign dataset, plus the GDS1 container."""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass

import numpy as np
from skimage.draw import disk, polygon

GLYPHS = ("octagon", "triangle", "square", "cross", "diamond", "bar", "ring", "star")
# base hues, loosely following road-sign colouring
_HUES = (0.0, 0.0, 0.6, 0.6, 0.13, 0.6, 0.0, 0.13)
IMAGE_SHAPE = (32, 32, 3)
NOISE_SIGMA = 0.05


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split)

    def of_class(self, label: int, split=None) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == label), split)


def _regular(n, radius, cy, cx, phase=0.0, inner=None):
    angles = phase + np.arange(n) * 2 * np.pi / n
    if inner is None:
        return cy - radius * np.cos(angles), cx + radius * np.sin(angles)
    # star: alternate outer / inner radii
    angles = phase + np.arange(2 * n) * np.pi / n
    radii = np.where(np.arange(2 * n) % 2 == 0, radius, inner)
    return cy - radii * np.cos(angles), cx + radii * np.sin(angles)


def _glyph_mask(k: int, cy: float, cx: float, size=32) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    shape = (size, size)
    if k == 0:
        r, c = _regular(8, 11, cy, cx, phase=np.pi / 8)
    elif k == 1:
        r, c = _regular(3, 12, cy + 2, cx)
    elif k == 2:
        r, c = np.array([cy - 9, cy - 9, cy + 9, cy + 9]), np.array([cx - 9, cx + 9, cx + 9, cx - 9])
    elif k == 3:
        mask[polygon(*np.array([[cy - 11, cy - 11, cy + 11, cy + 11], [cx - 3, cx + 3, cx + 3, cx - 3]]), shape)] = True
        mask[polygon(*np.array([[cy - 3, cy - 3, cy + 3, cy + 3], [cx - 11, cx + 11, cx + 11, cx - 11]]), shape)] = True
        return mask
    elif k == 4:
        r, c = _regular(4, 12, cy, cx)
    elif k == 5:
        r, c = np.array([cy - 3, cy - 3, cy + 3, cy + 3]), np.array([cx - 12, cx + 12, cx + 12, cx - 12])
    elif k == 6:
        mask[disk((cy, cx), 11, shape=shape)] = True
        mask[disk((cy, cx), 6, shape=shape)] = False
        return mask
    else:
        r, c = _regular(5, 12, cy, cx, inner=5)
    mask[polygon(r, c, shape)] = True
    return mask


def render_glyph(k: int, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = IMAGE_SHAPE
    dy, dx = rng.integers(-2, 3, size=2)
    cy, cx = (h - 1) / 2 + dy, (w - 1) / 2 + dx
    hue = (_HUES[k] + rng.uniform(-0.04, 0.04)) % 1.0
    colour = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
    background = np.full(3, rng.uniform(0.35, 0.6))
    img = np.broadcast_to(background, IMAGE_SHAPE).copy()
    img[_glyph_mask(k, cy, cx, h)] = colour
    img += rng.normal(0.0, NOISE_SIGMA, size=IMAGE_SHAPE)
    # stored precision is float32 so GDS1 round trips are exact
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def generate_glyph_dataset(seed: int, per_class: int, split: str = "train") -> Dataset:
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k in range(len(GLYPHS)):
        for _ in range(per_class):
            images.append(render_glyph(k, rng))
            labels.append(k)
    return Dataset(np.stack(images), np.array(labels), split)


# -- GDS1 -------------------------------------------------------------------

DATASET_MAGIC = b"GDS1"


def dataset_to_bytes(data: Dataset) -> bytes:
    n = len(data)
    h, w, c = data.inputs.shape[1:]
    head = DATASET_MAGIC + struct.pack("<IIII", n, h, w, c)
    pixels = data.inputs.reshape(n, -1).astype("<f4")
    rec = np.zeros(n, dtype=[("label", "u1"), ("px", "<f4", (h * w * c,))])
    rec["label"] = data.labels
    rec["px"] = pixels
    return head + rec.tobytes()


def dataset_from_bytes(blob: bytes, split: str = "train") -> Dataset:
    if blob[:4] != DATASET_MAGIC:
        raise ValueError("not a GDS1 dataset file")
    n, h, w, c = struct.unpack_from("<IIII", blob, 4)
    rec = np.frombuffer(blob, dtype=[("label", "u1"), ("px", "<f4", (h * w * c,))], count=n, offset=20)
    return Dataset(rec["px"].astype(np.float64).reshape(n, h, w, c), rec["label"].astype(np.int64), split)


def save_dataset(data: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(data))


def load_dataset(path, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read(), split)
