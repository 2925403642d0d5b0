"""Image corpora: an in-memory container, directory I/O, and a seeded
synthetic long-tailed generator.

The synthetic corpus is mostly smooth content (colour ramps, soft blobs,
soft-edged shapes and mild surface texture) with a minority of "tail" images that add
fine gratings, small checkerboards and thin stroke clutter, which is
where a demosaicer trained on the bulk tends to fail.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import ImageIOError, load_image, quantize, save_image

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"
INDEX_FORMAT = "hardcycle-corpus/1"


@dataclass
class Corpus:
    images: dict  # id -> (H, W, 3) float array
    train_ids: list
    val_ids: list
    labels: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.train_ids) & set(self.val_ids):
            raise ValueError("train and val image splits overlap")
        missing = (set(self.train_ids) | set(self.val_ids)) - set(self.images)
        if missing:
            raise ValueError(f"split references unknown image ids {sorted(missing)}")

    def crop(self, ref) -> np.ndarray:
        return self.images[ref.image_id][ref.y:ref.y + ref.size, ref.x:ref.x + ref.size]

    def crops(self, refs) -> np.ndarray:
        return np.stack([self.crop(r) for r in refs]) if refs else np.empty((0, 0, 0, 3))

    def ids_with_label(self, label: str) -> list:
        return [i for i in sorted(self.images) if self.labels.get(i) == label]


def _stratified_split(labels: dict, val_fraction: float, rng) -> tuple:
    train, val = [], []
    for label in sorted(set(labels.values())):
        ids = [i for i in sorted(labels) if labels[i] == label]
        rng.shuffle(ids)
        n_val = int(round(val_fraction * len(ids)))
        if len(ids) > 1:
            n_val = min(max(n_val, 1), len(ids) - 1)
        val += ids[:n_val]
        train += ids[n_val:]
    return sorted(train), sorted(val)


# --- synthetic content -----------------------------------------------------

def _smooth_background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = (rng.uniform(0.2, 0.8, 3) + rng.uniform(-0.3, 0.3, 3) * xx[..., None]
           + rng.uniform(-0.3, 0.3, 3) * yy[..., None])
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.1, 0.35) * max(h, w)
        blob = np.exp(-((yy * max(h, w) - cy) ** 2 + (xx * max(h, w) - cx) ** 2) / (2 * sigma ** 2))
        img = img + rng.uniform(-0.25, 0.25, 3) * blob[..., None]
    return img


def _soft_shape(rng, img):
    """A disc or half-plane with a blurred boundary."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    width = rng.uniform(0.3, 3.0)
    if rng.random() < 0.5:
        cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(0.1, 0.3) * min(h, w)
        dist = r - np.hypot(yy - cy, xx - cx)
    else:
        theta = rng.uniform(0, np.pi)
        dist = (xx - rng.uniform(0, w)) * np.cos(theta) + (yy - rng.uniform(0, h)) * np.sin(theta)
    alpha = 1.0 / (1.0 + np.exp(-dist / width))
    color = rng.uniform(0.1, 0.9, 3)
    return img * (1 - alpha[..., None]) + color * alpha[..., None]


def _texture(rng, h, w):
    """Band-limited noise, mostly luminance, standing in for surface detail."""
    field = gaussian_filter(rng.standard_normal((h, w)), rng.uniform(1.0, 2.5))
    field /= field.std() + 1e-12
    tint = 1.0 + rng.uniform(-0.3, 0.3, 3)
    return rng.uniform(0.03, 0.1) * field[..., None] * tint


def _region_mask(rng, h, w):
    """Random axis-aligned rectangle covering a good share of the frame."""
    rh, rw = int(rng.uniform(0.4, 0.9) * h), int(rng.uniform(0.4, 0.9) * w)
    y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
    m = np.zeros((h, w), dtype=bool)
    m[y0:y0 + rh, x0:x0 + rw] = True
    return m


def _grating(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = rng.uniform(3.0, 8.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi, 3)
    u = (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / period
    amp = rng.uniform(0.2, 0.45)
    return 0.5 + amp * np.sin(u[..., None] + phase)


def _checkerboard(rng, h, w):
    cell = int(rng.integers(2, 5))
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    a, b = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    return a + (b - a) * board[..., None]


def _strokes(rng, img):
    """Thin hard-edged segments, a crude stand-in for text and wires."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = img.copy()
    for _ in range(rng.integers(15, 40)):
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        length = rng.uniform(4, 0.3 * max(h, w))
        theta = rng.uniform(0, np.pi)
        dy, dx = np.sin(theta), np.cos(theta)
        t = np.clip((yy - y0) * dy + (xx - x0) * dx, 0, length)
        d = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        ink = d <= rng.uniform(0.7, 1.5)
        out[ink] = rng.uniform(0.0, 1.0, 3)
    return out


def synth_image(rng, size: int, label: str) -> np.ndarray:
    img = _smooth_background(rng, size, size)
    for _ in range(rng.integers(1, 5)):
        img = _soft_shape(rng, img)
    if rng.random() < 0.7:
        img = img + _texture(rng, size, size)
    if label == "tail":
        kinds = rng.permutation(3)[: rng.integers(1, 3)]
        for kind in kinds:
            if kind == 2:
                img = _strokes(rng, img)
                continue
            texture = _grating(rng, size, size) if kind == 0 else _checkerboard(rng, size, size)
            m = _region_mask(rng, size, size)
            img = np.where(m[..., None], texture, img)
    return quantize(np.clip(img, 0.0, 1.0))


def generate_corpus(n_images: int = 100, size: int = 128, tail_fraction: float = 0.1,
                    val_fraction: float = 0.2, seed: int = 0) -> Corpus:
    """Seeded synthetic corpus; exactly ``round(tail_fraction * n)`` tail images."""
    if n_images < 2:
        raise ValueError("need at least two images for a train/val split")
    if size % 2:
        raise ValueError("image size must be even")
    rng = np.random.default_rng(seed)
    n_tail = int(round(tail_fraction * n_images))
    tail = set(rng.choice(n_images, size=n_tail, replace=False).tolist())
    labels = {i: ("tail" if i in tail else "head") for i in range(n_images)}
    images = {}
    for i in range(n_images):
        images[i] = synth_image(np.random.default_rng([seed, i]), size, labels[i])
    train, val = _stratified_split(labels, val_fraction, rng)
    return Corpus(images, train, val, labels)


# --- directory I/O -----------------------------------------------------------

def write_corpus(corpus: Corpus, directory, meta: dict = None, ext: str = ".png") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in sorted(corpus.images):
        name = corpus.files.get(i, f"img_{i:04d}{ext}")
        save_image(corpus.images[i], directory / name)
        entries.append({"id": i, "file": name, "label": corpus.labels.get(i, "unknown")})
    index = {
        "format": INDEX_FORMAT,
        "images": entries,
        "split": {"train": list(corpus.train_ids), "val": list(corpus.val_ids)},
        "meta": meta or {},
    }
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True))
    return directory


def read_corpus(directory) -> Corpus:
    """Load a corpus directory.  Without an index every image is a val image."""
    directory = Path(directory)
    index_path = directory / INDEX_NAME
    if index_path.exists():
        index = json.loads(index_path.read_text())
        images, labels, files = {}, {}, {}
        for e in index["images"]:
            images[e["id"]] = load_image(directory / e["file"])
            labels[e["id"]] = e.get("label", "unknown")
            files[e["id"]] = e["file"]
        split = index.get("split", {})
        return Corpus(images, list(split.get("train", [])),
                      list(split.get("val", sorted(images))), labels, files)
    images, files = {}, {}
    for i, path in enumerate(list_image_files(directory)):
        try:
            images[i] = load_image(path)
        except ImageIOError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        files[i] = path.name
    return Corpus(images, [], sorted(images), {}, files)


def list_image_files(directory) -> list:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in (".png", ".ppm", ".pnm") and p.is_file())
