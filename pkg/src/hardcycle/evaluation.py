"""PSNR / SSIM and the benchmark harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import DEFAULT_PATTERN, ImageIOError, load_image, mosaic
from .corpus import INDEX_NAME, list_image_files

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _pair(a, b):
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for [0, 1] images, capped at 100 dB for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable valid-mode Gaussian filtering over the two leading axes."""
    k = g.size
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
    x = win @ g
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
    return win @ g


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid interior,
    averaged over windows and channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px on each side for SSIM")
    g = _gaussian()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (saa + sbb + C2)
    return float(np.mean(num / den))


@dataclass
class BenchmarkResult:
    dataset_name: str
    per_image: list = field(default_factory=list)  # (image_id, psnr, ssim)
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")

    @classmethod
    def from_rows(cls, name, rows):
        rows = [(str(i), float(p), float(s)) for i, p, s in rows]
        mp = float(np.mean([r[1] for r in rows])) if rows else float("nan")
        ms = float(np.mean([r[2] for r in rows])) if rows else float("nan")
        return cls(name, rows, mp, ms)

    def to_dict(self):
        return {"dataset_name": self.dataset_name,
                "per_image": [{"image_id": i, "psnr": p, "ssim": s} for i, p, s in self.per_image],
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim}

    @classmethod
    def from_dict(cls, d):
        rows = [(r["image_id"], r["psnr"], r["ssim"]) for r in d["per_image"]]
        return cls(d["dataset_name"], rows, d["mean_psnr"], d["mean_ssim"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "psnr", "ssim"])
        for row in self.per_image:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def _tile_starts(n, tile, step):
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def tiled_predict(predictor, mosaic_data, pattern=DEFAULT_PATTERN, tile=256, overlap=16):
    """Run ``predictor`` on overlapping tiles and stitch the tile centres.

    Tile origins are kept even so every tile sees the same CFA phase.
    """
    h, w = mosaic_data.shape
    if h <= tile and w <= tile:
        return predictor.predict(mosaic_data, pattern)
    step = tile - 2 * overlap
    if step <= 0 or step % 2:
        raise ValueError("tile must exceed twice the overlap, with an even stride")
    out = np.zeros((h, w, 3))
    ys, xs = _tile_starts(h, tile, step), _tile_starts(w, tile, step)
    for y0 in ys:
        for x0 in xs:
            y0e, x0e = y0 - y0 % 2, x0 - x0 % 2
            th, tw = min(tile, h - y0e), min(tile, w - x0e)
            pred = predictor.predict(mosaic_data[y0e:y0e + th, x0e:x0e + tw], pattern)
            # keep everything except an `overlap` border shared with a neighbour
            top = 0 if y0e == 0 else overlap
            left = 0 if x0e == 0 else overlap
            out[y0e + top:y0e + th, x0e + left:x0e + tw] = pred[top:, left:]
    return out


def evaluate_images(predictor, images: dict, name="dataset", pattern=DEFAULT_PATTERN,
                    tile=256, overlap=16) -> BenchmarkResult:
    """Score every image of ``images`` in its iteration order."""
    rows = []
    for image_id, img in images.items():
        h, w = img.shape[:2]
        img = img[:h - h % 2, :w - w % 2]  # whole CFA tiles only
        pred = tiled_predict(predictor, mosaic(img, pattern).data, pattern, tile, overlap)
        pred = np.clip(pred, 0.0, 1.0)
        rows.append((image_id, psnr(pred, img), ssim(pred, img)))
    return BenchmarkResult.from_rows(name, rows)


def evaluate_benchmark(predictor, dataset_dir, name=None, ids=None, pattern=DEFAULT_PATTERN,
                       tile=256, overlap=16) -> BenchmarkResult:
    """Score ``predictor`` on every readable PNG/PPM in ``dataset_dir``.

    Images are visited in filename order; unreadable files are skipped with a
    warning.  With an index file, ``ids`` restricts to those image ids.
    """
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise FileNotFoundError(f"{dataset_dir} is not a directory")
    index_path = dataset_dir / INDEX_NAME
    if index_path.exists():
        index = json.loads(index_path.read_text())
        files = sorted((e["file"], e["id"]) for e in index["images"] if ids is None or e["id"] in ids)
        paths = [(dataset_dir / f, i) for f, i in files]
    else:
        paths = [(p, p.stem) for p in list_image_files(dataset_dir)]
    images = {}
    for path, image_id in paths:
        try:
            images[image_id] = load_image(path)
        except ImageIOError as exc:
            log.warning("skipping %s: %s", path, exc)
    if not images:
        raise ValueError(f"{dataset_dir}: no readable images")
    return evaluate_images(predictor, images, name or dataset_dir.name, pattern, tile, overlap)


def patch_psnr(predictor, corpus, refs, pattern=DEFAULT_PATTERN, batch=64) -> float:
    """Mean per-patch PSNR of ``predictor`` over the patches in ``refs``."""
    vals = []
    for i in range(0, len(refs), batch):
        gts = corpus.crops(refs[i:i + batch])
        preds = np.clip(predictor.predict(mosaic(gts, pattern).data, pattern), 0.0, 1.0)
        vals += [psnr(p, g) for p, g in zip(preds, gts)]
    return float(np.mean(vals))
