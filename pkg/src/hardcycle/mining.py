"""Patch grids, model scoring and quantile mining of hard sub-categories."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .imaging import DEFAULT_PATTERN, DimensionError, mosaic
from .metrics import FeatureExtractor, MetricConfig, MetricKind, column_name, metric_columns, score_patch


class MiningError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PatchRef:
    image_id: int
    y: int
    x: int
    size: int

    def to_dict(self):
        return {"image_id": self.image_id, "y": self.y, "x": self.x, "size": self.size}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["image_id"]), int(d["y"]), int(d["x"]), int(d["size"]))


@dataclass(frozen=True)
class MiningConfig:
    crop: int = 64
    stride: int = 32
    top_fraction: float = 0.05
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ValueError("top_fraction and val_fraction must lie in (0, 1)")
        if self.crop < 8 or self.crop % 2 or self.stride < 1:
            raise ValueError("crop must be an even integer >= 8 and stride positive")


@dataclass
class SubCategory:
    name: str
    kind: MetricKind
    threshold_variant: Optional[float]
    train_refs: list
    val_refs: list
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train_refs or not self.val_refs:
            raise MiningError(f"sub-category {self.name!r} needs non-empty train and val refs")
        if set(self.train_refs) & set(self.val_refs):
            raise MiningError(f"sub-category {self.name!r} has overlapping train/val refs")
        if not self.sources:
            self.sources = [self.name]

    @property
    def refs(self):
        return list(self.train_refs) + list(self.val_refs)

    def to_dict(self):
        return {
            "name": self.name,
            "kind": MetricKind(self.kind).value,
            "variant": self.threshold_variant,
            "refs": [r.to_dict() for r in self.refs],
            "split": ["train"] * len(self.train_refs) + ["val"] * len(self.val_refs),
            "sources": list(self.sources),
        }

    @classmethod
    def from_dict(cls, d):
        refs = [PatchRef.from_dict(r) for r in d["refs"]]
        train = [r for r, s in zip(refs, d["split"]) if s == "train"]
        val = [r for r, s in zip(refs, d["split"]) if s == "val"]
        return cls(d["name"], MetricKind(d["kind"]), d.get("variant"), train, val,
                   list(d.get("sources") or [d["name"]]))


def save_subcategories(subcats, path):
    with open(path, "w") as f:
        json.dump([s.to_dict() for s in subcats], f, indent=1, sort_keys=True)


def load_subcategories(path) -> list:
    with open(path) as f:
        return [SubCategory.from_dict(d) for d in json.load(f)]


def extract_patch_grid(corpus, cfg: MiningConfig, ids=None) -> list:
    """Every ``crop``-sized window at ``stride`` offsets, ordered by (image, y, x).

    ``ids`` defaults to the corpus training split.
    """
    ids = corpus.train_ids if ids is None else ids
    refs = []
    for i in sorted(ids):
        h, w = corpus.images[i].shape[:2]
        if h < cfg.crop or w < cfg.crop:
            raise DimensionError(f"image {i} ({h}x{w}) is smaller than the {cfg.crop}px crop")
        for y in range(0, h - cfg.crop + 1, cfg.stride):
            for x in range(0, w - cfg.crop + 1, cfg.stride):
                refs.append(PatchRef(i, y, x, cfg.crop))
    return refs


@dataclass
class ScoreTable:
    refs: list
    columns: list  # (MetricKind, variant or None)
    scores: np.ndarray  # (n_refs, n_columns)

    def column(self, kind, variant=None) -> np.ndarray:
        return self.scores[:, self.columns.index((MetricKind(kind), variant))]

    def to_dict(self):
        return {
            "refs": [r.to_dict() for r in self.refs],
            "columns": [{"kind": k.value, "variant": v, "name": column_name(k, v)} for k, v in self.columns],
            "scores": [[float(s) for s in row] for row in self.scores],
        }

    @classmethod
    def from_dict(cls, d):
        cols = [(MetricKind(c["kind"]), c["variant"]) for c in d["columns"]]
        scores = np.array(d["scores"], dtype=np.float64).reshape(len(d["refs"]), len(cols))
        return cls([PatchRef.from_dict(r) for r in d["refs"]], cols, scores)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def score_corpus(model, corpus, refs, metrics_cfg: MetricConfig, fx: FeatureExtractor = None,
                 pattern: str = DEFAULT_PATTERN, batch: int = 64) -> ScoreTable:
    """Run ``model`` on the mosaicked patches and score every metric column.

    ``model`` needs ``predict(mosaics, pattern) -> (N, H, W, 3)``.  The
    prediction is clamped to [0, 1] before scoring.
    """
    fx = fx or FeatureExtractor(metrics_cfg.fx_seed)
    columns = metric_columns(metrics_cfg)
    scores = np.zeros((len(refs), len(columns)))
    for start in range(0, len(refs), batch):
        chunk = refs[start:start + batch]
        gts = corpus.crops(chunk)
        preds = np.clip(model.predict(mosaic(gts, pattern).data, pattern), 0.0, 1.0)
        for r, (pred, gt) in enumerate(zip(preds, gts)):
            for c, (kind, variant) in enumerate(columns):
                scores[start + r, c] = score_patch(kind, pred, gt, metrics_cfg, fx, variant).value
    return ScoreTable(list(refs), columns, scores)


def top_k_count(n: int, fraction: float) -> int:
    # round first so 0.07 * 100 does not become 8
    return int(math.ceil(round(fraction * n, 9)))


def _name_seed(seed: int, name: str) -> list:
    return [seed, zlib.crc32(name.encode())]


def mine_subcategories(table: ScoreTable, cfg: MiningConfig) -> list:
    """Top ``ceil(top_fraction * N)`` refs per metric column, split train/val.

    Ties go to the earlier ref in (image, y, x) order.  The split is a seeded
    shuffle; ``max(1, round(val_fraction * k))`` refs are held out.
    """
    n = len(table.refs)
    if n == 0:
        raise MiningError("empty score table")
    k = top_k_count(n, cfg.top_fraction)
    if k < 2:
        raise MiningError(f"top {k} of {n} refs cannot be split into train and val")
    ranked_refs = sorted(range(n), key=lambda i: table.refs[i])
    position = np.empty(n, dtype=np.int64)
    position[ranked_refs] = np.arange(n)
    subcats = []
    for c, (kind, variant) in enumerate(table.columns):
        name = column_name(kind, variant)
        col = table.scores[:, c]
        # primary key: score descending; secondary: deterministic ref order
        chosen = np.lexsort((position, -col))[:k]
        selected = sorted(table.refs[i] for i in chosen)
        rng = np.random.default_rng(_name_seed(cfg.seed, name))
        perm = rng.permutation(k)
        n_val = min(max(1, int(round(cfg.val_fraction * k))), k - 1)
        val = sorted(selected[i] for i in perm[:n_val])
        train = sorted(selected[i] for i in perm[n_val:])
        subcats.append(SubCategory(name, kind, variant, train, val))
    return subcats


# --- dihedral augmentation ---------------------------------------------------

def dihedral(arr: np.ndarray, element: int) -> np.ndarray:
    """Apply dihedral element ``0..7`` to the leading two (spatial) axes.

    Bit 0 flips horizontally, bit 1 flips vertically, bit 2 transposes
    (applied last).
    """
    out = arr
    if element & 1:
        out = out[:, ::-1]
    if element & 2:
        out = out[::-1]
    if element & 4:
        if out.shape[0] != out.shape[1]:
            raise DimensionError("transpose augmentation needs square patches")
        out = np.swapaxes(out, 0, 1)
    return out


def augment(pair, rng):
    """Apply one uniformly drawn dihedral element identically to both patches."""
    a, b = pair
    element = int(rng.integers(8))
    return dihedral(a, element), dihedral(b, element)
