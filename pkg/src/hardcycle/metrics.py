"""Patch-scoring metrics used to mine hard sub-categories.

All norms are sums over elements, not means.  Every function takes a
predicted patch and its ground truth, both ``(H, W, 3)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .imaging import edge_map, grad_abs


class MetricKind(str, enum.Enum):
    ZIPPER = "zipper"
    GRID = "grid"
    L1 = "l1"
    PERCEPTUAL = "perceptual"
    EDGE = "edge"


@dataclass(frozen=True)
class MetricConfig:
    eps1: float = 0.1
    eps2: float = 0.02
    alpha: float = 0.05
    grid_eps2_variants: tuple = (0.01, 0.02, 0.05)
    fx_seed: int = 42
    fx_stage: int = 2

    def __post_init__(self):
        if min(self.eps1, self.eps2, self.alpha) <= 0 or min(self.grid_eps2_variants, default=1) <= 0:
            raise ValueError("metric thresholds must be strictly positive")
        if self.fx_stage < 1:
            raise ValueError("fx_stage counts from 1")
        object.__setattr__(self, "grid_eps2_variants", tuple(float(v) for v in self.grid_eps2_variants))

    @property
    def vgg_layer(self) -> tuple:
        # (stage, conv-within-stage); every stage holds one post-activation conv
        return (self.fx_stage, 1)

    def to_dict(self) -> dict:
        return {
            "eps1": self.eps1,
            "eps2": self.eps2,
            "alpha": self.alpha,
            "grid_eps2_variants": list(self.grid_eps2_variants),
            "fx_seed": self.fx_seed,
            "fx_stage": self.fx_stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        d = dict(d)
        if "grid_eps2_variants" in d:
            d["grid_eps2_variants"] = tuple(d["grid_eps2_variants"])
        return cls(**d)


@dataclass(frozen=True)
class PatchScore:
    kind: MetricKind
    value: float
    patch_ref: Optional[object] = None


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed random convolution stack standing in for pretrained VGG features.

    Stage ``s`` applies a valid 3x3 convolution with stride 2 followed by a
    rectifier.  Weights are drawn once from ``seed`` with He scaling.
    """

    seed: int = 42
    channels: tuple = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    weights: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.channels:
            raise ValueError("feature extractor needs at least one stage")
        rng = np.random.default_rng(self.seed)
        stages = []
        c_in = 3
        for c_out in self.channels:
            fan_in = c_in * self.kernel * self.kernel
            w = rng.standard_normal((c_out, c_in, self.kernel, self.kernel)) * np.sqrt(2.0 / fan_in)
            w.setflags(write=False)
            stages.append(w)
            c_in = c_out
        object.__setattr__(self, "weights", tuple(stages))

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    def features(self, patch: np.ndarray, stage: int) -> np.ndarray:
        if not 1 <= stage <= self.n_stages:
            raise ValueError(f"stage must be in 1..{self.n_stages}, got {stage}")
        x = np.asarray(patch, dtype=np.float64)
        k, s = self.kernel, self.stride
        for w in self.weights[:stage]:
            h, wd = x.shape[:2]
            if h < k or wd < k:
                raise ValueError(f"patch too small for feature stage {stage}")
            windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))[::s, ::s]
            # windows: (H', W', C_in, k, k)
            x = np.maximum(np.einsum("yxcij,ocij->yxo", windows, w, optimize=True), 0.0)
        return x


def non_edge_mask(pred, gt, cfg: MetricConfig) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    return np.abs(edge_map(pred) - edge_map(gt)) < cfg.eps1


def zipper_metric(pred, gt, cfg: MetricConfig) -> float:
    pred, gt = _check_pair(pred, gt)
    mask = non_edge_mask(pred, gt, cfg)
    diff = np.abs(grad_abs(pred) - grad_abs(gt))
    return float(np.sum(diff * mask[..., None]))


def grid_weight(grad_gt: np.ndarray, alpha: float) -> np.ndarray:
    """``sigmoid(alpha / |grad gt|) - 0.5`` with ``alpha / 0 = +inf``."""
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.where(grad_gt > 0, alpha / np.where(grad_gt > 0, grad_gt, 1.0), np.inf)
    return expit(ratio) - 0.5


def grid_metric(pred, gt, cfg: MetricConfig, eps2: Optional[float] = None) -> float:
    pred, gt = _check_pair(pred, gt)
    eps2 = cfg.eps2 if eps2 is None else eps2
    gp = grad_abs(pred)
    weight = grid_weight(grad_abs(gt), cfg.alpha)
    return float(np.sum(2.0 * gp * weight * (gp > eps2)))


def l1_metric(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.sum(np.abs(pred - gt)))


def perceptual_metric(pred, gt, fx: FeatureExtractor, cfg: MetricConfig) -> float:
    pred, gt = _check_pair(pred, gt)
    d = fx.features(pred, cfg.fx_stage) - fx.features(gt, cfg.fx_stage)
    return float(np.sum(d * d))


def edge_metric(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.sum(np.abs(edge_map(pred) - edge_map(gt))))


def score_patch(kind, pred, gt, cfg: MetricConfig, fx: Optional[FeatureExtractor] = None,
                variant: Optional[float] = None, patch_ref=None) -> PatchScore:
    kind = MetricKind(kind)
    if kind is MetricKind.ZIPPER:
        value = zipper_metric(pred, gt, cfg)
    elif kind is MetricKind.GRID:
        value = grid_metric(pred, gt, cfg, eps2=variant)
    elif kind is MetricKind.L1:
        value = l1_metric(pred, gt)
    elif kind is MetricKind.PERCEPTUAL:
        if fx is None:
            fx = FeatureExtractor(cfg.fx_seed)
        value = perceptual_metric(pred, gt, fx, cfg)
    else:
        value = edge_metric(pred, gt)
    return PatchScore(kind, value, patch_ref)


def metric_columns(cfg: MetricConfig) -> list:
    """(kind, variant) pairs scored during mining, in a fixed order.

    Only the grid metric is expanded over threshold variants; the other kinds
    carry ``None``.
    """
    cols = [(MetricKind.ZIPPER, None)]
    cols += [(MetricKind.GRID, v) for v in cfg.grid_eps2_variants]
    cols += [(MetricKind.L1, None), (MetricKind.PERCEPTUAL, None), (MetricKind.EDGE, None)]
    return cols


def column_name(kind, variant: Optional[float]) -> str:
    kind = MetricKind(kind)
    if variant is None:
        return kind.value
    return f"{kind.value}@eps2={variant:g}"
