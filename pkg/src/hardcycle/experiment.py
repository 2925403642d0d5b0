"""Run configuration and the pipeline stages as plain functions.

Every stage is a pure function of the configuration and its input
artifacts; the CLI adds persistence, manifests and resumption on top.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corpus import Corpus, generate_corpus, read_corpus
from .evaluation import BenchmarkResult, evaluate_benchmark, evaluate_images, psnr, ssim
from .imaging import mosaic
from .metrics import MetricConfig
from .mining import MiningConfig, extract_patch_grid, mine_subcategories, score_corpus
from .model import Checkpoint, CnnDemosaicer, ModelSpec, preset
from .selection import SelectionConfig, select_subcategories
from .training import (
    CyclePlan,
    LrRamp,
    RegimeKind,
    TrainConfig,
    TrainingError,
    bank_union,
    general_val_refs,
    train_regime,
    train_standard,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    path: Optional[str] = None  # read this directory instead of generating
    n_images: int = 100
    size: int = 96
    tail_fraction: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    preset: Optional[str] = "16k"
    blocks: int = 3
    width: int = 20
    expansion: int = 4
    seed: int = 0

    def spec(self) -> ModelSpec:
        if self.preset:
            return preset(self.preset, self.seed)
        return ModelSpec(self.blocks, self.width, self.expansion, seed=self.seed)


@dataclass(frozen=True)
class EvalConfig:
    tile: int = 256
    overlap: int = 16
    val_stride: int = 0  # general val patch stride; 0 means one crop (no overlap)
    benchmarks: dict = field(default_factory=dict)  # name -> directory


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    mining: MiningConfig = field(default_factory=lambda: MiningConfig(crop=32, stride=16))
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch=16, crop=32, total_iters=2000, steps_per_epoch=100))
    regime_iters: int = 1200  # optimizer steps every regime spends after the base model
    ramp: LrRamp = field(default_factory=LrRamp)
    plan: CyclePlan = field(default_factory=lambda: CyclePlan(epochs_per_phase=3))
    regime: str = RegimeKind.CYCLIC_FULL.value
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        try:
            RegimeKind(self.regime)
        except ValueError:
            raise ConfigError(f"unknown regime {self.regime!r}") from None

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_plain(cls, d, "")

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON when possible."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    def section_hash(self, *names) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _from_plain(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {where or 'root'} must be an object")
    if cls is MetricConfig:
        try:
            return MetricConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"metrics: {exc}") from exc
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys in {where or 'root'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            value = _from_plain(type(current), value, f"{where}{name}.")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'root'}: {exc}") from exc


# --- stages ------------------------------------------------------------------------

def build_corpus(cfg: RunConfig) -> Corpus:
    c = cfg.corpus
    if c.path:
        return read_corpus(c.path)
    return generate_corpus(c.n_images, c.size, c.tail_fraction, c.val_fraction, c.seed)


def general_val(corpus, cfg: RunConfig) -> list:
    crop = cfg.train.crop
    return general_val_refs(corpus, crop, cfg.eval.val_stride or crop)


def train_base(corpus, cfg: RunConfig):
    return train_standard(corpus, cfg.model.spec(), cfg.train, val_refs=general_val(corpus, cfg))


def score_stage(ckpt: Checkpoint, corpus, cfg: RunConfig):
    refs = extract_patch_grid(corpus, cfg.mining)
    return score_corpus(CnnDemosaicer(ckpt.params), corpus, refs, cfg.metrics, pattern=cfg.train.pattern)


def mine_stage(table, cfg: RunConfig):
    return mine_subcategories(table, cfg.mining)


def select_stage(base: Checkpoint, subcats, corpus, cfg: RunConfig):
    return select_subcategories(base, subcats, general_val(corpus, cfg), cfg.selection,
                                corpus=corpus, train_cfg=cfg.train)


def regime_settings(kind, cfg: RunConfig, start_iter: int):
    """Budget-matched training settings for ``kind`` continuing from ``start_iter``.

    Step-decay regimes run to ``start_iter + regime_iters``.  Cyclic regimes
    get as many cycles as fit exactly in ``regime_iters`` steps; a budget that
    is not a whole number of phases is a configuration error.
    """
    kind = RegimeKind(kind)
    budget = cfg.regime_iters
    if budget < 0:
        raise ConfigError("regime_iters must be non-negative")
    if kind in (RegimeKind.CYCLIC_FULL, RegimeKind.CYCLIC_NO_GENERAL):
        phase = cfg.plan.epochs_per_phase * cfg.train.steps_per_epoch
        per_cycle = phase * (2 if kind is RegimeKind.CYCLIC_FULL else 1)
        if budget % per_cycle or budget == 0:
            raise ConfigError(f"regime_iters={budget} is not a positive multiple of the "
                              f"{per_cycle}-step cycle of {kind.value}")
        plan = CyclePlan(cfg.plan.epochs_per_phase, budget // per_cycle)
        return cfg.train, plan
    train = dataclasses.replace(cfg.train, total_iters=start_iter + budget)
    return train, cfg.plan


def regime_stage(kind, base: Checkpoint, corpus, bank, cfg: RunConfig):
    start = int(base.meta.get("iteration", 0))
    train, plan = regime_settings(kind, cfg, start)
    return train_regime(kind, corpus, bank, base.spec, train, init=base, ramp=cfg.ramp, plan=plan,
                        general_val=general_val(corpus, cfg))


def patch_benchmark(predictor, corpus, refs, name, pattern) -> BenchmarkResult:
    """Per-patch PSNR/SSIM over ``refs``; rows are keyed ``image:y:x``."""
    rows = []
    for i in range(0, len(refs), 64):
        chunk = refs[i:i + 64]
        gts = corpus.crops(chunk)
        preds = np.clip(predictor.predict(mosaic(gts, pattern).data, pattern), 0.0, 1.0)
        for ref, p, g in zip(chunk, preds, gts):
            rows.append((f"{ref.image_id}:{ref.y}:{ref.x}", psnr(p, g), ssim(p, g)))
    return BenchmarkResult.from_rows(name, rows)


def tail_val_refs(subcats) -> list:
    return bank_union(subcats, "val")


def evaluate_stage(ckpt: Checkpoint, corpus, subcats, cfg: RunConfig) -> dict:
    """Benchmark results keyed by dataset name.

    ``tail-val``: held-out patches of every mined sub-category;
    ``general-val``: patches of the held-out images; ``val-images``: those
    images whole; plus any configured benchmark directories.
    """
    model = CnnDemosaicer(ckpt.params)
    pattern = cfg.train.pattern
    out = {}
    if subcats:
        out["tail-val"] = patch_benchmark(model, corpus, tail_val_refs(subcats), "tail-val", pattern)
    out["general-val"] = patch_benchmark(model, corpus, general_val(corpus, cfg), "general-val", pattern)
    if corpus.val_ids:
        images = {str(i): corpus.images[i] for i in sorted(corpus.val_ids)}
        out["val-images"] = evaluate_images(model, images, "val-images", pattern, cfg.eval.tile, cfg.eval.overlap)
    for name, path in sorted(cfg.eval.benchmarks.items()):
        out[name] = evaluate_benchmark(model, path, name=name, pattern=pattern,
                                       tile=cfg.eval.tile, overlap=cfg.eval.overlap)
    return out


__all__ = [
    "ConfigError", "CorpusConfig", "ModelConfig", "EvalConfig", "RunConfig", "build_corpus",
    "general_val", "train_base", "score_stage", "mine_stage", "select_stage", "regime_settings",
    "regime_stage", "patch_benchmark", "tail_val_refs", "evaluate_stage", "TrainingError",
]
