"""Training loops: standard step-decay training, the ablation regimes, and
cyclic alternation between mined sub-categories and the full corpus.

An "epoch" is a fixed block of ``steps_per_epoch`` optimizer steps; every
epoch ends with a validation pass.  Mini-batches are drawn from a generator
seeded by ``(seed, stream, step)`` so any run can be resumed or replayed
bit-for-bit from a checkpoint.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .imaging import DEFAULT_PATTERN, mosaic
from .mining import PatchRef, dihedral
from .model import (
    AdamState,
    Checkpoint,
    adam_step,
    l1_loss_and_grad,
    pack_bayer,
    value_and_grad,
)
from .model.net import forward

log = logging.getLogger(__name__)

GENERAL = "general"


class TrainingError(ValueError):
    pass


class RegimeKind(str, enum.Enum):
    STANDARD = "standard"
    MINED_ONLY = "mined_only"
    UNIFORM_MIX = "uniform_mix"
    CYCLIC_NO_GENERAL = "cyclic_no_general"
    CYCLIC_FULL = "cyclic_full"


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    crop: int = 64
    seed: int = 0
    base_lr: float = 5e-4
    halve_every: int = 100_000
    total_iters: int = 0
    steps_per_epoch: int = 100
    val_batch: int = 64
    pattern: str = DEFAULT_PATTERN
    reset_adam_each_phase: bool = True
    general_in_selection: bool = True

    def __post_init__(self):
        if self.batch < 1 or self.base_lr <= 0 or self.steps_per_epoch < 1:
            raise ValueError("batch, base_lr and steps_per_epoch must be positive")
        if self.crop % 2:
            raise ValueError("crop must be even")


@dataclass(frozen=True)
class LrRamp:
    lr_min: float = 1e-5
    lr_max: float = 5e-4
    ramp_steps: int = 200
    kind: str = "geometric"

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.kind not in ("geometric", "linear"):
            raise ValueError("ramp kind is 'geometric' or 'linear'")


def lr_ramp_value(ramp: LrRamp, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if ramp.ramp_steps <= 0 or step >= ramp.ramp_steps:
        return ramp.lr_max
    frac = step / ramp.ramp_steps
    if ramp.kind == "linear":
        return ramp.lr_min + (ramp.lr_max - ramp.lr_min) * frac
    return ramp.lr_min * (ramp.lr_max / ramp.lr_min) ** frac


def step_decay_lr(cfg: TrainConfig, iteration: int) -> float:
    return cfg.base_lr * 0.5 ** (iteration // cfg.halve_every)


@dataclass
class CyclePlan:
    epochs_per_phase: int = 4
    n_cycles: Optional[int] = None  # defaults to 2 * len(bank)

    def cycles_for(self, bank) -> int:
        n = self.n_cycles if self.n_cycles is not None else 2 * len(bank)
        if n < 1 or self.epochs_per_phase < 1:
            raise ValueError("n_cycles and epochs_per_phase must be >= 1")
        return n


@dataclass
class TrainReport:
    regime: str
    rows: list = field(default_factory=list)    # per-epoch validation rows
    phases: list = field(default_factory=list)  # one entry per training phase
    final_checkpoint: str = ""
    best_epoch: Optional[int] = None
    train_losses: list = field(default_factory=list)
    best_checkpoint: Optional[Checkpoint] = field(default=None, repr=False, compare=False)

    def log_epoch(self, epoch, phase, phase_dataset, losses: dict, lr):
        for name, loss in losses.items():
            self.rows.append({"epoch": epoch, "phase": phase, "phase_dataset": phase_dataset,
                              "dataset": name, "loss": loss, "lr": lr, "selected": False})

    def mark_selected(self, epoch):
        for r in self.rows:
            if r["epoch"] == epoch:
                r["selected"] = True

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "best_checkpoint"}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "best_checkpoint"})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "phase", "dataset", "loss", "lr", "selected"])
        for r in self.rows:
            w.writerow([r["epoch"], r["phase"], r["dataset"], repr(r["loss"]), repr(r["lr"]),
                        int(r["selected"])])
        return buf.getvalue()

    def epoch_table(self, phase=None) -> dict:
        """``{epoch: {dataset: loss}}``, optionally restricted to one phase."""
        table = {}
        for r in self.rows:
            if phase is None or r["phase"] == phase:
                table.setdefault(r["epoch"], {})[r["dataset"]] = r["loss"]
        return table


# --- batches -----------------------------------------------------------------

def _stream_id(name: str) -> int:
    return zlib.crc32(name.encode())


def _step_rng(seed: int, stream: str, step: int):
    return np.random.default_rng([seed, _stream_id(stream), step])


def _random_crop(corpus, rng, crop):
    i = corpus.train_ids[int(rng.integers(len(corpus.train_ids)))]
    img = corpus.images[i]
    h, w = img.shape[:2]
    if h < crop or w < crop:
        raise TrainingError(f"image {i} is smaller than the {crop}px crop")
    y = int(rng.integers(h - crop + 1))
    x = int(rng.integers(w - crop + 1))
    return img[y:y + crop, x:x + crop]


def _ref_crop(corpus, ref: PatchRef, rng, crop):
    patch = corpus.crop(ref)
    if ref.size < crop:
        raise TrainingError(f"ref {ref} is smaller than the {crop}px training crop")
    if ref.size > crop:
        y = int(rng.integers(ref.size - crop + 1))
        x = int(rng.integers(ref.size - crop + 1))
        patch = patch[y:y + crop, x:x + crop]
    return patch


class Sampler:
    """Draws augmented ground-truth crops for one training stream.

    ``refs`` restricts sampling to a patch list; ``mix`` is the probability of
    drawing from ``refs`` instead of the whole training split.
    """

    def __init__(self, corpus, crop, refs=None, mix=None, name=GENERAL):
        if refs is not None and not refs:
            raise TrainingError(f"sampler {name!r} has no refs")
        if (refs is None or mix is not None) and not corpus.train_ids:
            raise TrainingError("the general training split is empty")
        self.corpus, self.crop, self.refs, self.mix, self.name = corpus, crop, refs, mix, name

    def draw(self, rng):
        if self.refs is not None and (self.mix is None or rng.random() < self.mix):
            ref = self.refs[int(rng.integers(len(self.refs)))]
            patch = _ref_crop(self.corpus, ref, rng, self.crop)
        else:
            patch = _random_crop(self.corpus, rng, self.crop)
        return dihedral(patch, int(rng.integers(8)))

    def batch(self, seed, step, size) -> np.ndarray:
        rng = _step_rng(seed, self.name, step)
        return np.stack([self.draw(rng) for _ in range(size)]).astype(np.float32)


def train_step(params, adam: AdamState, gts: np.ndarray, lr: float, pattern=DEFAULT_PATTERN):
    packed = pack_bayer(mosaic(gts, pattern))
    loss, grads, _ = value_and_grad(params, packed, lambda out: l1_loss_and_grad(out, gts))
    params, adam = adam_step(params, grads, adam, lr)
    return params, adam, loss


def validation_loss(params, corpus, refs, pattern=DEFAULT_PATTERN, batch=64) -> float:
    """Mean absolute error over every element of the patches in ``refs``."""
    if not refs:
        raise TrainingError("validation set is empty")
    total, count = 0.0, 0
    dtype = params["stem.w"].dtype
    for i in range(0, len(refs), batch):
        gts = corpus.crops(refs[i:i + batch])
        out = forward(params, pack_bayer(mosaic(gts, pattern)).astype(dtype))
        total += float(np.abs(out.astype(np.float64) - gts).sum())
        count += gts.size
    return total / count


def validation_losses(params, corpus, val_sets: dict, cfg: TrainConfig) -> dict:
    return {name: validation_loss(params, corpus, refs, cfg.pattern, cfg.val_batch)
            for name, refs in val_sets.items()}


def general_val_refs(corpus, crop, stride=None) -> list:
    from .mining import MiningConfig, extract_patch_grid

    stride = stride or crop // 2
    return extract_patch_grid(corpus, MiningConfig(crop=crop, stride=stride), ids=corpus.val_ids)


def _fresh_or_copy(init: Optional[Checkpoint], spec) -> Checkpoint:
    if init is None:
        return Checkpoint.fresh(spec, iteration=0)
    if spec is not None and init.spec != spec:
        raise TrainingError("initial checkpoint does not match the model spec")
    return init.copy()


# --- step-decay regimes ----------------------------------------------------------

def _train_step_decay(ckpt, sampler, corpus, cfg, val_refs, regime):
    report = TrainReport(regime)
    start = int(ckpt.meta.get("iteration", 0))
    params, adam = ckpt.params, ckpt.adam
    best = (math.inf, None, ckpt)
    epoch = start // cfg.steps_per_epoch
    first_lr = None
    for it in range(start, cfg.total_iters):
        lr = step_decay_lr(cfg, it)
        first_lr = lr if first_lr is None else first_lr
        params, adam, loss = train_step(params, adam, sampler.batch(cfg.seed, it, cfg.batch), lr, cfg.pattern)
        report.train_losses.append(loss)
        if (it + 1) % cfg.steps_per_epoch == 0 or it + 1 == cfg.total_iters:
            epoch += 1
            losses = validation_losses(params, corpus, {GENERAL: val_refs}, cfg)
            report.log_epoch(epoch, 0, sampler.name, losses, lr)
            if losses[GENERAL] < best[0]:
                snap = Checkpoint(ckpt.spec, params, adam, {**ckpt.meta, "iteration": it + 1, "epoch": epoch})
                best = (losses[GENERAL], epoch, snap)
    final = Checkpoint(ckpt.spec, params, adam,
                       {**ckpt.meta, "iteration": max(start, cfg.total_iters), "regime": regime,
                        "seed": cfg.seed})
    report.phases.append({"index": 0, "dataset": sampler.name, "first_lr": first_lr,
                          "steps": max(0, cfg.total_iters - start)})
    report.best_epoch = best[1]
    if best[1] is not None:
        report.mark_selected(best[1])
    report.best_checkpoint = best[2]
    report.final_checkpoint = "final"
    return final, report


def train_standard(corpus, spec, cfg: TrainConfig, val_refs=None, init: Checkpoint = None):
    """Shuffled random crops over the whole training split, LR halved every
    ``halve_every`` iterations.  Resumes from ``init.meta['iteration']``.

    The report's ``best_checkpoint`` attribute holds the best-validation
    snapshot; the returned checkpoint is the final one.
    """
    ckpt = _fresh_or_copy(init, spec)
    val_refs = val_refs if val_refs is not None else general_val_refs(corpus, cfg.crop)
    return _train_step_decay(ckpt, Sampler(corpus, cfg.crop), corpus, cfg, val_refs, RegimeKind.STANDARD.value)


def bank_union(bank, split="train") -> list:
    refs = set()
    for entry in bank:
        refs.update(entry.train_refs if split == "train" else entry.val_refs)
    return sorted(refs)


# --- cyclic training -------------------------------------------------------------

def phase_sequence(bank, n_cycles, include_general=True) -> list:
    seq = []
    for c in range(n_cycles):
        seq.append(bank[c % len(bank)].name)
        if include_general:
            seq.append(GENERAL)
    return seq


def select_phase_checkpoint(epoch_checkpoints, validation_table):
    """Pick the epoch whose unweighted mean validation loss is lowest.

    ``validation_table`` has one ``{dataset: loss}`` row per checkpoint.  Ties
    resolve to the earliest epoch.  Returns ``(index, checkpoint)``.
    """
    if not epoch_checkpoints or len(epoch_checkpoints) != len(validation_table):
        raise TrainingError("need one validation row per epoch checkpoint")
    keys = set(validation_table[0])
    if not keys or any(set(row) != keys for row in validation_table):
        raise TrainingError("validation table rows are incomplete")
    means = [float(np.mean([row[k] for k in sorted(keys)])) for row in validation_table]
    best = int(np.argmin(means))
    return best, epoch_checkpoints[best]


def cyclic_train(corpus, bank, spec, cfg: TrainConfig, ramp: LrRamp, plan: CyclePlan,
                 init: Checkpoint = None, general_val=None, include_general=True,
                 regime=RegimeKind.CYCLIC_FULL.value):
    """Alternate sub-category and full-corpus phases.

    Each phase restarts the LR ramp (and, by default, the Adam moments) and
    begins from the previous phase's best epoch by mean validation loss over
    every bank entry plus the general set.  The returned checkpoint is the
    best such epoch over the whole run.
    """
    if not bank:
        raise TrainingError("cyclic training needs a non-empty bank; use standard training instead")
    ckpt = _fresh_or_copy(init, spec)
    general_val = general_val if general_val is not None else general_val_refs(corpus, cfg.crop)
    val_sets = {entry.name: list(entry.val_refs) for entry in bank}
    val_sets[GENERAL] = general_val
    scored = [k for k in val_sets if cfg.general_in_selection or k != GENERAL]
    samplers = {entry.name: Sampler(corpus, cfg.crop, refs=list(entry.train_refs), name=entry.name)
                for entry in bank}
    samplers[GENERAL] = Sampler(corpus, cfg.crop)
    seq = phase_sequence(bank, plan.cycles_for(bank), include_general)

    report = TrainReport(regime)
    carried = ckpt
    step = int(ckpt.meta.get("iteration", 0))
    epoch = 0
    overall = (math.inf, None, None)
    init_epoch = None  # epoch the carried checkpoint came from; None for the initial weights
    for phase, name in enumerate(seq):
        params = carried.params
        adam = AdamState.zeros_like(params) if cfg.reset_adam_each_phase else carried.adam
        sampler = samplers[name]
        candidates, table, epochs, step_lrs = [], [], [], []
        phase_step = 0
        for _ in range(plan.epochs_per_phase):
            for _ in range(cfg.steps_per_epoch):
                lr = lr_ramp_value(ramp, phase_step)
                step_lrs.append(lr)
                gts = sampler.batch(cfg.seed, step, cfg.batch)
                params, adam, loss = train_step(params, adam, gts, lr, cfg.pattern)
                report.train_losses.append(loss)
                phase_step += 1
                step += 1
            epoch += 1
            losses = validation_losses(params, corpus, val_sets, cfg)
            report.log_epoch(epoch, phase, name, losses, lr)
            candidates.append(Checkpoint(ckpt.spec, params, adam,
                                         {**ckpt.meta, "iteration": step, "epoch": epoch,
                                          "phase": phase, "phase_dataset": name,
                                          "regime": regime, "seed": cfg.seed}))
            table.append({k: losses[k] for k in scored})
            epochs.append(epoch)
        win, carried = select_phase_checkpoint(candidates, table)
        win_mean = float(np.mean([table[win][k] for k in sorted(table[win])]))
        report.mark_selected(epochs[win])
        report.phases.append({"index": phase, "dataset": name, "first_lr": step_lrs[0],
                              "step_lrs": step_lrs, "epochs": epochs, "init_epoch": init_epoch,
                              "winner_epoch": epochs[win], "winner_mean": win_mean})
        init_epoch = epochs[win]
        if win_mean < overall[0]:
            overall = (win_mean, epochs[win], carried)
        log.info("phase %d on %s: carried epoch %d (mean val %.5f)", phase, name, epochs[win], win_mean)
    report.best_epoch = overall[1]
    report.final_checkpoint = f"epoch-{overall[1]}"
    return overall[2], report


# --- regime dispatch ----------------------------------------------------------------

def train_regime(kind, corpus, bank, spec, cfg: TrainConfig, init: Checkpoint = None,
                 ramp: LrRamp = None, plan: CyclePlan = None, general_val=None):
    kind = RegimeKind(kind)
    if kind is RegimeKind.STANDARD:
        return train_standard(corpus, spec, cfg, val_refs=general_val, init=init)
    if not bank:
        raise TrainingError(f"regime {kind.value} needs a non-empty sub-category bank")
    general_val = general_val if general_val is not None else general_val_refs(corpus, cfg.crop)
    if kind in (RegimeKind.MINED_ONLY, RegimeKind.UNIFORM_MIX):
        refs = bank_union(bank)
        if kind is RegimeKind.MINED_ONLY:
            sampler = Sampler(corpus, cfg.crop, refs=refs, name="mined")
        else:
            if not corpus.train_ids:
                raise TrainingError("uniform mixing needs a non-empty general dataset")
            sampler = Sampler(corpus, cfg.crop, refs=refs, mix=0.5, name="uniform")
        ckpt = _fresh_or_copy(init, spec)
        return _train_step_decay(ckpt, sampler, corpus, cfg, general_val, kind.value)
    ramp = ramp or LrRamp()
    plan = plan or CyclePlan()
    include_general = kind is RegimeKind.CYCLIC_FULL
    return cyclic_train(corpus, bank, spec, cfg, ramp, plan, init=init, general_val=general_val,
                        include_general=include_general, regime=kind.value)
