"""Choosing which mined sub-categories to alternate with.

Each candidate is probed by briefly fine-tuning the base model on it while
recording validation curves on every candidate and on the general set.
Candidates whose own curve moves against the general curve (Spearman rho
below ``th_neg``) are kept; kept candidates whose curves move together
(rho above ``th_pos``) are merged.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .mining import MiningError, SubCategory
from .model import AdamState
from .training import GENERAL, Sampler, TrainConfig, train_step, validation_loss

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    th_neg: float = -0.2
    th_pos: float = 0.5
    probe_epochs: int = 8
    probe_lr: float = 1e-4
    probe_steps_per_epoch: int = 20
    seed: int = 0

    def __post_init__(self):
        if not -1.0 <= self.th_neg <= self.th_pos <= 1.0:
            raise ValueError("need -1 <= th_neg <= th_pos <= 1")
        if self.probe_epochs < 3:
            raise ValueError("probe_epochs must be >= 3 to correlate curves")


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties.

    A constant input carries no ordering information and yields 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if x.size < 3:
        raise ValueError("spearman needs at least 3 points")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    sxx = float(np.dot(rx, rx))
    syy = float(np.dot(ry, ry))
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    rho = float(np.dot(rx, ry)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, rho))


@dataclass
class CurveSet:
    """Validation curves recorded while probing ``trained_on``."""

    trained_on: str
    curves: dict  # dataset name -> list of per-epoch losses

    def __post_init__(self):
        if GENERAL not in self.curves:
            raise SelectionError(f"curve set for {self.trained_on!r} lacks the {GENERAL!r} curve")
        lengths = {len(c) for c in self.curves.values()}
        if len(lengths) != 1 or lengths.pop() < 3:
            raise SelectionError("curves must share a length of at least 3")
        for name, c in self.curves.items():
            if not all(math.isfinite(v) and v >= 0 for v in c):
                raise SelectionError(f"curve {name!r} has negative or non-finite losses")

    @property
    def own(self) -> list:
        return self.curves[self.trained_on]

    def to_dict(self):
        return {"trained_on": self.trained_on, "curves": {k: list(v) for k, v in self.curves.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["trained_on"], {k: list(v) for k, v in d["curves"].items()})


@dataclass
class CategoryBank:
    entries: list = field(default_factory=list)  # merged SubCategory objects

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if seen & set(e.sources):
                raise SelectionError("a sub-category appears in more than one bank entry")
            seen |= set(e.sources)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def names(self):
        return [e.name for e in self.entries]

    def to_dict(self):
        return {"entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls([SubCategory.from_dict(e) for e in d["entries"]])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class CorrelationReport:
    """Per probe run, the full symmetric rho matrix over its curves."""

    matrices: dict = field(default_factory=dict)  # trained_on -> {"names", "rho"}
    own_vs_general: dict = field(default_factory=dict)
    kept: list = field(default_factory=list)
    merge_edges: list = field(default_factory=list)
    curve_sets: list = field(default_factory=list)

    def pairs(self, trained_on) -> dict:
        m = self.matrices[trained_on]
        names = m["names"]
        return {(a, b): m["rho"][i][j] for i, a in enumerate(names) for j, b in enumerate(names)}

    def to_dict(self):
        return {"matrices": self.matrices, "own_vs_general": self.own_vs_general,
                "kept": self.kept, "merge_edges": [list(e) for e in self.merge_edges],
                "curve_sets": [cs.to_dict() for cs in self.curve_sets]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["matrices"], d["own_vs_general"], d["kept"],
                   [tuple(e) for e in d["merge_edges"]],
                   [CurveSet.from_dict(c) for c in d["curve_sets"]])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)


def correlation_matrix(cs: CurveSet) -> dict:
    names = list(cs.curves)
    rho = [[spearman(cs.curves[a], cs.curves[b]) for b in names] for a in names]
    return {"names": names, "rho": rho}


def probe_train(base_checkpoint, subcat: SubCategory, all_subcats, general_val, cfg: SelectionConfig,
                corpus, train_cfg: TrainConfig) -> CurveSet:
    """Fine-tune a copy of ``base_checkpoint`` on ``subcat.train_refs`` only.

    After every probe epoch the mean per-element L1 loss is recorded on each
    sub-category's val refs and on ``general_val``.
    """
    if not subcat.train_refs:
        raise MiningError(f"sub-category {subcat.name!r} is empty")
    params = base_checkpoint.params.copy()
    adam = AdamState.zeros_like(params)
    sampler = Sampler(corpus, train_cfg.crop, refs=list(subcat.train_refs), name=f"probe:{subcat.name}")
    val_sets = {s.name: list(s.val_refs) for s in all_subcats}
    val_sets[GENERAL] = list(general_val)
    curves = {name: [] for name in val_sets}
    step = 0
    for _ in range(cfg.probe_epochs):
        for _ in range(cfg.probe_steps_per_epoch):
            gts = sampler.batch(cfg.seed, step, train_cfg.batch)
            if cfg.probe_lr > 0:
                params, adam, _ = train_step(params, adam, gts, cfg.probe_lr, train_cfg.pattern)
            step += 1
        for name, refs in val_sets.items():
            curves[name].append(validation_loss(params, corpus, refs, train_cfg.pattern, train_cfg.val_batch))
    return CurveSet(subcat.name, curves)


def inverse_correlation_filter(curve_sets, cfg: SelectionConfig) -> list:
    """Keep ``(name, curve_set)`` pairs whose own-vs-general rho is below ``th_neg``."""
    kept = []
    for cs in curve_sets:
        if GENERAL not in cs.curves:
            raise SelectionError(f"curve set for {cs.trained_on!r} lacks the general curve")
        rho = spearman(cs.own, cs.curves[GENERAL])
        if rho < cfg.th_neg:
            kept.append((cs.trained_on, cs))
    return kept


def _merged_entry(members, lookup) -> SubCategory:
    first = lookup[members[0]]
    val = set()
    train = set()
    for m in members:
        val.update(lookup[m].val_refs)
        train.update(lookup[m].train_refs)
    # a patch held out by any member stays held out
    train -= val
    if not train:
        raise SelectionError(f"merged entry {members} has no training refs left")
    name = "+".join(members)
    return SubCategory(name, first.kind, first.threshold_variant, sorted(train), sorted(val),
                       sources=list(members))


def merge_positively_correlated(kept, subcats, cfg: SelectionConfig, edges_out=None) -> CategoryBank:
    """Merge kept sub-categories connected by rho > ``th_pos``.

    Edge ``(a, b)`` uses the curves recorded while probing ``a``; groups are
    the connected components of the resulting graph, listed in kept order.
    """
    lookup = {s.name: s for s in subcats}
    names = [n for n, _ in kept]
    sets = dict(kept)
    parent = {n: n for n in names}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for a in names:
        cs = sets[a]
        for b in names:
            if b == a:
                continue
            if b not in cs.curves:
                raise SelectionError(f"probe run for {a!r} has no curve for {b!r}")
            if spearman(cs.own, cs.curves[b]) > cfg.th_pos:
                if edges_out is not None:
                    edges_out.append((a, b))
                ra, rb = find(a), find(b)
                if ra != rb:
                    # root at the earlier name so component order follows kept order
                    if names.index(ra) < names.index(rb):
                        parent[rb] = ra
                    else:
                        parent[ra] = rb
    groups = {}
    for n in names:
        groups.setdefault(find(n), []).append(n)
    ordered = sorted(groups.values(), key=lambda g: names.index(g[0]))
    return CategoryBank([_merged_entry(g, lookup) for g in ordered])


def select_from_curves(curve_sets, subcats, cfg: SelectionConfig):
    """Filter and merge already-recorded curves.  Returns ``(bank, report)``."""
    report = CorrelationReport(curve_sets=list(curve_sets))
    for cs in curve_sets:
        report.matrices[cs.trained_on] = correlation_matrix(cs)
        report.own_vs_general[cs.trained_on] = spearman(cs.own, cs.curves[GENERAL])
    kept = inverse_correlation_filter(curve_sets, cfg)
    report.kept = [n for n, _ in kept]
    if not kept:
        log.info("no sub-category is anti-correlated with the general set; bank is empty")
        return CategoryBank([]), report
    edges = []
    bank = merge_positively_correlated(kept, subcats, cfg, edges_out=edges)
    report.merge_edges = edges
    return bank, report


def select_subcategories(base_checkpoint, subcats, general_val, cfg: SelectionConfig,
                         corpus=None, train_cfg: TrainConfig = None, probe=None):
    """Probe, filter and merge.  ``probe(subcat) -> CurveSet`` may be injected."""
    if not subcats:
        raise SelectionError("need at least one sub-category")
    if probe is None:
        if corpus is None or train_cfg is None:
            raise SelectionError("probe training needs a corpus and a training config")

        def probe(sc):
            return probe_train(base_checkpoint, sc, subcats, general_val, cfg, corpus, train_cfg)

    curve_sets = []
    for sc in subcats:
        cs = probe(sc)
        log.info("probed %s: rho(own, general) = %.3f", sc.name, spearman(cs.own, cs.curves[GENERAL]))
        curve_sets.append(cs)
    return select_from_curves(curve_sets, subcats, cfg)
