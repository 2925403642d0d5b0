import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardcycle.metrics import MetricKind
from hardcycle.mining import PatchRef, SubCategory
from hardcycle.selection import (
    CategoryBank,
    CurveSet,
    SelectionConfig,
    SelectionError,
    inverse_correlation_filter,
    merge_positively_correlated,
    select_from_curves,
    select_subcategories,
    spearman,
)
from hardcycle.training import GENERAL

import oracles

DOWN = [5.0, 4.0, 3.0, 2.5, 2.0, 1.5]
UP = [1.0, 1.2, 1.5, 1.9, 2.4, 3.0]
FLAT_NOISE = [1.0, 1.3, 0.9, 1.2, 1.1, 1.0]


def subcat(name, start):
    refs = [PatchRef(start, 0, i, 8) for i in range(4)]
    return SubCategory(name, MetricKind.L1, None, refs[:3], refs[3:])


@given(st.lists(st.integers(0, 5), min_size=3, max_size=30), st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_spearman_matches_oracle_with_ties(x, seed):
    y = np.random.default_rng(seed).integers(0, 4, len(x)).tolist()
    assert spearman(x, y) == pytest.approx(oracles.spearman(x, y), abs=1e-12)


@given(st.lists(st.integers(-10 ** 6, 10 ** 6), min_size=3, max_size=40, unique=True))
@settings(max_examples=60, deadline=None)
def test_spearman_exact_on_monotone(x):
    x = np.array(x, dtype=float)
    assert spearman(x, 2 * x + 1) == 1.0
    assert spearman(x, -x) == -1.0
    assert spearman(np.arange(len(x)), np.sort(x)) == 1.0


def test_spearman_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, y = rng.random(10), rng.random(10)
        r = spearman(x, y)
        assert r == spearman(y, x) and -1 <= r <= 1


def test_spearman_edge_cases():
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2])
    with pytest.raises(ValueError):
        spearman([1, 2, 3], [1, 2])


def test_curveset_validation():
    with pytest.raises(SelectionError):
        CurveSet("a", {"a": DOWN})
    with pytest.raises(SelectionError):
        CurveSet("a", {"a": DOWN, GENERAL: UP[:4]})
    with pytest.raises(SelectionError):
        CurveSet("a", {"a": [1, -1, 2, 3, 4, 5], GENERAL: UP})
    cs = CurveSet("a", {"a": DOWN, GENERAL: UP})
    assert CurveSet.from_dict(cs.to_dict()).curves == cs.curves


def test_filter_keeps_only_anti_general():
    cfg = SelectionConfig()
    sets = [CurveSet("a", {"a": DOWN, GENERAL: UP}),
            CurveSet("b", {"b": DOWN, GENERAL: DOWN}),
            CurveSet("c", {"c": DOWN, GENERAL: FLAT_NOISE})]
    kept = [n for n, _ in inverse_correlation_filter(sets, cfg)]
    assert kept == ["a"] or kept == ["a", "c"]
    assert "b" not in kept


def test_filter_threshold_is_strict():
    x = [1, 2, 3, 4, 5]
    y = [2, 1, 4, 3, 5]  # rho = 0.8 exactly
    cs = CurveSet("a", {"a": x, GENERAL: y})
    assert spearman(x, y) == pytest.approx(0.8)
    assert not inverse_correlation_filter([cs], SelectionConfig(th_neg=0.8, th_pos=0.9))
    assert inverse_correlation_filter([cs], SelectionConfig(th_neg=0.81, th_pos=0.9))


def test_merge_is_transitive_and_orders_by_kept():
    subs = [subcat(n, i) for i, n in enumerate("abc")]
    cfg = SelectionConfig()
    # a~b and b~c (recorded on a's and b's runs); a and c unrelated on both
    kept = [
        ("a", CurveSet("a", {"a": DOWN, "b": DOWN, "c": FLAT_NOISE, GENERAL: UP})),
        ("b", CurveSet("b", {"a": FLAT_NOISE, "b": DOWN, "c": DOWN, GENERAL: UP})),
        ("c", CurveSet("c", {"a": FLAT_NOISE, "b": FLAT_NOISE, "c": DOWN, GENERAL: UP})),
    ]
    edges = []
    bank = merge_positively_correlated(kept, subs, cfg, edges_out=edges)
    assert bank.names == ["a+b+c"]
    assert ("a", "b") in edges and ("b", "c") in edges


def test_merged_entry_keeps_val_disjoint():
    r = [PatchRef(0, 0, i, 8) for i in range(5)]
    a = SubCategory("a", MetricKind.L1, None, [r[0], r[1], r[2]], [r[3]])
    b = SubCategory("b", MetricKind.EDGE, None, [r[3], r[4]], [r[0]])
    kept = [("a", CurveSet("a", {"a": DOWN, "b": DOWN, GENERAL: UP})),
            ("b", CurveSet("b", {"a": DOWN, "b": DOWN, GENERAL: UP}))]
    bank = merge_positively_correlated(kept, [a, b], SelectionConfig())
    e = bank[0]
    assert set(e.val_refs) == {r[0], r[3]}
    assert set(e.train_refs) == {r[1], r[2], r[4]}
    assert e.sources == ["a", "b"]


def test_bank_roundtrip(tmp_path):
    bank = CategoryBank([subcat("a", 0), subcat("b", 1)])
    bank.save(tmp_path / "bank.json")
    back = CategoryBank.load(tmp_path / "bank.json")
    assert back.to_dict() == bank.to_dict()
    with pytest.raises(SelectionError):
        CategoryBank([subcat("a", 0), subcat("a", 1)])


def test_no_anticorrelated_gives_empty_bank():
    subs = [subcat("a", 0)]
    bank, report = select_from_curves([CurveSet("a", {"a": DOWN, GENERAL: DOWN})], subs, SelectionConfig())
    assert len(bank) == 0 and report.kept == []


def test_select_with_injected_probe_and_report():
    subs = [subcat("a", 0), subcat("b", 1)]
    curves = {"a": {"a": DOWN, "b": UP, GENERAL: UP}, "b": {"a": UP, "b": DOWN, GENERAL: UP}}
    bank, report = select_subcategories(None, subs, [], SelectionConfig(),
                                        probe=lambda sc: CurveSet(sc.name, curves[sc.name]))
    assert bank.names == ["a", "b"]
    assert report.own_vs_general == {"a": -1.0, "b": -1.0}
    assert report.pairs("a")[("a", "b")] == -1.0
    m = report.matrices["a"]["rho"]
    assert np.allclose(m, np.array(m).T)


def test_select_needs_probe_inputs():
    with pytest.raises(SelectionError):
        select_subcategories(None, [subcat("a", 0)], [], SelectionConfig())
    with pytest.raises(SelectionError):
        select_subcategories(None, [], [], SelectionConfig())
