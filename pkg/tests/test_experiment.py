import json

import pytest

from hardcycle.experiment import ConfigError, RunConfig, regime_settings
from hardcycle.metrics import MetricConfig
from hardcycle.training import CyclePlan


def test_config_roundtrip_through_json():
    cfg = RunConfig()
    back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert isinstance(back.metrics, MetricConfig)


def test_overrides():
    cfg = RunConfig().with_overrides(["train.batch=8", "regime=standard", "model.preset=null",
                                      "eval.benchmarks={\"kodak\": \"/data/kodak\"}"])
    assert cfg.train.batch == 8 and cfg.regime == "standard" and cfg.model.preset is None
    assert cfg.eval.benchmarks == {"kodak": "/data/kodak"}
    assert RunConfig().train.batch == 16  # the original is untouched


@pytest.mark.parametrize("bad", ["train.nope=1", "nosection.x=1", "train.batch", "regime=fancy",
                                 "train.crop=31"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([bad])


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"batch": 4, "typo": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": 3})


def test_section_hash_tracks_only_named_sections():
    a = RunConfig()
    b = a.with_overrides(["train.batch=4"])
    assert a.section_hash("mining") == b.section_hash("mining")
    assert a.section_hash("train") != b.section_hash("train")


def test_regime_budgets_match():
    cfg = RunConfig().with_overrides(["regime_iters=1200", "train.steps_per_epoch=100",
                                      "plan.epochs_per_phase=2"])
    train, _ = regime_settings("standard", cfg, start_iter=500)
    assert train.total_iters == 1700
    train, _ = regime_settings("mined_only", cfg, start_iter=500)
    assert train.total_iters == 1700
    _, plan = regime_settings("cyclic_full", cfg, 500)
    assert plan == CyclePlan(2, 3)  # 3 cycles x 2 phases x 200 steps
    _, plan = regime_settings("cyclic_no_general", cfg, 500)
    assert plan.n_cycles * plan.epochs_per_phase * 100 == 1200
    with pytest.raises(ConfigError):
        regime_settings("cyclic_full", cfg.with_overrides(["regime_iters=500"]), 0)
    with pytest.raises(ConfigError):
        regime_settings("cyclic_full", cfg.with_overrides(["regime_iters=0"]), 0)
