import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from pad_lreid.config import (SUITES, VARIANT_NAMES, ConfigError, ExperimentConfig, VariantSpec,
                              apply_overrides, configure_variant, load_config,
                              resolve_freeze_policy, save_config, validate)

DEFAULT_FILE = Path(__file__).resolve().parents[1] / "configs" / "default.json"


def write_json(tmp_path, **changes):
    raw = ExperimentConfig().to_dict()
    raw.update(changes)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def test_default_file_values():
    cfg = load_config(DEFAULT_FILE)
    assert cfg.lambda_text == 0.5
    assert cfg.tau_text == 0.07
    assert cfg.gamma_init == 7.0
    assert cfg.ema_alpha == 0.997
    assert cfg.top_k == 4
    assert cfg.pool_size == 36
    assert cfg.lambda_feat == cfg.lambda_logit == 0.5


def test_default_file_matches_dataclass_defaults():
    assert load_config(DEFAULT_FILE) == ExperimentConfig()


def test_five_domain_allocation_accepted(tmp_path):
    path = write_json(tmp_path, slot_alloc=[8, 8, 8, 8, 4], pool_size=36, num_domains=5)
    assert load_config(path).slot_alloc == (8, 8, 8, 8, 4)


def test_slot_sum_mismatch_names_field(tmp_path):
    path = write_json(tmp_path, slot_alloc=[12, 12, 11], pool_size=36)
    with pytest.raises(ConfigError, match="slot_alloc"):
        load_config(path)


@pytest.mark.parametrize("changes, field", [
    (dict(top_k=37), "top_k"),
    (dict(unfrozen_blocks=7), "unfrozen_blocks"),
    (dict(ema_alpha=1.0), "ema_alpha"),
    (dict(ema_alpha=0.0), "ema_alpha"),
    (dict(schedule="async"), "schedule"),
    (dict(slot_alloc=[18, 18]), "slot_alloc"),
    (dict(batch=[40, 4]), "batch"),
])
def test_invariant_violations(tmp_path, changes, field):
    with pytest.raises(ConfigError, match=field):
        load_config(write_json(tmp_path, **changes))


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(write_json(tmp_path, learning_rate=0.1))


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_save_load_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=3, slot_alloc=(10, 12, 14))
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), ["seed=1", "batch=4,4", "use_texkd=false",
                                               "lambda_feat=0.25"])
    assert cfg.seed == 1 and cfg.batch == (4, 4) and cfg.use_texkd is False
    assert cfg.lambda_feat == 0.25
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["seed"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["seed=1.5"])


def test_config_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig(seed=1)
    assert a.config_hash() == ExperimentConfig().config_hash()
    assert a.config_hash() != b.config_hash()


# --- variants ---------------------------------------------------------------------------

def test_component_variants():
    base = ExperimentConfig()
    flags = lambda c: (c.use_freeze, c.use_va_prompt, c.use_texkd, c.use_viskd)  # noqa: E731
    assert flags(configure_variant(base, "S0")) == (False, False, False, False)
    assert flags(configure_variant(base, "S1")) == (True, False, False, False)
    assert flags(configure_variant(base, "S2")) == (True, True, False, False)
    assert flags(configure_variant(base, "S3")) == (True, True, True, False)
    assert flags(configure_variant(base, "S4")) == (True, True, False, True)
    s5 = configure_variant(base, "S5")
    assert flags(s5) == (True, True, True, True)
    assert s5.lambda_text == s5.lambda_feat == s5.lambda_logit == 0.5


def test_texkd_variants():
    t5 = configure_variant(ExperimentConfig(), "T5")
    assert (t5.lambda_text, t5.tau_text, t5.gamma_init, t5.neg_batch) == (1.0, 0.05, 12.0, 512)
    t1 = configure_variant(ExperimentConfig(), "T1")
    assert (t1.lambda_text, t1.tau_text, t1.gamma_init) == (0.25, 0.07, 4.0)
    # the weak default coincides with S5 up to the variant label
    t2 = configure_variant(ExperimentConfig(), "T2")
    assert t2.replace(variant="S5") == configure_variant(ExperimentConfig(), "S5")


def test_viskd_variants():
    v1 = configure_variant(ExperimentConfig(), "V1")
    assert (v1.lambda_feat, v1.lambda_logit, v1.tau_vis) == (0.25, 0.25, 4.0)
    v5 = configure_variant(ExperimentConfig(), "V5")
    assert (v5.lambda_feat, v5.lambda_logit, v5.tau_vis) == (1.0, 1.0, 3.0)


def test_slot_variants_switch_to_five_domains():
    p1 = configure_variant(ExperimentConfig(), "P1")
    assert p1.slot_alloc == (8, 8, 8, 8, 4) and p1.num_domains == 5 and p1.pool_size == 36
    p2 = configure_variant(ExperimentConfig(), "P2")
    assert p2.slot_alloc == (4, 4, 4, 4, 4) and p2.pool_size == 20
    for name in SUITES["slots"]:
        cfg = configure_variant(ExperimentConfig(), name)
        assert sum(cfg.slot_alloc) == cfg.pool_size


def test_block_variants_rescale_to_depth():
    got = [configure_variant(ExperimentConfig(), n).unfrozen_blocks for n in SUITES["blocks"]]
    assert got == [1, 2, 3, 4]
    assert configure_variant(ExperimentConfig(num_layers=12, slot_alloc=(12, 12, 12)),
                             "B8").unfrozen_blocks == 8


def test_unknown_variant():
    with pytest.raises(ConfigError):
        configure_variant(ExperimentConfig(), "S9")
    with pytest.raises(ConfigError):
        configure_variant(ExperimentConfig(), VariantSpec("Q1", {}))


@pytest.mark.parametrize("name", VARIANT_NAMES)
def test_every_variant_valid_and_idempotent(name):
    base = ExperimentConfig()
    once = configure_variant(base, name)
    validate(once)
    assert configure_variant(once, name) == once
    assert once.variant == name


# --- freeze policy ------------------------------------------------------------------------

def test_freeze_policy_examples():
    cfg = ExperimentConfig(num_layers=6, unfrozen_blocks=2)
    assert resolve_freeze_policy(cfg, 2).frozen_block_indices == {0, 1, 2, 3}
    p0 = resolve_freeze_policy(cfg, 0)
    assert p0.frozen_block_indices == set() and not p0.kd_active
    assert p0.text_encoder_frozen
    small = ExperimentConfig(slot_alloc=(2, 2, 2), pool_size=6, top_k=2)
    assert resolve_freeze_policy(small, 1).frozen_slot_indices == {0, 1}
    assert resolve_freeze_policy(small, 2).frozen_slot_indices == {0, 1, 2, 3}


def test_freeze_policy_without_freezing_scheme():
    cfg = configure_variant(ExperimentConfig(), "S0")
    p = resolve_freeze_policy(cfg, 2)
    assert p.frozen_block_indices == set() and p.kd_active


def test_freeze_policy_domain_range():
    with pytest.raises(ConfigError):
        resolve_freeze_policy(ExperimentConfig(), 3)


@given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 4))
def test_freeze_policy_block_count(layers, unfrozen, t):
    unfrozen = min(unfrozen, layers)
    cfg = ExperimentConfig(num_layers=layers, unfrozen_blocks=unfrozen, num_domains=5,
                           slot_alloc=(8, 7, 7, 7, 7))
    p = resolve_freeze_policy(cfg, t)
    expected = 0 if t == 0 else layers - unfrozen
    assert len(p.frozen_block_indices) == expected
    assert all(0 <= i < layers - unfrozen for i in p.frozen_block_indices)
    assert len(p.frozen_slot_indices) == sum(cfg.slot_alloc[:t])
