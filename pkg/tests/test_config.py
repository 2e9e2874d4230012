"""Run-configuration parsing, canonical text, and digests."""

import hashlib

import pytest

from advr.config import (canonical_text, config_digest, load_config,
                         parse_config_text)
from advr.errors import ConfigError


def test_empty_text_yields_defaults() -> None:
    cfg = parse_config_text("")
    assert cfg.get("dataset", "kind") == "synthetic"
    assert cfg.get("attack", "epsilon") == "5.0"
    assert cfg.get("training", "optimizer") == "momentum"
    assert cfg.get("filters", "window") == "3"


def test_overrides_and_comments() -> None:
    cfg = parse_config_text(
        "# comment\n"
        "[attack]\n"
        "epsilon = 2.5\n"
        "\n"
        "[training]\n"
        "t1 = 3\n")
    assert cfg.get("attack", "epsilon") == "2.5"
    assert cfg.get("attack", "alpha") == "0.5"   # untouched default
    assert cfg.get("training", "t1") == "3"


def test_typed_views_match_overrides() -> None:
    cfg = parse_config_text(
        "[features]\n"
        "sample_rate = 8000\n"
        "n_fft = 128\n"
        "hop_seconds = 0.004\n"
        "frames = 64\n"
        "[model]\n"
        "kind = se_resnet\n"
        "width_multiplier = 0.5\n"
        "[attack]\n"
        "iterations = 4\n"
        "[filters]\n"
        "window = 5\n"
        "sigma = 0.8\n"
        "[training]\n"
        "learning_rate = 0.01\n"
        "mix_clean = 0.25\n")
    feats = cfg.feature_config()
    assert (feats.sample_rate, feats.n_fft, feats.frames) == (8000, 128, 64)
    spec = cfg.model_spec()
    assert spec.kind == "se_resnet"
    assert spec.input_shape == (1, 64, 65)
    assert spec.width_multiplier == 0.5
    assert cfg.attack_config().iterations == 4
    filters = cfg.filter_specs()
    assert set(filters) == {"median", "mean", "gaussian"}
    assert filters["gaussian"].window == 5 and filters["gaussian"].sigma == 0.8
    tcfg = cfg.train_config()
    assert tcfg.learning_rate == 0.01
    assert tcfg.mix_clean == 0.25
    assert tcfg.attack.iterations == 4   # attack settings flow into training


def test_unknown_section_rejected_with_line() -> None:
    with pytest.raises(ConfigError, match=r"line 2: unknown section \[nope\]"):
        parse_config_text("[dataset]\n[nope]\n")


def test_unknown_key_rejected_with_line() -> None:
    with pytest.raises(ConfigError, match=r"line 2: unknown key 'bogus'"):
        parse_config_text("[attack]\nbogus = 1\n")


def test_key_outside_section_rejected() -> None:
    with pytest.raises(ConfigError, match="line 1: key outside any"):
        parse_config_text("epsilon = 5\n")


def test_malformed_line_rejected() -> None:
    with pytest.raises(ConfigError, match="line 2: expected key = value"):
        parse_config_text("[attack]\nnot a setting\n")


def test_bad_numeric_value_reported_with_key() -> None:
    cfg = parse_config_text("[attack]\nepsilon = fast\n")
    with pytest.raises(ConfigError, match=r"\[attack\] epsilon must be a number"):
        cfg.attack_config()


def test_digest_is_sha256_of_canonical_text() -> None:
    cfg = parse_config_text("[training]\nt1 = 7\n")
    expect = hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()
    assert config_digest(cfg) == expect


def test_digest_ignores_formatting_but_not_values() -> None:
    a = parse_config_text("[attack]\nepsilon = 2.0\nalpha = 0.25\n")
    b = parse_config_text("# noise\n[attack]\n\nalpha=0.25\nepsilon   =   2.0\n")
    c = parse_config_text("[attack]\nepsilon = 2.0\nalpha = 0.26\n")
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)


def test_canonical_text_reparses_to_same_config() -> None:
    cfg = parse_config_text("[dataset]\nn_train = 5\n[training]\nseed = 9\n")
    again = parse_config_text(canonical_text(cfg))
    assert again == cfg
    assert config_digest(again) == config_digest(cfg)


def test_load_config_from_file(tmp_path) -> None:
    p = tmp_path / "run.cfg"
    p.write_text("[dataset]\nseed = 42\n")
    assert load_config(p).get("dataset", "seed") == "42"
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "missing.cfg")
