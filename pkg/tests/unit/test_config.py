# Copyright 2025 The gdc-propagation authors.

import numpy as np
import pytest

from config import STREAM_NAMES, RunConfig, load_schema, parse_pairs, stream
from errors import ConfigError


def test_defaults_follow_the_schema():
    """Test that an empty configuration takes every schema default."""
    cfg = RunConfig()
    schema = load_schema()
    assert set(cfg) == set(schema)
    assert cfg["max-iters"] == 50
    assert cfg["control"] is True
    assert cfg["lambda"] is None
    assert cfg["task"] == "deconvolution"


def test_text_and_overrides_are_coerced():
    """Test that text values and keyword overrides are converted to the declared types."""
    cfg = RunConfig.from_text("# comment\nmax-iters = 7\ncontrol=no\n\neta=2", alpha_d="0.5")
    assert cfg["max-iters"] == 7
    assert cfg["control"] is False
    assert cfg["eta"] == 2.0
    assert cfg["alpha-d"] == 0.5


@pytest.mark.parametrize(
    "text",
    ["colour=red", "max-iters=many", "control=maybe", "justtext"],
    ids=["unknown", "int", "boolean", "no-separator"],
)
def test_bad_configuration_raises(text):
    """Test that unknown options and malformed values raise."""
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_parse_pairs_reports_the_line():
    """Test that a malformed line names its number."""
    with pytest.raises(ConfigError, match="line 2"):
        parse_pairs("a=1\n=2\n")


def test_effective_configuration_text_reads_back():
    """Test that the echoed configuration reproduces the same values."""
    cfg = RunConfig.from_text("seed=3\nlambda=0.01\nscheme=gc")
    assert dict(RunConfig.from_text(cfg.to_text())) == dict(cfg)


def test_replace_and_list_options():
    """Test copying with changes and parsing comma-separated lists."""
    cfg = RunConfig().replace(noise_levels="1, 2.5,4")
    assert cfg.floats("noise-levels") == (1.0, 2.5, 4.0)
    assert RunConfig()["noise-levels"] == "2"


def test_named_streams_are_independent_and_reproducible():
    """Test that streams repeat for a seed and differ between names."""
    draws = {name: stream(5, name).random(4) for name in STREAM_NAMES}
    assert np.array_equal(draws["init"], stream(5, "init").random(4))
    assert not np.array_equal(draws["init"], draws["noise"])
    assert np.array_equal(RunConfig.from_text("seed=5").rng("probe").random(4), draws["probe"])
