import pytest
from hypothesis import given, settings, strategies as st

from recoup.config import ConfigError, RunConfig, parse_value


def test_round_trip(tmp_path):
    cfg = RunConfig(seed=3, family="doubling", sample_count=500, checkpoints=(5, 50), xi=0.001)
    p = tmp_path / "run.cfg"
    cfg.save(p)
    assert RunConfig.load(p) == cfg


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), gamma=st.floats(0.05, 0.95), k=st.floats(0.001, 0.4),
       pair=st.sampled_from([("lebesgue", "mu"), ("acip", "mu"), ("lebesgue", "acip")]))
def test_round_trip_property(seed, gamma, k, pair):
    cfg = RunConfig(seed=seed, gamma=gamma, k_frac=k, pair=pair)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_seed_mandatory():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[map]\nfamily = lsv\n")


@pytest.mark.parametrize("kw", [
    {"family": "tent"}, {"gamma": 1.0}, {"sample_count": 0}, {"k_frac": 0.7},
    {"pair": ("mu", "nope")}, {"xi": -1.0}, {"horizon": -1}, {"seed": -1},
])
def test_validation(kw):
    with pytest.raises(ConfigError):
        RunConfig(**{"seed": 1, **kw})


def test_unknown_and_misplaced_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[sampling]\nseed = 1\ncolour = red\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("[map]\nseed = 1\n")


def test_scientific_ints():
    assert parse_value("sample_count", "1e5") == 100000
    assert parse_value("checkpoints", "10,1e3") == (10, 1000)
    with pytest.raises(ConfigError):
        parse_value("horizon", "many")


def test_hash_ignores_output_and_workers():
    a = RunConfig(seed=1)
    assert a.hash == a.with_overrides(output_dir="/elsewhere", workers=4).hash
    assert a.hash != a.with_overrides(seed=2).hash


def test_output_dir_env(monkeypatch):
    monkeypatch.setenv("RECOUP_OUTPUT_DIR", "/tmp/from_env")
    assert RunConfig(seed=1).out_dir() == "/tmp/from_env"
    assert RunConfig(seed=1, output_dir="x").out_dir() == "x"
