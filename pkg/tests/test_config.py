import pytest

from f2pad.config import ConfigError, F2PADConfig, RunConfig, dump_config, known_keys, load_config, parse_config_text


def test_defaults_validate():
    RunConfig().validate()
    f = F2PADConfig()
    assert (f.ks, f.sigma0, f.sigma1, f.clip, f.gamma0, f.eps, f.max_iter, f.candidate_size) == (5, 1.1, 3.0, 0.03, 1.0, 1e-4, 1200, 50)
    assert f.tau_a == 0.1 and f.open_size == 3


def test_parse_and_override(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# comment\nbackend = memory\nks = 0  # trailing\nloss_threshold = none\nreestimate = false\n")
    cfg = load_config(p, {"alpha1": "3.5"})
    assert cfg.backend == "memory" and cfg.f2pad.ks == 0 and cfg.f2pad.loss_threshold is None
    assert cfg.f2pad.reestimate is False and cfg.f2pad.alpha1 == 3.5
    assert cfg.loss_threshold() == 0.05


def test_unknown_and_bad_values_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(None, {"not_a_key": "1"})
    with pytest.raises(ConfigError):
        load_config(None, {"ks": "five"})
    with pytest.raises(ConfigError):
        load_config(None, {"ks": "-1"})
    with pytest.raises(ConfigError):
        load_config(None, {"open_size": "4"})
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign")


def test_dump_round_trip(tmp_path):
    cfg = load_config(None, {"alpha2": "0.25", "backend": "memory"})
    p = tmp_path / "d.cfg"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert dump_config(again) == dump_config(cfg)
    assert set(parse_config_text(dump_config(cfg))) == set(known_keys())
