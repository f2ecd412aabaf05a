import numpy as np
import pytest

from kernel_renorm.config import OUT_ENV, ConfigError, load_config, parse_config

BASE = """
[run]
seed = 3
[data]
P = 20
N0 = 16
[network]
architecture = cnn
activation = erf
width = 5
M = 4
S = 4
[hyper]
lambda1 = 2
beta = inf
"""


def test_defaults_and_derived_quantities():
    cfg = parse_config(BASE)
    assert cfg.seed == 3 and cfg.data.source == "teacher"
    assert cfg.geometry.patch_count == 4
    assert cfg.n1 == 20 and cfg.alpha == pytest.approx(4.0)
    assert cfg.hyper.beta == np.inf and cfg.hyper.lambda0 == 1.0


def test_fc_geometry_is_a_single_patch():
    cfg = parse_config(BASE.replace("architecture = cnn", "architecture = fc"))
    assert cfg.geometry.patch_count == 1 and cfg.n1 == 5


def test_explicit_alpha_wins():
    assert parse_config(BASE + "alpha = 0.25\n").alpha == 0.25


@pytest.mark.parametrize("extra, match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[train]\nflavour = 1\n", "unknown keys"),
    ("[train]\nsteps = many\n", "steps"),
    ("[train]\nburn_in = 500000\n", "burn_in"),
    ("[train]\ndtype = float16\n", "dtype"),
    ("[scaling]\nmode = guess\n", "mode"),
    ("[sweep]\nchannels = 0, 2\n", "channel"),
    ("[verify]\ninclude_slow = maybe\n", "include_slow"),
    ("[solver]\ndamping = 2\n", "damping"),
])
def test_invalid_settings(extra, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(BASE + extra)


def test_invalid_geometry_and_hyper():
    with pytest.raises(ConfigError, match="geometry"):
        parse_config(BASE.replace("S = 4", "S = 3"))
    with pytest.raises(ConfigError, match="hyper"):
        parse_config(BASE.replace("lambda1 = 2", "lambda1 = -2"))
    with pytest.raises(ConfigError, match="activation"):
        parse_config(BASE.replace("activation = erf", "activation = relu"))


def test_lists_and_pairs():
    cfg = parse_config(BASE + "alphas = 0.5, 1, 2\n[scaling]\nsizes = 10:10, 20:20; 40:40\n"
                              "[sweep]\nchannels = 1,2\nmc_channels = 2\n")
    assert cfg.alphas == (0.5, 1.0, 2.0)
    assert cfg.sizes == ((10, 10), (20, 20), (40, 40))
    assert cfg.channels == (1, 2) and cfg.mc_channels == (2,)


def test_overrides_and_hash():
    cfg = parse_config(BASE)
    a = cfg.with_overrides(seed=9, out="/tmp/x", threads=4)
    assert a.seed == 9 and str(a.out_dir) == "/tmp/x" and a.threads == 4
    assert a.config_hash != cfg.config_hash
    assert cfg.with_overrides(threads=3, out="elsewhere").config_hash == cfg.config_hash
    with pytest.raises(ConfigError):
        cfg.with_overrides(threads=0)


def test_output_directory_precedence(monkeypatch):
    cfg = parse_config(BASE)
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert str(cfg.out_dir) == "results"
    monkeypatch.setenv(OUT_ENV, "/tmp/env-out")
    assert str(cfg.out_dir) == "/tmp/env-out"
    assert str(cfg.with_overrides(out="cli").out_dir) == "cli"
    assert str(parse_config(BASE.replace("seed = 3", "seed = 3\nout = ini")).out_dir) == "ini"


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.ini")
    (tmp_path / "c.ini").write_text(BASE)
    assert load_config(tmp_path / "c.ini").text == BASE


def test_malformed_text():
    with pytest.raises(ConfigError, match="parse"):
        parse_config("no section header\n")
