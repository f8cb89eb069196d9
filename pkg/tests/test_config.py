import numpy as np
import pytest

from ionlattice.config import ConfigError, load_config, parse_config, template_config
from ionlattice.lattice import TWO_PI
from ionlattice.protocol import Hold, RampFrequency
from support import PAIR_TOML


@pytest.fixture
def pair_config(tmp_path):
    path = tmp_path / "pair.toml"
    path.write_text(PAIR_TOML)
    return path


def edit(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


def test_inline_config_parses(pair_config):
    cfg = load_config(pair_config)
    assert cfg.seed == 7 and cfg.repetitions == 20 and cfg.engine == "rwa"
    assert len(cfg.lattice) == 2
    assert cfg.reference_frequency == pytest.approx(TWO_PI * 4e6)
    assert cfg.noise.detection_noise == 0.3
    assert cfg.noise.dephasing_corr_time == pytest.approx(100e-6)
    assert np.allclose(cfg.scan.values, np.arange(0, 601, 40))
    assert cfg.final_label == "final" and cfg.fit_model == "exchange"


def test_scan_value_overrides_named_segment(pair_config):
    cfg = load_config(pair_config)
    seq = cfg.build(120.0)
    hold = [s for s in seq.segments if isinstance(s, Hold)]
    assert hold[0].duration == pytest.approx(120e-6)
    tune = [s for s in seq.segments if isinstance(s, RampFrequency)]
    assert tune[0].target == pytest.approx(TWO_PI * 4e6)
    assert tune[1].target == pytest.approx(TWO_PI * 4.1e6)


def test_template_config_and_params():
    cfg = template_config("fig2", tau_us=600.0)
    assert cfg.template.name == "fig2"
    assert cfg.params == {"tau_us": 600.0}
    assert cfg.scan.parameter == cfg.template.sweep
    assert cfg.fit_sites == cfg.template.fit_sites


def test_config_hash_tracks_overrides():
    a = template_config("fig2")
    b = template_config("fig2")
    assert a.config_hash() == b.config_hash()
    b.seed = 1
    assert a.config_hash() != b.config_hash()


@pytest.mark.parametrize("doc, field", [
    ({"template": {"name": "fig2"}}, "schema_version"),
    ({"schema_version": 2, "template": {"name": "fig2"}}, "schema_version"),
    ({"schema_version": 1, "template": {"name": "fig9"}}, "template.name"),
    ({"schema_version": 1, "template": {"name": "fig2", "params": {"bogus": 1}}}, "template.params.bogus"),
    ({"schema_version": 1, "template": {"name": "fig2", "params": {"tau_us": "x"}}}, "template.params.tau_us"),
    ({"schema_version": 1, "template": {"name": "fig2"}, "engine": "euler"}, "engine"),
    ({"schema_version": 1, "template": {"name": "fig2"}, "repetitions": 0}, "repetitions"),
    ({"schema_version": 1, "template": {"name": "fig2"}, "colour": 1}, "<root>"),
    ({"schema_version": 1}, "<root>"),
    ({"schema_version": 1, "template": {"name": "fig2"}, "scan": {"parameter": "n_initial", "start": 1.0}},
     "scan.parameter"),
    ({"schema_version": 1, "template": {"name": "fig2"},
      "scan": {"parameter": "t_hold_us", "start": 10.0, "stop": 0.0}}, "scan"),
    ({"schema_version": 1, "template": {"name": "fig2"},
      "scan": {"parameter": "t_hold_us", "start": 0.0, "stop": 10.0}}, "scan.step"),
    ({"schema_version": 1, "template": {"name": "fig2"}, "fit": {"model": "spline"}}, "fit.model"),
    ({"schema_version": "1", "template": {"name": "fig2"}}, "schema_version"),
])
def test_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError, match=f"^{field.replace('.', '[.]').replace('<', '[<]')}"):
        parse_config(doc)


@pytest.mark.parametrize("old, new, field", [
    ('frequency_mhz = 4.1', 'frequency_mhz = -4.1', "lattice.sites[1]"),
    ('position_um = [33.0, 0.0]', 'position_um = [33.0]', "lattice.sites[1].position_um"),
    ('position_um = [33.0, 0.0]', 'position_um = [0.0, 0.0]', "lattice.sites"),
    ('type = "hold"', 'type = "wait"', "sequence[3].type"),
    ('sites = [0, 1]', 'sites = [0, 5]', "sequence[5]"),
    ('detection_noise = 0.3', 'detection_noise = -0.3', "noise"),
    ('parameter = "hold.duration_us"', 'parameter = "pause.duration_us"', "scan.parameter"),
    ('species = "Mg24"', 'species = "Be9"', "lattice.species"),
])
def test_inline_errors_name_the_field(tmp_path, old, new, field):
    path = tmp_path / "bad.toml"
    path.write_text(edit(PAIR_TOML, old, new))
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert str(info.value).startswith(field)


def test_scan_must_be_a_duration(tmp_path):
    text = edit(PAIR_TOML, 'parameter = "hold.duration_us"', 'parameter = "tune.target_offset_khz"')
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(ConfigError, match="scan.parameter"):
        load_config(path)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("schema_version = = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_sweep_axis_and_single_point_scan():
    cfg = parse_config({
        "schema_version": 1, "template": {"name": "fig2"},
        "scan": {"parameter": "t_hold_us", "start": 100.0},
        "sweep": {"parameter": "tau_us", "start": 400.0, "stop": 800.0, "step": 200.0},
    })
    assert list(cfg.scan.values) == [100.0]
    assert list(cfg.sweep.values) == [400.0, 600.0, 800.0]


def test_validate_options_parsed():
    cfg = parse_config({"schema_version": 1, "template": {"name": "fig2"},
                        "validate": {"c_slow": 5, "enforce_grid": True, "grid_khz": 0.5}})
    assert cfg.validate_options == {"c_slow": 5.0, "enforce_grid": True, "grid": pytest.approx(TWO_PI * 500)}
