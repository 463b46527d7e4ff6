from __future__ import annotations

import pytest

from emtorso.config import ConfigError, RunConfig, format_config, parse_config, parse_config_text, parse_rows


def test_paper_time_steps_give_two_ep_substeps():
    cfg = parse_config_text("[time]\ndt = 1e-3\ndt_ep = 5e-4\n")
    assert cfg.n_ep == 2
    assert cfg.n_t == 1


def test_non_dividing_ep_step_is_rejected():
    with pytest.raises(ConfigError, match="dt_ep"):
        parse_config_text("[time]\ndt = 1e-3\ndt_ep = 3e-4\n")


def test_non_dividing_torso_step_is_rejected():
    with pytest.raises(ConfigError, match="dt_torso"):
        parse_config_text("[time]\ndt = 1e-3\ndt_torso = 2.5e-3\n")


def test_minimal_file_gets_defaults_and_echoes_them(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[time]\nt_end = 0.1\n")
    cfg = parse_config(path)
    assert cfg.time.t_end == 0.1
    assert cfg.time.dt == RunConfig().time.dt
    assert cfg.activation == RunConfig().activation
    echo = format_config(cfg)
    for section in ("time", "modes", "ep", "activation", "material", "circulation", "torso", "electrodes"):
        assert f"[{section}]" in echo
    assert "Ta_max = 60000.0" in echo
    assert parse_config_text(echo) == cfg


def test_round_trip_preserves_every_value():
    text = ("[ep]\nsigma_m = 1.0, 0.5, 0.25\n[modes]\nheart = static\ninertia = no\n"
            "[fibers]\nscars = 0 0 0 0.01; 0.01 0 0 0.005\n[electrodes]\nV1 = 0.0, 0.1, 0.0\n")
    cfg = parse_config_text(text)
    assert cfg.ep.sigma_m == (1.0, 0.5, 0.25)
    assert cfg.modes.heart == "static" and cfg.modes.inertia is False
    assert cfg.electrodes.V1 == (0.0, 0.1, 0.0)
    assert parse_config_text(format_config(cfg)) == cfg


@pytest.mark.parametrize("text,match", [
    ("[time]\ndtt = 1\n", "unknown key"),
    ("[timing]\ndt = 1\n", "unknown section"),
    ("[time]\ndt = fast\n", "cannot parse"),
    ("[ep]\nsigma_m = 1, 2\n", "expected 3 numbers"),
    ("[modes]\nheart = wobbly\n", "moving"),
    ("[modes]\nmechanics = false\n", "needs mechanics"),
    ("[protocol]\nkind = spiral\n", "kind"),
    ("[fibers]\nscars = 0 0 0\n", "scars"),
    ("[geometry]\nsource = file\nmesh_path = nowhere.msh\n", "mesh_path"),
    ("[activation]\nC_LRV = 2\n", "C_LRV"),
    ("[output]\nvtk_every = -1\n", "cadences"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_keys_are_case_sensitive():
    with pytest.raises(ConfigError):
        parse_config_text("[activation]\nta_max = 1\n")


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/run.ini")


def test_relative_paths_resolve_against_config(tmp_path):
    (tmp_path / "snap.npz").write_bytes(b"")
    path = tmp_path / "run.ini"
    path.write_text("[modes]\nheart = static\nprescribed_displacement = snap.npz\n")
    assert parse_config(path).modes.prescribed_displacement == str(tmp_path / "snap.npz")


def test_parse_rows():
    rows = parse_rows("1 2 3; 4, 5, 6;", 3)
    assert rows.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert parse_rows("", 3).shape == (0, 3)
    with pytest.raises(ValueError):
        parse_rows("1 2", 3)
