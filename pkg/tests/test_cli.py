from __future__ import annotations

import numpy as np
import pytest

from emtorso.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from emtorso.ecg import LeadTrace, export_traces, leads_from_electrodes, read_traces

COARSE = "[time]\nt_end = 0.004\ndt_torso = 0.002\n[lv]\nedge = 0.015\n[torso_box]\nedge = 0.04\n"


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(COARSE + "[output]\ncheckpoint_every = 2\n")
    return path


def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_invalid_config_is_a_config_error(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[time]\ndt = 1e-3\ndt_ep = 3e-4\n")
    assert main(["mesh", "--config", str(bad)]) == EXIT_CONFIG


def test_mesh_command(ini, tmp_path, capsys):
    out = tmp_path / "body.msh"
    assert main(["mesh", "--config", str(ini), "--write", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "heart" in text and "torso_ext" in text
    assert out.is_file()


def test_run_snapshot_and_leads(ini, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(ini), "--output-dir", str(out), "--deterministic"]) == EXIT_OK
    assert (out / "leads.csv").is_file()
    snap = tmp_path / "snap.npz"
    assert main(["snapshot", str(out), "--time", "0.002", "--out", str(snap)]) == EXIT_OK
    with np.load(snap) as z:
        assert float(z["t"]) == pytest.approx(0.002)
    rec = tmp_path / "recomputed.csv"
    assert main(["leads", str(out / "bspm.npz"), "--config", str(ini), "--out", str(rec)]) == EXIT_OK
    a, b = read_traces(out / "leads.csv"), read_traces(rec)
    assert np.allclose(a.values, b.values, rtol=1e-12, atol=1e-12)


def test_snapshot_of_empty_directory(tmp_path):
    assert main(["snapshot", str(tmp_path)]) == EXIT_CONFIG


def test_cc_command(tmp_path, capsys, rng):
    phi = rng.standard_normal((9, 30)).cumsum(axis=1)
    tr = LeadTrace(np.arange(30) * 1e-3, leads_from_electrodes(phi))
    export_traces(tr, tmp_path / "a.csv")
    export_traces(tr, tmp_path / "b.csv")
    assert main(["cc", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--label", "self"]) == EXIT_OK
    row = capsys.readouterr().out.splitlines()[1].split()
    assert row[0] == "self" and all(v == "1.00" for v in row[1:])


def test_cc_on_mismatched_sampling(tmp_path):
    phi = np.random.default_rng(0).standard_normal((9, 10))
    export_traces(LeadTrace(np.arange(10) * 1e-3, leads_from_electrodes(phi)), tmp_path / "a.csv")
    export_traces(LeadTrace(np.arange(10) * 2e-3, leads_from_electrodes(phi)), tmp_path / "b.csv")
    assert main(["cc", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == EXIT_CONFIG


def test_solver_failure_exit_code(tmp_path):
    # a pressure far beyond the wall's capacity: the preload cannot be reached
    path = tmp_path / "burst.ini"
    path.write_text(COARSE + "[circulation]\npreload = 8.0\n[solver]\nmax_iter = 3\n")
    assert main(["run", "--config", str(path), "--output-dir", str(tmp_path / "o")]) == EXIT_SOLVER


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["explode"])
