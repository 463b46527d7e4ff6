from __future__ import annotations

import numpy as np
import pytest

from emtorso.config import parse_config_text
from emtorso.ecg import LEADS, read_traces
from emtorso.mesh import MeshError
from emtorso.simulator import (PrescribedDisplacement, Simulation, extract_static_snapshot, restore_checkpoint,
                               run_simulation, save_checkpoint, state_hash)

COARSE = """
[time]
t_end = {t_end}
dt_torso = 0.002
[lv]
edge = 0.015
[torso_box]
edge = 0.04
"""


def config(t_end=0.006, extra=""):
    return parse_config_text(COARSE.format(t_end=t_end) + extra)


@pytest.fixture(scope="module")
def body(coarse_body):
    return coarse_body


def test_restart_from_checkpoint_is_bit_identical(body, tmp_path):
    cfg = config()
    sim = Simulation(cfg, body)
    st = sim.initial_state()
    for _ in range(3):
        st = sim.step(st)
    path = save_checkpoint(tmp_path / "c.npz", sim, st)
    ref = st
    for _ in range(3):
        ref = sim.step(ref)

    sim2 = Simulation(cfg, body)
    st2 = restore_checkpoint(path, sim2)
    for _ in range(3):
        st2 = sim2.step(st2)
    assert st2.step == ref.step
    assert state_hash(st2) == state_hash(ref)
    assert np.array_equal(st2.act.SL, ref.act.SL)


def test_restore_on_other_mesh_fails(body, tmp_path):
    cfg = config()
    sim = Simulation(cfg, body)
    path = save_checkpoint(tmp_path / "c.npz", sim, sim.initial_state())
    other = Simulation(parse_config_text(COARSE.format(t_end=0.006).replace("edge = 0.015", "edge = 0.02")))
    with pytest.raises(MeshError):
        restore_checkpoint(path, other)


def test_run_writes_outputs_and_cadence(body, tmp_path):
    cfg = config(extra="[output]\ncheckpoint_every = 2\nbspm_every = 1\n")
    res = run_simulation(cfg, tmp_path, mesh=body)
    names = sorted(p.name for p in tmp_path.glob("checkpoint_*.npz"))
    assert names == [f"checkpoint_{k:07d}.npz" for k in (0, 2, 4, 6)]
    trace = read_traces(tmp_path / "leads.csv")
    assert np.allclose(trace.times, [0.002, 0.004, 0.006])
    v = trace.values
    assert np.abs(v[LEADS.index("I")] + v[LEADS.index("III")] - v[LEADS.index("II")]).max() <= 1e-12
    for name in ("config_used.ini", "circulation.csv", "bspm.npz", "bspm.csv", "activation_times.npy"):
        assert (tmp_path / name).is_file()
    assert parse_config_text((tmp_path / "config_used.ini").read_text()) == cfg
    assert res.state.step == 6


def test_snapshot_at_rest_start_is_zero(body, tmp_path):
    cfg = config(t_end=0.004, extra="[circulation]\npreload = 1.0\n[output]\ncheckpoint_every = 1\n")
    run_simulation(cfg, tmp_path, mesh=body)
    snap = extract_static_snapshot(tmp_path, 0.0)
    assert snap.t == 0.0 and not np.any(snap.d)
    later = extract_static_snapshot(tmp_path, 0.0031)
    assert later.t == pytest.approx(0.003) and np.any(later.d)
    # halfway between two checkpoints the earlier one wins, every time
    assert extract_static_snapshot(tmp_path, 0.0025).t == pytest.approx(0.002)
    assert extract_static_snapshot(tmp_path, 0.0025).t == pytest.approx(0.002)


def test_snapshot_without_checkpoints(tmp_path):
    with pytest.raises(FileNotFoundError):
        extract_static_snapshot(tmp_path, 0.1)


def test_static_heart_keeps_prescribed_deformation(body, tmp_path):
    d = 1e-3 * body.vertices * np.array([1.0, 1.0, -0.5])
    PrescribedDisplacement(d, body.fingerprint(), 0.15).save(tmp_path / "snap.npz")
    cfg = config(extra=f"[modes]\nheart = static\nprescribed_displacement = {tmp_path / 'snap.npz'}\n")
    sim = Simulation(cfg, body)
    st = sim.initial_state()
    F0, J0 = (a.copy() for a in sim.heart_deformation())
    assert not np.allclose(F0, np.eye(3))
    for _ in range(4):
        st = sim.step(st)
        F, J = sim.heart_deformation()
        assert np.array_equal(F, F0) and np.array_equal(J, J0)
    assert np.any(st.mech.d != 0)  # mechanics still runs behind the static heart


def test_prescribed_displacement_from_other_mesh_fails(body, tmp_path):
    PrescribedDisplacement(np.zeros((3, 3)), "feed", 0.0).save(tmp_path / "bad.npz")
    cfg = config(extra=f"[modes]\nheart = static\nprescribed_displacement = {tmp_path / 'bad.npz'}\n")
    with pytest.raises(MeshError):
        Simulation(cfg, body)


def test_pure_ep_pipeline_has_no_mechanics(body):
    cfg = config(extra="[modes]\nheart = static\nmechanics = false\n")
    sim = Simulation(cfg, body)
    st = sim.initial_state()
    st = sim.step(sim.step(st))
    assert st.mech is None and st.circ is None and st.act is None
    assert len(sim.leads.trace().times) == 1
