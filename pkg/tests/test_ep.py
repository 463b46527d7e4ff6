from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtorso.ep import (VT_TIMES, EpParams, EpProblem, ExtracellularSolver, Stimulus, StimulusProtocol,
                        activation_times, assemble_diffusion, diffusion_tensor, evaluate_stimulus,
                        resting_ep_state, step_monodomain, vt_protocol)
from emtorso.fem import FeSpace
from emtorso.fibers import FRAME_QUADRATURE, uniform_microstructure
from emtorso.mesh import HEART, TetMesh, box_mesh, two_tets


def _iso(s=0.3):
    return EpParams(sigma_i=(s, s, s), sigma_e=(s, s, s))


def _rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


@pytest.fixture(scope="module")
def box():
    m = box_mesh((3, 2, 2), (0.006, 0.004, 0.004))
    return m, FeSpace(m, 2, (HEART,))


def test_identity_isotropic_equals_plain_stiffness(box):
    m, V = box
    micro = uniform_microstructure(m)
    p = _iso()
    K = assemble_diffusion(V, micro, p)
    K0 = float(p.sigma_m[0]) * V.assemble_stiffness(quad=FRAME_QUADRATURE)
    assert abs(K - K0).max() <= 1e-12 * abs(K0).max()
    assert np.abs(K @ np.ones(V.n_dofs)).max() <= 1e-10 * abs(K).max()


def test_uniform_dilation_doubles_operator(box):
    m, V = box
    micro = uniform_microstructure(m, f=(1, 1, 0), s=(-1, 1, 0), n=(0, 0, 1))
    p = EpParams()
    K1 = assemble_diffusion(V, micro, p)
    F = np.broadcast_to(2 * np.eye(3), (V.n_cells, 3, 3))
    K2 = assemble_diffusion(V, micro, p, F, np.full(V.n_cells, 8.0))
    assert abs(K2 - 2 * K1).max() <= 1e-12 * abs(K1).max()


def test_zero_mu_region_decouples():
    m = box_mesh((4, 1, 1), (0.004, 0.001, 0.001))
    mu = np.where(m.vertices[:, 0] < 0.0015, 1.0, 0.0)
    micro = uniform_microstructure(m, mu=mu)
    V = FeSpace(m, 1, (HEART,))
    K = assemble_diffusion(V, micro, EpParams()).tocsr()
    dead_cells = np.all(mu[m.tets] == 0, axis=1)
    alive_dofs = np.unique(V.cell_dofs[~dead_cells])
    only_dead = np.setdiff1d(np.arange(V.n_dofs), alive_dofs)
    assert len(only_dead) > 0
    assert abs(K[only_dead]).max() == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pullback_equals_deformed_mesh_assembly(seed):
    rng = np.random.default_rng(seed)
    m = box_mesh((2, 2, 1), (1e-3, 1e-3, 5e-4))
    F = _rotation(rng) @ (np.eye(3) + 0.3 * rng.uniform(-1, 1, (3, 3)))
    if np.linalg.det(F) <= 0.2:
        F = np.eye(3) + 0.1 * np.diag(rng.uniform(0, 1, 3))
    f, s = rng.normal(size=3), rng.normal(size=3)
    s -= (s @ f) / (f @ f) * f
    micro = uniform_microstructure(m, f, s, np.cross(f, s))
    p = EpParams()
    V = FeSpace(m, 1, (HEART,))
    Fc = np.broadcast_to(F, (V.n_cells, 3, 3))
    K_ref = assemble_diffusion(V, micro, p, Fc)
    # same tensor assembled directly on the mapped mesh
    md = TetMesh(m.vertices @ F.T, m.tets, m.facets, m.facet_labels, m.regions)
    Vd = FeSpace(md, 1, (HEART,))
    a = np.stack([micro.f0[0, 0], micro.s0[0, 0], micro.n0[0, 0]])
    Fa = a @ F.T
    Fa /= np.linalg.norm(Fa, axis=1, keepdims=True)
    D = np.einsum("d,di,dj->ij", p.sigma_m, Fa, Fa)
    K_def = Vd.assemble_stiffness(np.broadcast_to(D, (Vd.n_cells, 3, 3)), FRAME_QUADRATURE)
    assert abs(K_ref - K_def).max() <= 1e-10 * abs(K_def).max()
    assert abs(K_ref - K_ref.T).max() <= 1e-12 * abs(K_ref).max()


def test_nonpositive_det_rejected(box):
    m, V = box
    F = np.broadcast_to(np.diag([1.0, 1.0, -1.0]), (V.n_cells, 3, 3))
    with pytest.raises(ValueError, match="cell"):
        diffusion_tensor(V, uniform_microstructure(m), EpParams(), F)


def test_rest_is_preserved(box):
    m, V = box
    prob = EpProblem.build(V, uniform_microstructure(m))
    st = resting_ep_state(prob.model, V.n_dofs)
    for _ in range(4):
        st = step_monodomain(st, 5e-4, np.zeros(V.n_dofs), prob.ops, prob.model, prob.params)
    assert np.abs(st.u - prob.model.resting_state()[0]).max() <= 1e-9 * 4


def test_no_spread_without_conduction():
    m = box_mesh((10, 1, 1), (0.01, 0.001, 0.001))
    V = FeSpace(m, 1, (HEART,))
    prob = EpProblem.build(V, uniform_microstructure(m, mu=np.zeros(m.n_vertices)))
    # μ ≡ 0 makes the whole slab passive: kinetics are off on dofs touching no conducting heart cell
    prot = StimulusProtocol((Stimulus((0.0, 0.0, 0.0), 5e-4, 0.4, 0.0, 2e-3),))
    at = activation_times(prob, prot, 0.02, 5e-4, stop_when_done=False)
    far = V.dof_coords[:, 0] > 3e-3
    assert np.all(np.isinf(at[far]))


def test_focal_wave_propagates_and_is_monotone():
    m = box_mesh((20, 1, 1), (0.02, 0.001, 0.001))
    V = FeSpace(m, 2, (HEART,))
    prob = EpProblem.build(V, uniform_microstructure(m))
    prot = StimulusProtocol((Stimulus((0.0, 0.0, 0.0), 4e-3, 0.4, 0.0, 2e-3),))
    at = activation_times(prob, prot, 0.08, 5e-4)
    x = V.dof_coords[:, 0]
    assert np.all(np.isfinite(at))
    planes = np.unique(np.round(x[x > 4e-3], 9))
    mean_at = [at[np.isclose(x, p)].mean() for p in planes]
    assert np.all(np.diff(mean_at) > 0)


# -- extracellular -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    m = two_tets(1e-3)
    V = FeSpace(m, 2, (HEART,))
    micro = uniform_microstructure(m, f=(1, 0.2, 0), s=(-0.2, 1, 0), n=(0, 0, 1))
    return V, micro, EpParams()


def test_extracellular_matches_dense_pseudo_inverse(toy):
    V, micro, p = toy
    u = 1e3 * (V.dof_coords @ np.array([1.0, -2.0, 0.5]))
    ue = ExtracellularSolver(V, micro, p).solve(u)
    A = assemble_diffusion(V, micro, p, which="intra_plus_extra").toarray()
    Ai = assemble_diffusion(V, micro, p, which="intra").toarray()
    x = np.linalg.pinv(A) @ (-(Ai @ u))
    ml = V.lumped_mass()
    x -= (ml @ x) / ml.sum()
    assert np.abs(ue - x).max() <= 1e-10 * max(1.0, np.abs(x).max())


def test_extracellular_constant_and_zero(toy):
    V, micro, p = toy
    solver = ExtracellularSolver(V, micro, p)
    assert np.all(solver.solve(np.full(V.n_dofs, -80.0)) == 0.0)
    assert np.all(solver.solve(np.zeros(V.n_dofs)) == 0.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2 ** 31 - 1))
def test_extracellular_linear_in_u(alpha, seed):
    m = box_mesh((2, 2, 1), (2e-3, 2e-3, 1e-3))
    V = FeSpace(m, 1, (HEART,))
    solver = ExtracellularSolver(V, uniform_microstructure(m), EpParams())
    u = np.random.default_rng(seed).normal(size=V.n_dofs)
    a, b = solver.solve(u), solver.solve(alpha * u)
    assert np.allclose(b, alpha * a, rtol=1e-8, atol=1e-10 * np.abs(a).max())
    ml = V.lumped_mass()
    assert abs(ml @ a) <= 1e-12 * np.abs(a).max() * ml.sum()
    assert solver.last_residual <= 1e-8


def test_extracellular_on_lv_with_caps(lv_mesh):
    from emtorso.fibers import build_microstructure
    from emtorso.mesh import CAPS

    V = FeSpace(lv_mesh, 2, (HEART, CAPS))
    micro = build_microstructure(lv_mesh)
    solver = ExtracellularSolver(V, micro, EpParams())
    u = np.where(V.dof_coords[:, 2] < -0.03, 20.0, -80.0)
    ue = solver.solve(u)
    assert np.all(np.isfinite(ue))
    assert solver.last_residual <= 1e-8
    assert abs(V.lumped_mass() @ ue) <= 1e-10 * np.abs(ue).max() * V.lumped_mass().sum()


# -- stimulus ------------------------------------------------------------------------------


def test_stimulus_examples():
    prot = vt_protocol((0.0, 0.0, 0.0), radius=1e-2, amplitude=0.4, duration=2e-3)
    x = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]])
    assert np.all(evaluate_stimulus(prot, -1e-3, x) == 0.0)
    on = evaluate_stimulus(prot, 0.0, x)
    assert on[0] == 0.4 and on[1] == pytest.approx(0.4 * np.exp(-1.0), rel=1e-14)
    for t0 in VT_TIMES:
        assert evaluate_stimulus(prot, t0, x)[0] == 0.4
        assert evaluate_stimulus(prot, t0 + 1.999e-3, x)[0] == 0.4
        assert evaluate_stimulus(prot, t0 + 2e-3, x)[0] == 0.0
    assert evaluate_stimulus(prot, 0.3, x)[0] == 0.0
    assert prot.start_times == [0.0, 0.45, 0.75, 1.02]
