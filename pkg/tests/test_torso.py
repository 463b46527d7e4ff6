from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtorso.geometry import spherical_shell
from emtorso.mesh import TORSO, MeshError, single_tet
from emtorso.torso import EXTERIOR, INTERFACE, TorsoError, TorsoParams, TorsoProblem, pullback_tensor

R_IN, R_OUT = 0.02, 0.06


@pytest.fixture(scope="module")
def annulus():
    mesh = spherical_shell(R_IN, R_OUT, level=1, n_layers=3, inner_label=INTERFACE, outer_label=EXTERIOR,
                           region=TORSO)
    return TorsoProblem(mesh, TorsoParams())


def p1_gradients(x):
    """Constant P1 basis gradients (4, 3) and volume of the tet with vertices x (4, 3)."""
    T = np.column_stack([x[1] - x[0], x[2] - x[0], x[3] - x[0]])
    G0 = np.vstack([-np.ones(3), np.eye(3)])
    return G0 @ np.linalg.inv(T), abs(np.linalg.det(T)) / 6


def dense_elasticity(mesh, lam, mu):
    """Voigt B-matrix assembly, one tet at a time."""
    n = mesh.n_vertices
    K = np.zeros((3 * n, 3 * n))
    D = lam * np.outer([1, 1, 1, 0, 0, 0], [1, 1, 1, 0, 0, 0]) + mu * np.diag([2, 2, 2, 1, 1, 1])
    for tet in mesh.tets:
        G, vol = p1_gradients(mesh.vertices[tet])
        B = np.zeros((6, 12))
        for a in range(4):
            gx, gy, gz = G[a]
            B[:, 3 * a:3 * a + 3] = [[gx, 0, 0], [0, gy, 0], [0, 0, gz], [gy, gx, 0], [0, gz, gy], [gz, 0, gx]]
        dofs = (3 * tet[:, None] + np.arange(3)).ravel()
        K[np.ix_(dofs, dofs)] += vol * B.T @ D @ B
    return K


def dense_laplace(vertices, tets, coef=1.0):
    K = np.zeros((len(vertices), len(vertices)))
    for tet in tets:
        G, vol = p1_gradients(vertices[tet])
        K[np.ix_(tet, tet)] += coef * vol * G @ G.T
    return K


def dense_dirichlet_solve(K, fixed, values):
    n = len(K)
    free = np.setdiff1d(np.arange(n), fixed)
    x = np.zeros(n)
    x[fixed] = values
    x[free] = np.linalg.solve(K[np.ix_(free, free)], -K[np.ix_(free, fixed)] @ values)
    return x


def vertex_field(tp, dof_values):
    return dof_values[tp.space.vertex_dof]


# -- lifting -------------------------------------------------------------------------


def test_standard_lame_constants():
    lam, mu = TorsoParams(E=1e3, nu=0.3).lame
    assert lam == pytest.approx(1e3 * 0.3 / (1.3 * 0.4))
    assert mu == pytest.approx(1e3 / 2.6)


@pytest.mark.parametrize("kw", [dict(E=0.0), dict(nu=0.5), dict(nu=0.0), dict(D_T=-1.0)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        TorsoParams(**kw)


def test_zero_interface_motion_gives_zero_lifting(annulus):
    d = annulus.solve_lifting(np.zeros((len(annulus.interface), 3)))
    assert not np.any(d)


def test_lifting_is_linear(annulus, rng):
    data = 1e-3 * rng.standard_normal((len(annulus.interface), 3))
    d1 = annulus.solve_lifting(data)
    d2 = annulus.solve_lifting(2.5 * data)
    assert np.allclose(d2, 2.5 * d1, rtol=1e-12, atol=1e-18)


def test_radial_lifting_matches_dense_oracle_and_decays(annulus):
    tp, mesh = annulus, annulus.mesh
    delta = 1e-3
    xi = mesh.vertices[tp.interface_vertices]
    data = delta * xi / np.linalg.norm(xi, axis=1, keepdims=True)
    d = vertex_field(tp, tp.solve_lifting(data))

    lam, mu = tp.params.lame
    K = dense_elasticity(mesh, lam, mu)
    fixed_v = np.concatenate([tp.interface_vertices, tp.exterior_vertices])
    fixed = (3 * fixed_v[:, None] + np.arange(3)).ravel()
    vals = np.concatenate([data, np.zeros((len(tp.exterior_vertices), 3))]).ravel()
    ref = dense_dirichlet_solve(K, fixed, vals).reshape(-1, 3)
    assert np.abs(d - ref).max() <= 1e-9 * delta

    r = np.linalg.norm(mesh.vertices, axis=1)
    shells = np.unique(np.round(r, 10))
    mags = [np.linalg.norm(d[np.isclose(r, s)], axis=1).mean() for s in shells]
    assert mags[0] == pytest.approx(delta) and mags[-1] == 0.0
    assert np.all(np.diff(mags) < 0)


def test_inverting_lift_is_reported(annulus):
    xi = annulus.mesh.vertices[annulus.interface_vertices]
    d = annulus.solve_lifting(-1.5 * xi)  # pulls the interface through the origin
    with pytest.raises(TorsoError):
        annulus.kinematics(d)


# -- kinematics ----------------------------------------------------------------------


def test_zero_field_kinematics(annulus):
    F, J = annulus.kinematics(np.zeros((annulus.space.n_dofs, 3)))
    assert np.array_equal(F, np.broadcast_to(np.eye(3), F.shape)) and np.all(J == 1.0)


def test_affine_field_gives_exact_gradient(annulus, rng):
    A = 0.1 * rng.standard_normal((3, 3))
    d = annulus.space.dof_coords @ A.T
    F, J = annulus.kinematics(d)
    assert np.abs(F - (np.eye(3) + A)).max() <= 1e-12
    assert np.allclose(J, np.linalg.det(np.eye(3) + A), rtol=1e-12)


def test_small_field_jacobian_to_second_order(annulus, rng):
    base = rng.standard_normal((annulus.space.n_dofs, 3)) * 1e-2
    errs = []
    for eps in (1e-2, 5e-3):
        F, J = annulus.kinematics(eps * base)
        errs.append(np.abs(J - (1 + np.trace(F - np.eye(3), axis1=1, axis2=2))).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


# -- potential -----------------------------------------------------------------------


def test_constant_interface_potential_is_reproduced(annulus):
    u = annulus.solve_potential(np.full(len(annulus.interface), -84.0))
    assert np.abs(u + 84.0).max() <= 1e-10


def test_isotropic_potential_matches_dense_oracle(annulus, rng):
    tp, mesh = annulus, annulus.mesh
    data = rng.uniform(-5, 5, len(tp.interface))
    u = vertex_field(tp, tp.solve_potential(data))
    K = dense_laplace(mesh.vertices, mesh.tets, tp.params.D_T)
    ref = dense_dirichlet_solve(K, tp.interface_vertices, data)
    assert np.abs(u - ref).max() <= 1e-10


def test_affine_pullback_matches_deformed_mesh(annulus, rng):
    tp, mesh = annulus, annulus.mesh
    B = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
    assert np.linalg.det(B) > 0
    data = rng.uniform(-5, 5, len(tp.interface))
    d_T = tp.space.dof_coords @ (B - np.eye(3)).T
    F, J = tp.kinematics(d_T)
    u = vertex_field(tp, tp.solve_potential(data, F, J))
    K = dense_laplace(mesh.vertices @ B.T, mesh.tets, tp.params.D_T)
    ref = dense_dirichlet_solve(K, tp.interface_vertices, data)
    assert np.abs(u - ref).max() <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_potential_obeys_maximum_principle(annulus, seed):
    data = np.random.default_rng(seed).uniform(-90, 40, len(annulus.interface))
    u = annulus.solve_potential(data)
    assert u.min() >= data.min() - 1e-8 and u.max() <= data.max() + 1e-8


def test_pullback_tensor_identity():
    F = np.broadcast_to(np.eye(3), (2, 3, 3))
    assert np.allclose(pullback_tensor(F, np.ones(2), 0.2), 0.2 * np.eye(3))


def test_bspm_extraction(annulus, rng):
    tp = annulus
    x, v = tp.extract_bspm(np.full(tp.space.n_dofs, 3.0))
    assert len(v) == len(tp.exterior_vertices) and x.shape == (len(v), 3)
    assert np.all(v == 3.0)
    u = tp.solve_potential(rng.uniform(-5, 5, len(tp.interface)))
    _, v = tp.extract_bspm(u)
    assert v.max() <= u.max()
    assert np.allclose(np.linalg.norm(x, axis=1), R_OUT)


def test_vertex_values_outside_torso_are_nan(coarse_body):
    tp = TorsoProblem(coarse_body)
    vals = tp.vertex_values(np.zeros(tp.space.n_dofs))
    heart_only = np.setdiff1d(np.arange(coarse_body.n_vertices), tp.space.dof_vertices)
    assert len(heart_only) and np.all(np.isnan(vals[heart_only]))


def test_mesh_without_torso_is_rejected():
    with pytest.raises(MeshError):
        TorsoProblem(single_tet())
