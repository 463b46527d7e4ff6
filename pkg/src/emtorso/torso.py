"""Torso pseudo-deformation (linear-elastic lifting of the heart motion) and the torso potential."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .fem import FeSpace, tet_quadrature
from .linalg import DirectSolver, SolverError
from .mesh import TORSO, MeshError, TetMesh

INTERFACE = "heart_torso_interface"
EXTERIOR = "torso_ext"


class TorsoError(SolverError):
    pass


@dataclass(frozen=True)
class TorsoParams:
    E: float = 1e3  # Pa, only the ratio to λ matters for the lifting
    nu: float = 0.3
    D_T: float = 0.2  # S/m

    def __post_init__(self):
        if self.E <= 0 or not 0 < self.nu < 0.5 or self.D_T <= 0:
            raise ValueError(f"need E > 0, 0 < nu < 0.5, D_T > 0; got {self}")

    @property
    def lame(self) -> tuple[float, float]:
        """(λ, μ) in the standard convention."""
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        return lam, self.E / (2 * (1 + self.nu))


def elasticity_matrix(space: FeSpace, lam: float, mu: float) -> sp.csr_matrix:
    """P1 vector Laplacian-type stiffness for σ = λ tr(ε) I + 2μ ε, dofs interleaved (3v + i)."""
    G = space.physical_gradients(tet_quadrature(1))[:, 0]  # (nc, 4, 3)
    w = np.abs(space.det) / 6.0
    GG = np.einsum("c,cai,cbj->caibj", w, G, G)  # ∂_i φ_a ∂_j φ_b
    dot = np.einsum("caibi->cab", GG)
    K = (mu * dot[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]
         + mu * np.swapaxes(GG, 2, 4) + lam * GG)
    cd = space.cell_dofs
    ldofs = (3 * cd[:, :, None] + np.arange(3)).reshape(-1, 12)
    rows = np.repeat(ldofs, 12, axis=1).ravel()
    cols = np.tile(ldofs, (1, 12)).ravel()
    n = 3 * space.n_dofs
    return sp.csr_matrix((K.reshape(-1), (rows, cols)), shape=(n, n))


def torso_kinematics(space: FeSpace, d_T: NDArray) -> tuple[NDArray, NDArray]:
    """F_T = I + ∇d_T and J_T per (P1, hence constant) cell; raises on J_T <= 0."""
    G = space.physical_gradients(tet_quadrature(1))[:, 0]
    F = np.eye(3) + np.einsum("cai,caJ->ciJ", d_T[space.cell_dofs], G)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        c = int(np.argmax(J <= 0))
        raise TorsoError(f"torso lifting inverted cell {space.cells[c]} (J_T = {J[c]:.3e}); "
                         "use a larger Poisson ratio or a finer torso mesh near the heart")
    return F, J


def pullback_tensor(F: NDArray, J: NDArray, D: float) -> NDArray:
    """J F⁻¹ D F⁻ᵀ for an isotropic conductivity D."""
    Finv = np.linalg.inv(F)
    return D * J[:, None, None] * Finv @ np.swapaxes(Finv, -1, -2)


class TorsoProblem:
    """P1 lifting and potential solves on the torso region of a combined heart/torso mesh."""

    def __init__(self, mesh: TetMesh, params: TorsoParams = TorsoParams()):
        if not np.any(mesh.regions == TORSO):
            raise MeshError("mesh has no torso region")
        self.mesh, self.params = mesh, params
        self.space = V = FeSpace(mesh, 1, (TORSO,))
        iv = mesh.facet_vertices([INTERFACE])
        ev = mesh.facet_vertices([EXTERIOR])
        if len(iv) == 0 or len(ev) == 0:
            raise MeshError(f"torso needs facets labeled {INTERFACE!r} and {EXTERIOR!r}")
        self.interface_vertices = iv
        self.exterior_vertices = ev
        self.interface = V.vertex_dof[iv]
        self.exterior = V.vertex_dof[ev]
        if np.any(self.interface < 0) or np.any(self.exterior < 0):
            raise MeshError("interface/exterior vertices must belong to torso cells")
        if np.intersect1d(self.interface, self.exterior).size:
            raise MeshError("heart-torso interface touches the external torso surface")
        lam, mu = params.lame
        self.K_el = elasticity_matrix(V, lam, mu)
        fixed_v = np.union1d(self.interface, self.exterior)
        self._el_fixed = (3 * fixed_v[:, None] + np.arange(3)).ravel()
        self._el_free = np.setdiff1d(np.arange(3 * V.n_dofs), self._el_fixed)
        self._el_solver = None
        self._pot_free = np.setdiff1d(np.arange(V.n_dofs), self.interface)
        self._pot_cache: tuple | None = None

    # -- lifting ----------------------------------------------------------------------

    def solve_lifting(self, d_interface: NDArray) -> NDArray:
        """d_T (n_dofs, 3) with d_T = data on the interface and 0 on the exterior."""
        d_interface = np.asarray(d_interface, float).reshape(len(self.interface), 3)
        n = self.space.n_dofs
        x = np.zeros((n, 3))
        x[self.interface] = d_interface
        if not np.any(d_interface):
            return x
        if self._el_solver is None:
            K = self.K_el
            self._el_solver = DirectSolver(K[self._el_free][:, self._el_free])
            self._el_coupling = K[self._el_free][:, self._el_fixed]
        xf = x.ravel()
        xf[self._el_free] = self._el_solver.solve(-(self._el_coupling @ xf[self._el_fixed]))
        return xf.reshape(n, 3)

    def kinematics(self, d_T: NDArray) -> tuple[NDArray, NDArray]:
        return torso_kinematics(self.space, d_T)

    # -- potential --------------------------------------------------------------------

    def potential_matrix(self, F: NDArray | None = None, J: NDArray | None = None) -> sp.csr_matrix:
        if F is None:
            return self.params.D_T * self.space.assemble_stiffness()
        J = np.linalg.det(F) if J is None else J
        if np.any(J <= 0):
            raise TorsoError("non-positive J_T in the torso potential pull-back")
        return self.space.assemble_stiffness(pullback_tensor(F, J, self.params.D_T))

    def solve_potential(self, u_interface: NDArray, F: NDArray | None = None,
                        J: NDArray | None = None) -> NDArray:
        """u_T with u_T = u_e on the interface and insulation on the exterior.

        F is None in static-torso mode; the factorization is then reused across calls.
        """
        key = None if F is None else hash(np.asarray(F).tobytes())
        if self._pot_cache is None or self._pot_cache[0] != key:
            A = self.potential_matrix(F, J)
            free = self._pot_free
            self._pot_cache = (key, DirectSolver(A[free][:, free]), A[free][:, self.interface])
        _, solver, coupling = self._pot_cache
        u = np.zeros(self.space.n_dofs)
        u[self.interface] = u_interface
        u[self._pot_free] = solver.solve(-(coupling @ np.asarray(u_interface, float)))
        return u

    def extract_bspm(self, u_T: NDArray) -> tuple[NDArray, NDArray]:
        """Coordinates and values of u_T at every external-surface vertex."""
        return self.mesh.vertices[self.exterior_vertices], u_T[self.exterior]

    def vertex_values(self, u_T: NDArray) -> NDArray:
        """u_T scattered to mesh vertices (NaN outside the torso)."""
        out = np.full(self.mesh.n_vertices, np.nan)
        out[self.space.dof_vertices] = u_T
        return out
