"""Finite-strain active-stress mechanics of the heart/caps body on P1 tets.

Boundary conditions: generalized Robin springs on the epicardium, follower pressure on
each chamber's endocardium (including its cap), and the base traction that balances the
pressure load on the open endocardium. Time discretization is BDF1; quasi-static with rho = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .fem import FeSpace
from .fibers import FRAME_QUADRATURE, MicrostructureField
from .linalg import DirectSolver, SolverError
from .mesh import CAPS, HEART, TetMesh

I3 = np.eye(3)


class MechanicsError(SolverError):
    """Newton or line-search failure in the mechanics solve."""


@dataclass(frozen=True)
class MaterialParams:
    kappa: float = 5e4  # Pa
    a: float = 880.0  # Pa
    b_ff: float = 8.0
    b_ss: float = 6.0
    b_fs: float = 12.0
    b_fn: float = 3.0
    b_sn: float = 3.0
    b_nn: float = 0.0
    rho: float = 1000.0  # kg/m³
    n_f: float = 1.0
    n_n: float = 0.0
    cap_a: float = 880.0  # isotropic exponential law in the caps
    cap_b: float = 5.0

    def __post_init__(self):
        if self.kappa <= 0 or self.a <= 0 or self.cap_a <= 0:
            raise ValueError("kappa, a and cap_a must be positive")
        if not 0 < self.n_f <= 1 or not 0 <= self.n_n < 1:
            raise ValueError("need n_f in (0, 1] and n_n in [0, 1)")
        if self.rho < 0:
            raise ValueError("density must be non-negative")

    @property
    def B(self) -> NDArray:
        return np.array([[self.b_ff, self.b_fs, self.b_fn],
                         [self.b_fs, self.b_ss, self.b_sn],
                         [self.b_fn, self.b_sn, self.b_nn]])

    @property
    def B_cap(self) -> NDArray:
        return np.full((3, 3), self.cap_b)


@dataclass(frozen=True)
class RobinParams:
    K_perp: float = 2e5  # Pa/m
    K_par: float = 2e4
    C_perp: float = 2e4  # Pa s/m
    C_par: float = 2e3


# -- constitutive law ------------------------------------------------------------------


def stiffness_scale(a: float, mu) -> NDArray:
    """ã = a [μ + 4.56 (1 - μ)]: scar tissue is stiffer."""
    mu = np.asarray(mu, float)
    return a * (mu + (1 - mu) * 4.56)


def _det_check(J):
    if np.any(J <= 0):
        raise ValueError(f"non-positive det F at {int(np.argmax(J <= 0))}")


def _strain_local(F, frame):
    E = 0.5 * (np.swapaxes(F, -1, -2) @ F - I3)
    return E, np.swapaxes(frame, -1, -2) @ E @ frame


def guccione_energy(F, frame, mu, params: MaterialParams, B=None, a_tilde=None) -> NDArray:
    """Strain energy density (Pa). ``frame`` has columns (f0, s0, n0)."""
    F = np.asarray(F, float)
    J = np.linalg.det(F)
    _det_check(J)
    B = params.B if B is None else B
    at = stiffness_scale(params.a, mu) if a_tilde is None else a_tilde
    _, El = _strain_local(F, frame)
    Q = np.einsum("...ab,...ab->...", B * El, El)
    return 0.5 * params.kappa * (J - 1) * np.log(J) + 0.5 * at * np.expm1(Q)


def _sym_diag9(B):
    """½ B_ab (δ_ac δ_bd + δ_ad δ_bc) as 9x9 matrices [(a, b), (c, d)]."""
    B = np.asarray(B, float)
    eye = np.eye(3)
    out = 0.5 * B[..., :, :, None, None] * (eye[:, None, :, None] * eye[None, :, None, :]
                                            + eye[:, None, None, :] * eye[None, :, :, None])
    return out.reshape(B.shape[:-2] + (9, 9))


def _active_dir(F, v):
    Fv = np.einsum("...ij,...j->...i", F, v)
    I4 = np.einsum("...i,...i->...", Fv, Fv)
    return Fv, I4


def stress_and_tangent(F, frame, a_tilde, B, Ta, params: MaterialParams, tangent: bool = True):
    """First Piola-Kirchhoff stress and its derivative dP_iJ/dF_kL (shape (...,3,3,3,3))."""
    F = np.asarray(F, float)
    J = np.linalg.det(F)
    _det_check(J)
    Finv = np.linalg.inv(F)
    E, El = _strain_local(F, frame)
    BE = B * El
    Q = np.einsum("...ab,...ab->...", BE, El)
    eQ = np.exp(Q)
    M = frame @ BE @ np.swapaxes(frame, -1, -2)
    c = (a_tilde * eQ)[..., None, None]
    S = c * M
    g = 0.5 * params.kappa * (J * np.log(J) + J - 1)
    FinvT = np.swapaxes(Finv, -1, -2)
    P = F @ S + g[..., None, None] * FinvT
    f0, n0 = frame[..., :, 0], frame[..., :, 2]
    Ta = np.asarray(Ta, float)
    act = []
    for frac, v in ((params.n_f, f0), (params.n_n, n0)):
        if frac == 0:
            continue
        Fv, I4 = _active_dir(F, v)
        s = (Ta * frac)[..., None, None] / np.sqrt(I4)[..., None, None]
        P = P + s * np.einsum("...i,...j->...ij", Fv, v)
        act.append((frac, v, Fv, I4))
    if not tangent:
        return P, None
    # work with 9x9 matrices indexed [(i, J), (k, L)]
    lead = F.shape[:-2]
    # local-frame tangent c [sym(diag B) + 2 M_l⊗M_l], then
    # F_iI C_IJLN F_kN = K C_l Kᵀ with K = kron(F R, R) (C symmetrized in its last pair)
    Bsym = _sym_diag9(B)
    Ml = (BE + np.swapaxes(BE, -1, -2)).reshape(lead + (9,)) * np.sqrt(0.5)
    C = c * (Bsym + Ml[..., :, None] * Ml[..., None, :])
    FR = F @ frame
    K = (FR[..., :, None, :, None] * frame[..., None, :, None, :]).reshape(lead + (9, 9))
    A = K @ C @ np.swapaxes(K, -1, -2)
    A += (I3[:, None, :, None] * S[..., None, :, None, :]).reshape(lead + (9, 9))
    dg = 0.5 * params.kappa * (np.log(J) + 2)
    FiT = np.swapaxes(Finv, -1, -2)  # [i, J] = Finv_Ji
    fv = FiT.reshape(lead + (9,))
    A += (dg * J)[..., None, None] * fv[..., :, None] * fv[..., None, :]
    # d(F⁻ᵀ)_iJ / dF_kL = -Finv_Jk Finv_Li
    A -= g[..., None, None] * (FiT[..., :, None, None, :] * Finv[..., None, :, :, None]).reshape(lead + (9, 9))
    for frac, v, Fv, I4 in act:
        sq = np.sqrt(I4)
        t = Ta * frac
        vv = v[..., :, None] * v[..., None, :]
        A += (t / sq)[..., None, None] * (I3[:, None, :, None] * vv[..., None, :, None, :]).reshape(lead + (9, 9))
        wv = (Fv[..., :, None] * v[..., None, :]).reshape(lead + (9,))
        A -= (t / sq ** 3)[..., None, None] * wv[..., :, None] * wv[..., None, :]
    A = A.reshape(lead + (3, 3, 3, 3))
    return P, A


def piola_stress(F, Ta, frame, mu, params: MaterialParams) -> NDArray:
    at = stiffness_scale(params.a, mu)
    P, _ = stress_and_tangent(F, frame, at, params.B, Ta, params, tangent=False)
    return P


# -- surfaces ----------------------------------------------------------------------------


def _skew(e):
    """Matrices [e]x with [e]x v = e × v, shape (..., 3, 3)."""
    z = np.zeros(e.shape[:-1])
    return np.stack([np.stack([z, -e[..., 2], e[..., 1]], -1),
                     np.stack([e[..., 2], z, -e[..., 0]], -1),
                     np.stack([-e[..., 1], e[..., 0], z], -1)], -2)


def _area_vectors(y, tris):
    p = y[tris]
    return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p


def _area_vector_derivs(p):
    """d a_f / d y_j for the three facet vertices: 0.5 [e_j]x, (nf, 3, 3, 3)."""
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    return 0.5 * _skew(e)


def chamber_volume(y: NDArray, tris: NDArray, b, h=(1.0, 0.0, 0.0)) -> float:
    """Volume enclosed by a closed surface whose facets are oriented out of the solid (into
    the cavity), via the divergence of h (h·(x - b)); exact for polyhedral cavities."""
    a, p = _area_vectors(y, tris)
    h = np.asarray(h, float) / np.linalg.norm(h)
    cen = p.mean(1) - np.asarray(b, float)
    return float(-np.sum((cen @ h) * (a @ h)))


def chamber_volume_gradient(y: NDArray, tris: NDArray, b, h=(1.0, 0.0, 0.0)) -> NDArray:
    """dV/dy per vertex, (n_vertices, 3)."""
    a, p = _area_vectors(y, tris)
    h = np.asarray(h, float) / np.linalg.norm(h)
    cen = p.mean(1) - np.asarray(b, float)
    dA = _area_vector_derivs(p)  # (nf, j, 3, 3)
    hc, ha = cen @ h, a @ h
    gj = -(ha[:, None, None] * h / 3 + hc[:, None, None] * np.einsum("i,fjik->fjk", h, dA))
    out = np.zeros_like(y)
    np.add.at(out, tris, gj)
    return out


@dataclass(frozen=True)
class Chamber:
    """A 3D cavity: pressure surfaces (endocardium + cap), the open endocardium used for the
    base direction, and the volume reference point/direction."""

    name: str
    surface_labels: tuple[str, ...]
    endo_labels: tuple[str, ...]
    b: tuple[float, float, float]
    h: tuple[float, float, float] = (1.0, 0.0, 0.0)


def lv_chamber(b) -> Chamber:
    return Chamber("LV", ("endo_LV", "cap_endo_LV"), ("endo_LV",), tuple(b))


# -- the mechanics problem ----------------------------------------------------------------


@dataclass
class MechState:
    d: NDArray  # (n, 3) displacement at tⁿ
    d_prev: NDArray  # at tⁿ⁻¹
    d_prev2: NDArray | None = None

    @classmethod
    def rest(cls, n: int) -> "MechState":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)))

    def advanced(self, d_new: NDArray) -> "MechState":
        return MechState(d_new.copy(), self.d.copy(), self.d_prev.copy())

    def copy(self) -> "MechState":
        return MechState(self.d.copy(), self.d_prev.copy(), None if self.d_prev2 is None else self.d_prev2.copy())


@dataclass
class NewtonReport:
    iterations: int
    residuals: list = field(default_factory=list)
    volume_errors: list = field(default_factory=list)


class MechanicsProblem:
    """Residual and consistent tangent of the BDF1 weak form on the heart/caps P1 space.

    Displacements are (n, 3) arrays over ``space`` dofs (vertex order of ``space.dof_vertices``).
    """

    def __init__(self, mesh: TetMesh, micro: MicrostructureField, material: MaterialParams | None = None,
                 robin: RobinParams | None = None, chambers: tuple[Chamber, ...] = (), dt: float = 1e-3,
                 quasi_static: bool = False):
        self.mesh = mesh
        self.material = material or MaterialParams()
        self.robin = robin or RobinParams()
        self.dt = dt
        self.rho = 0.0 if quasi_static else self.material.rho
        self.space = V = FeSpace(mesh, 1, (HEART, CAPS))
        if not np.array_equal(V.cells, micro.cells):
            raise ValueError("microstructure does not match the heart/caps cells")
        self.micro = micro
        self.n = V.n_dofs
        self.X = V.dof_coords
        q = FRAME_QUADRATURE
        self.G = V.physical_gradients(q)  # (nc, nq, 4, 3)
        self.wdet = np.abs(V.det)[:, None] * q.weights[None]
        self.lam = np.column_stack([1 - q.points.sum(1), q.points])  # (nq, 4)
        tets = mesh.tets[V.cells]
        self.is_cap = mesh.regions[V.cells] == CAPS
        mu_q = np.einsum("qa,ca->cq", self.lam, micro.mu[tets])
        m = self.material
        self.a_tilde = np.where(self.is_cap[:, None], m.cap_a, stiffness_scale(m.a, mu_q))
        self.B = np.where(self.is_cap[:, None, None, None], m.B_cap, m.B)
        self.B = np.broadcast_to(self.B, (V.n_cells, q.n, 3, 3))
        self.frame = micro.frame
        cd = V.cell_dofs
        self.ldofs = (3 * cd[:, :, None] + np.arange(3)).reshape(-1, 12)
        self._pattern = None
        self._Bm = None
        self.M = sp.kron(V.assemble_mass(), sp.eye(3), format="csr") if self.rho > 0 else None
        self._setup_surfaces(chambers)

    def _tris(self, labels):
        tris, _ = self.mesh.labeled_facets(labels)
        if len(tris) == 0:
            return np.zeros((0, 3), np.int64)
        return self.space.vertex_dof[tris]

    def _setup_surfaces(self, chambers):
        self.chambers = tuple(chambers)
        for ch in self.chambers:
            if len(self._tris(ch.surface_labels)) == 0:
                raise ValueError(f"chamber {ch.name} has no pressure facets {ch.surface_labels}")
        self.epi = self._tris(["epi"])
        a, _ = _area_vectors(self.X, self.epi)
        area = np.linalg.norm(a, axis=1)
        N = a / area[:, None]
        NN = np.einsum("fi,fj->fij", N, N)
        r = self.robin
        # traction P N = K d + C ḋ with K = K_par(N⊗N - I) - K_perp N⊗N
        self.K_epi = r.K_par * (NN - I3) - r.K_perp * NN
        self.C_epi = r.C_par * (NN - I3) - r.C_perp * NN
        self.epi_area = area
        self.base = self._tris(["base"])
        self.surf = [self._tris(ch.surface_labels) for ch in self.chambers]
        self.endo = [self._tris(ch.endo_labels) for ch in self.chambers]

    # -- helpers --------------------------------------------------------------------

    def _csr(self, local: NDArray) -> sp.csr_matrix:
        n = 3 * self.n
        if self._pattern is None:
            r = np.repeat(self.ldofs, 12, axis=1).ravel()
            c = np.tile(self.ldofs, (1, 12)).ravel()
            keys, inv = np.unique(r * n + c, return_inverse=True)
            rows, cols = np.divmod(keys, n)
            self._pattern = (inv, cols, np.searchsorted(rows, np.arange(n + 1)))
        inv, cols, indptr = self._pattern
        data = np.bincount(inv, weights=local.ravel(), minlength=len(cols))
        return sp.csr_matrix((data, cols.copy(), indptr.copy()), shape=(n, n))

    def deformation_gradient(self, d: NDArray) -> NDArray:
        """F at the frame quadrature points, (nc, nq, 3, 3)."""
        return I3 + np.einsum("cbi,cqbJ->cqiJ", d[self.space.cell_dofs], self.G)

    def cell_F(self, d: NDArray) -> NDArray:
        """Per-cell F (constant on P1 tets), (nc, 3, 3)."""
        return self.deformation_gradient(d)[:, 0]

    def min_jacobian(self, d: NDArray) -> float:
        return float(np.linalg.det(self.cell_F(d)).min())

    def quad_values(self, nodal: NDArray) -> NDArray:
        return np.einsum("qa,ca->cq", self.lam, nodal[self.space.cell_dofs])

    def chamber_volumes(self, d: NDArray) -> NDArray:
        y = self.X + d
        return np.array([chamber_volume(y, t, ch.b, ch.h) for t, ch in zip(self.surf, self.chambers)])

    def volume_gradients(self, d: NDArray) -> NDArray:
        y = self.X + d
        return np.array([chamber_volume_gradient(y, t, ch.b, ch.h).ravel()
                         for t, ch in zip(self.surf, self.chambers)])

    def v_base(self, d: NDArray) -> NDArray:
        y = self.X + d
        out = []
        for t in self.endo:
            a, _ = _area_vectors(y, t)
            out.append(a.sum(0) / np.linalg.norm(a, axis=1).sum())
        return np.array(out).reshape(-1, 3)

    # -- residual ---------------------------------------------------------------------

    def pressure_loads(self, d: NDArray, vb: NDArray | None = None) -> NDArray:
        """∂R/∂p_i for each chamber, (n_ch, 3n) with v_base frozen."""
        y = self.X + d
        vb = self.v_base(d) if vb is None else vb
        ab, _ = _area_vectors(y, self.base)
        abn = np.linalg.norm(ab, axis=1)
        out = []
        for i, t in enumerate(self.surf):
            g = np.zeros((self.n, 3))
            a, _ = _area_vectors(y, t)
            np.add.at(g, t, np.repeat(a[:, None] / 3, 3, axis=1))
            if len(self.base):
                np.add.at(g, self.base, np.repeat((-abn[:, None] * vb[i] / 3)[:, None], 3, axis=1))
            out.append(g.ravel())
        return np.array(out).reshape(len(self.surf), 3 * self.n)

    def residual(self, d: NDArray, state: MechState, Ta: NDArray, pressures, tangent: bool = True,
                 vb: NDArray | None = None):
        """Residual vector (3n,) and tangent (csr) at displacement d (n, 3).

        ``Ta`` is nodal active tension on the space dofs; ``pressures`` one value per chamber (Pa).
        """
        pressures = np.asarray(pressures, float).reshape(-1)
        if len(pressures) != len(self.chambers):
            raise ValueError(f"expected {len(self.chambers)} pressures, got {len(pressures)}")
        F = self.deformation_gradient(d)
        Jq = np.linalg.det(F)
        if np.any(Jq <= 0):
            raise MechanicsError(f"non-positive det F in cell {self.space.cells[np.argwhere(Jq <= 0)[0, 0]]}")
        Ta_q = np.where(self.is_cap[:, None], 0.0, self.quad_values(Ta))
        with np.errstate(over="ignore", invalid="ignore"):
            P, A = stress_and_tangent(F, self.frame, self.a_tilde, self.B, Ta_q, self.material, tangent)
        if not np.all(np.isfinite(P)) or (A is not None and not np.all(np.isfinite(A))):
            raise MechanicsError("stress overflow: strain far outside the material law's range")
        fl = np.einsum("cq,cqiJ,cqbJ->cbi", self.wdet, P, self.G)
        R = np.zeros((self.n, 3))
        np.add.at(R, self.space.cell_dofs, fl)
        R = R.ravel()
        Kt = None
        if tangent:
            if self._Bm is None:
                # Bm[(i, J), (a, k)] = δ_ik G_aJ maps nodal displacements to F
                Bm = np.einsum("ik,cqaJ->cqiJak", I3, self.G).reshape(self.G.shape[:2] + (9, 12))
                self._Bm = (Bm, self.wdet[..., None, None] * np.swapaxes(Bm, -1, -2))
            Bm, BmT = self._Bm
            kl = (BmT @ A.reshape(A.shape[:2] + (9, 9)) @ Bm).sum(1)
            Kt = self._csr(kl)
        dt = self.dt
        if self.rho > 0:
            acc = (d - 2 * state.d + state.d_prev).ravel() / dt ** 2
            R += self.rho * (self.M @ acc)
            if tangent:
                Kt = Kt + (self.rho / dt ** 2) * self.M
        # Robin: R -= ∫ (K d + C ḋ)·v on the epicardium (reference facets)
        vel = (d - state.d) / dt
        fm = (np.ones((3, 3)) + I3) / 12.0
        t = self.epi
        if len(t):
            Kd = np.einsum("fij,fbj->fbi", self.K_epi, d[t]) + np.einsum("fij,fbj->fbi", self.C_epi, vel[t])
            rr = -np.einsum("f,ab,fbi->fai", self.epi_area, fm, Kd)
            Rr = np.zeros((self.n, 3))
            np.add.at(Rr, t, rr)
            R += Rr.ravel()
            if tangent:
                blk = -np.einsum("f,ab,fij->faibj", self.epi_area, fm, self.K_epi + self.C_epi / dt)
                Kt = Kt + self._surface_csr(t, blk)
        if len(self.chambers):
            vb = self.v_base(d) if vb is None else vb
            G = self.pressure_loads(d, vb)
            R += pressures @ G
            if tangent:
                Kt = Kt + self._pressure_tangent(d, pressures, vb)
        return R, Kt

    def _surface_csr(self, tris, blk):
        """Assemble (nf, 3, 3, 3, 3) facet blocks [facet, a, i, b, j]."""
        dofs = (3 * tris[:, :, None] + np.arange(3)).reshape(-1, 9)
        rows = np.repeat(dofs, 9, axis=1).ravel()
        cols = np.tile(dofs, (1, 9)).ravel()
        n = 3 * self.n
        return sp.csr_matrix((blk.reshape(-1), (rows, cols)), shape=(n, n))

    def _pressure_tangent(self, d, pressures, vb):
        y = self.X + d
        mats = []
        for i, t in enumerate(self.surf):
            p = pressures[i]
            if p == 0:
                continue
            _, pts = _area_vectors(y, t)
            dA = _area_vector_derivs(pts)  # (f, j, i, k) = d a_i / d y_jk
            blk = np.broadcast_to((p / 3) * dA[:, None], (len(t), 3, 3, 3, 3))  # (f, a, j, i, k)
            mats.append(self._surface_csr(t, np.transpose(blk, (0, 1, 3, 2, 4))))
            if len(self.base):
                ab, pb = _area_vectors(y, self.base)
                an = ab / np.linalg.norm(ab, axis=1, keepdims=True)
                e = np.stack([pb[:, 2] - pb[:, 1], pb[:, 0] - pb[:, 2], pb[:, 1] - pb[:, 0]], axis=1)
                dn = 0.5 * np.cross(an[:, None], e)  # d|a|/dy_j, (f, j, 3)
                b = -(p / 3) * np.einsum("i,fjk->fjik", vb[i], dn)
                blk = np.broadcast_to(b[:, None], (len(self.base), 3, 3, 3, 3))
                mats.append(self._surface_csr(self.base, np.transpose(blk, (0, 1, 3, 2, 4))))
        n = 3 * self.n
        return sum(mats, sp.csr_matrix((n, n)))

    # -- solvers --------------------------------------------------------------------------

    def _line_search(self, d, dd, merit0, merit_fn, max_halvings=20):
        alpha = 1.0
        best = None
        for _ in range(max_halvings):
            trial = d + alpha * dd
            if self.min_jacobian(trial) > 0 and not np.isfinite(merit0):
                return trial, alpha  # only admissibility is requested
            if self.min_jacobian(trial) > 0:
                try:
                    m = merit_fn(trial)
                except (MechanicsError, ValueError):
                    m = np.inf
                if best is None or m < best[1]:
                    best = (alpha, m)
                if m <= (1 - 1e-4 * alpha) * merit0 or (alpha < 0.2 and best is not None and m < np.inf):
                    return trial, alpha
            alpha *= 0.5
        if best is not None and np.isfinite(best[1]):
            return d + best[0] * dd, best[0]
        raise MechanicsError("line search stagnated: no step keeps det F > 0")

    def solve(self, state: MechState, Ta: NDArray, pressures=(), tol: float = 1e-8, atol: float = 1e-10,
              max_iter: int = 25) -> tuple[NDArray, NewtonReport]:
        """Newton for d^{n+1} with prescribed pressures."""
        d = state.d.copy()
        rep = NewtonReport(0)
        r0 = None
        for it in range(max_iter + 1):
            R, K = self.residual(d, state, Ta, pressures)
            rn = np.linalg.norm(R)
            rep.residuals.append(rn)
            r0 = r0 if r0 is not None else max(rn, 1e-300)
            if rn <= tol * r0 or rn <= atol:
                rep.iterations = it
                return d, rep
            if it == max_iter:
                break
            dd = -DirectSolver(K).solve(R).reshape(-1, 3)

            def merit(x):
                return np.linalg.norm(self.residual(x, state, Ta, pressures, tangent=False)[0])

            d, _ = self._line_search(d, dd, rn, merit)
        raise MechanicsError(f"mechanics Newton did not converge in {max_iter} iterations "
                             f"(residual {rep.residuals[-1]:.3e})")

    def solve_coupled(self, state: MechState, Ta: NDArray, targets, p0, tol: float = 1e-8, vol_tol: float = 1e-9,
                      atol: float = 1e-10, max_iter: int = 30) -> tuple[NDArray, NDArray, NewtonReport]:
        """Newton on (d, p) enforcing V_i^3D(d) = targets_i; Schur complement on p.

        ``targets`` is either fixed volumes or a callable p -> (V (m,), dV/dp (m, m)) for volumes
        that themselves depend on the chamber pressures (implicit 0D coupling).
        """
        if callable(targets):
            target_fn = targets
        else:
            fixed = np.asarray(targets, float).reshape(-1)

            def target_fn(_p):
                return fixed, np.zeros((len(fixed), len(fixed)))
        p = np.asarray(p0, float).reshape(-1).copy()
        d = state.d.copy()
        rep = NewtonReport(0)
        r_ref = None
        for it in range(max_iter + 1):
            vb = self.v_base(d)
            R, K = self.residual(d, state, Ta, p, vb=vb)
            targets, dT = target_fn(p)
            verr = self.chamber_volumes(d) - targets
            rn = np.linalg.norm(R)
            rep.residuals.append(rn)
            rep.volume_errors.append(np.abs(verr).max() if len(verr) else 0.0)
            if r_ref is None:
                r_ref = max(rn, np.linalg.norm(self.pressure_loads(d, vb)) * max(1.0, np.abs(p).max()), 1e-300)
            if (rn <= tol * r_ref or rn <= atol) and np.all(np.abs(verr) <= vol_tol):
                rep.iterations = it
                return d, p, rep
            if it == max_iter:
                break
            Gp = self.pressure_loads(d, vb)  # (m, 3n)
            gV = self.volume_gradients(d)  # (m, 3n)
            lu = DirectSolver(K)
            x1 = lu.solve(R)
            X2 = np.column_stack([lu.solve(g) for g in Gp])
            # V^3D(d) - T(p) = 0 linearizes to -gV x1 - (S + dT/dp) dp = -verr
            S = gV @ X2 + dT
            if np.any(np.abs(np.linalg.eigvals(S)) < 1e-30):
                raise MechanicsError("singular pressure Schur complement: volume insensitive to pressure")
            dp = np.linalg.solve(S, verr - gV @ x1)
            dd = (-x1 - X2 @ dp).reshape(-1, 3)
            p_new = p + dp

            t_new = target_fn(p_new)[0]

            def merit(x, p_new=p_new, t_new=t_new):
                Rm, _ = self.residual(x, state, Ta, p_new, tangent=False)
                ve = self.chamber_volumes(x) - t_new
                return np.linalg.norm(Rm) / r_ref + np.linalg.norm(ve) / vol_tol * 1e-3

            d_try, alpha = self._line_search(d, dd, np.inf, merit)
            d = d_try
            p = p + alpha * dp
        raise MechanicsError(f"coupled mechanics/pressure Newton did not converge in {max_iter} iterations "
                             f"(residual {rep.residuals[-1]:.3e}, volume error {rep.volume_errors[-1]:.3e})")

    def preload(self, targets, steps: int = 1, **kw) -> tuple[NDArray, NDArray, NewtonReport]:
        """Quasi-static passive inflation from the reference state to the target chamber volumes."""
        targets = np.asarray(targets, float).reshape(-1)
        V0 = self.chamber_volumes(np.zeros((self.n, 3)))
        # no inertia and no epicardial damping: the preloaded state is an equilibrium
        rho, C_epi = self.rho, self.C_epi
        self.rho, self.C_epi = 0.0, np.zeros_like(C_epi)
        try:
            state = MechState.rest(self.n)
            p = np.zeros(len(targets))
            Ta = np.zeros(self.n)
            for k in range(1, steps + 1):
                d, p, rep = self.solve_coupled(state, Ta, V0 + (targets - V0) * k / steps, p, **kw)
                state = MechState(d, d, d)
        finally:
            self.rho, self.C_epi = rho, C_epi
        return d, p, rep
