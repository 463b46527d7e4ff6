"""Monodomain electrophysiology with deformation pull-back, extracellular recovery and stimuli."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .fem import FeSpace, tet_quadrature
from .fibers import FRAME_QUADRATURE, MicrostructureField, uniform_microstructure
from .ionic import AlievPanfilov, IonicModel
from .linalg import DirectSolver, SolverError, component_nullspace, pcg, solve_dirichlet
from .mesh import HEART, box_mesh

# extracellular/intracellular conductivity ratios per (fiber, sheet, normal) direction
EXTRA_INTRA_RATIO = (0.62 / 0.17, 0.24 / 0.019, 0.24 / 0.019)


def _split_sigma(sigma_m, ratio=EXTRA_INTRA_RATIO):
    sm, r = np.asarray(sigma_m, float), np.asarray(ratio, float)
    si = sm * (1 + r) / r
    return tuple(si), tuple(si * r)


# Monodomain conductivities calibrated for the default kinetics on P2 meshes with h = 1 mm
# and dt_ep = 0.5 ms (see calibrate_conductivities); the slow phenomenological upstroke
# needs values well above tissue measurements to reach 0.6/0.4/0.2 m/s.
CALIBRATED_SIGMA_M = (3.247, 1.398, 0.367)
_SI, _SE = _split_sigma(CALIBRATED_SIGMA_M)


@dataclass(frozen=True)
class EpParams:
    chi: float = 1.4e5  # 1/m
    Cm: float = 0.01  # F/m²
    sigma_i: tuple[float, float, float] = _SI  # S/m along f0, s0, n0
    sigma_e: tuple[float, float, float] = _SE
    fast_layer_multiplier: float = 3.0

    def __post_init__(self):
        if min(self.sigma_i) <= 0 or min(self.sigma_e) <= 0:
            raise ValueError("all conductivities must be positive")
        if self.chi <= 0 or self.Cm <= 0:
            raise ValueError("chi and Cm must be positive")

    @property
    def sigma_m(self) -> NDArray:
        si, se = np.asarray(self.sigma_i), np.asarray(self.sigma_e)
        return si * se / (si + se)

    def scaled(self, factors) -> "EpParams":
        f = np.asarray(factors, float)
        return replace(self, sigma_i=tuple(np.asarray(self.sigma_i) * f),
                       sigma_e=tuple(np.asarray(self.sigma_e) * f))

    def sigmas(self, which: str) -> NDArray:
        if which == "monodomain":
            return self.sigma_m
        if which == "intra":
            return np.asarray(self.sigma_i, float)
        if which == "intra_plus_extra":
            return np.asarray(self.sigma_i, float) + np.asarray(self.sigma_e, float)
        raise ValueError(f"unknown diffusion kind {which!r}")


def _per_qp(A, nc, nq, tail):
    """Broadcast per-cell or per-quadrature arrays to (nc, nq, *tail)."""
    if A is None:
        return None
    A = np.asarray(A, float)
    if A.shape == (nc,) + tail:
        return np.broadcast_to(A[:, None], (nc, nq) + tail)
    if A.shape == (nc, nq) + tail:
        return A
    raise ValueError(f"expected shape {(nc,) + tail} or {(nc, nq) + tail}, got {A.shape}")


def conduction_scale(space: FeSpace, micro: MicrostructureField, params: EpParams) -> NDArray:
    """μ at the frame quadrature points times the fast-layer multiplier; 0 in caps."""
    if not np.array_equal(space.cells, micro.cells):
        raise ValueError("space and microstructure cover different cells")
    lam = np.column_stack([1 - FRAME_QUADRATURE.points.sum(1), FRAME_QUADRATURE.points])
    tets = space.mesh.tets[space.cells]
    mu = np.einsum("qa,ca->cq", lam, micro.mu[tets])
    fast = micro.fast_layer[tets].mean(axis=1) >= 0.5
    mu = mu * np.where(fast, params.fast_layer_multiplier, 1.0)[:, None]
    mu[micro.is_cap] = 0.0
    return mu


def diffusion_tensor(space: FeSpace, micro: MicrostructureField, params: EpParams, F=None, J=None,
                     which: str = "monodomain") -> NDArray:
    """Pulled-back tensor J F⁻¹ D F⁻ᵀ at the frame quadrature points, (nc, nq, 3, 3)."""
    nc, nq = space.n_cells, FRAME_QUADRATURE.n
    sig = params.sigmas(which)
    scale = conduction_scale(space, micro, params)
    frame = micro.frame  # columns f0, s0, n0
    if F is None:
        D = (frame * sig) @ np.swapaxes(frame, -1, -2)
        return scale[..., None, None] * D
    Fq = _per_qp(F, nc, nq, (3, 3))
    Jq = _per_qp(J, nc, nq, ()) if J is not None else np.linalg.det(Fq)
    bad = np.argwhere(Jq <= 0)
    if len(bad):
        raise ValueError(f"non-positive det F in cell {space.cells[bad[0, 0]]}")
    Fa = Fq @ frame  # columns F f0, F s0, F n0
    Fa = Fa / np.linalg.norm(Fa, axis=2, keepdims=True)
    D = (Fa * sig) @ np.swapaxes(Fa, -1, -2)
    Finv = np.linalg.inv(Fq)
    Dref = Jq[..., None, None] * (Finv @ D @ np.swapaxes(Finv, -1, -2))
    return scale[..., None, None] * Dref


def assemble_diffusion(space: FeSpace, micro: MicrostructureField, params: EpParams, F=None, J=None,
                       which: str = "monodomain") -> sp.csr_matrix:
    """Stiffness of the pulled-back conduction tensor; F, J per cell or per quadrature point."""
    D = diffusion_tensor(space, micro, params, F, J, which)
    return space.assemble_stiffness(D, FRAME_QUADRATURE)


# -- time stepping -------------------------------------------------------------------


@dataclass
class EpState:
    u: NDArray  # mV at t
    w: NDArray  # (n_gates, n)
    u_prev: NDArray | None = None
    w_prev: NDArray | None = None
    t: float = 0.0

    def copy(self) -> "EpState":
        c = lambda a: None if a is None else a.copy()  # noqa: E731
        return EpState(self.u.copy(), self.w.copy(), c(self.u_prev), c(self.w_prev), self.t)


def resting_ep_state(model: IonicModel, n: int) -> EpState:
    u0, w0 = model.resting_state()
    return EpState(np.full(n, float(u0)), np.repeat(np.asarray(w0, float)[:, None], n, axis=1))


def ionic_dofs(space: FeSpace) -> NDArray:
    """Dofs touched by at least one heart cell; the rest (caps only) carry no kinetics."""
    heart_cells = space.mesh.regions[space.cells] == HEART
    mask = np.zeros(space.n_dofs, bool)
    mask[space.cell_dofs[heart_cells].ravel()] = True
    return mask


@dataclass
class MonodomainOperators:
    """Matrices for one EP space; ``K`` changes with F_H, masses are fixed."""

    M: sp.csr_matrix
    ML: NDArray
    K: sp.csr_matrix
    ML_J: NDArray
    active: NDArray
    _cache: dict = field(default_factory=dict, repr=False)

    def set_diffusion(self, K: sp.csr_matrix, ML_J: NDArray | None = None) -> None:
        self.K = K
        if ML_J is not None:
            self.ML_J = ML_J
        self._cache.clear()

    def system(self, coef: float) -> tuple[sp.csr_matrix, NDArray]:
        if coef not in self._cache:
            A = sp.csr_matrix(coef * self.M + self.K)
            self._cache[coef] = (A, 1.0 / A.diagonal())
        return self._cache[coef]


def build_operators(space: FeSpace, micro: MicrostructureField, params: EpParams, F=None, J=None) -> MonodomainOperators:
    mass_q = tet_quadrature(2 * space.order)
    M = space.assemble_mass(quad=mass_q)
    ML = space.lumped_mass()
    K = assemble_diffusion(space, micro, params, F, J)
    ML_J = ML if J is None else space.lumped_mass(np.asarray(J, float).reshape(space.n_cells, -1).mean(1))
    return MonodomainOperators(M, ML, K, ML_J, ionic_dofs(space))


def step_monodomain(state: EpState, dt: float, I_app: NDArray, ops: MonodomainOperators,
                    model: IonicModel, params: EpParams, tol: float = 1e-10) -> EpState:
    """One IMEX step: BDF2 (BDF1 without history) with implicit diffusion and explicit kinetics.

    ``I_app`` is the applied current density (A/m²) at the new time level.
    """
    chiCm = params.chi * params.Cm
    act = ops.active
    u, w = state.u, state.w
    if state.u_prev is None:
        u_star, w_star = u, w
        coef = chiCm / dt
        hist = chiCm / dt * (ops.M @ u)
        w_new = w.copy()
        _, dw = model.rhs(u_star[act], w_star[:, act])
        w_new[:, act] = w[:, act] + dt * dw
    else:
        u_star, w_star = 2 * u - state.u_prev, 2 * w - state.w_prev
        coef = 1.5 * chiCm / dt
        hist = chiCm / (2 * dt) * (ops.M @ (4 * u - state.u_prev))
        w_new = w.copy()
        _, dw = model.rhs(u_star[act], w_star[:, act])
        w_new[:, act] = (4 * w[:, act] - state.w_prev[:, act]) / 3 + (2 * dt / 3) * dw
    I_ion = np.zeros_like(u)
    I_ion[act], _ = model.rhs(u_star[act], w_new[:, act])
    rhs = hist - params.chi * ops.ML * I_ion + params.chi * ops.ML_J * (1e3 * np.asarray(I_app, float))
    A, pre = ops.system(coef)
    u_new, info = pcg(A, rhs, x0=u_star, tol=tol, precond=pre)
    if not info.converged:
        raise SolverError(f"monodomain solve did not converge (residual {info.residual:.2e})")
    return EpState(u_new, w_new, u.copy(), w.copy(), state.t + dt)


# -- extracellular potential ---------------------------------------------------------


class ExtracellularSolver:
    """Recovers u_e from u on the heart/caps domain.

    The pure-Neumann operator is singular (one constant per conducting component); the
    solve runs deflated PCG on conducting dofs, extends harmonically into non-conducting
    ones (caps, scar cores) and fixes the representative with zero mean over the domain.
    """

    def __init__(self, space: FeSpace, micro: MicrostructureField, params: EpParams, tol: float = 1e-11):
        self.space, self.micro, self.params, self.tol = space, micro, params, tol
        self.mass = space.lumped_mass()
        self._L = space.assemble_stiffness(quad=FRAME_QUADRATURE)
        self._key = None
        self.last_residual = 0.0

    def _setup(self, F, J):
        key = "reference" if F is None else hash(np.asarray(F).tobytes())
        if key == self._key:
            return
        sp_ = self.space
        self._A_i = assemble_diffusion(sp_, self.micro, self.params, F, J, "intra")
        A = assemble_diffusion(sp_, self.micro, self.params, F, J, "intra_plus_extra")
        rows = np.diff(A.indptr) > 0
        diag = np.abs(A.diagonal())
        cond = rows & (diag > 1e-14 * diag.max())
        self._cond = np.flatnonzero(cond)
        self._A = sp.csr_matrix(A[self._cond][:, self._cond])
        self._Z = component_nullspace(self._A)
        free = np.flatnonzero(~cond)
        if not hasattr(self, "_free") or not np.array_equal(free, self._free):
            self._free = free
            self._ext_solver = DirectSolver(self._L[free][:, free]) if len(free) else None
        self._key = key

    def solve(self, u: NDArray, F=None, J=None) -> NDArray:
        self._setup(F, J)
        u = np.asarray(u, float)
        # A_i annihilates constants; the shift makes that exact in floating point
        b_full = -(self._A_i @ (u - u[0]))
        b = b_full[self._cond]
        bnorm = np.linalg.norm(b)
        out = np.zeros(self.space.n_dofs)
        if bnorm > 0:
            x, info = pcg(self._A, b, tol=self.tol, nullspace=self._Z)
            # compatibility: b ⟂ constants because A_i annihilates them
            r = np.linalg.norm(self._A @ x - (b - self._Z @ (self._Z.T @ b))) / bnorm
            self.last_residual = r
            if not info.converged or r > 1e-8:
                raise SolverError(f"extracellular solve did not converge (residual {r:.2e})")
            out[self._cond] = x
        else:
            self.last_residual = 0.0
        if self._ext_solver is not None:
            out = solve_dirichlet(self._L, np.zeros(self.space.n_dofs), self._cond, out[self._cond], self._ext_solver)
        out -= (self.mass @ out) / self.mass.sum()
        return out


def solve_extracellular(space: FeSpace, u: NDArray, micro: MicrostructureField, params: EpParams,
                        F=None, J=None) -> NDArray:
    return ExtracellularSolver(space, micro, params).solve(u, F, J)


# -- stimulation --------------------------------------------------------------------


@dataclass(frozen=True)
class Stimulus:
    center: tuple[float, float, float]
    radius: float  # m
    amplitude: float  # A/m²
    start: float  # s
    duration: float  # s


@dataclass(frozen=True)
class StimulusProtocol:
    stimuli: tuple[Stimulus, ...] = ()

    @property
    def start_times(self) -> list[float]:
        return sorted({s.start for s in self.stimuli})


def evaluate_stimulus(protocol: StimulusProtocol, t: float, points: NDArray) -> NDArray:
    """Applied current density: Gaussian bumps active on [start, start+duration), overlaps take the max."""
    points = np.atleast_2d(points)
    out = np.zeros(len(points))
    for s in protocol.stimuli:
        if s.start <= t < s.start + s.duration:
            r2 = np.sum((points - np.asarray(s.center)) ** 2, axis=1)
            out = np.maximum(out, s.amplitude * np.exp(-r2 / s.radius ** 2))
    return out


VT_TIMES = (0.0, 0.45, 0.75, 1.02)


def vt_protocol(center, radius: float = 1e-2, amplitude: float = 0.4, duration: float = 2e-3) -> StimulusProtocol:
    """S1-S4 programmed stimulation from one site."""
    return StimulusProtocol(tuple(Stimulus(tuple(center), radius, amplitude, t, duration) for t in VT_TIMES))


def focal_protocol(centers, radius: float = 1e-2, amplitude: float = 0.4, start: float = 0.0,
                   duration: float = 2e-3, period: float | None = None, n_beats: int = 1) -> StimulusProtocol:
    period = period or 0.0
    return StimulusProtocol(tuple(Stimulus(tuple(c), radius, amplitude, start + k * period, duration)
                                  for k in range(n_beats) for c in centers))


# -- EP-only drivers (cables, slabs, calibration) --------------------------------------


@dataclass
class EpProblem:
    space: FeSpace
    micro: MicrostructureField
    params: EpParams
    model: IonicModel
    ops: MonodomainOperators

    @classmethod
    def build(cls, space, micro, params=None, model=None, F=None, J=None):
        params = params or EpParams()
        model = model or AlievPanfilov(Cm=params.Cm)
        return cls(space, micro, params, model, build_operators(space, micro, params, F, J))


def activation_times(problem: EpProblem, protocol: StimulusProtocol, t_end: float, dt: float,
                     threshold: float = -40.0, stop_when_done: bool = True) -> NDArray:
    """First upward threshold crossing per dof (linear in time), inf where never reached."""
    sp_ = problem.space
    st = resting_ep_state(problem.model, sp_.n_dofs)
    at = np.full(sp_.n_dofs, np.inf)
    t_last = max((s.start + s.duration for s in protocol.stimuli), default=0.0)
    n = int(round(t_end / dt))
    for _ in range(n):
        I = evaluate_stimulus(protocol, st.t + dt, sp_.dof_coords)
        new = step_monodomain(st, dt, I, problem.ops, problem.model, problem.params)
        hit = np.isinf(at) & (st.u < threshold) & (new.u >= threshold)
        frac = (threshold - st.u[hit]) / (new.u[hit] - st.u[hit])
        at[hit] = st.t + frac * dt
        st = new
        if stop_when_done and st.t > t_last and np.all(np.isfinite(at[problem.ops.active])):
            break
    return at


def slab_problem(direction: int, params: EpParams | None = None, length: float = 0.06, width: float = 0.01,
                 depth: float = 0.002, h: float = 1e-3, mu_fn=None) -> EpProblem:
    """P2 slab along x whose x axis carries fiber direction ``direction`` (0=f0, 1=s0, 2=n0)."""
    n = (int(round(length / h)), max(1, int(round(width / 5e-3))), 1)
    mesh = box_mesh(n, (length, width, depth))
    frame = np.roll(np.eye(3), direction, axis=0)  # row d becomes e_x
    mu = None if mu_fn is None else mu_fn(mesh.vertices)
    micro = uniform_microstructure(mesh, frame[0], frame[1], frame[2], mu=mu)
    return EpProblem.build(FeSpace(mesh, 2, (HEART,)), micro, params)


def measure_cv(direction: int, params: EpParams | None = None, dt: float = 5e-4, x1: float = 0.02,
               x2: float = 0.04, length: float = 0.06) -> float:
    """Planar-wave conduction velocity (m/s) between two cross-sections of a slab."""
    prob = slab_problem(direction, params, length=length)
    X = prob.space.dof_coords
    amp = np.where(X[:, 0] < 2e-3, 0.4, 0.0)  # planar stimulus on the x < 2 mm strip
    sp_ = prob.space
    st = resting_ep_state(prob.model, sp_.n_dofs)
    at = np.full(sp_.n_dofs, np.inf)
    sel1 = np.isclose(X[:, 0], x1)
    sel2 = np.isclose(X[:, 0], x2)
    t_max = 3 * length / 0.1
    while st.t < t_max and not np.all(np.isfinite(at[sel2])):
        I = amp if st.t + dt <= 2e-3 + 1e-12 else 0.0 * amp
        new = step_monodomain(st, dt, I, prob.ops, prob.model, prob.params)
        hit = np.isinf(at) & (st.u < -40) & (new.u >= -40)
        at[hit] = st.t + (-40 - st.u[hit]) / (new.u[hit] - st.u[hit]) * dt
        st = new
    if not (np.all(np.isfinite(at[sel1])) and np.all(np.isfinite(at[sel2]))):
        raise SolverError("wave did not reach the measurement planes")
    return (x2 - x1) / (at[sel2].mean() - at[sel1].mean())


def calibrate_conductivities(targets=(0.6, 0.4, 0.2), params: EpParams | None = None, rtol: float = 0.02,
                             max_iter: int = 6) -> tuple[EpParams, NDArray]:
    """Rescale σ per direction by (target/measured)² until every CV is within ``rtol``."""
    params = params or EpParams()
    for _ in range(max_iter):
        cv = np.array([measure_cv(d, params) for d in range(3)])
        err = cv / np.asarray(targets) - 1
        if np.all(np.abs(err) <= rtol):
            return params, cv
        params = params.scaled((np.asarray(targets) / cv) ** 2)
    cv = np.array([measure_cv(d, params) for d in range(3)])
    return params, cv
