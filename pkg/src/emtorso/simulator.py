"""Staggered electro-mechano-torso time stepping over the static/moving heart × torso matrix.

One macro step tⁿ → tⁿ⁺¹ runs, in order: N_EP monodomain substeps with F_H frozen, calcium
transfer to the mechanics nodes, the activation update, one RK4 step of the circulation, the
coupled mechanics/pressure solve and, every N_T steps, the extracellular, lifting and torso
potential solves followed by lead and BSPM output.
"""

from __future__ import annotations

import hashlib
import logging
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .activation import ActivationState, active_tension, compute_stretch, step_activation
from .circulation import (CirculationLog, CirculationParams, CircState, coupled_pressure_solve,
                          default_initial_state, total_volume)
from .config import RunConfig, format_config, parse_rows
from .ecg import LeadRecorder, compute_leads, export_bspm, export_traces, snap_electrodes
from .ep import (EpParams, EpState, ExtracellularSolver, StimulusProtocol, _split_sigma, assemble_diffusion,
                 build_operators, evaluate_stimulus, focal_protocol, resting_ep_state, step_monodomain,
                 vt_protocol)
from .fem import FeSpace, tet_quadrature
from .fibers import GrayShell, Sphere, build_ischemia_field, build_microstructure
from .geometry import embed_in_torso_box, generate_idealized_lv, lv_cavity_point
from .ionic import get_ionic_model
from .linalg import SolverError
from .mechanics import Chamber, MechanicsProblem, MechState
from .mesh import CAPS, HEART, TORSO, MeshError, TetMesh, load_mesh
from .torso import TorsoProblem
from .vtk import export_vtk

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


@dataclass
class SimState:
    step: int
    t: float
    ep: EpState
    act_times: NDArray  # first upward threshold crossing per EP dof (inf if none yet)
    act: ActivationState | None = None
    mech: MechState | None = None
    circ: CircState | None = None

    def copy(self) -> "SimState":
        return SimState(self.step, self.t, self.ep.copy(), self.act_times.copy(),
                        None if self.act is None else self.act.copy(),
                        None if self.mech is None else self.mech.copy(),
                        None if self.circ is None else self.circ.copy())


def state_hash(state: SimState, parts=("ep", "act", "mech", "circ")) -> str:
    """SHA-256 over the raw bytes of the selected heart-side state arrays."""
    h = hashlib.sha256()
    arrays = {
        "ep": lambda s: [s.ep.u, s.ep.w],
        "act": lambda s: [] if s.act is None else [s.act.s, s.act.Ta],
        "mech": lambda s: [] if s.mech is None else [s.mech.d, s.mech.d_prev],
        "circ": lambda s: [] if s.circ is None else [s.circ.c, np.array([s.circ.p_LV or 0.0])],
    }
    for part in parts:
        for a in arrays[part](state):
            h.update(np.ascontiguousarray(a, float).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class PrescribedDisplacement:
    """Time-independent heart displacement per mesh vertex."""

    d: NDArray  # (n_vertices, 3)
    fingerprint: str
    t: float = 0.0

    def save(self, path: str | Path) -> None:
        np.savez(path, d=self.d, fingerprint=self.fingerprint, t=self.t)

    @classmethod
    def load(cls, path: str | Path) -> "PrescribedDisplacement":
        with np.load(path) as z:
            return cls(z["d"].copy(), str(z["fingerprint"]), float(z["t"]))


def build_mesh(cfg: RunConfig) -> TetMesh:
    if cfg.geometry.source == "file":
        mesh = load_mesh(cfg.geometry.mesh_path)
        if not np.any(mesh.regions == TORSO):
            mesh = embed_in_torso_box(mesh, cfg.torso_box)
        return mesh
    return embed_in_torso_box(generate_idealized_lv(cfg.lv), cfg.torso_box)


def default_sites(mesh: TetMesh, n_ring: int = 4) -> NDArray:
    """Apex plus a mid-cavity ring of endocardial vertices (five sites by default)."""
    X = mesh.vertices[mesh.facet_vertices(["endo_LV"])]
    lo, hi = X[:, 2].min(), X[:, 2].max()
    center = X.mean(0)
    apex = X[np.argmin(X[:, 2])]
    mid = np.abs(X[:, 2] - (lo + 0.5 * (hi - lo))) < 0.15 * (hi - lo)
    ring = X[mid]
    sites = [apex]
    for k in range(n_ring):
        phi = 2 * np.pi * k / n_ring
        dirv = np.array([np.cos(phi), np.sin(phi)])
        score = (ring[:, :2] - center[:2]) @ dirv
        sites.append(ring[np.argmax(score)])
    return np.array(sites)


def _heart_F(space: FeSpace, d: NDArray) -> tuple[NDArray, NDArray]:
    """Per-cell F = I + ∇d and J for a P1 displacement on the heart/caps space."""
    G = space.physical_gradients(tet_quadrature(1))[:, 0]
    F = np.eye(3) + np.einsum("cai,caJ->ciJ", d[space.cell_dofs], G)
    return F, np.linalg.det(F)


class Simulation:
    """Assembled problem for one configuration; ``step`` advances a SimState by one macro step."""

    def __init__(self, cfg: RunConfig, mesh: TetMesh | None = None):
        self.cfg = cfg
        self.mesh = mesh = build_mesh(cfg) if mesh is None else mesh
        self.fingerprint = mesh.fingerprint()
        self.dt, self.n_ep, self.n_t = cfg.time.dt, cfg.n_ep, cfg.n_t
        self.dt_ep = self.dt / self.n_ep
        self.moving_heart = cfg.modes.heart == "moving"
        self.moving_torso = cfg.modes.torso == "moving"
        self.with_mechanics = cfg.modes.mechanics

        fc = cfg.fibers
        mu = build_ischemia_field(mesh.vertices,
                                  [Sphere(tuple(r[:3]), r[3]) for r in parse_rows(fc.scars, 4)],
                                  [GrayShell(tuple(r[:3]), r[3], r[4]) for r in parse_rows(fc.gray_zones, 5)],
                                  fc.mu_gray_min)
        self.micro = build_microstructure(mesh, fc.angle_endo, fc.angle_epi, fc.fast_fraction, mu)

        e = cfg.ep
        si, se = _split_sigma(e.sigma_m, e.extra_intra_ratio)
        self.ep_params = EpParams(e.chi, e.Cm, si, se, e.fast_layer_multiplier)
        self.model = get_ionic_model(e.ionic_model, Cm=e.Cm)
        self.ep_space = FeSpace(mesh, 2, (HEART, CAPS))
        self.p1 = FeSpace(mesh, 1, (HEART, CAPS))

        prescribed = np.zeros((mesh.n_vertices, 3))
        if cfg.modes.prescribed_displacement:
            pd = PrescribedDisplacement.load(cfg.modes.prescribed_displacement)
            if pd.fingerprint != self.fingerprint or pd.d.shape != prescribed.shape:
                raise MeshError("prescribed displacement was computed on a different mesh")
            prescribed = pd.d
        self.prescribed = prescribed[self.p1.dof_vertices]
        self._prescribed_zero = not np.any(self.prescribed)
        F0, J0 = (None, None) if self._prescribed_zero else _heart_F(self.p1, self.prescribed)
        self.ops = build_operators(self.ep_space, self.micro, self.ep_params, F0, J0)
        self._F_static = (F0, J0)
        self.extracellular = ExtracellularSolver(self.ep_space, self.micro, self.ep_params)
        self.protocol = self._protocol()

        self.circ_params = CirculationParams().with_period(cfg.circulation.period)
        if self.with_mechanics:
            chamber = Chamber("LV", ("endo_LV", "cap_endo_LV"), ("endo_LV",), tuple(self._cavity_point()))
            self.mech = MechanicsProblem(mesh, self.micro, cfg.material, cfg.robin, (chamber,), self.dt,
                                         quasi_static=not cfg.modes.inertia)
            self.xi_nodes = self.micro.xi_hat[self.mech.space.dof_vertices]
            self.V_ref = float(self.mech.chamber_volumes(np.zeros((self.mech.n, 3)))[0])
        self._ca_map = self.ep_space.vertex_dof[self.p1.dof_vertices]

        self.torso = TorsoProblem(mesh, cfg.torso)
        iv = self.torso.interface_vertices
        self._iface_p1 = self.p1.vertex_dof[iv]
        self._iface_ep = self.ep_space.vertex_dof[iv]
        if np.any(self._iface_p1 < 0) or np.any(self._iface_ep < 0):
            raise MeshError("heart-torso interface vertices must belong to heart or cap cells")
        self.electrodes = snap_electrodes(mesh.facet_vertices(["torso_ext"]), mesh.vertices,
                                          cfg.electrodes.positions(), cfg.electrodes.snap_tol)
        self._static_torso_F = None
        if not self.moving_torso:
            self._static_torso_F = self._torso_kinematics(self.prescribed)
        self.leads = LeadRecorder()
        self.circ_log = CirculationLog()
        self.bspm_times: list[float] = []
        self.bspm_values: list[NDArray] = []
        self.newton_iterations: list[int] = []
        self.volume_errors: list[float] = []
        self.extracellular_residuals: list[float] = []

    # -- setup helpers ------------------------------------------------------------------

    def _cavity_point(self) -> NDArray:
        if self.cfg.geometry.source == "idealized":
            return lv_cavity_point(self.cfg.lv)
        return self.mesh.vertices[self.mesh.facet_vertices(["endo_LV"])].mean(0)

    def _protocol(self) -> StimulusProtocol:
        p = self.cfg.protocol
        if p.kind == "none":
            return StimulusProtocol()
        sites = parse_rows(p.sites, 3)
        if p.kind == "vt":
            site = sites[0] if len(sites) else default_sites(self.mesh)[0]
            return vt_protocol(site, p.radius, p.amplitude, p.duration)
        if len(sites) == 0:
            sites = default_sites(self.mesh)
        period = self.cfg.circulation.period
        n_beats = int(np.ceil(max(self.cfg.time.t_end - p.start, 0.0) / period)) or 1
        return focal_protocol(sites, p.radius, p.amplitude, p.start, p.duration, period, n_beats)

    def _torso_kinematics(self, d_heart: NDArray):
        if not np.any(d_heart[self._iface_p1]):
            return None, None
        d_T = self.torso.solve_lifting(d_heart[self._iface_p1])
        return self.torso.kinematics(d_T)

    # -- state ----------------------------------------------------------------------------

    def initial_state(self) -> SimState:
        ep = resting_ep_state(self.model, self.ep_space.n_dofs)
        st = SimState(0, 0.0, ep, np.full(self.ep_space.n_dofs, np.inf))
        if self.with_mechanics:
            n = self.mech.n
            st.act = ActivationState.rest(n, self.cfg.activation)
            V0 = self.cfg.circulation.preload * self.V_ref
            d0, p0, _ = self.mech.preload([V0], steps=max(1, int(np.ceil(abs(V0 / self.V_ref - 1) / 0.1))),
                                          tol=self.cfg.solver.newton_tol, vol_tol=self.cfg.solver.vol_tol)
            st.mech = MechState(d0, d0.copy(), d0.copy())
            c = default_initial_state(V_LV=float(self.mech.chamber_volumes(d0)[0]))
            st.circ = CircState(c, 0.0, p_LV=float(p0[0]))
        if self.moving_heart:
            self._set_heart_deformation(st)
        return st

    def _set_heart_deformation(self, st: SimState):
        F, J = _heart_F(self.p1, st.mech.d)
        K = assemble_diffusion(self.ep_space, self.micro, self.ep_params, F, J)
        self.ops.set_diffusion(K, self.ep_space.lumped_mass(J))
        self._F_moving = (F, J)

    def heart_deformation(self) -> tuple[NDArray | None, NDArray | None]:
        """F_H, J_H currently seen by the EP problem (None in the undeformed reference)."""
        return self._F_moving if self.moving_heart else self._F_static

    # -- one macro step ----------------------------------------------------------------------

    def step(self, st: SimState) -> SimState:
        cfg = self.cfg
        dt = self.dt
        new = SimState(st.step + 1, st.t + dt, st.ep, st.act_times.copy(), st.act, st.mech, st.circ)
        # (1) EP substeps with F_H frozen over the macro step
        ep = st.ep
        X = self.ep_space.dof_coords
        thr = cfg.ep.threshold
        for _ in range(self.n_ep):
            I_app = evaluate_stimulus(self.protocol, ep.t + self.dt_ep, X)
            nxt = step_monodomain(ep, self.dt_ep, I_app, self.ops, self.model, self.ep_params)
            hit = np.isinf(new.act_times) & (ep.u < thr) & (nxt.u >= thr)
            new.act_times[hit] = ep.t + (thr - ep.u[hit]) / (nxt.u[hit] - ep.u[hit]) * self.dt_ep
            ep = nxt
        ep.t = new.t  # keep the EP clock aligned with the macro clock
        new.ep = ep
        if self.with_mechanics:
            # (2) calcium P2 -> P1 (vertex dofs coincide), (3) activation
            ca = self.model.calcium(ep.w)[self._ca_map]
            s = step_activation(st.act.s, ca, dt, cfg.activation)
            act = ActivationState(s, active_tension(s, self.xi_nodes, cfg.activation), st.act.SL, st.act.dSL)
            new.act = act
            # (4)+(5) circulation RK4 step and mechanics, coupled through the chamber volumes
            d, circ, rep = coupled_pressure_solve(self.mech, st.mech, act.Ta, st.circ, dt, self.circ_params,
                                                  vol_tol=cfg.solver.vol_tol, tol=cfg.solver.newton_tol,
                                                  max_iter=cfg.solver.max_iter)
            self.newton_iterations.append(rep.iterations)
            self.volume_errors.append(rep.volume_errors[-1])
            new.mech = st.mech.advanced(d)
            act.SL, act.dSL = self._sarcomere_length(d, st.act.SL, dt)
            new.circ = circ
            self.circ_log.record(circ, self.circ_params)
            if self.moving_heart:
                self._set_heart_deformation(new)
        # (6) torso
        if new.step % self.n_t == 0:
            self._torso_output(new)
        return new

    def _sarcomere_length(self, d: NDArray, SL_prev: NDArray, dt: float) -> tuple[NDArray, NDArray]:
        """Nodal SL: myocardial quadrature values averaged onto P1 nodes with volume weights."""
        m, SL0 = self.mech, self.cfg.activation.SL0
        _, SL_q, _ = compute_stretch(m.deformation_gradient(d), self.micro.f0, SL0)
        w = np.where(m.is_cap[:, None], 0.0, m.wdet)[..., None] * m.lam[None]  # (nc, nq, 4)
        num, den = np.zeros(m.n), np.zeros(m.n)
        np.add.at(num, m.space.cell_dofs, np.einsum("cqa,cq->ca", w, SL_q))
        np.add.at(den, m.space.cell_dofs, w.sum(1))
        SL = np.where(den > 0, num / np.where(den > 0, den, 1.0), SL0)
        return SL, (SL - SL_prev) / dt

    def _torso_output(self, st: SimState):
        F_H, J_H = self.heart_deformation()
        u_e = self.extracellular.solve(st.ep.u, F_H, J_H)
        self.extracellular_residuals.append(self.extracellular.last_residual)
        if self.moving_torso:
            d_heart = st.mech.d if self.moving_heart else self.prescribed
            F_T, J_T = self._torso_kinematics(d_heart)
        else:
            F_T, J_T = self._static_torso_F
        u_T = self.torso.solve_potential(u_e[self._iface_ep], F_T, J_T)
        self.last_u_e, self.last_u_T = u_e, u_T
        u_v = self.torso.vertex_values(u_T)
        self.leads.record(st.t, compute_leads(u_v, self.electrodes))
        _, vals = self.torso.extract_bspm(u_T)
        self.bspm_times.append(st.t)
        self.bspm_values.append(vals)

    # -- outputs ---------------------------------------------------------------------------

    def total_activation_time(self, st: SimState) -> float:
        at = st.act_times[self.ops.active]
        if not np.all(np.isfinite(at)):
            return np.inf
        return float(at.max() - at.min())

    def blood_volume(self, st: SimState) -> float:
        return total_volume(st.circ.c, self.circ_params)

    def vertex_fields(self, st: SimState) -> dict[str, NDArray]:
        n = self.mesh.n_vertices
        out = {}
        u = np.full(n, np.nan)
        u[self.p1.dof_vertices] = st.ep.u[self._ca_map]
        out["u"] = u
        if hasattr(self, "last_u_e"):
            ue = np.full(n, np.nan)
            ue[self.p1.dof_vertices] = self.last_u_e[self._ca_map]
            ue[self.torso.space.dof_vertices] = self.last_u_T
            out["potential"] = ue
        d = np.zeros((n, 3))
        d[self.p1.dof_vertices] = st.mech.d if self.moving_heart else self.prescribed
        out["d_H"] = d
        return out


# -- checkpoints ------------------------------------------------------------------------------


def save_checkpoint(path: str | Path, sim: Simulation, st: SimState) -> Path:
    path = Path(path)
    arrays = {"fingerprint": sim.fingerprint, "step": st.step, "t": st.t, "ep_u": st.ep.u, "ep_w": st.ep.w,
              "ep_t": st.ep.t, "act_times": st.act_times}
    if st.ep.u_prev is not None:
        arrays.update(ep_u_prev=st.ep.u_prev, ep_w_prev=st.ep.w_prev)
    if st.act is not None:
        arrays.update(act_s=st.act.s, act_Ta=st.act.Ta, act_SL=st.act.SL, act_dSL=st.act.dSL)
    if st.mech is not None:
        arrays.update(mech_d=st.mech.d, mech_d_prev=st.mech.d_prev)
        d_v = np.zeros((sim.mesh.n_vertices, 3))
        d_v[sim.mech.space.dof_vertices] = st.mech.d
        arrays["d_vertices"] = d_v
    if st.circ is not None:
        arrays.update(circ_c=st.circ.c, circ_t=st.circ.t,
                      circ_p=np.array([np.nan if st.circ.p_LV is None else st.circ.p_LV,
                                       np.nan if st.circ.p_RV is None else st.circ.p_RV]))
    np.savez(path, **arrays)
    return path


def restore_checkpoint(path: str | Path, sim: Simulation) -> SimState:
    with np.load(path) as z:
        if str(z["fingerprint"]) != sim.fingerprint:
            raise MeshError(f"checkpoint {path} belongs to a different mesh")
        has = set(z.files)
        ep = EpState(z["ep_u"].copy(), z["ep_w"].copy(),
                     z["ep_u_prev"].copy() if "ep_u_prev" in has else None,
                     z["ep_w_prev"].copy() if "ep_w_prev" in has else None, float(z["ep_t"]))
        st = SimState(int(z["step"]), float(z["t"]), ep, z["act_times"].copy())
        if "act_s" in has:
            st.act = ActivationState(z["act_s"].copy(), z["act_Ta"].copy(), z["act_SL"].copy(), z["act_dSL"].copy())
        if "mech_d" in has:
            st.mech = MechState(z["mech_d"].copy(), z["mech_d_prev"].copy())
        if "circ_c" in has:
            p = z["circ_p"]
            st.circ = CircState(z["circ_c"].copy(), float(z["circ_t"]),
                                None if np.isnan(p[0]) else float(p[0]), None if np.isnan(p[1]) else float(p[1]))
    if (st.mech is None) == sim.with_mechanics:
        raise SimulationError("checkpoint and configuration disagree on whether mechanics is enabled")
    if sim.moving_heart:
        sim._set_heart_deformation(st)
    return st


def extract_static_snapshot(output_dir: str | Path, t_snapshot: float) -> PrescribedDisplacement:
    """Heart displacement of the checkpoint whose time is nearest to t_snapshot (earlier on ties)."""
    files = sorted(Path(output_dir).glob("checkpoint_*.npz"))
    if not files:
        raise FileNotFoundError(f"no checkpoints in {output_dir}")
    best = None
    for f in files:
        with np.load(f) as z:
            t = float(z["t"])
            key = (abs(t - t_snapshot), t)
            if best is None or key < best[0]:
                d = z["d_vertices"].copy() if "d_vertices" in z.files else None
                best = (key, f, t, d, str(z["fingerprint"]))
    _, f, t, d, fp = best
    if d is None:
        raise SimulationError(f"{f} carries no heart displacement (mechanics disabled in that run)")
    return PrescribedDisplacement(d, fp, t)


# -- driver ----------------------------------------------------------------------------------


@dataclass
class RunResult:
    sim: Simulation
    state: SimState
    output_dir: Path | None
    wall_time: float
    checkpoints: list = field(default_factory=list)


def run_simulation(cfg: RunConfig, output_dir: str | Path | None = None, mesh: TetMesh | None = None,
                   state: SimState | None = None, sim: Simulation | None = None,
                   n_steps: int | None = None) -> RunResult:
    """Advance from rest (or ``state``) to t_end, writing outputs when ``output_dir`` is given."""
    t0 = _time.perf_counter()
    sim = sim or Simulation(cfg, mesh)
    st = state or sim.initial_state()
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_used.ini").write_text(format_config(cfg))
    total = cfg.n_steps if n_steps is None else st.step + n_steps
    checkpoints = []
    every = cfg.output.checkpoint_every
    if out is not None and every and st.step == 0:
        checkpoints.append(save_checkpoint(out / f"checkpoint_{0:07d}.npz", sim, st))
    while st.step < total:
        try:
            nxt = sim.step(st)
        except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
            if out is not None:
                save_checkpoint(out / "checkpoint_failed.npz", sim, st)
            raise SimulationError(f"step {st.step + 1} (t = {st.t + sim.dt:.4f} s) failed: {exc}") from exc
        st = nxt
        if out is not None:
            if every and st.step % every == 0:
                checkpoints.append(save_checkpoint(out / f"checkpoint_{st.step:07d}.npz", sim, st))
            if cfg.output.vtk_every and st.step % cfg.output.vtk_every == 0:
                export_vtk(sim.mesh, sim.vertex_fields(st), out / f"fields_{st.step:07d}.vtk")
        if st.step % 50 == 0:
            log.info("t = %.3f s, step %d", st.t, st.step)
    if out is not None:
        checkpoints.append(save_checkpoint(out / f"checkpoint_{st.step:07d}.npz", sim, st))
        write_outputs(sim, st, out)
    return RunResult(sim, st, out, _time.perf_counter() - t0, checkpoints)


def write_outputs(sim: Simulation, st: SimState, out: Path) -> None:
    cfg = sim.cfg
    trace = sim.leads.trace()
    export_traces(trace, out / "leads_all.csv")
    t_keep = cfg.time.n_discard_beats * cfg.circulation.period
    export_traces(trace.window(t_keep, np.inf), out / "leads.csv")
    if sim.with_mechanics:
        sim.circ_log.write(out / "circulation.csv")
    coords, _ = sim.torso.extract_bspm(np.zeros(sim.torso.space.n_dofs))
    vals = np.array(sim.bspm_values).reshape(len(sim.bspm_times), -1)
    np.savez(out / "bspm.npz", times=np.array(sim.bspm_times), coords=coords, values=vals)
    if cfg.output.bspm_every:
        with open(out / "bspm.csv", "w") as fh:
            fh.write("t,x,y,z,u_T\n")
            for k in range(0, len(sim.bspm_times), cfg.output.bspm_every):
                for x, v in zip(coords, vals[k]):
                    fh.write(",".join(repr(float(a)) for a in (sim.bspm_times[k], *x, v)) + "\n")
    np.save(out / "activation_times.npy", st.act_times)
    if len(sim.bspm_times):
        export_bspm(coords, vals[-1], out / "bspm_last.csv")
