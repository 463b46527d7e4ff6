"""Closed-loop lumped circulation (RLC compartments, elastance chambers, diode valves) and 3D coupling.

All quantities are SI: pressures in Pa, volumes in m³, flows in m³/s. Default parameters are
given in clinical units (mmHg, mL) and converted once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

MMHG = 133.322  # Pa
ML = 1e-6  # m³

STATE_NAMES = ("V_LA", "V_LV", "V_RA", "V_RV", "p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL",
               "Q_AR_SYS", "Q_VEN_SYS", "Q_AR_PUL", "Q_VEN_PUL")
IDX = {name: i for i, name in enumerate(STATE_NAMES)}


@dataclass(frozen=True)
class Elastance:
    """Two-cosine activation between E_pass and E_pass + E_act, p = E(t)(V - V0)."""

    E_act: float  # Pa/m³
    E_pass: float
    V0: float  # m³
    t_contract: float  # s, onset within the period
    T_contract: float  # s
    T_relax: float  # s

    def activation(self, t: float, period: float) -> float:
        tc = (t - self.t_contract) % period
        if tc < self.T_contract:
            return 0.5 * (1 - np.cos(np.pi * tc / self.T_contract))
        if tc < self.T_contract + self.T_relax:
            return 0.5 * (1 + np.cos(np.pi * (tc - self.T_contract) / self.T_relax))
        return 0.0

    def pressure(self, t: float, V: float, period: float) -> float:
        return (self.E_pass + self.E_act * self.activation(t, period)) * (V - self.V0)


def _elastance(E_act, E_pass, V0, t_contract, T_contract, T_relax) -> Elastance:
    unit = MMHG / ML
    return Elastance(E_act * unit, E_pass * unit, V0 * ML, t_contract, T_contract, T_relax)


@dataclass(frozen=True)
class Compartment:
    R: float  # Pa s/m³
    C: float  # m³/Pa
    L: float  # Pa s²/m³


def _compartment(R, C, L) -> Compartment:
    return Compartment(R * MMHG / ML, C * ML / MMHG, L * MMHG / ML)


@dataclass(frozen=True)
class CirculationParams:
    period: float = 0.8
    R_min: float = 0.0075 * MMHG / ML  # open valve
    R_max: float = 75006.2 * MMHG / ML  # closed valve
    ar_sys: Compartment = _compartment(0.8, 1.2, 5e-3)
    ven_sys: Compartment = _compartment(0.26, 60.0, 5e-4)
    ar_pul: Compartment = _compartment(0.1625, 10.0, 5e-4)
    ven_pul: Compartment = _compartment(0.1625, 16.0, 5e-4)
    LA: Elastance = _elastance(0.07, 0.09, 4.0, 0.68, 0.136, 0.136)
    RA: Elastance = _elastance(0.06, 0.07, 4.0, 0.68, 0.136, 0.136)
    LV: Elastance = _elastance(2.75, 0.08, 5.0, 0.0, 0.272, 0.136)
    RV: Elastance = _elastance(0.55, 0.05, 10.0, 0.0, 0.272, 0.136)

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("heart period must be positive")
        if not 0 < self.R_min < self.R_max:
            raise ValueError("valve resistances need 0 < R_min < R_max")
        for comp in (self.ar_sys, self.ven_sys, self.ar_pul, self.ven_pul):
            if comp.R <= 0 or comp.C <= 0 or comp.L < 0:
                raise ValueError(f"invalid RLC compartment {comp}")

    def with_period(self, period: float) -> "CirculationParams":
        """Rescale all chamber timings to a new heart period."""
        s = period / self.period
        scaled = {k: replace(getattr(self, k), t_contract=getattr(self, k).t_contract * s,
                             T_contract=getattr(self, k).T_contract * s, T_relax=getattr(self, k).T_relax * s)
                  for k in ("LA", "RA", "LV", "RV")}
        return replace(self, period=period, **scaled)


def default_initial_state(V_LV: float | None = None) -> NDArray:
    c = np.array([65.0, 120.0, 65.0, 145.0]) * ML
    c = np.concatenate([c, np.array([80.0, 30.0, 35.0, 24.0]) * MMHG, np.zeros(4)])
    if V_LV is not None:
        c[IDX["V_LV"]] = V_LV
    return c


def valve_flow(p_up, p_down, params: CirculationParams):
    """Non-ideal diode: q = Δp / R, R = R_min when Δp > 0 else R_max."""
    dp = p_up - p_down
    return dp / np.where(dp > 0, params.R_min, params.R_max)


def chamber_pressures(t: float, c: NDArray, params: CirculationParams, p_LV: float | None = None,
                      p_RV: float | None = None) -> dict[str, float]:
    """Pressures of the four chambers; a given p_LV / p_RV replaces the 0D elastance."""
    T = params.period
    return {
        "LA": params.LA.pressure(t, c[IDX["V_LA"]], T),
        "RA": params.RA.pressure(t, c[IDX["V_RA"]], T),
        "LV": params.LV.pressure(t, c[IDX["V_LV"]], T) if p_LV is None else p_LV,
        "RV": params.RV.pressure(t, c[IDX["V_RV"]], T) if p_RV is None else p_RV,
    }


def valve_flows(t: float, c: NDArray, params: CirculationParams, p_LV=None, p_RV=None) -> dict[str, float]:
    p = chamber_pressures(t, c, params, p_LV, p_RV)
    return {
        "MV": valve_flow(p["LA"], p["LV"], params),
        "AV": valve_flow(p["LV"], c[IDX["p_AR_SYS"]], params),
        "TV": valve_flow(p["RA"], p["RV"], params),
        "PV": valve_flow(p["RV"], c[IDX["p_AR_PUL"]], params),
    }


def circulation_rhs(t: float, c: NDArray, params: CirculationParams, p_LV: float | None = None,
                    p_RV: float | None = None) -> NDArray:
    p = chamber_pressures(t, c, params, p_LV, p_RV)
    q = valve_flows(t, c, params, p_LV, p_RV)
    pas, pvs, pap, pvp = (c[IDX[k]] for k in ("p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL"))
    Qas, Qvs, Qap, Qvp = (c[IDX[k]] for k in ("Q_AR_SYS", "Q_VEN_SYS", "Q_AR_PUL", "Q_VEN_PUL"))
    P = params
    dc = np.empty(12)
    dc[IDX["V_LA"]] = Qvp - q["MV"]
    dc[IDX["V_LV"]] = q["MV"] - q["AV"]
    dc[IDX["V_RA"]] = Qvs - q["TV"]
    dc[IDX["V_RV"]] = q["TV"] - q["PV"]
    dc[IDX["p_AR_SYS"]] = (q["AV"] - Qas) / P.ar_sys.C
    dc[IDX["p_VEN_SYS"]] = (Qas - Qvs) / P.ven_sys.C
    dc[IDX["p_AR_PUL"]] = (q["PV"] - Qap) / P.ar_pul.C
    dc[IDX["p_VEN_PUL"]] = (Qap - Qvp) / P.ven_pul.C

    def inductor(comp, Q, p_up, p_down):
        if comp.L == 0:
            return 0.0
        return (p_up - p_down - comp.R * Q) / comp.L

    dc[IDX["Q_AR_SYS"]] = inductor(P.ar_sys, Qas, pas, pvs)
    dc[IDX["Q_VEN_SYS"]] = inductor(P.ven_sys, Qvs, pvs, p["RA"])
    dc[IDX["Q_AR_PUL"]] = inductor(P.ar_pul, Qap, pap, pvp)
    dc[IDX["Q_VEN_PUL"]] = inductor(P.ven_pul, Qvp, pvp, p["LA"])
    return dc


def rk4_step(c: NDArray, t: float, dt: float, params: CirculationParams, p_LV=None, p_RV=None) -> NDArray:
    """Classical RK4 with the 3D chamber pressures held over the step."""
    if dt == 0:
        return np.array(c, float)

    def f(tt, cc):
        return circulation_rhs(tt, cc, params, p_LV, p_RV)

    k1 = f(t, c)
    k2 = f(t + dt / 2, c + dt / 2 * k1)
    k3 = f(t + dt / 2, c + dt / 2 * k2)
    k4 = f(t + dt, c + dt * k3)
    return c + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def total_volume(c: NDArray, params: CirculationParams) -> float:
    """Stressed blood volume: chambers plus C·p of the four capacitors (unstressed parts are constant)."""
    v = c[IDX["V_LA"]] + c[IDX["V_LV"]] + c[IDX["V_RA"]] + c[IDX["V_RV"]]
    for key, comp in (("p_AR_SYS", params.ar_sys), ("p_VEN_SYS", params.ven_sys),
                      ("p_AR_PUL", params.ar_pul), ("p_VEN_PUL", params.ven_pul)):
        v += comp.C * c[IDX[key]]
    return float(v)


@dataclass
class CircState:
    c: NDArray
    t: float = 0.0
    p_LV: float | None = None  # set when the LV is a 3D chamber
    p_RV: float | None = None

    def copy(self) -> "CircState":
        return CircState(self.c.copy(), self.t, self.p_LV, self.p_RV)

    def pressures(self, params: CirculationParams) -> dict[str, float]:
        return chamber_pressures(self.t, self.c, params, self.p_LV, self.p_RV)


def advance(state: CircState, dt: float, params: CirculationParams) -> CircState:
    return CircState(rk4_step(state.c, state.t, dt, params, state.p_LV, state.p_RV), state.t + dt,
                     state.p_LV, state.p_RV)


def target_volumes(state: CircState, chambers) -> NDArray:
    """0D volumes of the chambers that are replaced by 3D ones (by chamber name 'LV'/'RV')."""
    return np.array([state.c[IDX[f"V_{ch.name}"]] for ch in chambers])


def step_volume_map(circ: CircState, dt: float, params: CirculationParams, chambers):
    """p -> (V, dV/dp): 0D volumes of the 3D chambers after one RK4 step with their pressures held at p."""
    names = [ch.name for ch in chambers]
    cols = [IDX[f"V_{n}"] for n in names]

    def step(p):
        kw = {f"p_{n}": float(v) for n, v in zip(names, p)}
        return rk4_step(circ.c, circ.t, dt, params, kw.get("p_LV"), kw.get("p_RV"))

    def fn(p):
        p = np.asarray(p, float)
        V = step(p)[cols]
        # one-sided differences; the valve law is piecewise linear in p
        J = np.empty((len(p), len(p)))
        for k in range(len(p)):
            h = 1e-3 * max(1.0, abs(p[k]))
            q = p.copy()
            q[k] += h
            J[:, k] = (step(q)[cols] - V) / h
        return V, J

    return fn, step


def coupled_pressure_solve(problem, mech_state, Ta: NDArray, circ: CircState, dt: float,
                           params: CirculationParams, vol_tol: float = 1e-9, **kw):
    """One coupled 3D-0D step: d, end-of-step chamber pressures and the advanced circulation.

    The chamber pressures are the ones at the end of the step, held over the RK4 step of the
    circulation; the volume constraint V^3D(d) = V^0D(c(p)) is solved jointly with mechanics.
    Lagging the pressure by one step instead rings at Δt = 1 ms once wall inertia is on.
    """
    fn, step = step_volume_map(circ, dt, params, problem.chambers)
    p0 = [circ.p_LV if ch.name == "LV" else circ.p_RV for ch in problem.chambers]
    p0 = [0.0 if p is None else p for p in p0]
    d, p, rep = problem.solve_coupled(mech_state, Ta, fn, p0, vol_tol=vol_tol, **kw)
    out = CircState(step(p), circ.t + dt, circ.p_LV, circ.p_RV)
    for ch, val in zip(problem.chambers, p):
        setattr(out, f"p_{ch.name}", float(val))
    return d, out, rep


@dataclass
class CirculationLog:
    """Per-step rows of time, chamber pressures, state and valve flows."""

    rows: list = field(default_factory=list)

    def record(self, state: CircState, params: CirculationParams):
        p = state.pressures(params)
        q = valve_flows(state.t, state.c, params, state.p_LV, state.p_RV)
        self.rows.append([state.t, *(p[k] for k in ("LA", "LV", "RA", "RV")), *state.c,
                          *(q[k] for k in ("MV", "AV", "TV", "PV"))])

    @property
    def header(self) -> list[str]:
        return (["t", "p_LA", "p_LV", "p_RA", "p_RV"] + list(STATE_NAMES)
                + ["Q_MV", "Q_AV", "Q_TV", "Q_PV"])

    def array(self) -> NDArray:
        return np.array(self.rows, float).reshape(-1, len(self.header))

    def write(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)
