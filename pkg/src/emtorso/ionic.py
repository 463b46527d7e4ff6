"""Ionic models behind a small protocol, with the two-variable Aliev-Panfilov default."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.typing import NDArray


class IonicModel(Protocol):
    """Membrane kinetics. Potentials in mV, currents in mA/m² (Cm·mV/s), time in s.

    ``w`` has shape (n_gates, n_points).
    """

    n_gates: int

    def resting_state(self) -> tuple[float, NDArray]: ...

    def rhs(self, u: NDArray, w: NDArray) -> tuple[NDArray, NDArray]: ...

    def calcium(self, w: NDArray) -> NDArray: ...


U_CLIP = 0.5


@dataclass
class AlievPanfilov:
    """Cubic excitable kinetics in normalized potential u' = (u - v_rest)/v_amp."""

    k: float = 8.0
    a: float = 0.15
    eps0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    time_scale: float = 12.9e-3  # s per model time unit
    v_rest: float = -80.0
    v_amp: float = 100.0
    Cm: float = 0.01  # F/m²
    w_peak: float | None = field(default=None)
    n_gates: int = 1

    def __post_init__(self):
        if self.w_peak is None:
            self.w_peak = self._reference_w_peak()

    def resting_state(self) -> tuple[float, NDArray]:
        return self.v_rest, np.zeros(1)

    def normalized(self, u: NDArray) -> NDArray:
        return (np.asarray(u, float) - self.v_rest) / self.v_amp

    def rhs_normalized(self, up: NDArray, w: NDArray) -> tuple[NDArray, NDArray]:
        """Dimensionless current I' and dw/dt' in model time units."""
        I = self.k * up * (up - self.a) * (up - 1.0) + up * w
        eps = self.eps0 + self.mu1 * w / (self.mu2 + up)
        dw = eps * (-w - self.k * up * (up - self.a - 1.0))
        return I, dw

    def rhs(self, u: NDArray, w: NDArray) -> tuple[NDArray, NDArray]:
        # clipping far outside the action potential range keeps the explicit step bounded
        # when a strong stimulus lands on tissue without diffusive load
        up = np.clip(self.normalized(u), -U_CLIP, 1 + U_CLIP)
        I, dw = self.rhs_normalized(up, np.asarray(w, float)[0])
        return self.Cm * self.v_amp / self.time_scale * I, (dw / self.time_scale)[None]

    def calcium(self, w: NDArray) -> NDArray:
        return np.clip(np.asarray(w, float)[0] / self.w_peak, 0.0, 1.0)

    def _reference_w_peak(self) -> float:
        up, w, dt = 0.3, 0.0, 0.01
        peak = 0.0
        for _ in range(int(60 / dt)):
            I, dw = self.rhs_normalized(up, w)
            up, w = up - dt * I, w + dt * dw
            peak = max(peak, w)
        return peak


IONIC_MODELS = {"aliev_panfilov": AlievPanfilov}


def get_ionic_model(name: str, **params) -> IonicModel:
    try:
        cls = IONIC_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown ionic model {name!r}; available: {sorted(IONIC_MODELS)}") from None
    return cls(**params)


@dataclass
class CellTrace:
    t: NDArray
    u: NDArray
    w: NDArray


def simulate_cell(model: IonicModel, u0: float, t_end: float, dt: float) -> CellTrace:
    """Single cell from (u0, w_rest) with forward Euler at step dt."""
    _, w = model.resting_state()
    n = int(round(t_end / dt))
    u = np.empty(n + 1)
    W = np.empty((n + 1, model.n_gates))
    u[0], W[0] = u0, w
    uu, ww = np.array([u0], float), np.asarray(w, float)[:, None]
    for i in range(n):
        I, dw = model.rhs(uu, ww)
        uu = uu - dt * I / model.Cm
        ww = ww + dt * dw
        u[i + 1], W[i + 1] = uu[0], ww[:, 0]
    return CellTrace(np.arange(n + 1) * dt, u, W)


def action_potential_duration(t: NDArray, u: NDArray, repolarization: float = 0.9) -> float:
    """Time from the upstroke crossing to the last downward crossing at the given repolarization."""
    u_rest = u[-1] if abs(u[-1] - u[0]) < 1 else min(u[0], u[-1])
    level = u_rest + (1 - repolarization) * (u.max() - u_rest)
    above = u >= level
    if not above.any():
        return 0.0
    i_up = int(np.argmax(above))
    i_dn = len(u) - 1 - int(np.argmax(above[::-1]))
    if i_dn >= len(u) - 1:
        raise ValueError("trace ends before repolarization")

    def cross(i):
        return t[i] + (level - u[i]) / (u[i + 1] - u[i]) * (t[i + 1] - t[i])

    t_up = t[0] if i_up == 0 else cross(i_up - 1)
    return cross(i_dn) - t_up
