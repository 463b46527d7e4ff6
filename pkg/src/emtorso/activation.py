"""Active tension: first-order calcium-driven activation and fiber-stretch bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray


@dataclass(frozen=True)
class ActiveTensionParams:
    Ta_max: float = 60e3  # Pa
    C_LRV: float = 0.8
    SL0: float = 2.0  # µm
    tau_act: float = 0.05  # s
    tau_rel: float = 0.1  # s

    def __post_init__(self):
        if not 0 < self.C_LRV <= 1:
            raise ValueError(f"C_LRV must lie in (0, 1], got {self.C_LRV}")
        if self.Ta_max < 0 or self.SL0 <= 0 or self.tau_act <= 0 or self.tau_rel <= 0:
            raise ValueError("Ta_max >= 0 and SL0, tau_act, tau_rel > 0 required")


@dataclass
class ActivationState:
    s: NDArray  # (n,) activation in [0, 1]
    Ta: NDArray  # Pa
    SL: NDArray  # µm
    dSL: NDArray  # µm/s

    @classmethod
    def rest(cls, n: int, params: ActiveTensionParams) -> "ActivationState":
        return cls(np.zeros(n), np.zeros(n), np.full(n, params.SL0), np.zeros(n))

    def copy(self) -> "ActivationState":
        return ActivationState(self.s.copy(), self.Ta.copy(), self.SL.copy(), self.dSL.copy())


def compute_stretch(F: NDArray, f0: NDArray, SL0: float, SL_prev: NDArray | None = None,
                    dt: float | None = None) -> tuple[NDArray, NDArray, NDArray]:
    """I4f = |F f0|², SL = SL0 √I4f and the backward-difference rate."""
    Ff = np.einsum("...ij,...j->...i", F, f0)
    I4f = np.einsum("...i,...i->...", Ff, Ff)
    if np.any(I4f <= 0):
        raise ValueError("non-positive fiber stretch; corrupted deformation state")
    SL = SL0 * np.sqrt(I4f)
    dSL = np.zeros_like(SL) if SL_prev is None or not dt else (SL - SL_prev) / dt
    return I4f, SL, dSL


def step_activation(s: NDArray, Ca: NDArray, dt: float, params: ActiveTensionParams,
                    SL: NDArray | None = None, dSL: NDArray | None = None) -> NDArray:
    """Explicit Euler on ds/dt = (Ca - s)/τ, τ = tau_act while rising else tau_rel.

    SL and dSL are accepted for richer force models and ignored by this one.
    """
    Ca = np.clip(np.asarray(Ca, float), 0.0, 1.0)
    tau = np.where(Ca > s, params.tau_act, params.tau_rel)
    s_new = s + dt * (Ca - s) / tau
    if dt <= min(params.tau_act, params.tau_rel):
        return s_new
    # large steps would overshoot; keep the relaxation toward Ca monotone
    return np.where(Ca > s, np.minimum(s_new, Ca), np.maximum(s_new, Ca))


def active_tension(s: NDArray, xi_hat: NDArray, params: ActiveTensionParams) -> NDArray:
    """Ta = Ta_max · s · [ξ̂ + C_LRV (1 - ξ̂)]."""
    return params.Ta_max * np.clip(s, 0, 1) * (xi_hat + params.C_LRV * (1 - xi_hat))
