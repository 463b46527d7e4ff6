"""Electrodes, 12-lead ECG, trace I/O and the correlation-coefficient comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .fem import FeSpace

ELECTRODES = ("R", "L", "F", "V1", "V2", "V3", "V4", "V5", "V6")
LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
# column order of the comparison tables (limb leads in Cabrera order)
REPORT_ORDER = ("aVL", "I", "aVR", "II", "aVF", "III", "V1", "V2", "V3", "V4", "V5", "V6")

# x to the patient's left, y anterior, z cranial; the heart sits near the origin
DEFAULT_ELECTRODES = {
    "R": (-0.15, 0.0, 0.10),
    "L": (0.15, 0.0, 0.10),
    "F": (0.05, 0.0, -0.20),
    "V1": (-0.02, 0.12, 0.02),
    "V2": (0.02, 0.12, 0.02),
    "V3": (0.045, 0.12, -0.01),
    "V4": (0.07, 0.12, -0.04),
    "V5": (0.12, 0.10, -0.04),
    "V6": (0.15, 0.0, -0.04),
}


class ElectrodeError(ValueError):
    pass


@dataclass(frozen=True)
class ElectrodeSet:
    """Requested positions and the surface vertices they snap to."""

    names: tuple[str, ...]
    requested: NDArray  # (9, 3)
    vertices: NDArray  # (9,) mesh vertex ids
    positions: NDArray  # (9, 3) snapped coordinates
    distances: NDArray  # (9,)

    def index(self, name: str) -> int:
        return self.names.index(name)


def snap_electrodes(surface_vertices: NDArray, coords: NDArray, positions: dict | None = None,
                    tol: float = 0.05) -> ElectrodeSet:
    """Nearest surface vertex per electrode, ties broken by the lexicographic order of coordinates."""
    positions = DEFAULT_ELECTRODES if positions is None else positions
    missing = [n for n in ELECTRODES if n not in positions]
    if missing:
        raise ElectrodeError(f"missing electrode positions: {missing}")
    surface_vertices = np.asarray(surface_vertices)
    pts = coords[surface_vertices]
    order = np.lexsort(pts.T[::-1])  # sort by x, then y, then z
    pts, surface_vertices = pts[order], surface_vertices[order]
    req = np.array([positions[n] for n in ELECTRODES], float)
    dist = np.linalg.norm(pts[None] - req[:, None], axis=2)
    # argmin returns the first minimizer, i.e. the lexicographically smallest among exact ties
    best = np.argmin(dist, axis=1)
    dmin = dist[np.arange(len(req)), best]
    far = dmin > tol
    if np.any(far):
        bad = [ELECTRODES[i] for i in np.flatnonzero(far)]
        raise ElectrodeError(f"electrodes {bad} are farther than {tol} m from the torso surface")
    return ElectrodeSet(ELECTRODES, req, surface_vertices[best], pts[best], dmin)


def sample_potential(space: FeSpace, u: NDArray, x: NDArray) -> NDArray:
    """FE interpolation of u at points x (raises if a point lies outside the space's cells)."""
    return space.evaluate(u, np.atleast_2d(x))


def leads_from_electrodes(phi: NDArray) -> NDArray:
    """12 leads from electrode potentials ordered as ELECTRODES; phi may carry trailing time axes."""
    phi = np.asarray(phi, float)
    R, L, F = phi[0], phi[1], phi[2]
    wct = (R + L + F) / 3.0
    limb = [L - R, F - R, F - L, R - 0.5 * (L + F), L - 0.5 * (R + F), F - 0.5 * (L + R)]
    return np.stack(limb + [phi[3 + i] - wct for i in range(6)])


def compute_leads(u_vertex: NDArray, electrodes: ElectrodeSet) -> NDArray:
    """Leads from a field given per mesh vertex."""
    return leads_from_electrodes(np.asarray(u_vertex)[electrodes.vertices])


def correlation_coefficient(phi1, phi2) -> float:
    """Pearson correlation of two equally sampled traces."""
    a, b = np.asarray(phi1, float), np.asarray(phi2, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"traces must be 1-D of equal length, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ValueError("need at least two samples")
    a, b = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    if na <= 1e-14 * scale * np.sqrt(len(a)) or nb <= 1e-14 * scale * np.sqrt(len(b)):
        raise ValueError("zero-variance trace: correlation undefined")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


@dataclass
class LeadTrace:
    times: NDArray
    values: NDArray  # (12, n_times)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.values = np.asarray(self.values, float).reshape(len(LEADS), -1)
        if self.values.shape[1] != len(self.times):
            raise ValueError("lead values and times differ in length")

    def lead(self, name: str) -> NDArray:
        return self.values[LEADS.index(name)]

    def window(self, t0: float, t1: float) -> "LeadTrace":
        keep = (self.times >= t0 - 1e-12) & (self.times <= t1 + 1e-12)
        return LeadTrace(self.times[keep], self.values[:, keep])


@dataclass
class LeadRecorder:
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def record(self, t: float, leads: NDArray):
        self.times.append(float(t))
        self.rows.append(np.asarray(leads, float))

    def trace(self) -> LeadTrace:
        vals = np.array(self.rows).T if self.rows else np.zeros((len(LEADS), 0))
        return LeadTrace(np.array(self.times), vals)


def mean_cc(trace1: LeadTrace, trace2: LeadTrace) -> tuple[dict[str, float], float]:
    """Per-lead CC and their arithmetic mean."""
    if trace1.values.shape != trace2.values.shape:
        raise ValueError("trace sets must have identical shapes")
    cc = {name: correlation_coefficient(trace1.lead(name), trace2.lead(name)) for name in LEADS}
    return cc, float(np.mean(list(cc.values())))


def format_cc_report(rows: dict[str, tuple[dict[str, float], float]]) -> str:
    """Table with one row per comparison and columns aVL, I, ..., V6, mean."""
    head = ["comparison", *REPORT_ORDER, "mean"]
    width = max([len(head[0])] + [len(k) for k in rows])
    lines = [" ".join([head[0].ljust(width)] + [h.rjust(6) for h in head[1:]])]
    for name, (cc, mean) in rows.items():
        vals = [f"{cc[k]:6.2f}" for k in REPORT_ORDER] + [f"{mean:6.2f}"]
        lines.append(" ".join([name.ljust(width)] + vals))
    return "\n".join(lines)


def export_traces(trace: LeadTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *LEADS])
        for i, t in enumerate(trace.times):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in trace.values[:, i])])


def read_traces(path: str | Path) -> LeadTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["time", *LEADS]:
        raise ValueError(f"{path}: not a lead trace CSV (expected header time,{','.join(LEADS)})")
    data = np.array(rows[1:], float).reshape(-1, 1 + len(LEADS))
    return LeadTrace(data[:, 0], data[:, 1:].T)


def export_bspm(coords: NDArray, values: NDArray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "u_T"])
        for x, v in zip(coords, values):
            w.writerow([*(repr(float(c)) for c in x), repr(float(v))])
