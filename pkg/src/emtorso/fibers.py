"""Rule-based myocardial microstructure: transmural coordinate, fiber frames, scar/gray zones."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.csgraph import connected_components

from .fem import FeSpace, Field, Quadrature, tet_quadrature
from .linalg import solve_dirichlet
from .mesh import CAPS, HEART, MeshError, TetMesh

FRAME_QUADRATURE = tet_quadrature(2)


@dataclass
class MicrostructureField:
    """Frames at the 4-point quadrature points of every heart/caps cell, plus vertex scalars.

    ``cells`` indexes ``mesh.tets`` in the same order as ``FeSpace(mesh, k, (HEART, CAPS)).cells``.
    Cap cells carry the Cartesian frame; they never conduct or contract.
    """

    cells: NDArray
    f0: NDArray  # (nc, nq, 3)
    s0: NDArray
    n0: NDArray
    mu: NDArray  # (n_vertices,)
    fast_layer: NDArray  # (n_vertices,) bool
    xi_hat: NDArray  # (n_vertices,)
    is_cap: NDArray  # (nc,) bool
    quad: Quadrature = field(default_factory=lambda: FRAME_QUADRATURE)
    phi: NDArray | None = None

    @property
    def frame(self) -> NDArray:
        """(nc, nq, 3, 3) with columns f0, s0, n0."""
        return np.stack([self.f0, self.s0, self.n0], axis=-1)


def _label_vertices(mesh: TetMesh, labels) -> NDArray:
    tris, _ = mesh.labeled_facets(labels)
    return np.unique(tris)


def _harmonic(mesh: TetMesh, zero_labels, one_labels, regions=(HEART,)) -> Field:
    V = FeSpace(mesh, 1, regions)
    zero = V.vertex_dof[_label_vertices(mesh, zero_labels)]
    one = V.vertex_dof[_label_vertices(mesh, one_labels)]
    zero, one = zero[zero >= 0], one[one >= 0]
    if len(zero) == 0 or len(one) == 0:
        raise MeshError(f"need facets labeled {sorted(zero_labels)} and {sorted(one_labels)}")
    if np.intersect1d(zero, one).size:
        raise MeshError("Dirichlet sets of the harmonic coordinate share vertices")
    K = V.assemble_stiffness()
    fixed = np.concatenate([zero, one])
    vals = np.concatenate([np.zeros(len(zero)), np.ones(len(one))])
    u = solve_dirichlet(K, np.zeros(V.n_dofs), fixed, vals)
    return Field(V, np.clip(u, 0.0, 1.0))


def endo_labels(mesh: TetMesh) -> list[str]:
    return [lab for lab in ("endo_LV", "endo_RV") if lab in set(mesh.facet_labels)]


def solve_transmural_coordinate(mesh: TetMesh, endo=None, epi=("epi",)) -> Field:
    """Harmonic φ on the heart region, 0 on the endocardium and 1 on the epicardium."""
    endo = endo if endo is not None else endo_labels(mesh)
    present = set(mesh.facet_labels)
    missing = [lab for lab in list(epi) + (list(endo) or ["endo_LV"]) if lab not in present]
    if missing:
        raise MeshError(f"transmural coordinate needs labeled facets: missing {missing}")
    return _harmonic(mesh, endo, epi)


def compute_xi_hat(mesh: TetMesh) -> NDArray:
    """Normalized intra-ventricular distance per vertex: 1 on the LV side, 0 on the RV side."""
    labels = set(mesh.facet_labels)
    if "endo_RV" not in labels:
        return np.ones(mesh.n_vertices)
    f = _harmonic(mesh, ["endo_RV"], ["endo_LV"])
    xi = np.ones(mesh.n_vertices)
    xi[f.space.dof_vertices] = f.values
    return xi


def _cells(mesh: TetMesh) -> NDArray:
    return np.flatnonzero(np.isin(mesh.regions, (HEART, CAPS)))


def generate_fibers(mesh: TetMesh, phi: Field, angle_endo: float = 60.0, angle_epi: float = -60.0,
                    apicobasal=(0.0, 0.0, 1.0)) -> tuple[NDArray, NDArray, NDArray]:
    """Fiber, sheet and sheet-normal vectors at the frame quadrature points of heart/caps cells.

    s0 follows ∇φ; the apicobasal axis projected on the tangent plane gives the longitudinal
    direction l; c = l × s0 is circumferential and f0 = cos(α)c + sin(α)l with α linear in φ.
    """
    cells = _cells(mesh)
    nc, nq = len(cells), FRAME_QUADRATURE.n
    f0 = np.broadcast_to(np.eye(3)[0], (nc, nq, 3)).copy()
    s0 = np.broadcast_to(np.eye(3)[1], (nc, nq, 3)).copy()
    n0 = np.broadcast_to(np.eye(3)[2], (nc, nq, 3)).copy()
    heart = mesh.regions[cells] == HEART
    V = phi.space
    pos = np.searchsorted(V.cells, cells[heart])
    if not np.array_equal(V.cells[pos], cells[heart]):
        raise ValueError("phi must be defined on every heart cell")
    grad = V.cell_gradients(phi.values, FRAME_QUADRATURE)[pos]
    gn = np.linalg.norm(grad, axis=-1)
    if np.any(gn < 1e-12):
        c, q = np.argwhere(gn < 1e-12)[0]
        x = V.quadrature_points(FRAME_QUADRATURE)[pos[c], q]
        raise ValueError(f"degenerate transmural gradient at cell {cells[heart][c]}, point {x}")
    s = grad / gn[..., None]
    k = np.asarray(apicobasal, float) / np.linalg.norm(apicobasal)
    l = k - np.einsum("cqi,i->cq", s, k)[..., None] * s
    ln = np.linalg.norm(l, axis=-1)
    bad = ln < 1e-6
    if np.any(bad):
        alt = np.array([1.0, 0.0, 0.0]) if abs(k[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        l2 = alt - np.einsum("ci,i->c", s[bad], alt)[:, None] * s[bad]
        l[bad] = l2
        ln[bad] = np.linalg.norm(l2, axis=-1)
    l /= ln[..., None]
    c = np.cross(l, s)
    ph = V.cell_values(phi.values, FRAME_QUADRATURE)[pos]
    alpha = np.deg2rad(angle_endo + (angle_epi - angle_endo) * np.clip(ph, 0, 1))[..., None]
    f = np.cos(alpha) * c + np.sin(alpha) * l
    f0[heart], s0[heart], n0[heart] = f, s, np.cross(f, s)
    return f0, s0, n0


def fiber_angle(f0: NDArray, s0: NDArray, apicobasal=(0.0, 0.0, 1.0)) -> NDArray:
    """Helix angle (degrees) of f0 in the tangent plane normal to s0."""
    k = np.asarray(apicobasal, float)
    l = k - np.einsum("...i,i->...", s0, k)[..., None] * s0
    l /= np.linalg.norm(l, axis=-1, keepdims=True)
    c = np.cross(l, s0)
    return np.rad2deg(np.arctan2(np.einsum("...i,...i->...", f0, l), np.einsum("...i,...i->...", f0, c)))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class GrayShell:
    """Gray zone between ``inner`` (μ = mu_gray_min) and ``outer`` (μ = 1) radii."""

    center: tuple[float, float, float]
    inner: float
    outer: float


def build_ischemia_field(points: NDArray, scar_regions=(), gray_regions=(), mu_gray_min: float = 0.1) -> NDArray:
    """Per-point conduction scaling μ ∈ [0, 1]; overlapping regions take the minimum."""
    if not 0 < mu_gray_min < 1:
        raise ValueError(f"mu_gray_min must lie in (0, 1), got {mu_gray_min}")
    points = np.atleast_2d(points)
    mu = np.ones(len(points))
    for g in gray_regions:
        if not 0 <= g.inner < g.outer:
            raise ValueError(f"gray shell needs 0 <= inner < outer, got {g}")
        r = np.linalg.norm(points - np.asarray(g.center), axis=1)
        t = np.clip((r - g.inner) / (g.outer - g.inner), 0.0, 1.0)
        mu = np.minimum(mu, mu_gray_min + (1 - mu_gray_min) * t)
    for s in scar_regions:
        r = np.linalg.norm(points - np.asarray(s.center), axis=1)
        mu = np.where(r <= s.radius, 0.0, mu)
    return mu


def mark_fast_layer(phi: NDArray, thickness_fraction: float) -> NDArray:
    """Vertices in the subendocardial layer φ < thickness_fraction (all of them at fraction >= 1)."""
    phi = np.asarray(phi)
    if thickness_fraction >= 1:
        return np.ones(phi.shape, bool)
    return phi < thickness_fraction


def vertex_components(mesh: TetMesh, marked: NDArray) -> int:
    """Number of edge-connected components among marked vertices."""
    edges, _ = mesh.edges()
    keep = marked[edges[:, 0]] & marked[edges[:, 1]]
    e = edges[keep]
    n = mesh.n_vertices
    G = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, lab = connected_components(G, directed=False)
    return len(np.unique(lab[marked]))


def build_microstructure(mesh: TetMesh, angle_endo: float = 60.0, angle_epi: float = -60.0,
                         fast_fraction: float = 0.1, mu: NDArray | None = None,
                         apicobasal=(0.0, 0.0, 1.0)) -> MicrostructureField:
    """Full rule-based microstructure for a ventricular mesh."""
    phi = solve_transmural_coordinate(mesh)
    f0, s0, n0 = generate_fibers(mesh, phi, angle_endo, angle_epi, apicobasal)
    cells = _cells(mesh)
    phi_v = np.full(mesh.n_vertices, np.nan)
    phi_v[phi.space.dof_vertices] = phi.values
    fast = mark_fast_layer(np.nan_to_num(phi_v, nan=1.0), fast_fraction) if fast_fraction > 0 \
        else np.zeros(mesh.n_vertices, bool)
    return MicrostructureField(
        cells=cells, f0=f0, s0=s0, n0=n0,
        mu=_heart_mu(mesh, mu), fast_layer=fast, xi_hat=compute_xi_hat(mesh),
        is_cap=mesh.regions[cells] == CAPS, phi=phi_v)


def _heart_mu(mesh: TetMesh, mu: NDArray | None) -> NDArray:
    out = np.ones(mesh.n_vertices) if mu is None else np.asarray(mu, float).copy()
    heart_v = np.zeros(mesh.n_vertices, bool)
    heart_v[mesh.tets[mesh.regions == HEART].ravel()] = True
    out[~heart_v] = 0.0
    return out


def uniform_microstructure(mesh: TetMesh, f=(1.0, 0, 0), s=(0, 1.0, 0), n=(0, 0, 1.0),
                           mu: NDArray | None = None) -> MicrostructureField:
    """Spatially constant frame, e.g. for slab and cable tests."""
    cells = _cells(mesh)
    nc, nq = len(cells), FRAME_QUADRATURE.n
    frame = [np.broadcast_to(np.asarray(v, float) / np.linalg.norm(v), (nc, nq, 3)).copy() for v in (f, s, n)]
    return MicrostructureField(
        cells=cells, f0=frame[0], s0=frame[1], n0=frame[2], mu=_heart_mu(mesh, mu),
        fast_layer=np.zeros(mesh.n_vertices, bool), xi_hat=np.ones(mesh.n_vertices),
        is_cap=mesh.regions[cells] == CAPS)
