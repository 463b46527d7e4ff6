"""Idealized geometry generation: truncated-ellipsoid LV with a basal cap, torso embedding, shells.

Every generator builds its tets from stacked triangular prisms. Prisms are cut into
three tets with the min-vertex-index rule, which picks the diagonal of each quad face
through its smallest global vertex index; neighbouring prisms therefore always agree
on shared faces and the result is conforming without any vertex matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .mesh import CAPS, HEART, TORSO, MeshError, TetMesh

# vertex relabelings that move prism vertex i to slot 0 (orientation preserving)
_PRISM_ROT = np.array([
    [0, 1, 2, 3, 4, 5],
    [1, 2, 0, 4, 5, 3],
    [2, 0, 1, 5, 3, 4],
    [3, 5, 4, 0, 2, 1],
    [4, 3, 5, 1, 0, 2],
    [5, 4, 3, 2, 1, 0],
])


def split_prisms(prisms: NDArray) -> NDArray:
    """Cut prisms ``(a, b, c, a', b', c')`` into 3 tets each; conforming across shared quads."""
    prisms = np.asarray(prisms, dtype=np.int64).reshape(-1, 6)
    imin = np.argmin(prisms, axis=1)
    V = np.take_along_axis(prisms, _PRISM_ROT[imin], axis=1)
    first = np.minimum(V[:, 1], V[:, 5]) < np.minimum(V[:, 2], V[:, 4])
    t1 = np.stack([
        V[:, [0, 1, 2, 5]], V[:, [0, 1, 5, 4]], V[:, [0, 4, 5, 3]],
    ], axis=1)
    t2 = np.stack([
        V[:, [0, 1, 2, 4]], V[:, [0, 4, 2, 5]], V[:, [0, 4, 5, 3]],
    ], axis=1)
    return np.where(first[:, None, None], t1, t2).reshape(-1, 4)


def _orient(vertices: NDArray, tets: NDArray) -> NDArray:
    tets = tets.copy()
    p = vertices[tets]
    vol = np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0])
    if np.any(np.abs(vol) < 1e-30):
        raise MeshError("generator produced a degenerate tet")
    neg = vol < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    return tets


def _quad_tris(a, b, c, d):
    """Split quad with cyclic corners a-b-c-d along the diagonal through its min index."""
    q = np.stack([a, b, c, d], axis=1)
    m = np.argmin(q, axis=1)
    ac = (m == 0) | (m == 2)
    t1 = np.where(ac[:, None], np.stack([a, b, c], 1), np.stack([b, c, d], 1))
    t2 = np.where(ac[:, None], np.stack([a, c, d], 1), np.stack([b, d, a], 1))
    return np.concatenate([t1, t2])


# -- idealized left ventricle --------------------------------------------------


@dataclass(frozen=True)
class LVGeometry:
    """Truncated prolate ellipsoidal LV wall. Lengths in meters.

    ``truncation`` is the height of the basal plane (the apex sits at ``-outer_radii[2]``).
    """

    outer_radii: tuple[float, float, float] = (0.04, 0.04, 0.07)
    thickness: float = 0.01
    truncation: float = 0.0
    edge: float = 0.01
    cap_layers: int = 2

    @property
    def inner_radii(self) -> tuple[float, float, float]:
        return tuple(r - self.thickness for r in self.outer_radii)

    def validate(self) -> None:
        if not self.thickness > 0:
            raise MeshError(f"wall thickness must be positive, got {self.thickness}")
        if not self.edge > 0:
            raise MeshError(f"edge length must be positive, got {self.edge}")
        inner = self.inner_radii
        if min(inner) <= 0:
            raise MeshError(f"inner radii {inner} must be positive (thickness too large)")
        if not -inner[2] < self.truncation < inner[2]:
            raise MeshError(
                f"truncation plane z={self.truncation} must intersect the inner ellipsoid "
                f"(|z| < {inner[2]})")
        if self.cap_layers < 1:
            raise MeshError("cap_layers must be >= 1")


def truncated_ellipsoid_volume(radii, h: float) -> float:
    """Volume of the solid ellipsoid with the given semi-axes below the plane z = h."""
    a, b, c = radii
    return math.pi * a * b * ((h + c) - (h ** 3 + c ** 3) / (3 * c ** 2))


def _lv_counts(g: LVGeometry) -> tuple[int, int, int]:
    n_t = max(1, math.ceil(g.thickness / g.edge - 1e-9))
    ro, ri = np.array(g.outer_radii), np.array(g.inner_radii)
    rmid = 0.5 * (ro + ri)
    n_phi = max(8, math.ceil(2 * math.pi * 0.5 * (rmid[0] + rmid[1]) / g.edge))
    th_b = math.acos(g.truncation / rmid[2])
    th = np.linspace(th_b, math.pi, 400)
    pts = np.stack([rmid[0] * np.sin(th), rmid[2] * np.cos(th)], axis=1)
    arc = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    n_nu = max(g.cap_layers + 2, math.ceil(arc / g.edge))
    return n_t, n_phi, n_nu


def generate_idealized_lv(g: LVGeometry | None = None) -> TetMesh:
    """Mesh the LV wall plus a basal cap plug (region ``caps``) sealing the cavity.

    The cap fills the inner ellipsoid between the top ``cap_layers`` rings of the
    endocardium; its top is flush with the basal plane. Boundary labels:
    ``endo_LV, epi, base, cap_endo_LV, cap_epi_LV``.
    """
    g = g or LVGeometry()
    g.validate()
    n_t, n_phi, n_nu = _lv_counts(g)
    ro, ri = np.array(g.outer_radii), np.array(g.inner_radii)
    h = g.truncation
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    L = 1 + n_nu * n_phi

    verts = np.zeros(((n_t + 1) * L, 3))
    theta_of = {}
    for k in range(n_t + 1):
        r = ri + (ro - ri) * k / n_t
        th_b = math.acos(h / r[2])
        nu = np.arange(n_nu + 1) / n_nu
        th = math.pi - nu * (math.pi - th_b)
        theta_of[k] = th
        verts[k * L] = (0.0, 0.0, -r[2])
        S, P = np.meshgrid(np.sin(th[1:]), phi, indexing="ij")
        C = np.repeat(np.cos(th[1:])[:, None], n_phi, axis=1)
        blk = np.stack([r[0] * S * np.cos(P), r[1] * S * np.sin(P), r[2] * C], axis=-1).reshape(-1, 3)
        blk[-n_phi:, 2] = h  # exact basal plane
        verts[k * L + 1:(k + 1) * L] = blk

    def ring(nu, j):
        return 1 + (nu - 1) * n_phi + (j % n_phi)

    j = np.arange(n_phi)
    tris = [np.stack([np.zeros(n_phi, dtype=np.int64), ring(1, j), ring(1, j + 1)], axis=1)]
    for nu in range(1, n_nu):
        tris.append(_quad_tris(ring(nu, j), ring(nu, j + 1), ring(nu + 1, j + 1), ring(nu + 1, j)))
    surf = np.concatenate(tris).astype(np.int64)
    prisms = np.concatenate([np.concatenate([surf + k * L, surf + (k + 1) * L], axis=1) for k in range(n_t)])
    wall_tets = split_prisms(prisms)

    # cap plug: disks at the top cap_layers+1 endocardial rings
    n_r = max(1, math.ceil(ri[0] * math.sin(theta_of[0][-1]) / g.edge))
    D = 1 + (n_r - 1) * n_phi
    cap_off = len(verts)
    cap_verts = []
    levels = list(range(n_nu - g.cap_layers, n_nu + 1))
    for lev, nu in enumerate(levels):
        th = theta_of[0][nu]
        z = h if nu == n_nu else ri[2] * math.cos(th)
        cap_verts.append([0.0, 0.0, z])
        for m in range(1, n_r):
            s = m / n_r
            cap_verts.extend(np.stack([s * ri[0] * math.sin(th) * np.cos(phi),
                                       s * ri[1] * math.sin(th) * np.sin(phi),
                                       np.full(n_phi, z)], axis=1))
    verts = np.concatenate([verts, np.array(cap_verts).reshape(-1, 3)])

    def disk(lev, m, jj):
        if m == n_r:
            return ring(levels[lev], jj)
        if m == 0:
            return np.full_like(jj, cap_off + lev * D)
        return cap_off + lev * D + 1 + (m - 1) * n_phi + (jj % n_phi)

    cap_prisms = []
    for lev in range(g.cap_layers):
        lo, hi = lev, lev + 1
        blocks = [(disk(lo, 0, j), disk(lo, 1, j), disk(lo, 1, j + 1),
                   disk(hi, 0, j), disk(hi, 1, j), disk(hi, 1, j + 1))]
        for m in range(1, n_r):
            # fixed split per annulus so every level shares the same triangulation
            blocks.append((disk(lo, m, j), disk(lo, m + 1, j), disk(lo, m + 1, j + 1),
                           disk(hi, m, j), disk(hi, m + 1, j), disk(hi, m + 1, j + 1)))
            blocks.append((disk(lo, m, j), disk(lo, m + 1, j + 1), disk(lo, m, j + 1),
                           disk(hi, m, j), disk(hi, m + 1, j + 1), disk(hi, m, j + 1)))
        cap_prisms.extend(np.stack(b, axis=1) for b in blocks)
    cap_tets = split_prisms(np.concatenate(cap_prisms))

    tets = np.concatenate([wall_tets, cap_tets])
    tets = _orient(verts, tets)
    regions = np.concatenate([np.full(len(wall_tets), HEART), np.full(len(cap_tets), CAPS)])
    mesh = TetMesh(verts, tets, regions=regions)

    faces, owner = mesh.boundary_faces()
    layer = np.where(np.arange(len(verts)) < cap_off, np.arange(len(verts)) // L, -1)
    fl = layer[faces]
    z_top, z_bot = h, ri[2] * math.cos(theta_of[0][levels[0]])
    labels = []
    for f, o, lay in zip(faces, owner, fl):
        if regions[o] == CAPS:
            zc = verts[f, 2].mean()
            labels.append("cap_epi_LV" if zc > 0.5 * (z_top + z_bot) else "cap_endo_LV")
        elif (lay == 0).all():
            labels.append("endo_LV")
        elif (lay == n_t).all():
            labels.append("epi")
        else:
            labels.append("base")
    return TetMesh(verts, tets, faces, labels, regions)


def lv_cap_bottom(g: LVGeometry) -> float:
    """Height of the cavity-facing cap surface."""
    n_t, n_phi, n_nu = _lv_counts(g)
    ri = g.inner_radii
    th_b = math.acos(g.truncation / ri[2])
    nu = (n_nu - g.cap_layers) / n_nu
    return ri[2] * math.cos(math.pi - nu * (math.pi - th_b))


def lv_cavity_point(g: LVGeometry) -> NDArray:
    """A point strictly inside the LV cavity (used as the volume reference point)."""
    return np.array([0.0, 0.0, 0.5 * (-g.inner_radii[2] + lv_cap_bottom(g))])


# -- extrusion & torso ----------------------------------------------------------


def extrude_surface(vertices: NDArray, tris: NDArray, surf_ids: NDArray, layers: NDArray,
                    first_index: int) -> tuple[NDArray, NDArray, NDArray]:
    """Extrude a triangulated surface through stacked vertex layers.

    ``layers`` has shape (n_layers, n_surf, 3) with positions of each surface vertex
    (in ``surf_ids`` order) per layer beyond the surface itself. Returns
    (new vertices, tets, outermost triangles) with new vertex ids starting at ``first_index``.
    """
    n_l, n_s, _ = layers.shape
    loc = -np.ones(int(max(surf_ids.max(), tris.max())) + 1, dtype=np.int64)
    loc[surf_ids] = np.arange(n_s)
    lt = loc[tris]

    def ids(k):
        return tris if k == 0 else first_index + (k - 1) * n_s + lt

    prisms = np.concatenate([np.concatenate([ids(k), ids(k + 1)], axis=1) for k in range(n_l)])
    return layers.reshape(-1, 3), split_prisms(prisms), ids(n_l)


@dataclass(frozen=True)
class TorsoBox:
    lower: tuple[float, float, float] = (-0.15, -0.12, -0.20)
    upper: tuple[float, float, float] = (0.15, 0.12, 0.12)
    edge: float = 0.03
    grading: float = 1.6
    center: tuple[float, float, float] | None = None


def embed_in_torso_box(heart: TetMesh, box: TorsoBox | None = None) -> TetMesh:
    """Surround the heart+caps body with a conforming torso region out to a box.

    The body surface (every heart/caps boundary facet except the cavity-facing ones)
    is extruded along rays from an interior center to the box; the outermost layer is
    labeled ``torso_ext`` and the body surface additionally ``heart_torso_interface``.
    """
    box = box or TorsoBox()
    lo, hi = np.array(box.lower, float), np.array(box.upper, float)
    if np.any(hi <= lo):
        raise MeshError("torso box upper corner must exceed lower corner")
    V = heart.vertices
    if np.any(V <= lo) or np.any(V >= hi):
        raise MeshError("heart mesh touches or exceeds the torso box")
    cavity = {"endo_LV", "endo_RV", "cap_endo_LV", "cap_endo_RV"}
    body_labels = set(heart.facet_labels) - cavity
    tris, _ = heart.labeled_facets(body_labels)
    if len(tris) == 0:
        raise MeshError("heart mesh has no exterior facets to embed")
    surf_ids = np.unique(tris)
    P = V[surf_ids]
    c = np.array(box.center, float) if box.center is not None else 0.5 * (V.min(0) + V.max(0))
    d = P - c
    dist = np.linalg.norm(d, axis=1)
    u = d / dist[:, None]
    with np.errstate(divide="ignore"):
        t_hi = np.where(u > 0, (hi - c) / np.where(u > 0, u, 1), np.inf)
        t_lo = np.where(u < 0, (lo - c) / np.where(u < 0, u, 1), np.inf)
    t_box = np.minimum(t_hi, t_lo).min(axis=1)
    if np.any(t_box <= dist * (1 + 1e-6)):
        raise MeshError("heart is not strictly inside the torso box along its embedding rays")
    Q = c + u * t_box[:, None]
    gap = float(np.mean(t_box - dist))
    n_l = max(2, math.ceil(gap / box.edge))
    s = (np.arange(1, n_l + 1) / n_l) ** box.grading
    layers = P[None] + s[:, None, None] * (Q - P)[None]
    new_v, torso_tets, outer = extrude_surface(V, tris, surf_ids, layers, len(V))
    verts = np.concatenate([V, new_v])
    torso_tets = _orient(verts, torso_tets)
    tets = np.concatenate([heart.tets, torso_tets])
    regions = np.concatenate([heart.regions, np.full(len(torso_tets), TORSO)])
    facets = np.concatenate([heart.facets, tris, outer])
    labels = list(heart.facet_labels) + ["heart_torso_interface"] * len(tris) + ["torso_ext"] * len(outer)
    return TetMesh(verts, tets, facets, labels, regions)


# -- spherical shells -------------------------------------------------------------


def icosphere(level: int) -> tuple[NDArray, NDArray]:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t],
         [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = [tuple(x) for x in f]
    for _ in range(level):
        mid: dict = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                mid[key] = len(verts) - 1
            return mid[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.array(verts), np.array(faces, dtype=np.int64)


def spherical_shell(r_in: float, r_out: float, level: int = 2, n_layers: int = 4,
                    inner_label: str = "endo_LV", outer_label: str = "epi",
                    region: int = HEART) -> TetMesh:
    """Concentric spherical shell by radial extrusion of an icosphere."""
    if not 0 < r_in < r_out:
        raise MeshError("need 0 < r_in < r_out")
    sv, st = icosphere(level)
    radii = np.linspace(r_in, r_out, n_layers + 1)
    base = sv * r_in
    layers = radii[1:, None, None] * sv[None]
    ids = np.arange(len(sv))
    new_v, tets, outer = extrude_surface(base, st, ids, layers, len(sv))
    verts = np.concatenate([base, new_v])
    tets = _orient(verts, tets)
    facets = np.concatenate([st, outer])
    labels = [inner_label] * len(st) + [outer_label] * len(outer)
    return TetMesh(verts, tets, facets, labels, np.full(len(tets), region))
