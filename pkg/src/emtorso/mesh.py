"""Tetrahedral mesh container, validation, sub-meshing and the plain-text exchange format.

The exchange format is a sequence of sections, each introduced by a header line
``NAME count``::

    VERTICES n
    x y z                # n lines, meters
    TETS m
    a b c d              # m lines, 0-based vertex indices
    BOUNDARY k
    a b c label          # k lines
    REGIONS m
    heart|caps|torso     # m lines, one per tet

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

HEART, CAPS, TORSO = 0, 1, 2
REGION_NAMES = {HEART: "heart", CAPS: "caps", TORSO: "torso"}
REGION_IDS = {v: k for k, v in REGION_NAMES.items()}

HEART_LABELS = (
    "endo_LV",
    "endo_RV",
    "epi",
    "base",
    "cap_endo_LV",
    "cap_endo_RV",
    "cap_epi_LV",
    "cap_epi_RV",
)
TORSO_LABELS = ("heart_torso_interface", "torso_ext")
LABELS = HEART_LABELS + TORSO_LABELS

# Outward-oriented local faces of a positively oriented tet, indexed by the opposite vertex.
LOCAL_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    """Raised for invalid mesh construction parameters or malformed mesh files."""


@dataclass(frozen=True)
class MeshIssue:
    kind: str
    index: int
    message: str


def _face_keys(faces: NDArray, n_vertices: int) -> NDArray:
    s = np.sort(faces, axis=1).astype(np.int64)
    n = np.int64(n_vertices)
    return (s[:, 0] * n + s[:, 1]) * n + s[:, 2]


@dataclass(eq=False)
class TetMesh:
    """Immutable-by-convention tetrahedral mesh with labeled facets and per-tet regions."""

    vertices: NDArray[np.float64]
    tets: NDArray[np.int64]
    facets: NDArray[np.int64] = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    facet_labels: list[str] = field(default_factory=list)
    regions: NDArray[np.int64] | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        self.facets = np.ascontiguousarray(self.facets, dtype=np.int64).reshape(-1, 3)
        self.facet_labels = [str(s) for s in self.facet_labels]
        if len(self.facet_labels) != len(self.facets):
            raise MeshError("facet label count does not match facet count")
        if self.regions is None:
            self.regions = np.full(len(self.tets), HEART, dtype=np.int64)
        self.regions = np.asarray(self.regions, dtype=np.int64).reshape(-1)
        if len(self.regions) != len(self.tets):
            raise MeshError("region count does not match tet count")
        self._cache: dict = {}

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def signed_volumes(self) -> NDArray:
        p = self.vertices[self.tets]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        c = p[:, 3] - p[:, 0]
        return np.einsum("ij,ij->i", np.cross(a, b), c) / 6.0

    def volume(self, regions=None) -> float:
        vol = self.signed_volumes()
        if regions is not None:
            vol = vol[np.isin(self.regions, np.atleast_1d(regions))]
        return float(vol.sum())

    # -- face topology ---------------------------------------------------

    def _face_table(self):
        if "faces" not in self._cache:
            faces = self.tets[:, LOCAL_FACES].reshape(-1, 3)
            keys = _face_keys(faces, self.n_vertices)
            order = np.argsort(keys, kind="stable")
            self._cache["faces"] = (faces, keys, order, keys[order])
        return self._cache["faces"]

    def face_owners(self, facets: NDArray) -> list[NDArray]:
        """For each facet, the indices (tet*4 + local) of all tets containing it."""
        _, _, order, sorted_keys = self._face_table()
        keys = _face_keys(np.asarray(facets).reshape(-1, 3), self.n_vertices)
        lo = np.searchsorted(sorted_keys, keys, side="left")
        hi = np.searchsorted(sorted_keys, keys, side="right")
        return [order[a:b] for a, b in zip(lo, hi)]

    def boundary_faces(self) -> tuple[NDArray, NDArray]:
        """Faces owned by exactly one tet, outward oriented, with their owner tet."""
        faces, keys, order, sorted_keys = self._face_table()
        uniq, start, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
        single = order[start[counts == 1]]
        return faces[single], single // 4

    def labeled_facets(self, labels, regions=None) -> tuple[NDArray, NDArray]:
        """Facets carrying any of ``labels``, oriented outward from their owner tet.

        When a facet is shared by two tets (an interface), the owner is the tet
        belonging to ``regions`` (default: heart and caps).
        """
        labels = {labels} if isinstance(labels, str) else set(labels)
        if regions is None:
            regions = (HEART, CAPS)
        regions = np.atleast_1d(regions)
        sel = [i for i, lab in enumerate(self.facet_labels) if lab in labels]
        if not sel:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
        facets = self.facets[sel]
        faces, _, _, _ = self._face_table()
        owners = self.face_owners(facets)
        out_faces, out_tets = [], []
        seen = set()
        for f, own in zip(facets, owners):
            key = tuple(sorted(f))
            if key in seen:
                continue
            cands = [o for o in own if self.regions[o // 4] in regions]
            if not cands:
                cands = list(own)
            if not cands:
                raise MeshError(f"labeled facet {tuple(f)} is not a face of any tet")
            o = cands[0]
            seen.add(key)
            out_faces.append(faces[o])
            out_tets.append(o // 4)
        return np.array(out_faces, dtype=np.int64), np.array(out_tets, dtype=np.int64)

    def facet_vertices(self, labels) -> NDArray:
        labels = {labels} if isinstance(labels, str) else set(labels)
        sel = [i for i, lab in enumerate(self.facet_labels) if lab in labels]
        return np.unique(self.facets[sel]) if sel else np.zeros(0, dtype=np.int64)

    def labels_present(self) -> set[str]:
        return set(self.facet_labels)

    def edges(self) -> tuple[NDArray, NDArray]:
        """Unique edges (sorted vertex pairs) and the (m, 6) tet-to-edge map.

        Local edge order: (0,1), (0,2), (0,3), (1,2), (1,3), (2,3).
        """
        if "edges" not in self._cache:
            loc = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
            e = np.sort(self.tets[:, loc].reshape(-1, 2), axis=1)
            keys = e[:, 0] * np.int64(self.n_vertices) + e[:, 1]
            uniq, inv = np.unique(keys, return_inverse=True)
            edges = np.stack([uniq // self.n_vertices, uniq % self.n_vertices], axis=1)
            self._cache["edges"] = (edges, inv.reshape(-1, 6))
        return self._cache["edges"]

    # -- derived meshes --------------------------------------------------

    def submesh(self, regions) -> tuple["TetMesh", NDArray]:
        """Restrict to the tets in ``regions``; returns the mesh and local-to-parent vertex map.

        Facet labels are carried over. Facets that were internal interfaces in the
        parent keep only the labels belonging to the side that is retained.
        """
        regions = np.atleast_1d(regions)
        keep = np.isin(self.regions, regions)
        tets = self.tets[keep]
        vmap = np.unique(tets)
        g2l = -np.ones(self.n_vertices, dtype=np.int64)
        g2l[vmap] = np.arange(len(vmap))
        allowed = set()
        if np.isin(regions, [HEART, CAPS]).any():
            allowed |= set(HEART_LABELS)
        if TORSO in regions:
            allowed |= set(TORSO_LABELS)
        sub = TetMesh(vertices=self.vertices[vmap], tets=g2l[tets], regions=self.regions[keep])
        bfaces, _ = sub.boundary_faces()
        bkeys = set(_face_keys(bfaces, sub.n_vertices).tolist())
        facets, labels = [], []
        for f, lab in zip(self.facets, self.facet_labels):
            if lab not in allowed or (g2l[f] < 0).any():
                continue
            lf = g2l[f]
            if int(_face_keys(lf[None], sub.n_vertices)[0]) in bkeys:
                facets.append(lf)
                labels.append(lab)
        sub.facets = np.array(facets, dtype=np.int64).reshape(-1, 3)
        sub.facet_labels = labels
        return sub, vmap

    def with_vertices(self, vertices: NDArray) -> "TetMesh":
        return TetMesh(vertices=vertices, tets=self.tets, facets=self.facets,
                       facet_labels=list(self.facet_labels), regions=self.regions)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.tets).tobytes())
        h.update(np.ascontiguousarray(self.regions).tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, TetMesh):
            return NotImplemented
        return (
            np.array_equal(self.tets, other.tets)
            and np.allclose(self.vertices, other.vertices, rtol=0, atol=1e-12)
            and np.array_equal(self.regions, other.regions)
            and np.array_equal(self.facets, other.facets)
            and self.facet_labels == other.facet_labels
        )


def validate_mesh(mesh: TetMesh) -> list[MeshIssue]:
    """Check the mesh invariants; returns a (possibly empty) list of issues."""
    issues: list[MeshIssue] = []
    vol = mesh.signed_volumes()
    for i in np.flatnonzero(vol <= 0):
        issues.append(MeshIssue("nonpositive_volume", int(i), f"tet {i} has signed volume {vol[i]:.3e}"))
    for i, lab in enumerate(mesh.facet_labels):
        if lab not in LABELS:
            issues.append(MeshIssue("unknown_label", i, f"facet {i} has unknown label {lab!r}"))
    # label multiplicity per facet
    fkeys = _face_keys(mesh.facets, mesh.n_vertices) if len(mesh.facets) else np.zeros(0, np.int64)
    owners = mesh.face_owners(mesh.facets) if len(mesh.facets) else []
    by_key: dict[int, list[int]] = {}
    for i, k in enumerate(fkeys.tolist()):
        by_key.setdefault(k, []).append(i)
    for i, own in enumerate(owners):
        if len(own) == 0:
            issues.append(MeshIssue("dangling_facet", i, f"facet {i} is not a face of any tet"))
    bfaces, _ = mesh.boundary_faces()
    for bk in _face_keys(bfaces, mesh.n_vertices).tolist():
        idx = by_key.get(bk, [])
        if len(idx) != 1:
            issues.append(MeshIssue("boundary_label_count", int(bk),
                                    f"boundary face {bk} carries {len(idx)} labels (expected 1)"))
    for k, idx in by_key.items():
        own = owners[idx[0]]
        if len(own) == 2:
            labs = {mesh.facet_labels[i] for i in idx}
            if labs - set(HEART_LABELS) - {"heart_torso_interface"}:
                issues.append(MeshIssue("internal_label", idx[0],
                                        f"internal facet {idx[0]} carries non-interface labels {sorted(labs)}"))
    return issues


def check_mesh(mesh: TetMesh) -> None:
    issues = validate_mesh(mesh)
    if issues:
        raise MeshError("; ".join(i.message for i in issues[:5]) + (" ..." if len(issues) > 5 else ""))


# -- file I/O --------------------------------------------------------------

_SECTIONS = ("VERTICES", "TETS", "BOUNDARY", "REGIONS")


def save_mesh(mesh: TetMesh, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"VERTICES {mesh.n_vertices}\n")
        for x in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in x) + "\n")
        fh.write(f"TETS {mesh.n_tets}\n")
        for t in mesh.tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
        fh.write(f"BOUNDARY {len(mesh.facets)}\n")
        for f, lab in zip(mesh.facets, mesh.facet_labels):
            fh.write(f"{f[0]} {f[1]} {f[2]} {lab}\n")
        fh.write(f"REGIONS {mesh.n_tets}\n")
        for r in mesh.regions:
            fh.write(f"{REGION_NAMES[int(r)]}\n")


def load_mesh(path) -> TetMesh:
    """Parse a mesh file. Raises MeshError naming the line number or the missing section."""
    path = Path(path)
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(path.read_text().splitlines())]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    data: dict[str, list] = {}
    pos = 0
    while pos < len(lines):
        lineno, ln = lines[pos]
        parts = ln.split()
        if parts[0] not in _SECTIONS or len(parts) != 2:
            raise MeshError(f"line {lineno}: expected a section header, got {ln!r}")
        name = parts[0]
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshError(f"line {lineno}: bad count in section header {ln!r}") from None
        body = lines[pos + 1: pos + 1 + count]
        if len(body) < count:
            raise MeshError(f"section {name} truncated: expected {count} entries, found {len(body)}")
        rows = []
        for n, row in body:
            tok = row.split()
            try:
                if name == "VERTICES":
                    if len(tok) != 3:
                        raise ValueError
                    rows.append([float(t) for t in tok])
                elif name == "TETS":
                    if len(tok) != 4:
                        raise ValueError
                    rows.append([int(t) for t in tok])
                elif name == "BOUNDARY":
                    if len(tok) != 4:
                        raise ValueError
                    rows.append(([int(t) for t in tok[:3]], tok[3]))
                else:
                    if len(tok) != 1:
                        raise ValueError
                    rows.append(REGION_IDS[tok[0]] if tok[0] in REGION_IDS else int(tok[0]))
            except (ValueError, KeyError):
                raise MeshError(f"line {n}: malformed {name} entry {row!r}") from None
        data[name] = rows
        pos += 1 + count
    for name in _SECTIONS:
        if name not in data:
            raise MeshError(f"missing section {name}")
    verts = np.array(data["VERTICES"], dtype=float).reshape(-1, 3)
    tets = np.array(data["TETS"], dtype=np.int64).reshape(-1, 4)
    if tets.size and (tets.max() >= len(verts) or tets.min() < 0):
        raise MeshError("TETS references a vertex index out of range")
    facets = np.array([f for f, _ in data["BOUNDARY"]], dtype=np.int64).reshape(-1, 3)
    labels = [lab for _, lab in data["BOUNDARY"]]
    regions = np.array(data["REGIONS"], dtype=np.int64)
    if len(regions) != len(tets):
        raise MeshError(f"REGIONS has {len(regions)} entries for {len(tets)} tets")
    return TetMesh(verts, tets, facets, labels, regions)


# -- small reference meshes -------------------------------------------------


def single_tet(scale: float = 1.0) -> TetMesh:
    v = scale * np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    t = np.array([[0, 1, 2, 3]])
    m = TetMesh(v, t)
    faces, _ = m.boundary_faces()
    return TetMesh(v, t, faces, ["epi"] * len(faces))


def two_tets(scale: float = 1.0) -> TetMesh:
    """Two tets sharing the face (1, 2, 3)."""
    v = scale * np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=float)
    t = np.array([[0, 1, 2, 3], [1, 2, 3, 4]])
    vol = TetMesh(v, t).signed_volumes()
    t[vol < 0] = t[vol < 0][:, [0, 2, 1, 3]]
    m = TetMesh(v, t)
    faces, _ = m.boundary_faces()
    return TetMesh(v, t, faces, ["epi"] * len(faces))


_KUHN = np.array([
    [0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7], [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7],
])


def box_mesh(n, lengths, origin=(0.0, 0.0, 0.0), label_fn=None, region: int = HEART) -> TetMesh:
    """Structured box split into Kuhn tets (6 per hex; conforming across cells).

    ``label_fn(centroid, normal) -> label`` assigns boundary labels (default ``"epi"``).
    """
    nx, ny, nz = (int(k) for k in n)
    if min(nx, ny, nz) < 1:
        raise MeshError("box_mesh needs at least one cell per direction")
    axes = [np.linspace(o, o + L, k + 1) for o, L, k in zip(origin, lengths, (nx, ny, nz))]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    corners = np.stack([vid(I + (c & 1), J + ((c >> 1) & 1), K + ((c >> 2) & 1)) for c in range(8)], axis=1)
    tets = corners[:, _KUHN].reshape(-1, 4)
    m = TetMesh(verts, tets)
    vol = m.signed_volumes()
    tets[vol < 0] = tets[vol < 0][:, [0, 2, 1, 3]]
    m = TetMesh(verts, tets)
    faces, _ = m.boundary_faces()
    if label_fn is None:
        labels = ["epi"] * len(faces)
    else:
        p = verts[faces]
        cen = p.mean(axis=1)
        nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
        labels = [label_fn(c, nn) for c, nn in zip(cen, nrm)]
    return TetMesh(verts, tets, faces, labels, np.full(len(tets), region))
