"""P1/P2 Lagrange finite elements on tetrahedra: quadrature, spaces, assembly, transfer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .mesh import CAPS, HEART, TetMesh

# local edge order for P2 (vertex pairs)
P2_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


@dataclass(frozen=True)
class Quadrature:
    points: NDArray  # (nq, 3) reference coordinates
    weights: NDArray  # (nq,), summing to 1/6

    @property
    def n(self) -> int:
        return len(self.weights)


def _perms(p) -> list[tuple]:
    return sorted(set(permutations(p)))


def tet_quadrature(degree: int) -> Quadrature:
    """Symmetric rule on the reference tet exact for polynomials of the given degree (<= 4)."""
    if degree <= 1:
        return Quadrature(np.full((1, 3), 0.25), np.array([1.0 / 6.0]))
    if degree == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        bary = np.array(_perms((a, b, b, b)))
        return Quadrature(bary[:, 1:], np.full(4, 1.0 / 24.0))
    if degree <= 4:
        a2 = 0.25 * (1 + math.sqrt(5 / 14))
        b2 = 0.25 * (1 - math.sqrt(5 / 14))
        bary = [(0.25,) * 4] + _perms((1 / 14, 1 / 14, 1 / 14, 11 / 14)) + _perms((a2, a2, b2, b2))
        w = [-74 / 5625] + [343 / 45000] * 4 + [56 / 2250] * 6
        return Quadrature(np.array(bary)[:, 1:], np.array(w))
    raise ValueError(f"no tet quadrature implemented for degree {degree}")


def reference_basis(order: int, pts: NDArray) -> tuple[NDArray, NDArray]:
    """Basis values (nq, nb) and reference gradients (nq, nb, 3) at reference points."""
    pts = np.atleast_2d(pts)
    nq = len(pts)
    lam = np.column_stack([1 - pts.sum(1), pts])
    dlam = np.array([[-1.0, -1, -1], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    if order == 1:
        return lam, np.broadcast_to(dlam, (nq, 4, 3)).copy()
    if order != 2:
        raise ValueError(f"unsupported element order {order}")
    vals = np.empty((nq, 10))
    grads = np.empty((nq, 10, 3))
    vals[:, :4] = lam * (2 * lam - 1)
    grads[:, :4] = (4 * lam - 1)[:, :, None] * dlam[None]
    i, j = P2_EDGES[:, 0], P2_EDGES[:, 1]
    vals[:, 4:] = 4 * lam[:, i] * lam[:, j]
    grads[:, 4:] = 4 * (lam[:, i, None] * dlam[j][None] + lam[:, j, None] * dlam[i][None])
    return vals, grads


class FeSpace:
    """Continuous Lagrange space of order 1 or 2 on the tets of selected regions.

    Dofs are numbered vertices first (compact over the active cells), then edges.
    """

    def __init__(self, mesh: TetMesh, order: int = 1, regions=(HEART, CAPS)):
        if order not in (1, 2):
            raise ValueError(f"unsupported element order {order}")
        self.mesh = mesh
        self.order = order
        self.regions = tuple(regions)
        self._grad_cache: dict = {}
        self.cells = np.flatnonzero(np.isin(mesh.regions, self.regions))
        if len(self.cells) == 0:
            raise ValueError(f"no cells in regions {self.regions}")
        tets = mesh.tets[self.cells]
        used = np.unique(tets)
        self.vertex_dof = -np.ones(mesh.n_vertices, dtype=np.int64)
        self.vertex_dof[used] = np.arange(len(used))
        self.dof_vertices = used
        coords = [mesh.vertices[used]]
        cdofs = [self.vertex_dof[tets]]
        self.n_vertex_dofs = len(used)
        self.edge_dof = None
        if order == 2:
            edges, t2e = mesh.edges()
            t2e = t2e[self.cells]
            used_e = np.unique(t2e)
            self.edge_dof = -np.ones(len(edges), dtype=np.int64)
            self.edge_dof[used_e] = self.n_vertex_dofs + np.arange(len(used_e))
            self.dof_edges = edges[used_e]
            coords.append(0.5 * mesh.vertices[edges[used_e]].sum(1))
            cdofs.append(self.edge_dof[t2e])
        self.cell_dofs = np.concatenate(cdofs, axis=1)
        self.dof_coords = np.concatenate(coords)
        self.n_dofs = len(self.dof_coords)
        p = mesh.vertices[tets]
        self.jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
        self.det = np.linalg.det(self.jac)
        self.inv_jac = np.linalg.inv(self.jac)
        self._pattern = None
        self._tree = None

    @property
    def nb(self) -> int:
        return self.cell_dofs.shape[1]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def physical_gradients(self, quad: Quadrature) -> NDArray:
        """Basis gradients (nc, nq, nb, 3) in physical coordinates."""
        key = quad.points.tobytes()
        if key not in self._grad_cache:
            _, g = reference_basis(self.order, quad.points)
            G = np.einsum("cji,qbj->cqbi", self.inv_jac, g)
            G.flags.writeable = False
            self._grad_cache[key] = G
        return self._grad_cache[key]

    def quadrature_points(self, quad: Quadrature) -> NDArray:
        x0 = self.mesh.vertices[self.mesh.tets[self.cells, 0]]
        return x0[:, None] + np.einsum("cij,qj->cqi", self.jac, quad.points)

    # -- assembly ---------------------------------------------------------------

    def _csr(self, local: NDArray) -> sp.csr_matrix:
        if self._pattern is None:
            n = self.n_dofs
            r = np.repeat(self.cell_dofs, self.nb, axis=1).ravel()
            c = np.tile(self.cell_dofs, (1, self.nb)).ravel()
            keys, inv = np.unique(r * n + c, return_inverse=True)
            rows, cols = np.divmod(keys, n)
            indptr = np.searchsorted(rows, np.arange(n + 1))
            self._pattern = (inv, cols, indptr)
        inv, cols, indptr = self._pattern
        data = np.bincount(inv, weights=local.ravel(), minlength=len(cols))
        return sp.csr_matrix((data, cols.copy(), indptr.copy()), shape=(self.n_dofs, self.n_dofs))

    def local_mass(self, coef=None, quad: Quadrature | None = None) -> NDArray:
        quad = quad or tet_quadrature(2 * self.order)
        phi, _ = reference_basis(self.order, quad.points)
        wq = np.abs(self.det)[:, None] * quad.weights[None]
        if coef is not None:
            coef = np.asarray(coef, float)
            wq = wq * (coef[:, None] if coef.ndim == 1 else coef)
        return np.einsum("cq,qa,qb->cab", wq, phi, phi)

    def assemble_mass(self, coef=None, quad: Quadrature | None = None) -> sp.csr_matrix:
        """Mass matrix; ``coef`` is per cell (nc,) or per quadrature point (nc, nq)."""
        return self._csr(self.local_mass(coef, quad))

    def local_stiffness(self, tensor=None, quad: Quadrature | None = None) -> NDArray:
        quad = quad or tet_quadrature(max(1, 2 * self.order - 2))
        G = self.physical_gradients(quad)
        wq = np.abs(self.det)[:, None] * quad.weights[None]
        if tensor is None:
            return np.einsum("cq,cqai,cqbi->cab", wq, G, G, optimize=True)
        D = np.asarray(tensor, float)
        if D.ndim == 1:
            return np.einsum("cq,c,cqai,cqbi->cab", wq, D, G, G, optimize=True)
        if D.ndim == 3:
            D = D[:, None]
        GD = G @ D  # (nc, nq, nb, 3)
        return np.sum((wq[..., None, None] * GD) @ np.swapaxes(G, -1, -2), axis=1)

    def assemble_stiffness(self, tensor=None, quad: Quadrature | None = None) -> sp.csr_matrix:
        """Stiffness with an optional coefficient: scalar per cell, (nc,3,3) or (nc,nq,3,3)."""
        if tensor is not None and np.asarray(tensor).ndim == 4 and quad is None:
            raise ValueError("per-quadrature-point tensors need their quadrature rule")
        return self._csr(self.local_stiffness(tensor, quad))

    def lumped_mass(self, coef=None) -> NDArray:
        """Diagonal mass. Row sums for P1; diagonal-scaling (HRZ) lumping for P2."""
        Ml = self.local_mass(coef)
        if self.order == 1:
            loc = Ml.sum(axis=2)
        else:
            diag = np.einsum("caa->ca", Ml)
            loc = diag * (Ml.sum(axis=(1, 2)) / diag.sum(axis=1))[:, None]
        return np.bincount(self.cell_dofs.ravel(), weights=loc.ravel(), minlength=self.n_dofs)

    # -- evaluation ---------------------------------------------------------------

    def interpolate(self, fn) -> NDArray:
        return np.asarray(fn(self.dof_coords), float)

    def cell_values(self, values: NDArray, quad: Quadrature) -> NDArray:
        phi, _ = reference_basis(self.order, quad.points)
        return np.einsum("qb,cb...->cq...", phi, values[self.cell_dofs])

    def cell_gradients(self, values: NDArray, quad: Quadrature) -> NDArray:
        return np.einsum("cqbi,cb->cqi", self.physical_gradients(quad), values[self.cell_dofs])

    def locate(self, points: NDArray, tol: float = 1e-9) -> tuple[NDArray, NDArray]:
        """Owning active cell (-1 if outside) and reference coordinates of each point."""
        points = np.atleast_2d(points)
        if self._tree is None:
            cent = self.mesh.vertices[self.mesh.tets[self.cells]].mean(1)
            self._tree = cKDTree(cent)
        k = min(24, self.n_cells)
        _, cand = self._tree.query(points, k=k)
        cand = cand.reshape(len(points), k)
        x0 = self.mesh.vertices[self.mesh.tets[self.cells[cand], 0]]
        ref = np.einsum("pkij,pkj->pki", self.inv_jac[cand], points[:, None] - x0)
        lam = np.concatenate([1 - ref.sum(-1, keepdims=True), ref], axis=-1)
        score = lam.min(-1)
        best = np.argmax(score, axis=1)
        idx = np.arange(len(points))
        cell = cand[idx, best]
        cell = np.where(score[idx, best] >= -tol, cell, -1)
        return cell, ref[idx, best]

    def evaluate(self, values: NDArray, points: NDArray) -> NDArray:
        cell, ref = self.locate(points)
        if np.any(cell < 0):
            raise ValueError(f"{int((cell < 0).sum())} points lie outside the space's cells")
        phi = np.stack([reference_basis(self.order, r[None])[0][0] for r in ref])
        return np.einsum("pb,pb...->p...", phi, values[self.cell_dofs[cell]])


@dataclass
class Field:
    space: FeSpace
    values: NDArray

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape[0] != self.space.n_dofs:
            raise ValueError(f"field has {self.values.shape[0]} values, space has {self.space.n_dofs} dofs")

    def at(self, points: NDArray) -> NDArray:
        return self.space.evaluate(self.values, points)


def transfer_field(field: Field, dst: FeSpace) -> Field:
    """Move a field onto another space on the same mesh.

    Shared vertex and edge dofs are copied exactly; P1 to P2 edge values are endpoint means
    (exact); remaining dofs fall back to point evaluation in the source space.
    """
    src = field.space
    if src.mesh is not dst.mesh and src.mesh != dst.mesh:
        raise ValueError("transfer_field requires both spaces on the same mesh")
    v = field.values
    out = np.full((dst.n_dofs,) + v.shape[1:], np.nan)
    dv = src.vertex_dof[dst.dof_vertices]
    ok = dv >= 0
    out[np.flatnonzero(ok)] = v[dv[ok]]
    todo = list(np.flatnonzero(~ok))
    if dst.order == 2:
        ed = np.arange(dst.n_vertex_dofs, dst.n_dofs)
        if src.order == 2:
            edges, _ = dst.mesh.edges()
            key = {tuple(e): i for i, e in enumerate(edges)}
            ids = np.array([key[tuple(e)] for e in dst.dof_edges])
            se = src.edge_dof[ids]
            good = se >= 0
            out[ed[good]] = v[se[good]]
            todo += list(ed[~good])
        else:
            a, b = src.vertex_dof[dst.dof_edges[:, 0]], src.vertex_dof[dst.dof_edges[:, 1]]
            good = (a >= 0) & (b >= 0)
            out[ed[good]] = 0.5 * (v[a[good]] + v[b[good]])
            todo += list(ed[~good])
    if todo:
        todo = np.array(todo)
        out[todo] = src.evaluate(v, dst.dof_coords[todo])
    return Field(dst, out)
