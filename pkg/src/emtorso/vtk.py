"""Legacy ASCII VTK export of tet meshes with point data."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TetMesh

VTK_TETRA = 10


def export_vtk(mesh: TetMesh, fields: dict | None, path, title: str = "emtorso") -> Path:
    """Write an unstructured grid; each field is (n_vertices,) scalars or (n_vertices, 3) vectors.

    Fields defined on fewer points (e.g. one region) must be scattered by the caller.
    Region ids are written as cell data.
    """
    path = Path(path)
    fields = fields or {}
    n, m = mesh.n_vertices, mesh.n_tets
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"CELLS {m} {5 * m}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append(f"CELL_TYPES {m}")
    lines += [str(VTK_TETRA)] * m
    lines += [f"CELL_DATA {m}", "SCALARS region int 1", "LOOKUP_TABLE default"]
    lines += [str(int(r)) for r in mesh.regions]
    if fields:
        lines.append(f"POINT_DATA {n}")
    for name, vals in fields.items():
        vals = np.asarray(vals, float)
        if vals.shape[0] != n:
            raise ValueError(f"field {name!r} has {vals.shape[0]} values, mesh has {n} vertices")
        key = name.replace(" ", "_")
        if vals.ndim == 1:
            lines += [f"SCALARS {key} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.10g}" for v in vals]
        elif vals.shape[1:] == (3,):
            lines.append(f"VECTORS {key} double")
            lines += [f"{a:.10g} {b:.10g} {c:.10g}" for a, b, c in vals]
        else:
            raise ValueError(f"field {name!r} must be scalar or 3-vector per point")
    path.write_text("\n".join(lines) + "\n")
    return path
