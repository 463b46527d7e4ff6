"""Command line entry point: ``emtorso {mesh,fibers,run,leads,cc,snapshot}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .ecg import LeadTrace, compute_leads, export_traces, format_cc_report, mean_cc, read_traces, snap_electrodes
from .linalg import SolverError
from .mesh import CAPS, HEART, TORSO, MeshError, save_mesh, validate_mesh

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
THREADS_ENV = "EMTORSO_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(n: int | None) -> None:
    # BLAS pools read these at import time; the flag only matters before numpy spins up workers
    n = n or int(os.environ.get(THREADS_ENV, "0") or 0)
    if n > 0:
        for var in _BLAS_VARS:
            os.environ[var] = str(n)


def _load_config(args) -> RunConfig:
    return parse_config(args.config) if args.config else RunConfig()


def _output_dir(args, cfg: RunConfig) -> Path:
    return Path(args.output_dir or cfg.output.directory)


def cmd_mesh(args) -> int:
    from .simulator import build_mesh

    cfg = _load_config(args)
    mesh = build_mesh(cfg)
    issues = validate_mesh(mesh)
    labels = np.array(mesh.facet_labels)
    counts = {lab: int(np.sum(labels == lab)) for lab in sorted(mesh.labels_present())}
    print(f"vertices {mesh.n_vertices}  tets {mesh.n_tets}  fingerprint {mesh.fingerprint()[:16]}")
    for region, name in ((HEART, "heart"), (CAPS, "caps"), (TORSO, "torso")):
        print(f"  {name:6s} tets {int(np.sum(mesh.regions == region)):7d}  volume {mesh.volume([region]):.4e} m^3")
    for lab, n in counts.items():
        print(f"  facets {lab:24s} {n}")
    for issue in issues:
        print(f"  issue: {issue}")
    if args.write:
        save_mesh(mesh, args.write)
        print(f"wrote {args.write}")
    return EXIT_OK if not issues else EXIT_SOLVER


def cmd_fibers(args) -> int:
    from .fibers import build_microstructure, fiber_angle
    from .simulator import build_mesh
    from .vtk import export_vtk

    cfg = _load_config(args)
    mesh = build_mesh(cfg)
    micro = build_microstructure(mesh, cfg.fibers.angle_endo, cfg.fibers.angle_epi, cfg.fibers.fast_fraction)
    ang = fiber_angle(micro.f0[~micro.is_cap], micro.s0[~micro.is_cap])
    print(f"helix angle range [{ang.min():.1f}, {ang.max():.1f}] deg over {int((~micro.is_cap).sum())} cells")
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    f_v = np.zeros((mesh.n_vertices, 3))
    counts = np.zeros(mesh.n_vertices)
    tets = mesh.tets[micro.cells]
    np.add.at(f_v, tets, np.repeat(micro.f0.mean(1)[:, None], 4, axis=1))
    np.add.at(counts, tets, 1)
    f_v[counts > 0] /= counts[counts > 0, None]
    path = export_vtk(mesh, {"fiber": f_v, "phi": np.nan_to_num(micro.phi, nan=-1.0),
                             "fast_layer": micro.fast_layer.astype(float)}, out / "fibers.vtk")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .simulator import run_simulation

    cfg = _load_config(args)
    out = _output_dir(args, cfg)
    res = run_simulation(cfg, out)
    print(f"finished t = {res.state.t:.4f} s in {res.wall_time:.1f} s; outputs in {out}")
    return EXIT_OK


def cmd_leads(args) -> int:
    """Recompute the 12 leads from a saved bspm.npz (torso surface potentials)."""
    from .simulator import build_mesh

    cfg = _load_config(args)
    mesh = build_mesh(cfg)
    with np.load(args.bspm) as z:
        times, values = z["times"], z["values"]
    ext = mesh.facet_vertices(["torso_ext"])
    el = snap_electrodes(ext, mesh.vertices, cfg.electrodes.positions(), cfg.electrodes.snap_tol)
    u_v = np.zeros((mesh.n_vertices, len(times)))
    if values.shape[1] != len(ext):
        raise ConfigError(f"{args.bspm} has {values.shape[1]} surface values, the mesh has {len(ext)}")
    u_v[ext] = values.T
    trace = LeadTrace(times, compute_leads(u_v, el))
    export_traces(trace, args.out)
    print(f"wrote {args.out} ({len(times)} samples)")
    return EXIT_OK


def cmd_cc(args) -> int:
    a, b = read_traces(args.first), read_traces(args.second)
    if args.t0 is not None or args.t1 is not None:
        t0 = -np.inf if args.t0 is None else args.t0
        t1 = np.inf if args.t1 is None else args.t1
        a, b = a.window(t0, t1), b.window(t0, t1)
    if not np.allclose(a.times, b.times):
        raise ConfigError("trace files are sampled at different times")
    cc, mean = mean_cc(a, b)
    print(format_cc_report({args.label: (cc, mean)}))
    return EXIT_OK


def cmd_snapshot(args) -> int:
    from .simulator import extract_static_snapshot

    snap = extract_static_snapshot(args.run_dir, args.time)
    snap.save(args.out)
    print(f"snapshot at t = {snap.t:.4f} s written to {args.out} (max |d| = {np.abs(snap.d).max():.3e} m)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (INI)")
    common.add_argument("--output-dir", help="overrides [output] directory")
    common.add_argument("--threads", type=int, default=None,
                        help=f"BLAS threads (default from ${THREADS_ENV})")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded kernels for bitwise reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emtorso", description="Cardiac electro-mechano-torso simulator")
    sub = p.add_subparsers(dest="command", required=True)
    m = sub.add_parser("mesh", parents=[common], help="generate and inspect the heart/torso mesh")
    m.add_argument("--write", help="save the mesh to this file")
    m.set_defaults(func=cmd_mesh)
    f = sub.add_parser("fibers", parents=[common], help="build fibers and write them to VTK")
    f.set_defaults(func=cmd_fibers)
    r = sub.add_parser("run", parents=[common], help="run a simulation")
    r.set_defaults(func=cmd_run)
    ld = sub.add_parser("leads", parents=[common], help="recompute leads from saved surface potentials")
    ld.add_argument("bspm", help="bspm.npz written by a run")
    ld.add_argument("--out", default="leads_recomputed.csv")
    ld.set_defaults(func=cmd_leads)
    c = sub.add_parser("cc", parents=[common], help="correlation of two lead trace CSV files")
    c.add_argument("first")
    c.add_argument("second")
    c.add_argument("--label", default="first vs second")
    c.add_argument("--t0", type=float, default=None)
    c.add_argument("--t1", type=float, default=None)
    c.set_defaults(func=cmd_cc)
    s = sub.add_parser("snapshot", parents=[common], help="extract a static heart displacement")
    s.add_argument("run_dir")
    s.add_argument("--time", type=float, default=0.15, help="snapshot time (s)")
    s.add_argument("--out", default="snapshot.npz")
    s.set_defaults(func=cmd_snapshot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(1 if args.deterministic else args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, MeshError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
