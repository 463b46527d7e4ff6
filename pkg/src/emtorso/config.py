"""Run configuration: sectioned ``key = value`` files parsed with configparser.

Every section maps onto a dataclass; values are converted according to the type of the field
default (float, int, bool, str or tuple of floats written as ``a, b, c``). Unknown sections
or keys are errors.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .activation import ActiveTensionParams
from .ecg import DEFAULT_ELECTRODES, ELECTRODES
from .ep import CALIBRATED_SIGMA_M, EXTRA_INTRA_RATIO
from .geometry import LVGeometry, TorsoBox
from .mechanics import MaterialParams, RobinParams
from .torso import TorsoParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TimeConfig:
    dt: float = 1e-3
    dt_ep: float = 5e-4
    dt_torso: float = 1e-3
    t_end: float = 0.8
    n_discard_beats: int = 0


@dataclass(frozen=True)
class ModesConfig:
    heart: str = "moving"  # moving | static
    torso: str = "moving"
    mechanics: bool = True  # false: pure EP-torso pipeline
    inertia: bool = True
    prescribed_displacement: str = ""  # npz from `emtorso snapshot`; empty means zero


@dataclass(frozen=True)
class GeometryConfig:
    source: str = "idealized"  # idealized | file
    mesh_path: str = ""


@dataclass(frozen=True)
class FiberConfig:
    angle_endo: float = 60.0
    angle_epi: float = -60.0
    fast_fraction: float = 0.1
    scars: str = ""  # "x y z r; ..."
    gray_zones: str = ""  # "x y z r_inner r_outer; ..."
    mu_gray_min: float = 0.1


@dataclass(frozen=True)
class EpConfig:
    ionic_model: str = "aliev_panfilov"
    chi: float = 1.4e5
    Cm: float = 0.01
    sigma_m: tuple = CALIBRATED_SIGMA_M
    extra_intra_ratio: tuple = EXTRA_INTRA_RATIO
    fast_layer_multiplier: float = 3.0
    threshold: float = -40.0


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-8
    vol_tol: float = 1e-9
    max_iter: int = 25


@dataclass(frozen=True)
class CirculationConfig:
    period: float = 0.8
    preload: float = 1.1  # initial V_LV / V_ref


@dataclass(frozen=True)
class ProtocolConfig:
    kind: str = "focal"  # focal | vt | none
    sites: str = ""  # "x y z; ..."; empty selects default endocardial sites
    radius: float = 1e-2
    amplitude: float = 0.4
    duration: float = 2e-3
    start: float = 0.0


@dataclass(frozen=True)
class ElectrodeConfig:
    """Electrode positions (m) and the maximal snapping distance to the torso surface."""

    R: tuple = DEFAULT_ELECTRODES["R"]
    L: tuple = DEFAULT_ELECTRODES["L"]
    F: tuple = DEFAULT_ELECTRODES["F"]
    V1: tuple = DEFAULT_ELECTRODES["V1"]
    V2: tuple = DEFAULT_ELECTRODES["V2"]
    V3: tuple = DEFAULT_ELECTRODES["V3"]
    V4: tuple = DEFAULT_ELECTRODES["V4"]
    V5: tuple = DEFAULT_ELECTRODES["V5"]
    V6: tuple = DEFAULT_ELECTRODES["V6"]
    snap_tol: float = 0.05

    def positions(self) -> dict[str, tuple]:
        return {n: getattr(self, n) for n in ELECTRODES}


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "output"
    vtk_every: int = 0  # macro steps between VTK snapshots, 0 disables
    checkpoint_every: int = 0  # macro steps between checkpoints, 0 keeps only the final one
    bspm_every: int = 10  # torso output steps between rows of bspm.csv, 0 disables the CSV


@dataclass(frozen=True)
class RunConfig:
    time: TimeConfig = field(default_factory=TimeConfig)
    modes: ModesConfig = field(default_factory=ModesConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    lv: LVGeometry = field(default_factory=LVGeometry)
    torso_box: TorsoBox = field(default_factory=TorsoBox)
    fibers: FiberConfig = field(default_factory=FiberConfig)
    ep: EpConfig = field(default_factory=EpConfig)
    activation: ActiveTensionParams = field(default_factory=ActiveTensionParams)
    material: MaterialParams = field(default_factory=MaterialParams)
    robin: RobinParams = field(default_factory=RobinParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    circulation: CirculationConfig = field(default_factory=CirculationConfig)
    torso: TorsoParams = field(default_factory=TorsoParams)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    electrodes: ElectrodeConfig = field(default_factory=ElectrodeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def n_ep(self) -> int:
        return _ratio(self.time.dt, self.time.dt_ep)

    @property
    def n_t(self) -> int:
        return _ratio(self.time.dt_torso, self.time.dt)

    @property
    def n_steps(self) -> int:
        return int(round(self.time.t_end / self.time.dt))


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _ratio(big: float, small: float) -> int:
    n = int(round(big / small))
    if n < 1 or abs(n * small - big) > 1e-9 * big:
        raise ConfigError(f"{small:g} does not divide {big:g}")
    return n


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:  # optional point
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
            if len(vals) not in (0, 3):
                raise ValueError("expected 3 numbers or nothing")
            return vals or None
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} numbers")
            return vals
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _fill(section: str, factory, items: dict, origin: str):
    base = factory()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for key, raw in items.items():
        where = f"{origin}: [{section}] {key}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key (known: {', '.join(sorted(known))})")
        updates[key] = _parse_value(raw, known[key], where)
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise ConfigError(f"{origin}: [{section}] {exc}") from None


def parse_config_text(text: str, origin: str = "<string>", base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case-sensitive (electrode names, Ta_max, ...)
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    parts = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}] (known: {', '.join(SECTIONS)})")
        parts[section] = _fill(section, SECTIONS[section], dict(cp[section]), origin)
    cfg = RunConfig(**parts)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, base_dir)
    validate_config(cfg, origin)
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path), path.parent)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p: str) -> str:
        return str(base / p) if p and not Path(p).is_absolute() else p

    return replace(cfg,
                   geometry=replace(cfg.geometry, mesh_path=fix(cfg.geometry.mesh_path)),
                   modes=replace(cfg.modes, prescribed_displacement=fix(cfg.modes.prescribed_displacement)))


def validate_config(cfg: RunConfig, origin: str = "<config>") -> None:
    t = cfg.time
    if min(t.dt, t.dt_ep, t.dt_torso) <= 0 or t.t_end < 0:
        raise ConfigError(f"{origin}: time steps must be positive and t_end non-negative")
    try:
        cfg.n_ep
    except ConfigError:
        raise ConfigError(f"{origin}: [time] dt_ep = {t.dt_ep:g} must divide dt = {t.dt:g}") from None
    try:
        cfg.n_t
    except ConfigError:
        raise ConfigError(f"{origin}: [time] dt = {t.dt:g} must divide dt_torso = {t.dt_torso:g}") from None
    if t.n_discard_beats < 0:
        raise ConfigError(f"{origin}: [time] n_discard_beats must be >= 0")
    m = cfg.modes
    for key in ("heart", "torso"):
        if getattr(m, key) not in ("moving", "static"):
            raise ConfigError(f"{origin}: [modes] {key} must be 'moving' or 'static', got {getattr(m, key)!r}")
    if not m.mechanics and m.heart == "moving":
        raise ConfigError(f"{origin}: [modes] a moving heart needs mechanics = true")
    if m.prescribed_displacement and not Path(m.prescribed_displacement).is_file():
        raise ConfigError(f"{origin}: [modes] prescribed_displacement file not found: {m.prescribed_displacement}")
    g = cfg.geometry
    if g.source not in ("idealized", "file"):
        raise ConfigError(f"{origin}: [geometry] source must be 'idealized' or 'file'")
    if g.source == "file" and not Path(g.mesh_path).is_file():
        raise ConfigError(f"{origin}: [geometry] mesh_path not found: {g.mesh_path!r}")
    if cfg.protocol.kind not in ("focal", "vt", "none"):
        raise ConfigError(f"{origin}: [protocol] kind must be focal, vt or none")
    for key, parser in (("scars", 4), ("gray_zones", 5)):
        try:
            parse_rows(getattr(cfg.fibers, key), parser)
        except ValueError as exc:
            raise ConfigError(f"{origin}: [fibers] {key}: {exc}") from None
    try:
        parse_rows(cfg.protocol.sites, 3)
    except ValueError as exc:
        raise ConfigError(f"{origin}: [protocol] sites: {exc}") from None
    if cfg.circulation.period <= 0 or cfg.circulation.preload <= 0:
        raise ConfigError(f"{origin}: [circulation] period and preload must be positive")
    if min(cfg.output.vtk_every, cfg.output.checkpoint_every, cfg.output.bspm_every) < 0:
        raise ConfigError(f"{origin}: [output] cadences must be >= 0")


def parse_rows(text: str, width: int) -> np.ndarray:
    """'a b c; d e f' -> array of shape (rows, width)."""
    rows = [r for r in (s.strip() for s in text.split(";")) if r]
    out = []
    for r in rows:
        vals = [float(v) for v in r.replace(",", " ").split()]
        if len(vals) != width:
            raise ValueError(f"expected {width} numbers per entry, got {r!r}")
        out.append(vals)
    return np.array(out, float).reshape(-1, width)


def format_config(cfg: RunConfig) -> str:
    """INI text with every value, defaults included."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        cp[f.name] = {}
        for g in fields(sec):
            v = getattr(sec, g.name)
            if v is None:
                v = ""
            elif isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            cp[f.name][g.name] = str(v)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
