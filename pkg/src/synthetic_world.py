"""
Synthetic coupled multi-sphere world used as ground truth.

Each sphere carries ``n_vars`` fields on a lat-lon grid and is integrated with an
explicit operator-split step:

1. semi-Lagrangian advection by a solid-body rotation plus mid-latitude jets,
2. 5-point diffusion (periodic in longitude, zero-flux in latitude),
3. nonlinear intra-sphere mixing ``beta * tanh(M q) - gamma * q``,
4. seasonal forcing ``a * sin(2 pi t / cycle + phase_v) * sin(lat)``,
5. relaxation of the first surface variables toward another sphere's surface,
   ``kappa * (q_other - q)``, on cells valid for both spheres.

Masked cells are held at the fill value. The resulting record sequence is split
chronologically into train/val/test, climatology and normalization statistics
are computed on the training split only, and everything is written as a
``world.json`` manifest plus little-endian float32 blobs.
"""
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from src.utils import atomic_write_bytes, atomic_write_json, load_json, read_f32, to_f32_bytes

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MASK_KINDS = ("none", "ocean", "land")
DOMAINS = ("sphere", "torus")
FILL_VALUE = 0.0


class WorldError(ValueError):
    """Base class for synthetic-world errors."""


class WorldInstabilityError(WorldError):
    def __init__(self, message: str, suggested_dt: float):
        super().__init__(f"{message}; suggested dt <= {suggested_dt:.4g}")
        self.suggested_dt = suggested_dt


class InsufficientCyclesError(WorldError):
    pass


class ZeroVarianceError(WorldError):
    pass


class MissingClimatologyError(WorldError):
    pass


class DatasetFormatError(WorldError):
    pass


@dataclass(frozen=True)
class SphereConfig:
    name: str
    n_vars: int
    n_surface: int
    periodic: bool = False
    mask: str = "none"
    velocity_scale: float = 0.5
    jet_speed: float = 0.4
    diffusivity: float = 0.05
    damping: float = 0.1
    nonlinearity: float = 0.2
    seasonal_amplitude: float = 0.3
    offset: float = 0.0

    @property
    def variables(self) -> Tuple[str, ...]:
        return tuple(f"{self.name}{i}" for i in range(self.n_vars))


def _default_spheres() -> Tuple[SphereConfig, ...]:
    return (
        SphereConfig("A", 8, 4, periodic=False, mask="none", velocity_scale=0.6, jet_speed=0.5,
                     diffusivity=0.05, damping=0.15, nonlinearity=0.25, seasonal_amplitude=0.3, offset=1.0),
        SphereConfig("B", 12, 4, periodic=True, mask="ocean", velocity_scale=0.3, jet_speed=0.2,
                     diffusivity=0.03, damping=0.05, nonlinearity=0.08, seasonal_amplitude=0.5, offset=15.0),
    )


@dataclass(frozen=True)
class WorldConfig:
    height: int = 18
    width: int = 36
    spheres: Tuple[SphereConfig, ...] = field(default_factory=_default_spheres)
    # (target sphere, source sphere, kappa)
    coupling: Tuple[Tuple[str, str, float], ...] = (("A", "B", 0.15), ("B", "A", 0.1))
    cycle_length: int = 36
    train_cycles: int = 20
    val_cycles: int = 2
    test_cycles: int = 9
    spinup_cycles: int = 1
    dt: float = 0.5
    seed: int = 7
    domain: str = "sphere"

    def __post_init__(self):
        object.__setattr__(self, "spheres", tuple(
            s if isinstance(s, SphereConfig) else SphereConfig(**s) for s in self.spheres
        ))
        object.__setattr__(self, "coupling", tuple((str(t), str(s), float(k)) for t, s, k in self.coupling))
        self.validate()

    def validate(self) -> None:
        names = [s.name for s in self.spheres]
        if len(set(names)) != len(names) or not names:
            raise WorldError(f"Sphere names must be unique and non-empty, got {names}")
        for s in self.spheres:
            if s.n_vars < 1 or not 0 <= s.n_surface <= s.n_vars:
                raise WorldError(f"Sphere '{s.name}' needs n_vars >= 1 and 0 <= n_surface <= n_vars")
            if s.mask not in MASK_KINDS:
                raise WorldError(f"Sphere '{s.name}' mask must be one of {MASK_KINDS}")
            if min(s.diffusivity, s.damping, s.nonlinearity) < 0:
                raise WorldError(f"Sphere '{s.name}' coefficients must be non-negative")
        for target, source, kappa in self.coupling:
            if target not in names or source not in names or target == source:
                raise WorldError(f"Invalid coupling {target} <- {source}")
            if kappa < 0:
                raise WorldError(f"Coupling strength {target} <- {source} must be >= 0, got {kappa}")
        if self.cycle_length < 1:
            raise WorldError("cycle_length must be >= 1")
        if self.train_cycles < 2 or self.val_cycles < 0 or self.test_cycles < 0 or self.spinup_cycles < 0:
            raise WorldError("Need at least 2 training cycles and non-negative val/test/spin-up cycles")
        if self.dt <= 0:
            raise WorldError("dt must be positive")
        if self.domain not in DOMAINS:
            raise WorldError(f"domain must be one of {DOMAINS}")
        if self.height < 2 or self.width < 2:
            raise WorldError("Grid must be at least 2x2")

    @property
    def latitudes(self) -> np.ndarray:
        half = 90.0 / self.height
        return np.linspace(-90.0 + half, 90.0 - half, self.height)

    @property
    def longitudes(self) -> np.ndarray:
        return (np.arange(self.width) + 0.5) * 360.0 / self.width

    @property
    def variables(self) -> Tuple[str, ...]:
        return tuple(v for s in self.spheres for v in s.variables)

    @property
    def periodic_variables(self) -> Tuple[str, ...]:
        return tuple(v for s in self.spheres if s.periodic for v in s.variables)

    @property
    def split_lengths(self) -> Dict[str, int]:
        return {
            "train": self.train_cycles * self.cycle_length,
            "val": self.val_cycles * self.cycle_length,
            "test": self.test_cycles * self.cycle_length,
        }

    @property
    def total_steps(self) -> int:
        return sum(self.split_lengths.values())

    @property
    def substeps_per_record(self) -> int:
        return max(1, int(round(1.0 / self.dt)))

    def sphere(self, name: str) -> SphereConfig:
        for s in self.spheres:
            if s.name == name:
                return s
        raise WorldError(f"Unknown sphere '{name}'")

    def kappa(self, target: str, source: str) -> float:
        return sum(k for t, s, k in self.coupling if t == target and s == source)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["coupling"] = [list(c) for c in self.coupling]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "WorldConfig":
        data = dict(data)
        if "spheres" in data:
            data["spheres"] = tuple(SphereConfig(**s) for s in data["spheres"])
        if "coupling" in data:
            data["coupling"] = tuple(tuple(c) for c in data["coupling"])
        return cls(**data)


# --- masks -----------------------------------------------------------------------

def make_continent_mask(latitudes: np.ndarray, longitudes: np.ndarray) -> np.ndarray:
    """Boolean ``[H, W]`` field, True on the two synthetic continents."""
    lat = np.asarray(latitudes)[:, None]
    lon = np.asarray(longitudes)[None, :]
    first = (lon >= 60.0) & (lon < 150.0) & (lat >= -40.0) & (lat <= 60.0)
    second = (lon >= 260.0) & (lon < 300.0) & (lat >= -50.0) & (lat <= 10.0)
    return first | second


def sphere_masks(cfg: WorldConfig) -> Dict[str, np.ndarray]:
    """Validity mask per sphere (True = valid cell)."""
    continent = make_continent_mask(cfg.latitudes, cfg.longitudes)
    masks = {}
    for s in cfg.spheres:
        if s.mask == "ocean":
            masks[s.name] = ~continent
        elif s.mask == "land":
            masks[s.name] = continent.copy()
        else:
            masks[s.name] = np.ones((cfg.height, cfg.width), dtype=bool)
    return masks


def apply_mask_fill(field: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every invalid cell; ``mask`` is True on valid cells and matches the trailing (H, W)."""
    mask = np.asarray(mask, dtype=bool)
    if field.shape[-2:] != mask.shape:
        raise WorldError(f"Mask shape {mask.shape} does not match field grid {field.shape[-2:]}")
    return np.where(mask, field, np.zeros((), dtype=field.dtype)).astype(field.dtype, copy=False)


# --- dynamics --------------------------------------------------------------------

def velocity_field(cfg: WorldConfig, sphere: SphereConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Zonal and meridional velocity ``(U, V)`` in cells per time unit, shape ``[H, W]``."""
    lat_deg = cfg.latitudes[:, None]
    lat = np.deg2rad(lat_deg)
    lon = np.deg2rad(cfg.longitudes)[None, :]
    jets = np.exp(-((lat_deg - 45.0) / 15.0) ** 2) + np.exp(-((lat_deg + 45.0) / 15.0) ** 2)
    u = sphere.velocity_scale * np.cos(lat) + sphere.jet_speed * jets
    v = 0.25 * sphere.velocity_scale * np.sin(2.0 * lon) * np.cos(lat)
    return np.broadcast_to(u, (cfg.height, cfg.width)).copy(), v


def semi_lagrangian_advect(q: np.ndarray, dep_y: np.ndarray, dep_x: np.ndarray, domain: str = "sphere") -> np.ndarray:
    """Interpolate ``q[n, H, W]`` at departure points (in cell units), linear in both axes.

    Longitude wraps; latitude is clamped to the border rows on a sphere and wraps on a torus.
    """
    n, height, width = q.shape
    x = np.mod(dep_x, width)
    if domain == "torus":
        y = np.mod(dep_y, height)
        padded = np.pad(q, ((0, 0), (0, 1), (0, 1)), mode="wrap")
    else:
        y = np.clip(dep_y, 0, height - 1)
        padded = np.pad(q, ((0, 0), (0, 0), (0, 1)), mode="wrap")
    coords = np.stack([
        np.broadcast_to(np.arange(n, dtype=np.float64)[:, None, None], q.shape),
        np.broadcast_to(y, q.shape),
        np.broadcast_to(x, q.shape),
    ])
    return map_coordinates(padded, coords, order=1, mode="nearest")


def laplacian(q: np.ndarray, domain: str = "sphere") -> np.ndarray:
    """5-point Laplacian: periodic in longitude, zero-flux (or periodic on a torus) in latitude."""
    lap = np.roll(q, 1, axis=-1) + np.roll(q, -1, axis=-1) - 2.0 * q
    if domain == "torus":
        return lap + np.roll(q, 1, axis=-2) + np.roll(q, -1, axis=-2) - 2.0 * q
    up = np.concatenate([q[..., :1, :], q[..., :-1, :]], axis=-2)
    down = np.concatenate([q[..., 1:, :], q[..., -1:, :]], axis=-2)
    return lap + up + down - 2.0 * q


def mixing_matrix(cfg: WorldConfig, index: int) -> np.ndarray:
    sphere = cfg.spheres[index]
    rng = np.random.default_rng([cfg.seed, index, 1])
    return 1.5 * rng.standard_normal((sphere.n_vars, sphere.n_vars)) / np.sqrt(sphere.n_vars)


def check_stability(cfg: WorldConfig) -> None:
    """Abort when the explicit step would be unstable, suggesting a smaller dt."""
    dt = cfg.dt
    for index, sphere in enumerate(cfg.spheres):
        u, v = velocity_field(cfg, sphere)
        checks = [
            ("advection CFL", float(np.max(np.abs(u)) + np.max(np.abs(v))), 1.0),
            ("diffusion", 4.0 * sphere.diffusivity, 1.0),
        ]
        rate = sphere.damping + sphere.nonlinearity * float(np.linalg.norm(mixing_matrix(cfg, index), 2))
        rate += sum(k for t, _, k in cfg.coupling if t == sphere.name)
        checks.append(("reaction/coupling", rate, 1.0))
        for label, speed, limit in checks:
            if speed * dt > limit:
                suggested = 0.9 * limit / speed
                raise WorldInstabilityError(
                    f"Sphere '{sphere.name}' {label} number {speed * dt:.3f} exceeds {limit}", suggested
                )


def initial_conditions(cfg: WorldConfig) -> Dict[str, np.ndarray]:
    """Smooth random fields with unit standard deviation, one stack per sphere."""
    masks = sphere_masks(cfg)
    states = {}
    for index, sphere in enumerate(cfg.spheres):
        rng = np.random.default_rng([cfg.seed, index, 0])
        noise = rng.standard_normal((sphere.n_vars, cfg.height, cfg.width))
        smooth = gaussian_filter(noise, sigma=(0, 1.5, 3.0), mode="wrap")
        smooth /= smooth.std(axis=(1, 2), keepdims=True)
        states[sphere.name] = apply_mask_fill(smooth, masks[sphere.name])
    return states


def _world_step(cfg: WorldConfig, states: Dict[str, np.ndarray], t: float, cache: Dict) -> Dict[str, np.ndarray]:
    dt = cfg.dt
    lat = np.deg2rad(cfg.latitudes)[:, None]
    masks = cache["masks"]
    new_states = {}
    for index, sphere in enumerate(cfg.spheres):
        q = states[sphere.name]
        if sphere.velocity_scale or sphere.jet_speed:
            u, v = cache["velocity"][sphere.name]
            rows, cols = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing="ij")
            q = semi_lagrangian_advect(q, rows - v * dt, cols - u * dt, cfg.domain)
        q = q + dt * sphere.diffusivity * laplacian(q, cfg.domain)
        if sphere.nonlinearity or sphere.damping:
            mixed = np.einsum("ab,bhw->ahw", cache["mixing"][sphere.name], q)
            q = q + dt * (sphere.nonlinearity * np.tanh(mixed) - sphere.damping * q)
        if sphere.seasonal_amplitude:
            phase = 2.0 * np.pi * np.arange(sphere.n_vars) / sphere.n_vars
            season = np.sin(2.0 * np.pi * t / cfg.cycle_length + phase)[:, None, None]
            q = q + dt * sphere.seasonal_amplitude * season * np.sin(lat)[None]
        for target, source, kappa in cfg.coupling:
            if target != sphere.name or kappa == 0:
                continue
            other = cfg.sphere(source)
            n_c = min(sphere.n_surface, other.n_surface)
            both = (masks[target] & masks[source])[None]
            q[:n_c] = q[:n_c] + dt * kappa * (states[source][:n_c] - q[:n_c]) * both
        new_states[sphere.name] = apply_mask_fill(q, masks[sphere.name])
    return new_states


def integrate_world(
    cfg: WorldConfig,
    initial: Optional[Dict[str, np.ndarray]] = None,
    n_records: Optional[int] = None,
    spinup: bool = True,
) -> Dict[str, np.ndarray]:
    """Integrate the coupled system and return physical records ``[T, n_vars, H, W]`` per sphere."""
    check_stability(cfg)
    masks = sphere_masks(cfg)
    cache = {
        "masks": masks,
        "velocity": {s.name: velocity_field(cfg, s) for s in cfg.spheres},
        "mixing": {s.name: mixing_matrix(cfg, i) for i, s in enumerate(cfg.spheres)},
    }
    states = {k: np.array(v, dtype=np.float64) for k, v in (initial or initial_conditions(cfg)).items()}
    n_records = cfg.total_steps if n_records is None else n_records
    per_record = cfg.substeps_per_record
    substep = 0

    def advance(states):
        nonlocal substep
        for _ in range(per_record):
            states = _world_step(cfg, states, substep / per_record, cache)
            substep += 1
        return states

    if spinup:
        for _ in range(cfg.spinup_cycles * cfg.cycle_length):
            states = advance(states)
    records = {s.name: np.empty((n_records, s.n_vars, cfg.height, cfg.width)) for s in cfg.spheres}
    for r in range(n_records):
        for s in cfg.spheres:
            level = s.offset + 0.5 * np.arange(s.n_vars)[:, None, None]
            records[s.name][r] = apply_mask_fill(states[s.name] + level, masks[s.name])
        if not all(np.all(np.isfinite(v)) for v in states.values()):
            raise WorldInstabilityError(f"World state became non-finite at record {r}", 0.5 * cfg.dt)
        if r + 1 < n_records:
            states = advance(states)
    return records


# --- statistics ------------------------------------------------------------------

@dataclass
class NormStats:
    variables: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    periodic: Tuple[str, ...]
    climatology: np.ndarray
    raw_mean: np.ndarray
    raw_std: np.ndarray
    cycle_length: int
    masks: Dict[str, np.ndarray]
    sphere_of: Dict[str, str]

    def index(self, variable: str) -> int:
        try:
            return self.variables.index(variable)
        except ValueError:
            raise WorldError(f"Unknown variable '{variable}'") from None

    def periodic_index(self, variable: str) -> Optional[int]:
        return self.periodic.index(variable) if variable in self.periodic else None

    def valid_mask(self, variable: str) -> np.ndarray:
        return self.masks[self.sphere_of[variable]]

    def variables_of(self, sphere: str) -> Tuple[str, ...]:
        return tuple(v for v in self.variables if self.sphere_of[v] == sphere)


def _day_index(n_steps: int, cycle_length: int, start_day: int = 0) -> np.ndarray:
    return (start_day + np.arange(n_steps)) % cycle_length


def compute_climatology(train: np.ndarray, cycle_length: int, start_day: int = 0) -> np.ndarray:
    """Per day-of-cycle mean of ``train[T, n, H, W]``, shape ``[cycle_length, n, H, W]``.

    The mean is taken as the first cycle's value plus the mean deviation from it,
    so a dataset of identical cycles returns that cycle exactly.
    """
    if train.shape[0] < 2 * cycle_length:
        raise InsufficientCyclesError(
            f"Climatology needs at least 2 full cycles ({2 * cycle_length} steps), got {train.shape[0]}"
        )
    days = _day_index(train.shape[0], cycle_length, start_day)
    clim = np.empty((cycle_length,) + train.shape[1:])
    for d in range(cycle_length):
        group = train[days == d].astype(np.float64)
        clim[d] = group[0] + (group - group[0]).mean(axis=0)
    return clim


def _two_pass(values: np.ndarray) -> Tuple[float, float]:
    mean = values.sum() / values.size
    centered = values - mean
    return float(mean), float(np.sqrt((centered * centered).sum() / values.size))


def compute_norm_stats(
    train: np.ndarray,
    climatology: np.ndarray,
    variables: Sequence[str],
    periodic: Sequence[str],
    masks: Dict[str, np.ndarray],
    sphere_of: Dict[str, str],
    start_day: int = 0,
) -> NormStats:
    """Mean/std per variable over valid training cells (anomalies for periodic variables)."""
    cycle_length = climatology.shape[0]
    days = _day_index(train.shape[0], cycle_length, start_day)
    mean = np.empty(len(variables))
    std = np.empty(len(variables))
    raw_mean = np.empty(len(periodic))
    raw_std = np.empty(len(periodic))
    for v, name in enumerate(variables):
        valid = masks[sphere_of[name]]
        field = train[:, v].astype(np.float64)
        if name in periodic:
            p = list(periodic).index(name)
            raw_mean[p], raw_std[p] = _two_pass(field[:, valid])
            field = field - climatology[days, p]
        mean[v], std[v] = _two_pass(field[:, valid])
        if not std[v] > 1e-12:
            raise ZeroVarianceError(f"Variable '{name}' has zero variance on the training split")
    return NormStats(
        variables=tuple(variables),
        mean=mean,
        std=std,
        periodic=tuple(periodic),
        climatology=climatology,
        raw_mean=raw_mean,
        raw_std=raw_std,
        cycle_length=cycle_length,
        masks={k: np.asarray(m, dtype=bool) for k, m in masks.items()},
        sphere_of=dict(sphere_of),
    )


def physical_to_model(field: np.ndarray, stats: NormStats, variables: Sequence[str], day: int) -> np.ndarray:
    """Normalize ``field[n, H, W]`` (one row per variable) at day-of-cycle ``day``."""
    out = np.empty(field.shape, dtype=np.float64)
    for i, name in enumerate(variables):
        v = stats.index(name)
        value = field[i].astype(np.float64)
        p = stats.periodic_index(name)
        if p is not None:
            if stats.climatology is None or p >= stats.climatology.shape[1]:
                raise MissingClimatologyError(f"No climatology for periodic variable '{name}'")
            value = value - stats.climatology[day % stats.cycle_length, p]
        out[i] = (value - stats.mean[v]) / stats.std[v]
    return out


def model_to_physical(field: np.ndarray, stats: NormStats, variables: Sequence[str], day: int) -> np.ndarray:
    """Inverse of ``physical_to_model``."""
    out = np.empty(field.shape, dtype=np.float64)
    for i, name in enumerate(variables):
        v = stats.index(name)
        value = field[i].astype(np.float64) * stats.std[v] + stats.mean[v]
        p = stats.periodic_index(name)
        if p is not None:
            if stats.climatology is None or p >= stats.climatology.shape[1]:
                raise MissingClimatologyError(f"No climatology for periodic variable '{name}'")
            value = value + stats.climatology[day % stats.cycle_length, p]
        out[i] = value
    return out


def normalize_split(physical: np.ndarray, stats: NormStats, start_day: int = 0) -> np.ndarray:
    """Normalized, mask-filled float32 copy of a physical split ``[T, V, H, W]``."""
    out = np.empty(physical.shape, dtype=np.float32)
    variable_masks = np.stack([stats.valid_mask(v) for v in stats.variables])
    for t in range(physical.shape[0]):
        day = (start_day + t) % stats.cycle_length
        normed = physical_to_model(physical[t], stats, stats.variables, day)
        out[t] = np.where(variable_masks, normed, 0.0)
    return out


# --- dataset ---------------------------------------------------------------------

@dataclass
class WorldData:
    config: WorldConfig
    stats: NormStats
    splits: Dict[str, np.ndarray]
    split_start: Dict[str, int]
    physical: Dict[str, np.ndarray] = field(default_factory=dict)

    def day_of(self, split: str, t: int) -> int:
        return (self.split_start[split] + t) % self.config.cycle_length

    def sphere_slice(self, sphere: str) -> slice:
        names = self.stats.variables
        own = [i for i, v in enumerate(names) if self.stats.sphere_of[v] == sphere]
        return slice(own[0], own[-1] + 1)


def _split_starts(cfg: WorldConfig) -> Dict[str, int]:
    lengths = cfg.split_lengths
    return {"train": 0, "val": lengths["train"], "test": lengths["train"] + lengths["val"]}


def _round_f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _sphere_lookup(cfg: WorldConfig) -> Dict[str, str]:
    return {v: s.name for s in cfg.spheres for v in s.variables}


def generate_coupled_dataset(cfg: WorldConfig, out_dir: Optional[str] = None) -> WorldData:
    """Integrate the world, split it, compute training statistics and optionally write the file set."""
    logger.info(f"🌍 integrating synthetic world: {len(cfg.spheres)} spheres, {cfg.total_steps} records")
    records = integrate_world(cfg)
    stacked = _round_f32(np.concatenate([records[s.name] for s in cfg.spheres], axis=1))
    starts = _split_starts(cfg)
    lengths = cfg.split_lengths
    physical = {name: stacked[starts[name]:starts[name] + lengths[name]] for name in SPLITS}

    variables = cfg.variables
    periodic = cfg.periodic_variables
    periodic_cols = [variables.index(v) for v in periodic]
    masks = sphere_masks(cfg)
    sphere_of = _sphere_lookup(cfg)
    if periodic_cols:
        clim = _round_f32(compute_climatology(physical["train"][:, periodic_cols], cfg.cycle_length))
    else:
        clim = np.zeros((cfg.cycle_length, 0, cfg.height, cfg.width))
    stats = compute_norm_stats(physical["train"], clim, variables, periodic, masks, sphere_of)
    stats.mean, stats.std = _round_f32(stats.mean), _round_f32(stats.std)
    stats.raw_mean, stats.raw_std = _round_f32(stats.raw_mean), _round_f32(stats.raw_std)

    splits = {name: normalize_split(physical[name], stats, starts[name]) for name in SPLITS}
    world = WorldData(config=cfg, stats=stats, splits=splits, split_start=starts, physical=physical)
    if out_dir is not None:
        write_dataset(world, out_dir)
    return world


def write_dataset(world: WorldData, out_dir: str) -> List[str]:
    cfg, stats = world.config, world.stats
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in SPLITS:
        path = os.path.join(out_dir, f"{name}.bin")
        atomic_write_bytes(path, to_f32_bytes([world.physical[name]]))
        paths.append(path)
    stats_path = os.path.join(out_dir, "stats.bin")
    atomic_write_bytes(stats_path, to_f32_bytes([stats.mean, stats.std, stats.raw_mean, stats.raw_std]))
    clim_path = os.path.join(out_dir, "clim.bin")
    atomic_write_bytes(clim_path, to_f32_bytes([stats.climatology]))
    manifest = {
        "format": "float32-le",
        "config": cfg.to_dict(),
        "variables": list(stats.variables),
        "spheres": {s.name: list(s.variables) for s in cfg.spheres},
        "periodic": list(stats.periodic),
        "masks": {name: m.astype(int).tolist() for name, m in stats.masks.items()},
        "stats": {"file": "stats.bin", "layout": ["mean[V]", "std[V]", "raw_mean[P]", "raw_std[P]"]},
        "climatology": {"file": "clim.bin", "shape": list(stats.climatology.shape)},
        "splits": {
            name: {"file": f"{name}.bin", "start": world.split_start[name], "shape": list(world.physical[name].shape)}
            for name in SPLITS
        },
    }
    world_path = os.path.join(out_dir, "world.json")
    atomic_write_json(world_path, manifest)
    logger.info(f"✅ dataset written to {out_dir}")
    return [world_path, stats_path, clim_path] + paths


def _read_block(path: str, shape: Sequence[int]) -> np.ndarray:
    data = read_f32(path)
    expected = int(np.prod(shape, dtype=np.int64))
    if data.size != expected:
        raise DatasetFormatError(f"{path} holds {data.size} values, manifest declares {expected}")
    return data.reshape(shape).astype(np.float64)


def load_world(path: str) -> WorldData:
    """Read a dataset file set and return normalized, mask-filled splits with their stats."""
    try:
        manifest = load_json(os.path.join(path, "world.json"))
    except FileNotFoundError:
        raise DatasetFormatError(f"No world.json in {path}") from None
    cfg = WorldConfig.from_dict(manifest["config"])
    variables = tuple(manifest["variables"])
    periodic = tuple(manifest["periodic"])
    n_v, n_p = len(variables), len(periodic)
    flat = _read_block(os.path.join(path, manifest["stats"]["file"]), [2 * n_v + 2 * n_p])
    clim = _read_block(os.path.join(path, manifest["climatology"]["file"]), manifest["climatology"]["shape"])
    stats = NormStats(
        variables=variables,
        mean=flat[:n_v],
        std=flat[n_v:2 * n_v],
        periodic=periodic,
        climatology=clim,
        raw_mean=flat[2 * n_v:2 * n_v + n_p],
        raw_std=flat[2 * n_v + n_p:],
        cycle_length=cfg.cycle_length,
        masks={name: np.asarray(m, dtype=bool) for name, m in manifest["masks"].items()},
        sphere_of=_sphere_lookup(cfg),
    )
    physical, splits, starts = {}, {}, {}
    for name, entry in manifest["splits"].items():
        physical[name] = _read_block(os.path.join(path, entry["file"]), entry["shape"])
        starts[name] = entry["start"]
        splits[name] = normalize_split(physical[name], stats, entry["start"])
    return WorldData(config=cfg, stats=stats, splits=splits, split_start=starts, physical=physical)
