"""
Lab configuration: one JSON document resolved against ``src/lab_config.json``.
"""
import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

from src.engines import BoundaryRequest, EngineOrderError, EngineSpec, validate_engine_order
from src.nn_blocks import ABLATION_VARIANTS, ConfigMismatchError, DSLCastConfig, ablated_config
from src.synthetic_world import WorldConfig, WorldError
from src.training import ScheduleError, TrainSchedule
from src.utils import did_you_mean, json_digest, load_json, project_path

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = project_path("src", "lab_config.json")
CHECKPOINT_CHOICES = ("best", "final")


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, data: Dict, known: Sequence[str]) -> None:
    for key in data:
        if key not in known:
            raise ConfigError(f"Unknown key '{key}' in {section}{did_you_mean(key, known)}")


def _build(cls, section: str, data: Optional[Dict]):
    data = dict(data or {})
    _reject_unknown(section, data, [f.name for f in fields(cls)])
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {section}: {e}") from e


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    patch_size: int = 2
    kernel_size: int = 7
    mlp_ratio: int = 2
    u_max: float = 0.1
    dsl_positions: Optional[Tuple[int, ...]] = None
    lon_positional_encoding: bool = True

    def build(self, in_channels: int, out_channels: int, world: WorldConfig) -> DSLCastConfig:
        try:
            return DSLCastConfig(
                in_channels=in_channels,
                out_channels=out_channels,
                height=world.height,
                width=world.width,
                latitudes=tuple(world.latitudes),
                patch_size=self.patch_size,
                dim=self.dim,
                encoder_depth=self.encoder_depth,
                decoder_depth=self.decoder_depth,
                dsl_positions=None if self.dsl_positions is None else tuple(self.dsl_positions),
                kernel_size=self.kernel_size,
                mlp_ratio=self.mlp_ratio,
                u_max=self.u_max,
                lon_positional_encoding=self.lon_positional_encoding,
            )
        except ConfigMismatchError as e:
            raise ConfigError(f"Invalid model config: {e}") from e


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 40
    lr0: float = 1e-3
    batch_size: int = 8
    validate_every: int = 1
    relative_loss: bool = True

    def to_schedule(self, seed: int, precision: str) -> TrainSchedule:
        try:
            return TrainSchedule(
                epochs=self.epochs,
                lr0=self.lr0,
                batch_size=self.batch_size,
                seed=seed,
                precision=precision,
                validate_every=self.validate_every,
                relative_loss=self.relative_loss,
            )
        except ScheduleError as e:
            raise ConfigError(f"Invalid schedule: {e}") from e


@dataclass(frozen=True)
class EngineConfig:
    sphere: str
    boundary: Tuple[BoundaryRequest, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    residual: bool = True
    checkpoint: str = "final"

    @classmethod
    def from_dict(cls, data: Dict, index: int) -> "EngineConfig":
        data = dict(data)
        section = f"engines[{index}]"
        _reject_unknown(section, data, [f.name for f in fields(cls)])
        if "sphere" not in data:
            raise ConfigError(f"{section} needs a 'sphere'")
        try:
            boundary = tuple(BoundaryRequest.parse(entry) for entry in data.get("boundary", []))
        except (ValueError, IndexError) as e:
            raise ConfigError(f"Invalid boundary entry in {section}: {e}") from e
        checkpoint = data.get("checkpoint", "final")
        if checkpoint not in CHECKPOINT_CHOICES:
            raise ConfigError(f"{section}.checkpoint must be one of {CHECKPOINT_CHOICES}")
        return cls(
            sphere=str(data["sphere"]),
            boundary=boundary,
            model=_build(ModelConfig, f"{section}.model", data.get("model")),
            residual=bool(data.get("residual", True)),
            checkpoint=checkpoint,
        )

    def spec(self, world: WorldConfig, variant: str = "full") -> EngineSpec:
        sphere = world.sphere(self.sphere)
        n_in = sphere.n_vars + len(self.boundary)
        try:
            model = ablated_config(self.model.build(n_in, sphere.n_vars, world), variant)
        except ConfigMismatchError as e:
            raise ConfigError(f"Engine '{self.sphere}': {e}") from e
        return EngineSpec(
            sphere=self.sphere,
            variables=sphere.variables,
            boundary=self.boundary,
            model=model,
            residual=self.residual,
        )

    def to_dict(self) -> Dict:
        return {
            "sphere": self.sphere,
            "boundary": [b.to_list() for b in self.boundary],
            "model": asdict(self.model),
            "residual": self.residual,
            "checkpoint": self.checkpoint,
        }


@dataclass(frozen=True)
class CorrectorConfig:
    enabled: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    window: int = 4
    loss_mode: str = "sum"
    curriculum: bool = True
    checkpoint: str = "best"

    def build(self, world: WorldConfig) -> DSLCastConfig:
        total = len(world.variables)
        return self.model.build(total, total, world)


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 300
    ics: int = 20
    ic_spacing: int = 1
    boundary_mode: str = "coupled"
    divergence_threshold: float = 1e3
    rea_lead: int = 100


@dataclass(frozen=True)
class EvaluationConfig:
    threshold_quantile: float = 0.95
    spectrum_lead: int = 300
    spectrum_band: Optional[Tuple[int, int]] = None


@dataclass(frozen=True)
class TheoryConfig:
    horizon: int = 50
    seed: int = 0
    corrector_lambda: float = 0.8
    eps_corr: float = 0.05
    corrector_l_f: float = 1.2
    neural: bool = True
    n_samples: int = 1024
    power_iterations: int = 8
    perturbation: float = 1e-2
    neural_points: int = 4


@dataclass(frozen=True)
class AblationConfig:
    enabled: bool = False
    engine: str = "B"
    variants: Tuple[str, ...] = ABLATION_VARIANTS
    lead: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))


SECTIONS = ("run_name", "seed", "precision", "world", "engines", "corrector", "schedules",
            "rollout", "evaluation", "theory", "ablation")


@dataclass(frozen=True)
class LabConfig:
    run_name: str
    seed: int
    precision: str
    world: WorldConfig
    engines: Tuple[EngineConfig, ...]
    corrector: CorrectorConfig
    schedules: Dict[str, ScheduleConfig]
    rollout: RolloutConfig
    evaluation: EvaluationConfig
    theory: TheoryConfig
    ablation: AblationConfig = field(default_factory=AblationConfig)
    raw: Dict = field(default_factory=dict, compare=False, repr=False)

    def engine(self, sphere: str) -> EngineConfig:
        for e in self.engines:
            if e.sphere == sphere:
                return e
        raise ConfigError(f"No engine for sphere '{sphere}'{did_you_mean(sphere, self.engine_ids)}")

    @property
    def engine_ids(self) -> List[str]:
        return [e.sphere for e in self.engines]

    def specs(self) -> List[EngineSpec]:
        return [e.spec(self.world) for e in self.engines]

    def schedule(self, name: str) -> TrainSchedule:
        if name not in self.schedules:
            raise ConfigError(f"No schedule for '{name}'{did_you_mean(name, self.schedules)}")
        return self.schedules[name].to_schedule(self.seed, self.precision)

    def digest(self) -> str:
        return json_digest(self.raw)

    def section_digest(self, *keys: str) -> str:
        return json_digest({k: self.raw.get(k) for k in keys})


def deep_merge(base: Dict, override: Dict) -> Dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict, overrides: Dict[str, Any]) -> Dict:
    """Set dotted ``section.key`` paths; the path must already exist in the resolved document."""
    data = copy.deepcopy(data)
    for path, value in overrides.items():
        parts = path.split(".")
        node = data
        for depth, part in enumerate(parts):
            if isinstance(node, list):
                try:
                    index = int(part)
                    node[index]
                except (ValueError, IndexError):
                    raise ConfigError(f"Override '{path}': '{part}' is not a valid list index") from None
                key = index
            else:
                if part not in node:
                    raise ConfigError(f"Override '{path}': unknown key '{part}'{did_you_mean(part, node.keys())}")
                key = part
            if depth == len(parts) - 1:
                node[key] = _parse_value(value) if isinstance(value, str) else value
            else:
                node = node[key]
    return data


def parse_config(data: Dict) -> LabConfig:
    _reject_unknown("config", data, SECTIONS)
    try:
        world = WorldConfig.from_dict(data["world"])
    except (WorldError, TypeError) as e:
        raise ConfigError(f"Invalid world: {e}") from e
    engines = tuple(EngineConfig.from_dict(e, i) for i, e in enumerate(data.get("engines", [])))

    corrector_data = dict(data.get("corrector", {}))
    _reject_unknown("corrector", corrector_data, [f.name for f in fields(CorrectorConfig)])
    corrector_data["model"] = _build(ModelConfig, "corrector.model", corrector_data.get("model"))
    corrector = _build(CorrectorConfig, "corrector", corrector_data)
    if corrector.loss_mode not in ("sum", "terminal") or corrector.window < 1:
        raise ConfigError("corrector.loss_mode must be 'sum' or 'terminal' and corrector.window >= 1")

    schedules = {name: _build(ScheduleConfig, f"schedules.{name}", s) for name, s in data.get("schedules", {}).items()}
    rollout = _build(RolloutConfig, "rollout", data.get("rollout"))
    evaluation = _build(EvaluationConfig, "evaluation", data.get("evaluation"))
    theory = _build(TheoryConfig, "theory", data.get("theory"))
    ablation = _build(AblationConfig, "ablation", data.get("ablation"))

    cfg = LabConfig(
        run_name=str(data.get("run_name", "default")),
        seed=int(data.get("seed", 0)),
        precision=str(data.get("precision", "f32")),
        world=world,
        engines=engines,
        corrector=corrector,
        schedules=schedules,
        rollout=rollout,
        evaluation=evaluation,
        theory=theory,
        ablation=ablation,
        raw=data,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: LabConfig) -> None:
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be 'f32' or 'f64', got '{cfg.precision}'")
    spheres = [s.name for s in cfg.world.spheres]
    ids = cfg.engine_ids
    for sphere in ids:
        if sphere not in spheres:
            raise ConfigError(f"Engine for unknown sphere '{sphere}'{did_you_mean(sphere, spheres)}")
    missing = [s for s in spheres if s not in ids]
    if missing or len(set(ids)) != len(ids):
        raise ConfigError(f"Every sphere needs exactly one engine; missing {missing}, got {ids}")
    for engine in cfg.engines:
        for request in engine.boundary:
            if request.source not in spheres:
                raise ConfigError(
                    f"Engine '{engine.sphere}' requests unknown sphere '{request.source}'{did_you_mean(request.source, spheres)}"
                )
            names = cfg.world.sphere(request.source).variables
            if request.variable not in names:
                raise ConfigError(
                    f"Engine '{engine.sphere}' requests unknown variable '{request.variable}'{did_you_mean(request.variable, names)}"
                )
        if engine.sphere not in cfg.schedules:
            raise ConfigError(f"No schedule for engine '{engine.sphere}'")
    if cfg.corrector.enabled and "corrector" not in cfg.schedules:
        raise ConfigError("No schedule for the corrector")
    try:
        validate_engine_order(cfg.specs())
    except EngineOrderError as e:
        raise ConfigError(str(e)) from e
    r = cfg.rollout
    if r.horizon < 0 or r.ics < 1 or r.ic_spacing < 1:
        raise ConfigError("rollout needs horizon >= 0, ics >= 1 and ic_spacing >= 1")
    if r.boundary_mode not in ("coupled", "truth"):
        raise ConfigError(f"rollout.boundary_mode must be 'coupled' or 'truth', got '{r.boundary_mode}'")
    needed = r.horizon + (r.ics - 1) * r.ic_spacing + 1
    available = cfg.world.split_lengths["test"]
    if needed > available:
        raise ConfigError(f"Test split has {available} steps, {r.ics} ICs at horizon {r.horizon} need {needed}")
    _validate_ablation(cfg)


def _validate_ablation(cfg: LabConfig) -> None:
    a = cfg.ablation
    if not a.enabled:
        return
    if a.engine not in cfg.engine_ids:
        raise ConfigError(f"ablation.engine '{a.engine}' has no engine{did_you_mean(a.engine, cfg.engine_ids)}")
    if not a.variants:
        raise ConfigError("ablation.variants must not be empty")
    for variant in a.variants:
        if variant not in ABLATION_VARIANTS:
            raise ConfigError(f"Unknown ablation variant '{variant}'{did_you_mean(variant, ABLATION_VARIANTS)}")
        cfg.engine(a.engine).spec(cfg.world, variant)
    if a.lead is not None and not 0 <= a.lead <= cfg.rollout.horizon:
        raise ConfigError(f"ablation.lead must lie in [0, {cfg.rollout.horizon}], got {a.lead}")


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> LabConfig:
    """Defaults from ``src/lab_config.json``, then the file at ``path``, then dotted overrides."""
    defaults = load_json(DEFAULT_CONFIG_PATH)
    data = defaults
    if path is not None:
        try:
            user = load_json(path)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        _reject_unknown(os.path.basename(path), user, SECTIONS)
        data = deep_merge(defaults, user)
    if overrides:
        data = apply_overrides(data, overrides)
    cfg = parse_config(data)
    logger.info(f"✅ config loaded: run '{cfg.run_name}', {len(cfg.world.spheres)} spheres, digest {cfg.digest()[:12]}")
    return cfg
