"""
Experiment driver: runs the stages of a lab config into ``runs/<name>/`` and keeps
a manifest of what ran, with which inputs, and which artifacts it produced.

Stages, in dependency order::

    gen-data -> pretrain:<sphere> (one per engine) -> train-corrector -> rollout
             -> evaluate, spectrum;   theory-check (neural estimates use checkpoints if present)
             -> ablation (only by request, or when the config enables it)

A stage is skipped when its recorded inputs digest is unchanged and all of its
artifacts still exist with the recorded digests.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import __version__
from src.config import ConfigError, LabConfig
from src.coupled_rollout import (
    CorrectorDataset,
    RolloutTrace,
    StateLayout,
    build_engine_dataset,
    coupled_step,
    load_trace,
    rollout,
    save_trace,
    train_corrector,
)
from src.engines import Forecaster, IdentityEngine
from src.evaluation import (
    EvaluationContext,
    day_of_cycle_climatology,
    energy_spectrum,
    evaluate_series,
    extreme_thresholds,
    log_spectral_gap,
    mean_spectrum,
    scores_at_lead,
    synthesize_power_law_field,
    write_ablation_csv,
    write_extremes_csv,
    write_metrics_csv,
    write_spectrum_csv,
)
from src.rea_theory import neural_lambda, theory_report
from src.synthetic_world import WorldData, generate_coupled_dataset, load_world, write_dataset
from src.tensor import get_dtype, precision
from src.training import load_checkpoint, pretrain_engine, save_checkpoint
from src.utils import atomic_write_json, did_you_mean, file_digest, json_digest, load_json, runs_root, worker_count

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SKIPPED = "skipped (up-to-date)"
SERIES = ("coupled", "uncorrected", "truth-boundary")


class PipelineError(RuntimeError):
    pass


class UpstreamMissingError(PipelineError):
    pass


class DigestMismatchError(UpstreamMissingError):
    pass


class RunLockedError(PipelineError):
    pass


@dataclass
class StageRecord:
    status: str
    inputs_digest: str = ""
    artifacts: Dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    message: str = ""


@dataclass
class RunManifest:
    run_name: str
    config_digest: str
    seed: int
    tool_version: str = __version__
    created: str = ""
    updated: str = ""
    overrides: Dict = field(default_factory=dict)
    stages: Dict[str, StageRecord] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["stages"] = {name: asdict(rec) for name, rec in self.stages.items()}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RunManifest":
        data = dict(data)
        data["stages"] = {name: StageRecord(**rec) for name, rec in data.get("stages", {}).items()}
        return cls(**data)

    def status(self, stage: str) -> Optional[str]:
        record = self.stages.get(stage)
        return record.status if record else None

    def completed(self, stage: str) -> bool:
        return self.status(stage) in ("ok", SKIPPED)

    def artifact_digests(self, stages: Sequence[str]) -> Dict[str, str]:
        out = {}
        for stage in stages:
            if stage in self.stages:
                out.update(self.stages[stage].artifacts)
        return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- run directory ---------------------------------------------------------------

class RunContext:
    """Paths and cached loaders for one run directory."""

    def __init__(self, cfg: LabConfig, run_dir: str):
        self.cfg = cfg
        self.run_dir = run_dir
        self._world: Optional[WorldData] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def rel(self, path: str) -> str:
        return os.path.relpath(path, self.run_dir)

    @property
    def data_dir(self) -> str:
        return self.path("data")

    def world(self) -> WorldData:
        if self._world is None:
            if not os.path.exists(os.path.join(self.data_dir, "world.json")):
                raise UpstreamMissingError(f"No dataset in {self.data_dir}; run gen-data first")
            self._world = load_world(self.data_dir)
        return self._world

    def checkpoint_stem(self, name: str, kind: str) -> str:
        return self.path("checkpoints", f"{name}.{kind}")

    def load_engine(self, sphere: str) -> Forecaster:
        which = self.cfg.engine(sphere).checkpoint
        stem = self.checkpoint_stem(sphere, which)
        if not os.path.exists(f"{stem}.json"):
            raise UpstreamMissingError(f"Missing checkpoint for engine '{sphere}': {stem}.json")
        return load_checkpoint(stem).to_forecaster(dtype=get_dtype()).freeze()

    def engines(self) -> Dict[str, Forecaster]:
        return {sphere: self.load_engine(sphere) for sphere in self.cfg.engine_ids}

    def corrector(self, required: bool = True) -> Optional[Forecaster]:
        stem = self.checkpoint_stem("corrector", self.cfg.corrector.checkpoint)
        if not os.path.exists(f"{stem}.json"):
            if required:
                raise UpstreamMissingError(f"Missing corrector checkpoint: {stem}.json")
            return None
        return load_checkpoint(stem).to_forecaster(dtype=get_dtype()).freeze()

    def trace_stem(self, series: str, ic: int) -> str:
        return self.path("traces", series, f"ic{ic:03d}")

    def traces(self, series: str) -> List[RolloutTrace]:
        out = []
        for ic in range(self.cfg.rollout.ics):
            stem = self.trace_stem(series, ic)
            if not os.path.exists(f"{stem}.json"):
                break
            out.append(load_trace(stem))
        return out


# --- stages ----------------------------------------------------------------------

def stage_gen_data(ctx: RunContext) -> List[str]:
    world = generate_coupled_dataset(ctx.cfg.world)
    return write_dataset(world, ctx.data_dir)


def _pretrain_stage(sphere: str) -> Callable[[RunContext], List[str]]:
    def run(ctx: RunContext) -> List[str]:
        engine_cfg = ctx.cfg.engine(sphere)
        spec = engine_cfg.spec(ctx.cfg.world)
        dataset = build_engine_dataset(ctx.world(), spec)
        checkpoints = pretrain_engine(spec, dataset, ctx.cfg.schedule(sphere), workers=worker_count())
        paths = []
        for kind in ("best", "final"):
            paths.extend(save_checkpoint(checkpoints.select(kind), ctx.checkpoint_stem(sphere, kind)))
        return paths
    return run


def stage_train_corrector(ctx: RunContext) -> List[str]:
    cfg = ctx.cfg
    world = ctx.world()
    corrector = Forecaster.initialise(cfg.corrector.build(cfg.world), seed=cfg.seed, residual=True,
                                      zero_output=True, name="corrector")
    checkpoints = train_corrector(
        cfg.specs(),
        ctx.engines(),
        corrector,
        CorrectorDataset.from_world(world),
        cfg.schedule("corrector"),
        window=cfg.corrector.window,
        loss_mode=cfg.corrector.loss_mode,
        curriculum=cfg.corrector.curriculum,
        workers=worker_count(),
    )
    paths = []
    for kind in ("best", "final"):
        paths.extend(save_checkpoint(checkpoints.select(kind), ctx.checkpoint_stem("corrector", kind)))
    return paths


def _rollout_series(ctx: RunContext, include_corrector: bool) -> Dict[str, Tuple[Optional[Forecaster], str]]:
    series = {"uncorrected": (None, "coupled"), "truth-boundary": (None, "truth")}
    if include_corrector:
        series["coupled"] = (ctx.corrector(required=True), ctx.cfg.rollout.boundary_mode)
    return series


def stage_rollout(ctx: RunContext) -> List[str]:
    cfg = ctx.cfg
    world = ctx.world()
    layout = StateLayout.from_world(world)
    specs = cfg.specs()
    engines = ctx.engines()
    test = world.splits["test"]
    horizon = cfg.rollout.horizon
    include_corrector = cfg.corrector.enabled
    series = _rollout_series(ctx, include_corrector)
    digest = cfg.digest()

    def one(ic: int, corrector, mode: str) -> RolloutTrace:
        start = ic * cfg.rollout.ic_spacing
        truth = test[start:start + horizon + 1]
        initial = layout.state(truth[0], world.day_of("test", start))
        return rollout(initial, horizon, specs, engines, corrector=corrector, truth=truth, boundary_mode=mode,
                       divergence_threshold=cfg.rollout.divergence_threshold, config_digest=digest)

    paths = []
    workers = worker_count()
    for name, (corrector, mode) in series.items():
        logger.info(f"🌀 rollout '{name}': {cfg.rollout.ics} ICs x {horizon} steps")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(lambda ic: one(ic, corrector, mode), range(cfg.rollout.ics)))
        for ic, trace in enumerate(traces):
            if trace.diverged:
                logger.warning(f"⚠️ '{name}' IC {ic} diverged at step {trace.diverged_at}")
            paths.extend(save_trace(trace, ctx.trace_stem(name, ic)))
    return paths


def _evaluation_context(ctx: RunContext) -> EvaluationContext:
    world = ctx.world()
    stats = world.stats
    train = world.splits["train"]
    masks = np.stack([stats.valid_mask(v) for v in stats.variables])
    return EvaluationContext(
        variables=stats.variables,
        latitudes=world.config.latitudes,
        masks=masks,
        climatology=day_of_cycle_climatology(train, world.config.cycle_length, world.day_of("train", 0)),
        thresholds=extreme_thresholds(train, ctx.cfg.evaluation.threshold_quantile),
        threshold_quantile=ctx.cfg.evaluation.threshold_quantile,
    )


def _available_series(ctx: RunContext) -> Dict[str, List[RolloutTrace]]:
    out = {}
    for name in SERIES:
        traces = ctx.traces(name)
        if traces:
            out[name] = traces
    if "uncorrected" not in out:
        raise UpstreamMissingError("No rollout traces found; run the rollout stage first")
    return out


def stage_evaluate(ctx: RunContext) -> List[str]:
    cfg = ctx.cfg
    context = _evaluation_context(ctx)
    horizon = cfg.rollout.horizon
    reports = []
    summary: Dict = {"horizon": horizon, "ics": cfg.rollout.ics, "series": {}}
    for name, traces in _available_series(ctx).items():
        report = evaluate_series([t.states for t in traces], [t.truth for t in traces],
                                 [t.start_day for t in traces], context, horizon, label=name)
        reports.append(report)
        summary["series"][name] = {
            "mean_rmse": report.mean_rmse(),
            "diverged": sum(t.diverged for t in traces),
        }
        lead = min(cfg.rollout.rea_lead, horizon)
        errors = [t.errors["joint"][lead] for t in traces if t.steps >= lead]
        summary["series"][name][f"joint_error_lead_{lead}"] = float(np.mean(errors)) if errors else None
    series = summary["series"]
    if "coupled" in series:
        base, corrected = series["uncorrected"]["mean_rmse"], series["coupled"]["mean_rmse"]
        summary["relative_improvement"] = (base - corrected) / base if base else None
    lead = min(cfg.rollout.rea_lead, horizon)
    key = f"joint_error_lead_{lead}"
    if "truth-boundary" in series and series["truth-boundary"][key]:
        summary["rea_ratio"] = series["uncorrected"][key] / series["truth-boundary"][key]
    summary["model_cost"] = {sphere: engine.cost().to_dict() for sphere, engine in ctx.engines().items()}
    corrector = ctx.corrector(required=False)
    if corrector is not None:
        summary["model_cost"]["corrector"] = corrector.cost().to_dict()
    paths = [
        write_metrics_csv(reports, ctx.path("metrics.csv")),
        write_extremes_csv(reports, ctx.path("extremes.csv")),
    ]
    atomic_write_json(ctx.path("summary.json"), summary)
    logger.info(f"✅ evaluation written: {json.dumps({k: v for k, v in summary.items() if k != 'series'})}")
    return paths + [ctx.path("summary.json")]


POWER_LAW_CHECK = (64, -3.0, (3, 16))
POWER_LAW_TOLERANCE = 0.15


def stage_spectrum(ctx: RunContext) -> List[str]:
    cfg = ctx.cfg
    world = ctx.world()
    lead = min(cfg.evaluation.spectrum_lead, cfg.rollout.horizon)
    band = cfg.evaluation.spectrum_band
    latitudes = world.config.latitudes
    test = world.splits["test"]
    truth_fields = [test[ic * cfg.rollout.ic_spacing + lead, v]
                    for ic in range(cfg.rollout.ics) for v in range(test.shape[1])]
    spectra = {"truth": mean_spectrum(truth_fields, latitudes, band)}
    for name, traces in _available_series(ctx).items():
        fields = [t.states[lead, v] for t in traces if t.steps >= lead for v in range(t.states.shape[1])]
        if fields:
            spectra[name] = mean_spectrum(fields, latitudes, band)
        else:
            logger.warning(f"⚠️ no '{name}' trace reaches lead {lead}; left out of the spectra")
    gaps = {name: log_spectral_gap(s, spectra["truth"]) for name, s in spectra.items() if name != "truth"}
    size, target, fit_band = POWER_LAW_CHECK
    check = synthesize_power_law_field(size, size, target, seed=cfg.seed)
    fitted = energy_spectrum(check, band=fit_band).slope
    summary = {
        "lead": lead,
        "log_spectral_gap": gaps,
        "power_law_check": {"target": target, "fitted": fitted, "tolerance": POWER_LAW_TOLERANCE,
                            "passed": abs(fitted - target) <= POWER_LAW_TOLERANCE},
    }
    if band is not None:
        summary["slopes"] = {name: s.slope for name, s in spectra.items()}
    paths = [write_spectrum_csv(spectra, ctx.path("spectrum.csv"))]
    atomic_write_json(ctx.path("spectrum_summary.json"), summary)
    logger.info(f"✅ spectra at lead {lead}: gaps {gaps}")
    return paths + [ctx.path("spectrum_summary.json")]


def stage_theory_check(ctx: RunContext) -> List[str]:
    cfg = ctx.cfg
    t = cfg.theory
    neural = None
    if t.neural:
        neural = _neural_estimates(ctx)
    report = theory_report(horizon=t.horizon, seed=t.seed, corrector_lambda=t.corrector_lambda,
                           eps_corr=t.eps_corr, corrector_l_f=t.corrector_l_f, neural=neural)
    path = ctx.path("theory_report.json")
    atomic_write_json(path, report)
    return [path]


def _neural_estimates(ctx: RunContext) -> Optional[Dict]:
    try:
        world = ctx.world()
        engines = ctx.engines()
        corrector = ctx.corrector(required=True)
    except UpstreamMissingError as e:
        logger.warning(f"⚠️ skipping neural Lipschitz estimates: {e}")
        return None
    t = ctx.cfg.theory
    layout = StateLayout.from_world(world)
    specs = ctx.cfg.specs()
    test = world.splits["test"]
    picks = np.linspace(0, len(test) - 1, t.neural_points).astype(int)
    points = [test[i].astype(np.float64) for i in picks]
    day = world.day_of("test", 0)

    def coupled_operator(x: np.ndarray) -> np.ndarray:
        return coupled_step(layout.state(x, day), specs, engines).stack()

    return neural_lambda(coupled_operator, corrector.predict, points, n_samples=t.n_samples,
                         power_iterations=t.power_iterations, perturbation=t.perturbation, seed=t.seed)


def _cost_row(forecasters: Sequence[Forecaster]) -> Dict[str, int]:
    costs = [f.cost() for f in forecasters]
    return {"params": sum(c.params for c in costs), "macs": sum(c.macs for c in costs)}


def stage_ablation(ctx: RunContext) -> List[str]:
    """Encoder variants of one engine, trained alike and rolled out on true boundaries,
    next to the coupled rollouts with and without the corrector."""
    cfg = ctx.cfg
    a = cfg.ablation
    world = ctx.world()
    layout = StateLayout.from_world(world)
    context = _evaluation_context(ctx)
    engine_cfg = cfg.engine(a.engine)
    lead = cfg.rollout.horizon if a.lead is None else a.lead
    own = world.sphere_slice(a.engine)
    own_vars = range(own.start, own.stop)
    specs = cfg.specs()
    test = world.splits["test"]
    dataset = build_engine_dataset(world, engine_cfg.spec(cfg.world))
    workers = worker_count()

    def one(ic: int, engines) -> RolloutTrace:
        start = ic * cfg.rollout.ic_spacing
        truth = test[start:start + lead + 1]
        initial = layout.state(truth[0], world.day_of("test", start))
        return rollout(initial, lead, specs, engines, truth=truth, boundary_mode="truth",
                       divergence_threshold=cfg.rollout.divergence_threshold)

    rows = []
    for variant in a.variants:
        spec = engine_cfg.spec(cfg.world, variant)
        logger.info(f"🧪 ablation '{variant}' of engine '{a.engine}'")
        checkpoints = pretrain_engine(spec, dataset, cfg.schedule(a.engine), workers=workers)
        forecaster = checkpoints.select(engine_cfg.checkpoint).to_forecaster(dtype=get_dtype()).freeze()
        engines = {s.sphere: IdentityEngine(s.in_channels, s.n_state) for s in specs}
        engines[a.engine] = forecaster
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(lambda ic: one(ic, engines), range(cfg.rollout.ics)))
        rmse, mae = scores_at_lead([t.states for t in traces], [t.truth for t in traces], context, lead, own_vars)
        rows.append({"variant": variant, "scope": a.engine, "lead": lead, "rmse": rmse, "mae": mae,
                     **_cost_row([forecaster]), "diverged": sum(t.diverged for t in traces)})

    engines = list(ctx.engines().values())
    corrector = ctx.corrector(required=False)
    pairs = [("no-corrector", "uncorrected", engines)]
    if corrector is not None:
        pairs.append(("corrector", "coupled", engines + [corrector]))
    for variant, series, forecasters in pairs:
        traces = ctx.traces(series)
        if not traces:
            logger.warning(f"⚠️ no '{series}' traces; '{variant}' left out of the ablation")
            continue
        rmse, mae = scores_at_lead([t.states for t in traces], [t.truth for t in traces], context, lead)
        rows.append({"variant": variant, "scope": "joint", "lead": lead, "rmse": rmse, "mae": mae,
                     **_cost_row(forecasters), "diverged": sum(t.diverged for t in traces)})
    return [write_ablation_csv(rows, ctx.path("ablation.csv"))]


# --- orchestration -----------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[RunContext], List[str]]
    upstream: Tuple[str, ...]
    sections: Tuple[str, ...]
    default: bool = True


def build_stages(cfg: LabConfig) -> List[Stage]:
    pretrain = tuple(f"pretrain:{sphere}" for sphere in cfg.engine_ids)
    stages = [Stage("gen-data", stage_gen_data, (), ("world",))]
    for sphere, name in zip(cfg.engine_ids, pretrain):
        stages.append(Stage(name, _pretrain_stage(sphere), ("gen-data",), ("engines", "schedules", "seed", "precision")))
    if cfg.corrector.enabled:
        stages.append(Stage("train-corrector", stage_train_corrector, ("gen-data",) + pretrain,
                            ("engines", "corrector", "schedules", "seed", "precision")))
    rollout_up = ("gen-data",) + pretrain + (("train-corrector",) if cfg.corrector.enabled else ())
    stages.append(Stage("rollout", stage_rollout, rollout_up, ("rollout", "corrector", "engines", "precision")))
    stages.append(Stage("evaluate", stage_evaluate, ("gen-data", "rollout"), ("evaluation", "rollout")))
    stages.append(Stage("spectrum", stage_spectrum, ("gen-data", "rollout"), ("evaluation", "rollout")))
    stages.append(Stage("theory-check", stage_theory_check, (), ("theory", "precision")))
    stages.append(Stage("ablation", stage_ablation, ("gen-data", "rollout"),
                        ("ablation", "engines", "schedules", "seed", "precision", "rollout", "evaluation"),
                        default=cfg.ablation.enabled))
    return stages


def resolve_stages(cfg: LabConfig, requested: Optional[Sequence[str]]) -> List[str]:
    """Expand aliases (``pretrain`` = every engine) and return stages in dependency order.

    With no request, stages whose ``default`` flag is off (a disabled ablation) are left out.
    """
    stages = build_stages(cfg)
    order = [s.name for s in stages]
    if requested is None:
        return [s.name for s in stages if s.default]
    wanted = set()
    for name in requested:
        name = name.strip()
        if not name:
            continue
        if name == "pretrain":
            wanted.update(s for s in order if s.startswith("pretrain:"))
        elif name in order:
            wanted.add(name)
        else:
            raise ConfigError(f"Unknown stage '{name}'{did_you_mean(name, order + ['pretrain'])}")
    return [s for s in order if s in wanted]


def _acquire_lock(run_dir: str) -> str:
    os.makedirs(run_dir, exist_ok=True)
    lock = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"Run directory {run_dir} is locked by another process ({lock})") from None
    with os.fdopen(fd, "w") as f:
        f.write(str(os.getpid()))
    return lock


def load_manifest(run_dir: str) -> Optional[RunManifest]:
    path = os.path.join(run_dir, MANIFEST_NAME)
    try:
        return RunManifest.from_dict(load_json(path))
    except FileNotFoundError:
        return None
    except (json.JSONDecodeError, TypeError) as e:
        logger.warning(f"⚠️ ignoring unreadable manifest {path}: {e}")
        return None


def _write_manifest(manifest: RunManifest, run_dir: str) -> None:
    manifest.updated = _now()
    atomic_write_json(os.path.join(run_dir, MANIFEST_NAME), manifest.to_dict())


def _artifacts_intact(ctx: RunContext, record: StageRecord) -> bool:
    for rel, digest in record.artifacts.items():
        path = ctx.path(rel)
        if not os.path.exists(path) or file_digest(path) != digest:
            return False
    return True


def _check_upstream(ctx: RunContext, manifest: RunManifest, stage: Stage) -> None:
    for name in stage.upstream:
        if not manifest.completed(name):
            raise UpstreamMissingError(f"Stage '{stage.name}' needs '{name}', which has not completed in {ctx.run_dir}")
        if not _artifacts_intact(ctx, manifest.stages[name]):
            raise DigestMismatchError(f"Artifacts of '{name}' are missing or changed since they were recorded")


def run_pipeline(
    cfg: LabConfig,
    stages: Optional[Sequence[str]] = None,
    run_dir: Optional[str] = None,
    overrides: Optional[Dict] = None,
) -> RunManifest:
    """Run ``stages`` (all by default) in dependency order and return the manifest."""
    run_dir = run_dir or os.path.join(runs_root(), cfg.run_name)
    selected = resolve_stages(cfg, stages)
    lock = _acquire_lock(run_dir)
    try:
        manifest = load_manifest(run_dir) or RunManifest(run_name=cfg.run_name, config_digest=cfg.digest(),
                                                         seed=cfg.seed, created=_now())
        manifest.config_digest = cfg.digest()
        manifest.seed = cfg.seed
        manifest.overrides = dict(overrides or {})
        _write_manifest(manifest, run_dir)
        ctx = RunContext(cfg, run_dir)
        by_name = {s.name: s for s in build_stages(cfg)}
        logger.info(f"🚀 run '{cfg.run_name}' in {run_dir}: stages {selected or '(none)'}")
        with precision(cfg.precision):
            for name in selected:
                _run_stage(ctx, manifest, by_name[name])
        return manifest
    finally:
        os.remove(lock)


def _run_stage(ctx: RunContext, manifest: RunManifest, stage: Stage) -> None:
    _check_upstream(ctx, manifest, stage)
    inputs = json_digest({
        "stage": stage.name,
        "config": ctx.cfg.section_digest(*stage.sections),
        "upstream": manifest.artifact_digests(stage.upstream),
    })
    previous = manifest.stages.get(stage.name)
    if previous and previous.status in ("ok", SKIPPED) and previous.inputs_digest == inputs and _artifacts_intact(ctx, previous):
        previous.status = SKIPPED
        _write_manifest(manifest, ctx.run_dir)
        logger.info(f"⏭️ {stage.name}: {SKIPPED}")
        return

    record = StageRecord(status="running", inputs_digest=inputs, started=_now())
    manifest.stages[stage.name] = record
    _write_manifest(manifest, ctx.run_dir)
    try:
        paths = stage.run(ctx)
    except Exception as e:
        record.status = "failed"
        record.message = f"{type(e).__name__}: {e}"
        record.finished = _now()
        _write_manifest(manifest, ctx.run_dir)
        logger.error(f"❌ stage '{stage.name}' failed: {record.message}")
        raise
    record.artifacts = {ctx.rel(p): file_digest(p) for p in sorted(set(paths))}
    record.status = "ok"
    record.finished = _now()
    _write_manifest(manifest, ctx.run_dir)
    logger.info(f"✅ {stage.name}: {len(record.artifacts)} artifacts")
