"""
Coupled multi-sphere stepping, correction, corrector training and rollouts.

A step runs the sphere engines in their configured order. Each engine sees its own
state plus a boundary stack taken from other spheres, either at the current time or,
for engines stepped later, from the partial prediction of the next time. The
optional corrector maps the stacked biased prediction of all spheres to a corrected
state, which is fed back as the next step's input.
"""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.engines import (
    BoundaryRequest,
    ChannelMismatchError,
    Engine,
    EngineSpec,
    Forecaster,
    RolloutError,
    TimeTag,
    validate_engine_order,
)
from src.synthetic_world import (
    NormStats,
    WorldData,
    apply_mask_fill,
    model_to_physical,
    physical_to_model,
)
from src.tensor import NonFiniteError, Tensor, add, constant, mul, no_grad
from src.training import (
    Adam,
    Checkpoint,
    DivergenceDetected,
    EngineCheckpoints,
    EngineDataset,
    TrainingError,
    TrainSchedule,
    cosine_anneal_lr,
    epoch_batches,
    loss_gradients,
    reduce_gradients,
    relative_l2_loss,
)
from src.utils import atomic_write_bytes, atomic_write_json, did_you_mean, load_json, read_f32, to_f32_bytes

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e3
TRACE_VERSION = 1
BOUNDARY_MODES = ("coupled", "truth")
LOSS_MODES = ("sum", "terminal")


class UnresolvableBoundaryError(RolloutError):
    pass


class MissingPredictionError(RolloutError):
    pass


class StepDivergenceError(RolloutError, DivergenceDetected):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class FreezeViolationError(RolloutError):
    pass


class TraceFormatError(RolloutError):
    pass


# --- state -----------------------------------------------------------------------

@dataclass(frozen=True)
class StateLayout:
    """Ordered spheres with their variable names; the stacking order of the joint state."""
    variables: Tuple[Tuple[str, Tuple[str, ...]], ...]
    cycle_length: int = 1
    stats: Optional[NormStats] = None

    @classmethod
    def from_counts(cls, counts: Sequence[Tuple[str, int]], cycle_length: int = 1) -> "StateLayout":
        return cls(tuple((name, tuple(f"{name}{i}" for i in range(n))) for name, n in counts), cycle_length)

    @classmethod
    def from_world(cls, world: WorldData) -> "StateLayout":
        spheres = tuple((s.name, s.variables) for s in world.config.spheres)
        return cls(spheres, world.config.cycle_length, world.stats)

    @property
    def spheres(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.variables)

    def names(self, sphere: str) -> Tuple[str, ...]:
        for name, names in self.variables:
            if name == sphere:
                return names
        raise UnresolvableBoundaryError(f"Unknown sphere '{sphere}'{did_you_mean(sphere, self.spheres)}")

    @property
    def total_channels(self) -> int:
        return sum(len(names) for _, names in self.variables)

    def slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for name, names in self.variables:
            out[name] = slice(start, start + len(names))
            start += len(names)
        return out

    def split(self, stack: np.ndarray) -> Dict[str, np.ndarray]:
        if stack.shape[0] != self.total_channels:
            raise ChannelMismatchError(f"Stacked state has {stack.shape[0]} channels, layout needs {self.total_channels}")
        return {name: stack[sl] for name, sl in self.slices().items()}

    def stack(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([fields[name] for name in self.spheres], axis=0)

    def state(self, stack: np.ndarray, day: int) -> "CoupledState":
        return CoupledState(self.split(np.array(stack)), day % self.cycle_length, self)

    def mask(self, sphere: str, field: np.ndarray) -> np.ndarray:
        if self.stats is None or sphere not in self.stats.masks:
            return field
        return apply_mask_fill(field, self.stats.masks[sphere])


@dataclass
class CoupledState:
    """Normalized per-sphere fields at one time, with their day of cycle."""
    fields: Dict[str, np.ndarray]
    day: int
    layout: StateLayout

    def __post_init__(self):
        if not 0 <= self.day < self.layout.cycle_length:
            raise RolloutError(f"Cycle index {self.day} outside [0, {self.layout.cycle_length})")

    def stack(self) -> np.ndarray:
        return self.layout.stack(self.fields)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(f)) for f in self.fields.values())


class Direction(Enum):
    TO_MODEL = "to_model"
    TO_PHYSICAL = "to_physical"


def anomaly_cycle(
    field: np.ndarray,
    stats: NormStats,
    variables: Sequence[str],
    day: int,
    direction,
    climatology: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Convert ``field[n, H, W]`` between normalized (anomaly) and physical space.

    ``to_physical`` computes ``field * std + mean (+ climatology[day])``;
    ``to_model`` is its inverse.
    """
    if climatology is not None:
        stats = replace(stats, climatology=climatology)
    if Direction(direction) is Direction.TO_MODEL:
        return physical_to_model(field, stats, variables, day)
    return model_to_physical(field, stats, variables, day)


# --- boundary exchange -------------------------------------------------------------

def _boundary_channel(source_state: CoupledState, request: BoundaryRequest) -> np.ndarray:
    layout = source_state.layout
    names = layout.names(request.source)
    if request.source not in source_state.fields:
        raise MissingPredictionError(f"No state for sphere '{request.source}' at {request.time_tag.value}")
    if request.variable not in names:
        raise UnresolvableBoundaryError(
            f"Sphere '{request.source}' has no variable '{request.variable}'{did_you_mean(request.variable, names)}"
        )
    value = source_state.fields[request.source][names.index(request.variable)]
    stats = layout.stats
    if stats is not None and request.variable in stats.periodic:
        # anomaly -> physical -> plain (non-anomaly) normalization for the receiving engine
        physical = model_to_physical(value[None], stats, [request.variable], source_state.day)[0]
        p = stats.periodic_index(request.variable)
        value = (physical - stats.raw_mean[p]) / stats.raw_std[p]
        value = apply_mask_fill(value, stats.valid_mask(request.variable)).astype(source_state.fields[request.source].dtype)
    return value


def exchange_boundary(
    state: CoupledState,
    target: EngineSpec,
    predicted_next: Optional[CoupledState] = None,
) -> np.ndarray:
    """Stack the boundary channels ``target`` requests, in request order."""
    any_field = next(iter(state.fields.values()))
    if not target.boundary:
        return np.zeros((0,) + any_field.shape[1:], dtype=any_field.dtype)
    channels = []
    for request in target.boundary:
        if request.time_tag is TimeTag.NEXT:
            if predicted_next is None or request.source not in predicted_next.fields:
                raise MissingPredictionError(
                    f"Engine '{target.sphere}' needs '{request.variable}' from '{request.source}' at t+1, "
                    f"but no prediction is available"
                )
            channels.append(_boundary_channel(predicted_next, request))
        else:
            channels.append(_boundary_channel(state, request))
    return np.stack(channels).astype(any_field.dtype, copy=False)


# --- stepping --------------------------------------------------------------------

def _check_output(out: np.ndarray, sphere: str, step: int) -> None:
    if not np.all(np.isfinite(out)):
        raise StepDivergenceError(f"Engine '{sphere}' produced non-finite values", step)


def coupled_step(
    state: CoupledState,
    specs: Sequence[EngineSpec],
    engines: Mapping[str, Engine],
    boundary_mode: str = "coupled",
    truth: Optional[CoupledState] = None,
    truth_next: Optional[CoupledState] = None,
    step: int = 0,
) -> CoupledState:
    """Advance every sphere one step; returns the biased prediction."""
    if boundary_mode not in BOUNDARY_MODES:
        raise RolloutError(f"boundary_mode must be one of {BOUNDARY_MODES}, got '{boundary_mode}'")
    missing = set(state.fields) - {spec.sphere for spec in specs}
    if missing:
        raise RolloutError(f"No engine steps sphere(s) {sorted(missing)}")
    if boundary_mode == "truth" and (truth is None or truth_next is None):
        raise RolloutError("Ground-truth boundary mode needs the true states at t and t+1")

    layout = state.layout
    next_day = (state.day + 1) % layout.cycle_length
    predicted: Dict[str, np.ndarray] = {}
    for spec in specs:
        if spec.sphere not in engines:
            raise RolloutError(f"No engine for sphere '{spec.sphere}'{did_you_mean(spec.sphere, engines.keys())}")
        engine = engines[spec.sphere]
        if boundary_mode == "truth":
            boundary = exchange_boundary(truth, spec, truth_next)
        else:
            boundary = exchange_boundary(state, spec, CoupledState(dict(predicted), next_day, layout))
        x = np.concatenate([state.fields[spec.sphere], boundary], axis=0)
        if x.shape[0] != engine.in_channels:
            raise ChannelMismatchError(
                f"Engine '{spec.sphere}' expects {engine.in_channels} input channels, routing provides {x.shape[0]}"
            )
        try:
            out = engine.predict(x)
        except NonFiniteError as e:
            raise StepDivergenceError(f"Engine '{spec.sphere}' diverged ({e})", step) from e
        _check_output(out, spec.sphere, step)
        predicted[spec.sphere] = layout.mask(spec.sphere, out)
    ordered = {name: predicted[name] for name in layout.spheres}
    return CoupledState(ordered, next_day, layout)


def correct_step(prediction: CoupledState, corrector: Engine, step: int = 0) -> CoupledState:
    """Stack all spheres, run the corrector once and split the result back."""
    layout = prediction.layout
    total = layout.total_channels
    if corrector.in_channels != total or corrector.out_channels != total:
        raise ChannelMismatchError(
            f"Corrector maps {corrector.in_channels}->{corrector.out_channels} channels, joint state has {total}"
        )
    try:
        out = corrector.predict(prediction.stack())
    except NonFiniteError as e:
        raise StepDivergenceError(f"Corrector diverged ({e})", step) from e
    _check_output(out, "corrector", step)
    fields = {name: layout.mask(name, f) for name, f in layout.split(out).items()}
    return CoupledState(fields, prediction.day, layout)


# --- datasets --------------------------------------------------------------------

def build_engine_dataset(world: WorldData, spec: EngineSpec, layout: Optional[StateLayout] = None) -> EngineDataset:
    """Single-step samples for one engine, with ground-truth boundaries at t and t+1."""
    layout = layout or StateLayout.from_world(world)

    def samples(split: str) -> Tuple[np.ndarray, np.ndarray]:
        seq = world.splits[split]
        inputs, targets = [], []
        for t in range(len(seq) - 1):
            now = layout.state(seq[t], world.day_of(split, t))
            nxt = layout.state(seq[t + 1], world.day_of(split, t + 1))
            boundary = exchange_boundary(now, spec, nxt)
            inputs.append(np.concatenate([now.fields[spec.sphere], boundary], axis=0))
            targets.append(nxt.fields[spec.sphere])
        h, w = seq.shape[-2:]
        if not inputs:
            return np.zeros((0, spec.in_channels, h, w), np.float32), np.zeros((0, spec.n_state, h, w), np.float32)
        return np.stack(inputs), np.stack(targets)

    train_x, train_y = samples("train")
    val_x, val_y = samples("val")
    return EngineDataset(train_x, train_y, val_x, val_y)


@dataclass
class CorrectorDataset:
    """Normalized joint sequences ``[T, V, H, W]`` for corrector training and validation."""
    layout: StateLayout
    train: np.ndarray
    val: np.ndarray
    train_start_day: int = 0
    val_start_day: int = 0

    @classmethod
    def from_world(cls, world: WorldData) -> "CorrectorDataset":
        return cls(
            layout=StateLayout.from_world(world),
            train=world.splits["train"],
            val=world.splits["val"],
            train_start_day=world.day_of("train", 0),
            val_start_day=world.day_of("val", 0),
        )


# --- stage 2 ---------------------------------------------------------------------

def curriculum_window(epoch: int, epochs: int, window: int) -> int:
    """Window length for ``epoch``: grows from 1 to ``window`` in equal stages."""
    if epochs <= 0:
        return window
    return min(window, 1 + (epoch * window) // epochs)


def _engine_digests(engines: Mapping[str, Engine]) -> Dict[str, str]:
    return {name: engine.parameter_digest() for name, engine in engines.items()}


def _check_engines_frozen(engines: Mapping[str, Engine]) -> None:
    for name, engine in engines.items():
        if engine.trainable:
            raise FreezeViolationError(f"Engine '{name}' is trainable; engines must be frozen before corrector training")
        params = getattr(engine, "params", None)
        if params is not None and any(t.grad is not None for _, t in params.items()):
            raise FreezeViolationError(f"Engine '{name}' received a gradient")


def window_loss(
    seq: np.ndarray,
    start: int,
    window: int,
    start_day: int,
    layout: StateLayout,
    specs: Sequence[EngineSpec],
    engines: Mapping[str, Engine],
    corrector: Forecaster,
    loss_mode: str = "sum",
    relative: bool = True,
) -> Tensor:
    """Predict-then-correct over ``window`` steps from ``seq[start]``.

    States are detached between steps; gradients flow through the corrector at
    each step. ``sum`` averages the per-step losses uniformly, ``terminal`` keeps
    only the last one.
    """
    dtype = corrector.params["embed.patch.weight"].dtype
    state = layout.state(seq[start], start_day + start)
    losses: List[Tensor] = []
    for k in range(1, window + 1):
        prediction = coupled_step(state, specs, engines, step=k)
        corrected = corrector.forward(constant(prediction.stack(), dtype=dtype))
        if loss_mode == "sum" or k == window:
            losses.append(relative_l2_loss(corrected, constant(seq[start + k], dtype=dtype), relative))
        fields = {name: layout.mask(name, f) for name, f in layout.split(corrected.data.copy()).items()}
        state = CoupledState(fields, prediction.day, layout)
    total = losses[0]
    for loss in losses[1:]:
        total = add(total, loss)
    return mul(total, 1.0 / len(losses)) if len(losses) > 1 else total


def train_corrector(
    specs: Sequence[EngineSpec],
    engines: Mapping[str, Engine],
    corrector: Forecaster,
    dataset: CorrectorDataset,
    schedule: TrainSchedule,
    window: int = 4,
    loss_mode: str = "sum",
    curriculum: bool = True,
    workers: Optional[int] = None,
) -> EngineCheckpoints:
    """Train the corrector against frozen engines with corrected-state feedback."""
    if window < 1:
        raise TrainingError(f"window must be >= 1, got {window}")
    if loss_mode not in LOSS_MODES:
        raise TrainingError(f"loss_mode must be one of {LOSS_MODES}, got '{loss_mode}'")
    validate_engine_order(specs)
    _check_engines_frozen(engines)
    digests = _engine_digests(engines)
    layout = dataset.layout
    n = len(dataset.train) - window
    if n < 1:
        raise TrainingError(f"Training split of {len(dataset.train)} steps is too short for window {window}")

    corrector.params.unfreeze()
    optimizer = Adam(corrector.params)
    history: List[Dict] = []
    best: Optional[Checkpoint] = None
    best_val = math.inf
    logger.info(f"🚀 training corrector: {n} windows, W={window}, {schedule.epochs} epochs, loss={loss_mode}")

    def task(start: int, w: int):
        return lambda: loss_gradients(
            lambda: window_loss(dataset.train, start, w, dataset.train_start_day, layout, specs, engines,
                                corrector, loss_mode, schedule.relative_loss),
            corrector.params,
        )

    def validation_loss() -> float:
        starts = range(len(dataset.val) - window)
        if not starts:
            return float("nan")
        with no_grad():
            values = [
                float(window_loss(dataset.val, s, window, dataset.val_start_day, layout, specs, engines,
                                  corrector, loss_mode, schedule.relative_loss).data)
                for s in starts
            ]
        return float(np.mean(values))

    for epoch in tqdm(range(schedule.epochs), desc="train corrector", leave=False):
        lr = cosine_anneal_lr(epoch, schedule.epochs, schedule.lr0)
        w = curriculum_window(epoch, schedule.epochs, window) if curriculum else window
        losses = []
        for b, batch in enumerate(epoch_batches(n, schedule.batch_size, schedule.seed, epoch)):
            try:
                loss = reduce_gradients([task(int(i), w) for i in batch], corrector.params, workers)
            except NonFiniteError as e:
                raise DivergenceDetected(f"Corrector diverged at epoch {epoch + 1}, batch {b}: {e}") from e
            if not math.isfinite(loss):
                raise DivergenceDetected(f"Corrector loss became non-finite at epoch {epoch + 1}, batch {b}")
            _check_engines_frozen(engines)
            optimizer.step(lr)
            optimizer.zero_grad()
            losses.append(loss)
        record = {"epoch": epoch + 1, "lr": lr, "window": w, "train": float(np.mean(losses))}
        is_last = epoch + 1 == schedule.epochs
        if (epoch + 1) % schedule.validate_every == 0 or is_last:
            try:
                val = validation_loss()
            except NonFiniteError as e:
                raise DivergenceDetected(f"Corrector diverged on validation at epoch {epoch + 1}: {e}") from e
            if math.isfinite(val):
                record["val"] = val
                if val < best_val:
                    best_val = val
                    best = Checkpoint.capture(corrector, epoch + 1, schedule.seed, history + [record], "corrector", "best")
        history.append(record)
        logger.info(
            f"📉 [corrector] epoch {epoch + 1}/{schedule.epochs} W={w} train {record['train']:.4f}"
            + (f" val {record['val']:.4f}" if "val" in record else "")
        )

    if _engine_digests(engines) != digests:
        raise FreezeViolationError("Engine parameters changed during corrector training")
    final = Checkpoint.capture(corrector, schedule.epochs, schedule.seed, history, "corrector", "final")
    if best is None:
        best = Checkpoint.capture(corrector, schedule.epochs, schedule.seed, history, "corrector", "best")
    corrector.params.freeze()
    logger.info("✅ corrector trained, engine digests unchanged")
    return EngineCheckpoints(best=best, final=final)


# --- rollout ---------------------------------------------------------------------

@dataclass
class RolloutTrace:
    horizon: int
    layout: Tuple[Tuple[str, int], ...]
    start_day: int
    states: np.ndarray
    predictions: np.ndarray
    truth: Optional[np.ndarray] = None
    errors: Optional[Dict[str, np.ndarray]] = None
    prediction_errors: Optional[Dict[str, np.ndarray]] = None
    has_corrector: bool = False
    diverged: bool = False
    diverged_at: Optional[int] = None
    config_digest: str = ""

    @property
    def steps(self) -> int:
        """Steps actually completed (``< horizon`` after divergence)."""
        return len(self.states) - 1

    @property
    def corrected(self) -> Optional[np.ndarray]:
        return self.states[1:] if self.has_corrector else None

    def sphere_slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for name, n in self.layout:
            out[name] = slice(start, start + n)
            start += n
        return out


def _error_norms(states: np.ndarray, truth: np.ndarray, slices: Dict[str, slice]) -> Dict[str, np.ndarray]:
    diff = states.astype(np.float64) - truth.astype(np.float64)
    errors = {name: np.sqrt(np.sum(diff[:, sl] ** 2, axis=(1, 2, 3))) for name, sl in slices.items()}
    errors["joint"] = np.sqrt(np.sum(diff ** 2, axis=(1, 2, 3)))
    return errors


def rollout(
    initial: CoupledState,
    horizon: int,
    specs: Sequence[EngineSpec],
    engines: Mapping[str, Engine],
    corrector: Optional[Engine] = None,
    truth: Optional[np.ndarray] = None,
    boundary_mode: str = "coupled",
    divergence_threshold: float = DIVERGENCE_THRESHOLD,
    config_digest: str = "",
) -> RolloutTrace:
    """Autoregressive rollout for ``horizon`` steps.

    ``truth`` is the stacked true sequence aligned with ``initial`` (``truth[0]`` is
    the initial time). A non-finite state, or one exceeding ``divergence_threshold``
    in magnitude, truncates the trace and sets its divergence flag.
    """
    if horizon < 0:
        raise RolloutError(f"horizon must be >= 0, got {horizon}")
    validate_engine_order(specs)
    layout = initial.layout
    if truth is not None and len(truth) < horizon + 1:
        raise RolloutError(f"Truth covers {len(truth) - 1} steps, horizon is {horizon}")
    if boundary_mode == "truth" and truth is None:
        raise RolloutError("Ground-truth boundary mode needs the true sequence")

    def truth_state(s: int) -> Optional[CoupledState]:
        return layout.state(truth[s], initial.day + s) if truth is not None else None

    states = [initial.stack()]
    predictions = []
    current = initial
    diverged_at = None
    for s in range(1, horizon + 1):
        try:
            prediction = coupled_step(current, specs, engines, boundary_mode, truth_state(s - 1), truth_state(s), step=s)
            corrected = correct_step(prediction, corrector, step=s) if corrector is not None else prediction
        except StepDivergenceError as e:
            logger.warning(f"⚠️ rollout diverged: {e}")
            diverged_at = s
            break
        stacked = corrected.stack()
        if np.max(np.abs(stacked)) > divergence_threshold:
            logger.warning(f"⚠️ rollout exceeded |x| > {divergence_threshold:g} at step {s}")
            diverged_at = s
            break
        predictions.append(prediction.stack())
        states.append(stacked)
        current = corrected
        logger.debug(f"rollout step {s}/{horizon}")

    layout_counts = tuple((name, len(names)) for name, names in layout.variables)
    states_arr = np.stack(states)
    shape = states_arr.shape[1:]
    predictions_arr = np.stack(predictions) if predictions else np.zeros((0,) + shape, dtype=states_arr.dtype)
    trace = RolloutTrace(
        horizon=horizon,
        layout=layout_counts,
        start_day=initial.day,
        states=states_arr,
        predictions=predictions_arr,
        has_corrector=corrector is not None,
        diverged=diverged_at is not None,
        diverged_at=diverged_at,
        config_digest=config_digest,
    )
    if truth is not None:
        trace.truth = np.asarray(truth[: trace.steps + 1])
        slices = trace.sphere_slices()
        trace.errors = _error_norms(trace.states, trace.truth, slices)
        trace.prediction_errors = _error_norms(trace.predictions, trace.truth[1:], slices)
    return trace


# --- trace files -------------------------------------------------------------------

def save_trace(trace: RolloutTrace, stem: str) -> Tuple[str, str]:
    """``<stem>.json`` header plus ``<stem>.bin`` float32 blocks, one group per step.

    Step 0 holds the state (and truth); step ``s >= 1`` holds the prediction, the
    fed-back state and the truth, in that order.
    """
    blocks = []
    for s in range(trace.steps + 1):
        if s > 0:
            blocks.append(trace.predictions[s - 1])
        blocks.append(trace.states[s])
        if trace.truth is not None:
            blocks.append(trace.truth[s])
    json_path, bin_path = f"{stem}.json", f"{stem}.bin"
    atomic_write_bytes(bin_path, to_f32_bytes(blocks))
    header = {
        "version": TRACE_VERSION,
        "config_digest": trace.config_digest,
        "horizon": trace.horizon,
        "steps": trace.steps,
        "diverged": trace.diverged,
        "diverged_at": trace.diverged_at,
        "start_day": trace.start_day,
        "layout": [list(entry) for entry in trace.layout],
        "field_shape": list(trace.states.shape[1:]),
        "has_corrector": trace.has_corrector,
        "has_truth": trace.truth is not None,
        "errors": {k: v.tolist() for k, v in (trace.errors or {}).items()},
        "prediction_errors": {k: v.tolist() for k, v in (trace.prediction_errors or {}).items()},
    }
    atomic_write_json(json_path, header)
    return json_path, bin_path


def load_trace(stem: str) -> RolloutTrace:
    try:
        header = load_json(f"{stem}.json")
    except FileNotFoundError:
        raise TraceFormatError(f"Trace header not found: {stem}.json") from None
    if header.get("version") != TRACE_VERSION:
        raise TraceFormatError(f"Trace version {header.get('version')} != {TRACE_VERSION}")
    shape = tuple(header["field_shape"])
    steps = header["steps"]
    per_state = 2 if header["has_truth"] else 1
    n_blocks = (steps + 1) * per_state + steps
    size = int(np.prod(shape, dtype=np.int64))
    data = read_f32(f"{stem}.bin")
    if data.size != n_blocks * size:
        raise TraceFormatError(f"Trace blob has {data.size} values, header implies {n_blocks * size}")
    blocks = iter(data.reshape((n_blocks,) + shape))
    states, predictions, truth = [], [], []
    for s in range(steps + 1):
        if s > 0:
            predictions.append(next(blocks))
        states.append(next(blocks))
        if header["has_truth"]:
            truth.append(next(blocks))

    def as_dict(d: Dict) -> Optional[Dict[str, np.ndarray]]:
        return {k: np.asarray(v) for k, v in d.items()} or None

    return RolloutTrace(
        horizon=header["horizon"],
        layout=tuple((name, n) for name, n in header["layout"]),
        start_day=header["start_day"],
        states=np.stack(states),
        predictions=np.stack(predictions) if predictions else np.zeros((0,) + shape, dtype=np.float32),
        truth=np.stack(truth) if truth else None,
        errors=as_dict(header["errors"]),
        prediction_errors=as_dict(header["prediction_errors"]),
        has_corrector=header["has_corrector"],
        diverged=header["diverged"],
        diverged_at=header["diverged_at"],
        config_digest=header["config_digest"],
    )
