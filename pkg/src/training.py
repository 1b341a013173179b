"""
Losses, the Adam optimizer, the cosine learning-rate schedule, checkpoint files
and the single-step engine pretraining loop.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.engines import EngineSpec, Forecaster
from src.nn_blocks import DSLCastConfig, ParamSet, init_dslcast_params
from src.tensor import ComputeGraph, NonFiniteError, Tensor, backward, constant, div, l2_norm, no_grad, sub
from src.utils import atomic_write_bytes, atomic_write_json, bytes_digest, load_json, to_f32_bytes, worker_count

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Base class for training and checkpoint errors."""


class DivergenceDetected(TrainingError):
    """A required computation produced non-finite values."""


class TrainingDivergedError(DivergenceDetected):
    pass


class DegenerateBatchError(TrainingError, ValueError):
    pass


class NonFiniteGradientError(DivergenceDetected):
    pass


class ScheduleError(TrainingError, ValueError):
    pass


class CheckpointError(TrainingError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointValidationError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


# --- loss ------------------------------------------------------------------------

def relative_l2_loss(pred: Tensor, target: Tensor, relative: bool = True) -> Tensor:
    """``||pred - target||_2 / ||target||_2`` over all elements of one sample.

    With ``relative=False`` the plain norm of the difference is returned.
    """
    if pred.shape != target.shape:
        raise TrainingError(f"Loss shapes differ: {pred.shape} vs {target.shape}")
    distance = l2_norm(sub(pred, target))
    if not relative:
        return distance
    if not np.any(target.data):
        raise DegenerateBatchError("Relative L2 loss is undefined for an all-zero target")
    return div(distance, l2_norm(target))


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParamSet,
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Missing gradients count as zero. Any non-finite gradient rejects the whole
    step before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"Non-finite gradient for '{name}', optimizer step rejected")
    for name, tensor in params.items():
        if name in state.m and state.m[name].shape != tensor.shape:
            raise TrainingError(f"Adam moment buffer for '{name}' has shape {state.m[name].shape}, param {tensor.shape}")

    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m.get(name, np.zeros_like(tensor.data))
        v = state.v.get(name, np.zeros_like(tensor.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        tensor.data = (tensor.data - update).astype(tensor.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = {name: t.grad for name, t in self.params.items()}
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()


def cosine_anneal_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if total_epochs < 1:
        raise ScheduleError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 40
    lr0: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    precision: str = "f32"
    validate_every: int = 1
    relative_loss: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ScheduleError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr0 <= 0:
            raise ScheduleError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1 or self.validate_every < 1:
            raise ScheduleError("batch_size and validate_every must be >= 1")


def epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Contiguous index windows, visited in an order shuffled per epoch."""
    windows = [np.arange(start, min(start + batch_size, n_samples)) for start in range(0, n_samples, batch_size)]
    order = np.random.default_rng([seed, epoch]).permutation(len(windows))
    return [windows[i] for i in order]


# --- gradients -------------------------------------------------------------------

GradientTask = Callable[[], Tuple[float, Dict[str, np.ndarray]]]


def loss_gradients(loss_fn: Callable[[], Tensor], params: ParamSet, weight: float = 1.0) -> Tuple[float, Dict[str, np.ndarray]]:
    """Run ``loss_fn`` under a fresh graph and return its value and per-parameter gradients."""
    with ComputeGraph() as graph:
        loss = loss_fn()
    sink: Dict[int, np.ndarray] = {}
    backward(loss, graph, sink=sink)
    names = {id(t): name for name, t in params.items()}
    return float(loss.data) * weight, {names[k]: g * weight for k, g in sink.items() if k in names}


def reduce_gradients(tasks: Sequence[GradientTask], params: ParamSet, workers: Optional[int] = None) -> float:
    """Average per-sample gradients into ``param.grad``; returns the mean loss.

    Samples may run on worker threads; the reduction always sums in sample order.
    """
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda task: task(), tasks))
    else:
        results = [task() for task in tasks]
    n = len(results)
    totals = {name: np.zeros_like(t.data) for name, t in params.items()}
    loss_sum = 0.0
    for loss, grads in results:
        loss_sum += loss
        for name, g in grads.items():
            totals[name] += g
    for name, tensor in params.items():
        tensor.grad = totals[name] / n
    return loss_sum / n


# --- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: Dict
    params: Dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    loss_history: List[Dict] = field(default_factory=list)
    engine: str = ""
    kind: str = "final"

    @classmethod
    def capture(cls, forecaster: Forecaster, epoch: int, seed: int, history: List[Dict], engine: str, kind: str) -> "Checkpoint":
        return cls(
            config={"model": forecaster.cfg.to_dict(), "residual": forecaster.residual},
            params={name: t.data.astype(np.float32) for name, t in forecaster.params.items()},
            epoch=epoch,
            seed=seed,
            loss_history=[dict(h) for h in history],
            engine=engine,
            kind=kind,
        )

    def to_forecaster(self, requires_grad: bool = False, dtype=None) -> Forecaster:
        cfg = DSLCastConfig.from_dict(self.config["model"])
        params = ParamSet.from_arrays(self.params, requires_grad=requires_grad, dtype=dtype)
        return Forecaster(cfg, params, residual=self.config.get("residual", True), name=self.engine)

    def blob(self) -> bytes:
        return to_f32_bytes(self.params.values())

    def digest(self) -> str:
        return bytes_digest(self.blob())

    def manifest(self) -> Dict:
        table, offset = [], 0
        for name, arr in self.params.items():
            size = int(arr.size)
            table.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": size})
            offset += size
        return {
            "version": CHECKPOINT_VERSION,
            "engine": self.engine,
            "kind": self.kind,
            "config": self.config,
            "epoch": self.epoch,
            "seed": self.seed,
            "loss_history": self.loss_history,
            "params": table,
            "blob_elements": offset,
        }


@dataclass
class EngineCheckpoints:
    best: Checkpoint
    final: Checkpoint

    def select(self, which: str) -> Checkpoint:
        if which not in ("best", "final"):
            raise CheckpointError(f"Unknown checkpoint selection '{which}'")
        return self.best if which == "best" else self.final


def checkpoint_paths(stem: str) -> Tuple[str, str]:
    return f"{stem}.json", f"{stem}.bin"


def save_checkpoint(ckpt: Checkpoint, stem: str) -> Tuple[str, str]:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (float32 LE parameters)."""
    json_path, bin_path = checkpoint_paths(stem)
    atomic_write_bytes(bin_path, ckpt.blob())
    atomic_write_json(json_path, ckpt.manifest())
    logger.info(f"💾 checkpoint written: {json_path}")
    return json_path, bin_path


def _expected_shapes(config: Dict) -> Optional[Dict[str, Tuple[int, ...]]]:
    if "model" not in config:
        return None
    cfg = DSLCastConfig.from_dict(config["model"])
    return {name: tuple(t.shape) for name, t in init_dslcast_params(cfg, seed=0).items()}


def load_checkpoint(stem: str) -> Checkpoint:
    json_path, bin_path = checkpoint_paths(stem)
    try:
        manifest = load_json(json_path)
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint manifest not found: {json_path}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"Checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")

    table = manifest["params"]
    offset = 0
    for entry in table:
        if int(np.prod(entry["shape"], dtype=np.int64)) != entry["size"] or entry["offset"] != offset:
            raise CheckpointValidationError(f"Shape table entry for '{entry['name']}' is inconsistent")
        offset += entry["size"]
    if offset != manifest["blob_elements"]:
        raise CheckpointValidationError(f"Shape table covers {offset} elements, manifest declares {manifest['blob_elements']}")
    expected = _expected_shapes(manifest["config"])
    if expected is not None:
        declared = {e["name"]: tuple(e["shape"]) for e in table}
        if declared != expected:
            mismatched = sorted(n for n in set(declared) | set(expected) if declared.get(n) != expected.get(n))
            raise CheckpointValidationError(f"Shape table does not match the model config: {mismatched[:5]}")

    blob = np.fromfile(bin_path, dtype="<f4") if os.path.exists(bin_path) else None
    if blob is None:
        raise CheckpointError(f"Checkpoint blob not found: {bin_path}")
    params: Dict[str, np.ndarray] = {}
    for entry in table:
        end = entry["offset"] + entry["size"]
        if end > blob.size:
            raise CheckpointCorruptError(
                f"Checkpoint blob truncated: parameter '{entry['name']}' needs elements up to {end}, blob has {blob.size}"
            )
        params[entry["name"]] = blob[entry["offset"]:end].reshape(entry["shape"]).astype(np.float32)
    if blob.size != offset:
        raise CheckpointValidationError(f"Checkpoint blob has {blob.size} elements, manifest declares {offset}")
    return Checkpoint(
        config=manifest["config"],
        params=params,
        epoch=manifest["epoch"],
        seed=manifest["seed"],
        loss_history=manifest["loss_history"],
        engine=manifest.get("engine", ""),
        kind=manifest.get("kind", "final"),
    )


# --- stage 1 ---------------------------------------------------------------------

@dataclass
class EngineDataset:
    """Single-step samples: inputs ``[N, state+boundary, H, W]``, targets ``[N, state, H, W]``."""
    train_inputs: np.ndarray
    train_targets: np.ndarray
    val_inputs: np.ndarray
    val_targets: np.ndarray

    def __post_init__(self):
        if len(self.train_inputs) != len(self.train_targets) or len(self.val_inputs) != len(self.val_targets):
            raise TrainingError("Engine dataset inputs and targets differ in sample count")


def mean_loss(forecaster: Forecaster, inputs: np.ndarray, targets: np.ndarray, relative: bool = True) -> float:
    """Mean per-sample loss without recording a graph."""
    dtype = forecaster.params["embed.patch.weight"].dtype
    losses = []
    with no_grad():
        for x, y in zip(inputs, targets):
            pred = forecaster.forward(constant(x, dtype=dtype))
            losses.append(float(relative_l2_loss(pred, constant(y, dtype=dtype), relative).data))
    return float(np.mean(losses)) if losses else float("nan")


def pretrain_engine(
    spec: EngineSpec,
    dataset: EngineDataset,
    schedule: TrainSchedule,
    forecaster: Optional[Forecaster] = None,
    workers: Optional[int] = None,
) -> EngineCheckpoints:
    """Single-step supervised training of one sphere's engine with true boundaries."""
    if forecaster is None:
        if spec.model is None:
            raise TrainingError(f"Engine '{spec.sphere}' has no model config")
        forecaster = Forecaster.initialise(spec.model, seed=schedule.seed, residual=spec.residual, name=spec.sphere)
    forecaster.params.unfreeze()
    dtype = forecaster.params["embed.patch.weight"].dtype
    optimizer = Adam(forecaster.params)
    history: List[Dict] = []
    best: Optional[Checkpoint] = None
    best_val = math.inf
    n = len(dataset.train_inputs)
    if n == 0:
        raise TrainingError(f"Engine '{spec.sphere}' has no training samples")
    logger.info(f"🚀 pretraining engine '{spec.sphere}': {n} samples, {schedule.epochs} epochs")

    def sample_task(i: int):
        x = constant(dataset.train_inputs[i], dtype=dtype)
        y = constant(dataset.train_targets[i], dtype=dtype)
        return lambda: loss_gradients(lambda: relative_l2_loss(forecaster.forward(x), y, schedule.relative_loss), forecaster.params)

    for epoch in tqdm(range(schedule.epochs), desc=f"pretrain {spec.sphere}", leave=False):
        lr = cosine_anneal_lr(epoch, schedule.epochs, schedule.lr0)
        losses = []
        for b, batch in enumerate(epoch_batches(n, schedule.batch_size, schedule.seed, epoch)):
            try:
                loss = reduce_gradients([sample_task(int(i)) for i in batch], forecaster.params, workers)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"Engine '{spec.sphere}' diverged at epoch {epoch + 1}, batch {b}: {e}") from e
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"Engine '{spec.sphere}' loss became non-finite at epoch {epoch + 1}, batch {b}")
            optimizer.step(lr)
            optimizer.zero_grad()
            losses.append(loss)
        record = {"epoch": epoch + 1, "lr": lr, "train": float(np.mean(losses))}
        is_last = epoch + 1 == schedule.epochs
        if len(dataset.val_inputs) and ((epoch + 1) % schedule.validate_every == 0 or is_last):
            try:
                record["val"] = mean_loss(forecaster, dataset.val_inputs, dataset.val_targets, schedule.relative_loss)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"Engine '{spec.sphere}' diverged on validation at epoch {epoch + 1}: {e}") from e
            if record["val"] < best_val:
                best_val = record["val"]
                best = Checkpoint.capture(forecaster, epoch + 1, schedule.seed, history + [record], spec.sphere, "best")
        history.append(record)
        logger.info(
            f"📉 [{spec.sphere}] epoch {epoch + 1}/{schedule.epochs} train {record['train']:.4f}"
            + (f" val {record['val']:.4f}" if "val" in record else "")
            + f" lr {lr:.2e}"
        )

    final = Checkpoint.capture(forecaster, schedule.epochs, schedule.seed, history, spec.sphere, "final")
    if best is None:
        best = Checkpoint.capture(forecaster, schedule.epochs, schedule.seed, history, spec.sphere, "best")
    forecaster.params.freeze()
    return EngineCheckpoints(best=best, final=final)
