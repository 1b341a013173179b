import json

import numpy as np
import pytest

from src.engines import BoundaryRequest, EngineSpec, Forecaster
from src.nn_blocks import DSLCastConfig, ParamSet
from src.tensor import constant
from src.training import (
    AdamState,
    Checkpoint,
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    DegenerateBatchError,
    DivergenceDetected,
    EngineCheckpoints,
    EngineDataset,
    NonFiniteGradientError,
    ScheduleError,
    TrainSchedule,
    TrainingDivergedError,
    adam_step,
    cosine_anneal_lr,
    epoch_batches,
    load_checkpoint,
    pretrain_engine,
    reduce_gradients,
    relative_l2_loss,
    save_checkpoint,
)


def engine_config(in_channels=3, out_channels=2) -> DSLCastConfig:
    return DSLCastConfig(
        in_channels=in_channels,
        out_channels=out_channels,
        height=8,
        width=16,
        latitudes=tuple(np.linspace(-78.75, 78.75, 8)),
        dim=8,
        encoder_depth=2,
        decoder_depth=1,
        kernel_size=3,
    )


def engine_spec() -> EngineSpec:
    return EngineSpec(
        sphere="A",
        variables=("A0", "A1"),
        boundary=(BoundaryRequest("B", "B0"),),
        model=engine_config(),
    )


def engine_dataset(n_train=4, n_val=2, seed=0) -> EngineDataset:
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((n_train + n_val, 3, 8, 16))
    targets = 0.9 * inputs[:, :2] + 0.1
    return EngineDataset(inputs[:n_train], targets[:n_train], inputs[n_train:], targets[n_train:])


def test_relative_l2_loss_worked_value(f64):
    target = constant(np.array([3.0, 4.0]))
    pred = constant(np.array([6.0, 8.0]))
    assert relative_l2_loss(pred, target).item() == pytest.approx(1.0)
    assert relative_l2_loss(pred, target, relative=False).item() == pytest.approx(5.0)


def test_relative_l2_loss_rejects_zero_target(f64):
    with pytest.raises(DegenerateBatchError):
        relative_l2_loss(constant(np.ones(3)), constant(np.zeros(3)))


def test_first_adam_step_moves_by_learning_rate(f64):
    params = ParamSet()
    params.add("w", np.array([1.0, -2.0]))
    state = adam_step(params, {"w": np.array([0.5, -3.0])}, AdamState(), lr=0.01)
    assert state.step == 1
    np.testing.assert_allclose(params["w"].data, [0.99, -1.99], atol=1e-6)


def test_non_finite_gradient_rejects_whole_step(f64):
    params = ParamSet()
    params.add("a", np.ones(2))
    params.add("b", np.ones(2))
    state = AdamState()
    with pytest.raises(NonFiniteGradientError):
        adam_step(params, {"a": np.ones(2), "b": np.array([np.nan, 1.0])}, state, lr=0.1)
    assert state.step == 0
    assert np.all(params["a"].data == 1.0)


def test_cosine_schedule_endpoints():
    assert cosine_anneal_lr(0, 10, 1e-3) == pytest.approx(1e-3)
    assert cosine_anneal_lr(5, 10, 1e-3) == pytest.approx(5e-4)
    assert cosine_anneal_lr(10, 10, 1e-3) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ScheduleError):
        cosine_anneal_lr(0, 0, 1e-3)
    with pytest.raises(ScheduleError):
        cosine_anneal_lr(11, 10, 1e-3)


def test_schedule_validation():
    assert TrainSchedule(epochs=0).epochs == 0
    with pytest.raises(ScheduleError):
        TrainSchedule(epochs=-1)
    with pytest.raises(ScheduleError):
        TrainSchedule(lr0=0.0)
    with pytest.raises(ScheduleError):
        TrainSchedule(batch_size=0)


def test_epoch_batches_cover_every_sample_once():
    batches = epoch_batches(10, 4, seed=3, epoch=1)
    assert sorted(len(b) for b in batches) == [2, 4, 4]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    for b in batches:
        assert np.all(np.diff(b) == 1)
    again = epoch_batches(10, 4, seed=3, epoch=1)
    assert all(np.array_equal(x, y) for x, y in zip(batches, again))


@pytest.mark.parametrize("workers", [1, 3])
def test_reduce_gradients_averages_in_sample_order(workers, f64):
    params = ParamSet()
    params.add("w", np.zeros(2))
    tasks = [
        lambda: (1.0, {"w": np.array([1.0, 0.0])}),
        lambda: (2.0, {"w": np.array([0.0, 2.0])}),
        lambda: (3.0, {}),
    ]
    loss = reduce_gradients(tasks, params, workers=workers)
    assert loss == pytest.approx(2.0)
    np.testing.assert_allclose(params["w"].grad, [1.0 / 3.0, 2.0 / 3.0])


def test_checkpoint_round_trip(tmp_path):
    model = Forecaster.initialise(engine_config(), seed=2, name="A")
    ckpt = Checkpoint.capture(model, epoch=3, seed=2, history=[{"epoch": 1, "train": 0.5}], engine="A", kind="best")
    json_path, bin_path = save_checkpoint(ckpt, str(tmp_path / "A.best"))
    assert json_path.endswith("A.best.json") and bin_path.endswith("A.best.bin")

    loaded = load_checkpoint(str(tmp_path / "A.best"))
    assert loaded.epoch == 3 and loaded.kind == "best" and loaded.engine == "A"
    assert loaded.digest() == ckpt.digest()
    restored = loaded.to_forecaster()
    assert restored.parameter_digest() == model.parameter_digest()
    assert not restored.trainable


def test_checkpoint_version_mismatch(tmp_path):
    ckpt = Checkpoint.capture(Forecaster.initialise(engine_config(), seed=0), 0, 0, [], "A", "final")
    json_path, _ = save_checkpoint(ckpt, str(tmp_path / "A.final"))
    with open(json_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["version"] = 99
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(str(tmp_path / "A.final"))


def test_truncated_blob_is_reported(tmp_path):
    ckpt = Checkpoint.capture(Forecaster.initialise(engine_config(), seed=0), 0, 0, [], "A", "final")
    _, bin_path = save_checkpoint(ckpt, str(tmp_path / "A.final"))
    with open(bin_path, "rb") as f:
        blob = f.read()
    with open(bin_path, "wb") as f:
        f.write(blob[: (len(blob) // 8) * 4])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(str(tmp_path / "A.final"))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "nothing"))


def test_checkpoint_selection():
    best = Checkpoint(config={}, params={}, kind="best")
    final = Checkpoint(config={}, params={}, kind="final")
    pair = EngineCheckpoints(best=best, final=final)
    assert pair.select("best") is best and pair.select("final") is final
    with pytest.raises(CheckpointError):
        pair.select("latest")


def test_zero_epochs_returns_initial_weights():
    spec = engine_spec()
    model = Forecaster.initialise(spec.model, seed=0, name="A")
    initial = model.parameter_digest()
    ckpts = pretrain_engine(spec, engine_dataset(), TrainSchedule(epochs=0), forecaster=model, workers=1)
    assert ckpts.final.digest() == ckpts.best.digest()
    assert ckpts.final.loss_history == []
    assert ckpts.final.to_forecaster().parameter_digest() == initial
    assert not model.trainable


def test_one_epoch_updates_weights_and_records_validation():
    spec = engine_spec()
    model = Forecaster.initialise(spec.model, seed=0, name="A")
    initial = model.parameter_digest()
    ckpts = pretrain_engine(spec, engine_dataset(), TrainSchedule(epochs=1, batch_size=2), forecaster=model, workers=1)
    history = ckpts.final.loss_history
    assert len(history) == 1
    assert np.isfinite(history[0]["train"]) and np.isfinite(history[0]["val"])
    assert ckpts.final.to_forecaster().parameter_digest() != initial
    assert ckpts.best.epoch == 1


def test_exploding_inputs_raise_divergence_not_tensor_error():
    data = engine_dataset()
    huge = EngineDataset(data.train_inputs * 1e200, data.train_targets * 1e200, data.val_inputs, data.val_targets)
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch") as info:
        pretrain_engine(engine_spec(), huge, TrainSchedule(epochs=1, batch_size=2), workers=1)
    assert isinstance(info.value, DivergenceDetected)
