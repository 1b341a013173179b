from dataclasses import replace

import numpy as np
import pytest

from src.coupled_rollout import (
    CorrectorDataset,
    CoupledState,
    FreezeViolationError,
    MissingPredictionError,
    StateLayout,
    TraceFormatError,
    UnresolvableBoundaryError,
    build_engine_dataset,
    correct_step,
    coupled_step,
    curriculum_window,
    exchange_boundary,
    load_trace,
    rollout,
    save_trace,
    train_corrector,
)
from src.engines import (
    BoundaryRequest,
    ChannelMismatchError,
    EngineOrderError,
    EngineSpec,
    Forecaster,
    IdentityEngine,
    LinearEngine,
    RolloutError,
    TimeTag,
    validate_engine_order,
)
from src.nn_blocks import DSLCastConfig
from src.synthetic_world import WorldConfig, generate_coupled_dataset
from src.training import DivergenceDetected, TrainSchedule

GRID = (2, 3)
CELLS = GRID[0] * GRID[1]


class BoundaryEcho:
    """Returns its boundary channels as the next state."""

    def __init__(self, n_state: int, n_boundary: int):
        self.in_channels = n_state + n_boundary
        self.out_channels = n_state
        self.n_state = n_state

    trainable = False

    def predict(self, x):
        return x[self.n_state:].copy()

    def parameter_digest(self):
        return "echo"


class Exploding:
    in_channels, out_channels, trainable = 3, 2, False

    def predict(self, x):
        return np.full((2,) + x.shape[1:], np.nan)

    def parameter_digest(self):
        return "nan"


def scaled_engine(scale: float, n_in: int = 3, n_out: int = 2) -> LinearEngine:
    matrix = np.hstack([scale * np.eye(n_out * CELLS), np.zeros((n_out * CELLS, (n_in - n_out) * CELLS))])
    return LinearEngine(matrix, n_in, n_out, GRID)


@pytest.fixture
def layout():
    return StateLayout.from_counts([("A", 2), ("B", 1)], cycle_length=4)


@pytest.fixture
def specs():
    return [
        EngineSpec("A", ("A0", "A1"), (BoundaryRequest("B", "B0"),)),
        EngineSpec("B", ("B0",), (BoundaryRequest("A", "A0", TimeTag.NEXT),)),
    ]


@pytest.fixture
def state(layout):
    stack = np.arange(3 * CELLS, dtype=np.float64).reshape((3,) + GRID) + 1.0
    return layout.state(stack, day=3)


@pytest.fixture(scope="module")
def tiny_world():
    from conftest import TINY_LAB

    return generate_coupled_dataset(WorldConfig.from_dict(TINY_LAB["world"]))


def test_layout_slices_and_split(layout, state):
    assert layout.total_channels == 3
    assert layout.slices() == {"A": slice(0, 2), "B": slice(2, 3)}
    np.testing.assert_array_equal(layout.stack(layout.split(state.stack())), state.stack())
    with pytest.raises(ChannelMismatchError):
        layout.split(np.zeros((4,) + GRID))
    with pytest.raises(UnresolvableBoundaryError):
        layout.names("C")


def test_state_rejects_day_outside_cycle(layout):
    with pytest.raises(RolloutError):
        CoupledState({"A": np.zeros((2,) + GRID), "B": np.zeros((1,) + GRID)}, 4, layout)


def test_engine_order_validation(specs):
    validate_engine_order(specs)
    with pytest.raises(EngineOrderError):
        validate_engine_order(list(reversed(specs)))
    with pytest.raises(EngineOrderError):
        validate_engine_order([EngineSpec("A", ("A0",), (BoundaryRequest("A", "A0"),))])


def test_boundary_exchange_picks_requested_channel(state, specs):
    boundary = exchange_boundary(state, specs[0])
    np.testing.assert_array_equal(boundary, state.fields["B"])
    with pytest.raises(MissingPredictionError):
        exchange_boundary(state, specs[1])
    with pytest.raises(UnresolvableBoundaryError):
        exchange_boundary(state, EngineSpec("B", ("B0",), (BoundaryRequest("A", "A7"),)))


def test_next_time_boundary_uses_partial_prediction(state, specs):
    engines = {"A": scaled_engine(2.0), "B": BoundaryEcho(1, 1)}
    nxt = coupled_step(state, specs, engines)
    assert nxt.day == 0
    np.testing.assert_allclose(nxt.fields["A"], 2.0 * state.fields["A"])
    np.testing.assert_allclose(nxt.fields["B"][0], 2.0 * state.fields["A"][0])


def test_truth_boundary_mode_reads_true_states(state, layout, specs):
    engines = {"A": scaled_engine(2.0), "B": BoundaryEcho(1, 1)}
    truth_next = layout.state(np.full((3,) + GRID, 7.0), day=0)
    nxt = coupled_step(state, specs, engines, boundary_mode="truth", truth=state, truth_next=truth_next)
    assert np.all(nxt.fields["B"] == 7.0)
    with pytest.raises(RolloutError):
        coupled_step(state, specs, engines, boundary_mode="truth")


def test_step_checks_engines_and_channels(state, specs):
    with pytest.raises(RolloutError):
        coupled_step(state, specs, {"A": scaled_engine(1.0)})
    with pytest.raises(ChannelMismatchError):
        coupled_step(state, specs, {"A": IdentityEngine(2, 2), "B": BoundaryEcho(1, 1)})


def test_identity_rollout_has_zero_error(state, specs):
    engines = {"A": IdentityEngine(3, 2), "B": IdentityEngine(2, 1)}
    truth = np.stack([state.stack()] * 5)
    trace = rollout(state, 4, specs, engines, truth=truth)
    assert trace.steps == 4 and not trace.diverged
    assert np.all(trace.errors["joint"] == 0.0)
    assert set(trace.errors) == {"A", "B", "joint"}
    assert trace.corrected is None


def test_zero_horizon_keeps_only_the_initial_state(state, specs):
    trace = rollout(state, 0, specs, {"A": IdentityEngine(3, 2), "B": IdentityEngine(2, 1)})
    assert trace.steps == 0
    assert trace.predictions.shape == (0, 3) + GRID


def test_growth_past_threshold_truncates_trace(layout, specs):
    initial = layout.state(np.ones((3,) + GRID), day=0)
    engines = {"A": scaled_engine(10.0), "B": BoundaryEcho(1, 1)}
    trace = rollout(initial, 10, specs, engines, divergence_threshold=1e3)
    assert trace.diverged and trace.diverged_at == 4
    assert trace.steps == 3
    assert np.max(np.abs(trace.states)) == pytest.approx(1e3)


def test_non_finite_engine_output_marks_divergence(state, specs):
    trace = rollout(state, 5, specs, {"A": Exploding(), "B": BoundaryEcho(1, 1)})
    assert trace.diverged and trace.diverged_at == 1 and trace.steps == 0


def test_zero_output_corrector_is_identity(state, f64):
    cfg = DSLCastConfig(in_channels=3, out_channels=3, height=4, width=8, latitudes=(-67.5, -22.5, 22.5, 67.5),
                        dim=8, encoder_depth=1, decoder_depth=1, kernel_size=3)
    layout = StateLayout.from_counts([("A", 2), ("B", 1)], cycle_length=4)
    prediction = layout.state(np.random.default_rng(0).standard_normal((3, 4, 8)), day=1)
    corrector = Forecaster.initialise(cfg, seed=0, zero_output=True).freeze()
    corrected = correct_step(prediction, corrector)
    np.testing.assert_allclose(corrected.stack(), prediction.stack(), atol=1e-12)
    assert corrected.day == prediction.day
    with pytest.raises(ChannelMismatchError):
        correct_step(state, IdentityEngine(2, 2))


def test_trace_files_round_trip(state, specs, tmp_path):
    engines = {"A": scaled_engine(0.5), "B": BoundaryEcho(1, 1)}
    truth = np.stack([state.stack()] * 4)
    trace = rollout(state, 3, specs, engines, truth=truth, config_digest="abc")
    stem = str(tmp_path / "ic000")
    save_trace(trace, stem)
    loaded = load_trace(stem)
    assert loaded.steps == 3 and loaded.config_digest == "abc" and loaded.start_day == 3
    assert loaded.layout == (("A", 2), ("B", 1))
    np.testing.assert_allclose(loaded.states, trace.states, rtol=1e-6)
    np.testing.assert_allclose(loaded.predictions, trace.predictions, rtol=1e-6)
    np.testing.assert_allclose(loaded.truth, trace.truth)
    np.testing.assert_allclose(loaded.errors["joint"], trace.errors["joint"])


def test_truncated_trace_is_rejected(state, specs, tmp_path):
    trace = rollout(state, 2, specs, {"A": IdentityEngine(3, 2), "B": IdentityEngine(2, 1)})
    stem = str(tmp_path / "ic000")
    _, bin_path = save_trace(trace, stem)
    with open(bin_path, "rb") as f:
        blob = f.read()
    with open(bin_path, "wb") as f:
        f.write(blob[:-4])
    with pytest.raises(TraceFormatError):
        load_trace(stem)
    with pytest.raises(TraceFormatError):
        load_trace(str(tmp_path / "missing"))


def test_curriculum_window_grows_to_full_length():
    assert [curriculum_window(e, 4, 2) for e in range(4)] == [1, 1, 2, 2]
    assert [curriculum_window(e, 3, 3) for e in range(3)] == [1, 2, 3]
    assert curriculum_window(0, 0, 4) == 4


def test_periodic_boundary_is_sent_with_plain_normalization(tiny_world):
    layout = StateLayout.from_world(tiny_world)
    state = layout.state(tiny_world.splits["train"][0], tiny_world.day_of("train", 0))
    spec = EngineSpec("A", ("A0", "A1", "A2"), (BoundaryRequest("B", "B0"),))
    boundary = exchange_boundary(state, spec)[0]
    stats = tiny_world.stats
    mask = stats.masks["B"]
    expected = (tiny_world.physical["train"][0, 3] - stats.raw_mean[0]) / stats.raw_std[0]
    np.testing.assert_allclose(boundary[mask], expected[mask], atol=1e-3)
    assert np.all(boundary[~mask] == 0.0)


def test_engine_dataset_shapes(tiny_world, tiny_lab):
    specs = tiny_lab.specs()
    a = build_engine_dataset(tiny_world, specs[0])
    b = build_engine_dataset(tiny_world, specs[1])
    assert a.train_inputs.shape == (11, 4, 8, 16) and a.train_targets.shape == (11, 3, 8, 16)
    assert b.train_inputs.shape == (11, 4, 8, 16) and b.train_targets.shape == (11, 2, 8, 16)
    assert a.val_inputs.shape[0] == 7
    np.testing.assert_array_equal(a.train_targets[0], tiny_world.splits["train"][1, :3])


def test_corrector_training_requires_frozen_engines(tiny_world, tiny_lab):
    specs = tiny_lab.specs()
    engines = {"A": Forecaster.initialise(specs[0].model, seed=0), "B": IdentityEngine(4, 2)}
    corrector = Forecaster.initialise(tiny_lab.corrector.build(tiny_lab.world), seed=0, zero_output=True)
    with pytest.raises(FreezeViolationError):
        train_corrector(specs, engines, corrector, CorrectorDataset.from_world(tiny_world), TrainSchedule(epochs=1))


def test_corrector_training_updates_only_the_corrector(tiny_world, tiny_lab):
    specs = tiny_lab.specs()
    engine_a = Forecaster.initialise(specs[0].model, seed=0).freeze()
    engines = {"A": engine_a, "B": IdentityEngine(4, 2)}
    before = engine_a.parameter_digest()
    corrector = Forecaster.initialise(tiny_lab.corrector.build(tiny_lab.world), seed=0, zero_output=True, name="corrector")
    initial = corrector.parameter_digest()
    ckpts = train_corrector(
        specs, engines, corrector, CorrectorDataset.from_world(tiny_world),
        TrainSchedule(epochs=1, batch_size=5), window=2, workers=1,
    )
    history = ckpts.final.loss_history
    assert len(history) == 1 and history[0]["window"] == 1
    assert np.isfinite(history[0]["train"]) and np.isfinite(history[0]["val"])
    assert engine_a.parameter_digest() == before
    assert ckpts.final.to_forecaster().parameter_digest() != initial
    assert not corrector.trainable


def test_corrector_training_reports_divergence(tiny_world, tiny_lab):
    specs = tiny_lab.specs()
    engines = {"A": IdentityEngine(4, 3), "B": IdentityEngine(4, 2)}
    corrector = Forecaster.initialise(tiny_lab.corrector.build(tiny_lab.world), seed=0, zero_output=True)
    dataset = CorrectorDataset.from_world(tiny_world)
    huge = replace(dataset, train=dataset.train * 1e200)
    with pytest.raises(DivergenceDetected):
        train_corrector(specs, engines, corrector, huge, TrainSchedule(epochs=1, batch_size=5), window=2, workers=1)
