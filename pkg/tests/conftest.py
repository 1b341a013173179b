import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import json

import numpy as np
import pytest

from src.config import DEFAULT_CONFIG_PATH, deep_merge, parse_config
from src.synthetic_world import SphereConfig, WorldConfig
from src.tensor import precision
from src.utils import load_json

TEST_DATA = os.path.join(os.path.dirname(__file__), "test_data")

TINY_MODEL = {"dim": 8, "encoder_depth": 2, "decoder_depth": 1, "patch_size": 2, "kernel_size": 3, "mlp_ratio": 2, "u_max": 0.1}

TINY_LAB = {
    "run_name": "tiny",
    "world": {
        "height": 8,
        "width": 16,
        "cycle_length": 4,
        "train_cycles": 3,
        "val_cycles": 2,
        "test_cycles": 3,
        "spinup_cycles": 0,
        "spheres": [
            {"name": "A", "n_vars": 3, "n_surface": 2, "periodic": False, "mask": "none",
             "velocity_scale": 0.6, "jet_speed": 0.5, "diffusivity": 0.05, "damping": 0.15,
             "nonlinearity": 0.25, "seasonal_amplitude": 0.3, "offset": 1.0},
            {"name": "B", "n_vars": 2, "n_surface": 2, "periodic": True, "mask": "ocean",
             "velocity_scale": 0.3, "jet_speed": 0.2, "diffusivity": 0.03, "damping": 0.05,
             "nonlinearity": 0.08, "seasonal_amplitude": 0.5, "offset": 15.0},
        ],
        "coupling": [["A", "B", 0.15], ["B", "A", 0.1]],
    },
    "engines": [
        {"sphere": "A", "boundary": [["B", "B0", "t"]], "checkpoint": "final", "model": TINY_MODEL},
        {"sphere": "B", "boundary": [["A", "A0", "t"], ["A", "A0", "t+1"]], "checkpoint": "best", "model": TINY_MODEL},
    ],
    "corrector": {"window": 2, "model": TINY_MODEL},
    "schedules": {
        "A": {"epochs": 1, "batch_size": 4},
        "B": {"epochs": 1, "batch_size": 4},
        "corrector": {"epochs": 2, "batch_size": 4},
    },
    "rollout": {"horizon": 3, "ics": 2, "rea_lead": 2},
    "evaluation": {"spectrum_lead": 2},
    "theory": {"horizon": 10, "neural": False, "n_samples": 8, "power_iterations": 2, "neural_points": 2},
}


def tiny_lab_dict(**overrides):
    data = deep_merge(load_json(DEFAULT_CONFIG_PATH), TINY_LAB)
    return deep_merge(data, overrides)


def load_test_data(name: str):
    with open(os.path.join(TEST_DATA, name), "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def f64():
    """Run the test body in float64 precision."""
    with precision("f64"):
        yield


@pytest.fixture
def tiny_world_config() -> WorldConfig:
    return WorldConfig.from_dict(TINY_LAB["world"])


@pytest.fixture
def tiny_lab():
    return parse_config(tiny_lab_dict())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def worked_values():
    return load_test_data("worked_values.json")


@pytest.fixture
def single_sphere_world() -> WorldConfig:
    return WorldConfig(
        height=8,
        width=16,
        spheres=(SphereConfig("A", 2, 1, seasonal_amplitude=0.4),),
        coupling=(),
        cycle_length=4,
        train_cycles=2,
        val_cycles=1,
        test_cycles=1,
        spinup_cycles=0,
    )
