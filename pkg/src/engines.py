"""
Single-sphere engines and the corrector model.

Every engine maps a stacked input ``[state channels + boundary channels, H, W]``
to the next state of its own sphere ``[state channels, H, W]``. The neural
``Forecaster`` is also used as the correction agent, whose input and output are
the full stacked state of all spheres.
"""
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from src.nn_blocks import DSLCastConfig, ParamSet, dslcast_forward, init_dslcast_params
from src.ops import count_macs
from src.tensor import Tensor, add, constant, no_grad, slice_channels

logger = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    """Base class for coupling, correction and rollout errors."""


class EngineOrderError(RolloutError):
    pass


class ChannelMismatchError(RolloutError):
    pass


class TimeTag(Enum):
    """When a boundary variable is taken from its source sphere."""
    NOW = "t"
    NEXT = "t+1"


@dataclass(frozen=True)
class BoundaryRequest:
    source: str
    variable: str
    time_tag: TimeTag = TimeTag.NOW

    @classmethod
    def parse(cls, entry: Sequence[str]) -> "BoundaryRequest":
        source, variable = entry[0], entry[1]
        tag = TimeTag(entry[2]) if len(entry) > 2 else TimeTag.NOW
        return cls(source=source, variable=variable, time_tag=tag)

    def to_list(self) -> List[str]:
        return [self.source, self.variable, self.time_tag.value]


@dataclass(frozen=True)
class EngineSpec:
    """A sphere's state variables and the boundary channels its engine consumes."""
    sphere: str
    variables: Tuple[str, ...]
    boundary: Tuple[BoundaryRequest, ...] = ()
    model: Optional[DSLCastConfig] = None
    residual: bool = True
    frozen: bool = True

    @property
    def n_state(self) -> int:
        return len(self.variables)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary)

    @property
    def in_channels(self) -> int:
        return self.n_state + self.n_boundary


def validate_engine_order(specs: Sequence[EngineSpec]) -> None:
    """A t+1 boundary may only come from a sphere stepped earlier in ``specs``."""
    stepped = set()
    for spec in specs:
        if spec.sphere in stepped:
            raise EngineOrderError(f"Sphere '{spec.sphere}' appears twice in the engine ordering")
        for request in spec.boundary:
            if request.source == spec.sphere:
                raise EngineOrderError(f"Engine '{spec.sphere}' requests a boundary from its own sphere")
            if request.time_tag is TimeTag.NEXT and request.source not in stepped:
                raise EngineOrderError(
                    f"Engine '{spec.sphere}' needs '{request.variable}' from '{request.source}' at t+1, "
                    f"but '{request.source}' is not stepped before it"
                )
        stepped.add(spec.sphere)


class Engine(Protocol):
    in_channels: int
    out_channels: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        ...

    def parameter_digest(self) -> str:
        ...

    @property
    def trainable(self) -> bool:
        ...


@dataclass(frozen=True)
class ModelCost:
    params: int
    macs: int

    def to_dict(self) -> dict:
        return {"params": self.params, "macs": self.macs}


class Forecaster:
    """DSLCast network, optionally residual: ``x[:C_out] + dslcast_forward(x)``."""

    def __init__(self, cfg: DSLCastConfig, params: ParamSet, residual: bool = True, name: str = ""):
        if residual and cfg.in_channels < cfg.out_channels:
            raise ChannelMismatchError(
                f"Residual forecaster needs in_channels >= out_channels, got {cfg.in_channels} < {cfg.out_channels}"
            )
        self.cfg = cfg
        self.params = params
        self.residual = residual
        self.name = name

    @classmethod
    def initialise(cls, cfg: DSLCastConfig, seed: int, residual: bool = True, zero_output: bool = False, name: str = "") -> "Forecaster":
        return cls(cfg, init_dslcast_params(cfg, seed, zero_output=zero_output), residual=residual, name=name)

    @property
    def in_channels(self) -> int:
        return self.cfg.in_channels

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    @property
    def trainable(self) -> bool:
        return not self.params.frozen

    def freeze(self) -> "Forecaster":
        self.params.freeze()
        return self

    def forward(self, x: Tensor) -> Tensor:
        out = dslcast_forward(x, self.cfg, self.params)
        if self.residual:
            out = add(slice_channels(x, 0, self.cfg.out_channels), out)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(constant(x, dtype=self.params["embed.patch.weight"].dtype)).data

    def parameter_digest(self) -> str:
        return self.params.digest()

    def cost(self) -> ModelCost:
        """Parameter count and multiply-accumulates of one forward pass."""
        dtype = self.params["embed.patch.weight"].dtype
        x = np.zeros((self.cfg.in_channels, self.cfg.height, self.cfg.width), dtype=dtype)
        with no_grad(), count_macs() as tally:
            self.forward(constant(x, dtype=dtype))
        return ModelCost(params=self.params.num_elements(), macs=tally[0])


class LinearEngine:
    """Dense linear map on the flattened input, ``y = M @ vec(x)``."""

    def __init__(self, matrix: np.ndarray, in_channels: int, out_channels: int, grid: Tuple[int, int]):
        height, width = grid
        expected = (out_channels * height * width, in_channels * height * width)
        if matrix.shape != expected:
            raise ChannelMismatchError(f"Linear engine matrix must be {expected}, got {matrix.shape}")
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.grid = (height, width)

    @property
    def trainable(self) -> bool:
        return False

    def predict(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.in_channels,) + self.grid:
            raise ChannelMismatchError(f"Linear engine expects {(self.in_channels,) + self.grid}, got {x.shape}")
        return (self.matrix @ x.reshape(-1)).reshape((self.out_channels,) + self.grid)

    def parameter_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()


class IdentityEngine:
    """Persistence stub: returns the first ``out_channels`` input channels unchanged."""

    def __init__(self, in_channels: int, out_channels: int):
        self.in_channels = in_channels
        self.out_channels = out_channels

    @property
    def trainable(self) -> bool:
        return False

    def predict(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.in_channels:
            raise ChannelMismatchError(f"Identity engine expects {self.in_channels} channels, got {x.shape[0]}")
        return x[: self.out_channels].copy()

    def parameter_digest(self) -> str:
        return hashlib.sha256(f"identity:{self.in_channels}:{self.out_channels}".encode("utf-8")).hexdigest()
