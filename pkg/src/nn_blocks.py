"""
DSLCast building blocks and the full encoder/decoder forecaster.

Blocks operate on channel-first token grids ``[D, h, w]`` where the width axis is
longitude and the height axis latitude. Two block types:

- AGB: group norm, parallel depthwise axial convolutions (longitude and latitude),
  a sigmoid gate and a channel MLP, both branches residual.
- DSL-Block: an AGB trunk followed by a bounded flow field, backward tracing of
  the sample grid, bilinear warping and a gated residual fusion of the warped
  features.

``dslcast_forward`` chains patch embedding, positional and latitudinal encodings,
the encoder/decoder with additive skips, the transposed-conv un-patchify and the
zero-gated refinement head.
"""
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.gradcheck import register_op
from src.ops import conv2d, conv_transpose2d, depthwise_axial_conv, grid_sample_sphere, group_norm
from src.tensor import (
    Tensor,
    TensorError,
    add,
    add_bias,
    clip,
    concat,
    constant,
    expand_width,
    gelu,
    get_dtype,
    matmul,
    mul,
    scale_channels,
    sigmoid,
    sub,
    tanh,
)

logger = logging.getLogger(__name__)


class BlockError(ValueError):
    """Base class for architecture and parameter errors."""


class BlockShapeError(BlockError):
    pass


class ConfigMismatchError(BlockError):
    pass


class MissingParameterError(BlockError, KeyError):
    pass


class FlowBoundError(BlockError):
    pass


GATE_BIAS_INIT = -2.0
DEFAULT_GROUPS = 8

# tanh pre-activations are clipped here so that u_max * tanh(z) stays strictly
# below u_max once rounded to the working dtype.
_FLOW_PREACTIVATION_LIMIT = {np.dtype(np.float32): 8.0, np.dtype(np.float64): 18.0}


def default_groups(dim: int) -> int:
    return dim if dim < DEFAULT_GROUPS else DEFAULT_GROUPS


@dataclass(frozen=True)
class DSLCastConfig:
    in_channels: int
    out_channels: int
    height: int
    width: int
    latitudes: Tuple[float, ...]
    patch_size: int = 2
    dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    dsl_positions: Optional[Tuple[int, ...]] = None
    kernel_size: int = 7
    mlp_ratio: int = 2
    u_max: float = 0.1
    lon_positional_encoding: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "latitudes", tuple(float(v) for v in self.latitudes))
        if self.dsl_positions is None:
            object.__setattr__(self, "dsl_positions", tuple(range(1, self.encoder_depth, 2)))
        else:
            object.__setattr__(self, "dsl_positions", tuple(sorted(int(i) for i in self.dsl_positions)))
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigMismatchError("in_channels and out_channels must be positive")
        if self.patch_size < 1 or self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigMismatchError(
                f"Grid {self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )
        if len(self.latitudes) != self.height:
            raise ConfigMismatchError(f"Expected {self.height} latitudes, got {len(self.latitudes)}")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigMismatchError("encoder_depth and decoder_depth must be >= 1")
        if any(i < 0 or i >= self.encoder_depth for i in self.dsl_positions):
            raise ConfigMismatchError(f"dsl_positions {self.dsl_positions} outside [0, {self.encoder_depth})")
        if self.kernel_size % 2 == 0:
            raise ConfigMismatchError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 < self.u_max <= 1.0:
            raise ConfigMismatchError(f"u_max must lie in (0, 1], got {self.u_max}")
        if self.dim < 2 or self.dim % 2:
            raise ConfigMismatchError(f"dim must be an even number >= 2, got {self.dim}")
        if self.dim % self.groups:
            raise ConfigMismatchError(f"dim {self.dim} is not divisible by {self.groups} norm groups")
        if self.mlp_ratio < 1:
            raise ConfigMismatchError("mlp_ratio must be >= 1")

    @property
    def groups(self) -> int:
        return default_groups(self.dim)

    @property
    def token_height(self) -> int:
        return self.height // self.patch_size

    @property
    def token_width(self) -> int:
        return self.width // self.patch_size

    @property
    def refine_hidden(self) -> int:
        return max(1, self.dim // 2)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["latitudes"] = list(self.latitudes)
        data["dsl_positions"] = list(self.dsl_positions)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "DSLCastConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigMismatchError(f"Unknown DSLCast config keys: {sorted(unknown)}")
        return cls(**data)


ABLATION_VARIANTS = ("full", "no-dsl", "no-agb")


def ablated_config(cfg: DSLCastConfig, variant: str) -> DSLCastConfig:
    """Encoder variant of ``cfg``: intact, without DSL-Blocks, or with only its DSL-Blocks.

    The decoder is left untouched in every variant.
    """
    if variant == "full":
        return cfg
    if variant == "no-dsl":
        return replace(cfg, dsl_positions=())
    if variant == "no-agb":
        n_dsl = len(cfg.dsl_positions)
        if n_dsl == 0:
            raise ConfigMismatchError("Encoder has no DSL-Blocks, nothing is left without its AGBs")
        return replace(cfg, encoder_depth=n_dsl, dsl_positions=tuple(range(n_dsl)))
    raise ConfigMismatchError(f"Unknown variant '{variant}', expected one of {ABLATION_VARIANTS}")


# --- parameters ------------------------------------------------------------------

class ParamSet:
    """Named, ordered collection of learnable tensors."""

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._tensors:
            raise BlockError(f"Parameter '{name}' already defined")
        tensor = Tensor(value, requires_grad=requires_grad, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise MissingParameterError(f"Parameter '{name}' not found") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def num_elements(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self._tensors.values())

    def freeze(self) -> "ParamSet":
        for t in self._tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "ParamSet":
        for t in self._tensors.values():
            t.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], requires_grad: bool = True, dtype=None) -> "ParamSet":
        params = cls()
        for name, value in arrays.items():
            params._tensors[name] = Tensor(value, requires_grad=requires_grad, name=name, dtype=dtype)
        return params

    def copy(self) -> "ParamSet":
        params = ParamSet()
        for name, t in self._tensors.items():
            params._tensors[name] = Tensor(t.data, requires_grad=t.requires_grad, name=name, dtype=t.dtype)
        return params

    def digest(self) -> str:
        """SHA-256 over names, shapes and float32 bytes in parameter order."""
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode("utf-8"))
            h.update(str(t.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()


_AGB_FIELDS = (
    ("gn1_gamma", "gn1.gamma"),
    ("gn1_beta", "gn1.beta"),
    ("k_h", "axial.k_h"),
    ("k_v", "axial.k_v"),
    ("gate_weight", "gate.weight"),
    ("gate_bias", "gate.bias"),
    ("mix_weight", "mix.weight"),
    ("mix_bias", "mix.bias"),
    ("gn2_gamma", "gn2.gamma"),
    ("gn2_beta", "gn2.beta"),
    ("mlp1_weight", "mlp.fc1.weight"),
    ("mlp1_bias", "mlp.fc1.bias"),
    ("mlp2_weight", "mlp.fc2.weight"),
    ("mlp2_bias", "mlp.fc2.bias"),
)

_DSL_FIELDS = (
    ("flow_weight", "flow.weight"),
    ("flow_bias", "flow.bias"),
    ("gate_w_weight", "warp_gate.weight"),
    ("gate_w_bias", "warp_gate.bias"),
    ("mix_w_weight", "warp_mix.weight"),
    ("mix_w_bias", "warp_mix.bias"),
    ("gn2_gamma", "gn2.gamma"),
    ("gn2_beta", "gn2.beta"),
    ("mlp1_weight", "mlp.fc1.weight"),
    ("mlp1_bias", "mlp.fc1.bias"),
    ("mlp2_weight", "mlp.fc2.weight"),
    ("mlp2_bias", "mlp.fc2.bias"),
)


@dataclass
class AGBParams:
    gn1_gamma: Tensor
    gn1_beta: Tensor
    k_h: Tensor
    k_v: Tensor
    gate_weight: Tensor
    gate_bias: Tensor
    mix_weight: Tensor
    mix_bias: Tensor
    gn2_gamma: Tensor
    gn2_beta: Tensor
    mlp1_weight: Tensor
    mlp1_bias: Tensor
    mlp2_weight: Tensor
    mlp2_bias: Tensor
    groups: int = DEFAULT_GROUPS
    eps: float = 1e-5

    def __post_init__(self):
        dim = self.gn1_gamma.shape[0]
        k = self.k_h.shape[-1]
        if self.k_h.shape != (dim, k) or self.k_v.shape != (dim, k):
            raise BlockShapeError(f"Axial kernels must be [{dim}, k], got {self.k_h.shape} and {self.k_v.shape}")
        if k % 2 == 0:
            raise BlockShapeError(f"Axial kernel length must be odd, got {k}")
        for name in ("gate_weight", "mix_weight"):
            if getattr(self, name).shape != (dim, dim, 1, 1):
                raise BlockShapeError(f"{name} must be [{dim}, {dim}, 1, 1]")

    @property
    def dim(self) -> int:
        return self.gn1_gamma.shape[0]

    def tensors(self) -> List[Tensor]:
        return [getattr(self, attr) for attr, _ in _AGB_FIELDS]

    @classmethod
    def from_tensors(cls, tensors: Sequence[Tensor], groups: Optional[int] = None, eps: float = 1e-5) -> "AGBParams":
        values = dict(zip((attr for attr, _ in _AGB_FIELDS), tensors))
        groups = groups if groups is not None else default_groups(values["gn1_gamma"].shape[0])
        return cls(**values, groups=groups, eps=eps)

    @classmethod
    def bind(cls, params: ParamSet, prefix: str, groups: Optional[int] = None, eps: float = 1e-5) -> "AGBParams":
        return cls.from_tensors([params[f"{prefix}.{suffix}"] for _, suffix in _AGB_FIELDS], groups, eps)


@dataclass
class DSLParams:
    trunk: AGBParams
    flow_weight: Tensor
    flow_bias: Tensor
    gate_w_weight: Tensor
    gate_w_bias: Tensor
    mix_w_weight: Tensor
    mix_w_bias: Tensor
    gn2_gamma: Tensor
    gn2_beta: Tensor
    mlp1_weight: Tensor
    mlp1_bias: Tensor
    mlp2_weight: Tensor
    mlp2_bias: Tensor
    u_max: float = 0.1
    groups: int = DEFAULT_GROUPS
    eps: float = 1e-5

    def __post_init__(self):
        if self.flow_weight.shape[0] != 2 or self.flow_weight.shape[2:] != (3, 3):
            raise BlockShapeError(f"Flow conv must produce exactly 2 channels with a 3x3 kernel, got {self.flow_weight.shape}")
        if not 0.0 < self.u_max <= 1.0:
            raise BlockShapeError(f"u_max must lie in (0, 1], got {self.u_max}")

    def tensors(self) -> List[Tensor]:
        return self.trunk.tensors() + [getattr(self, attr) for attr, _ in _DSL_FIELDS]

    @classmethod
    def from_tensors(cls, tensors: Sequence[Tensor], u_max: float = 0.1, groups: Optional[int] = None, eps: float = 1e-5) -> "DSLParams":
        n_trunk = len(_AGB_FIELDS)
        trunk = AGBParams.from_tensors(tensors[:n_trunk], groups, eps)
        values = dict(zip((attr for attr, _ in _DSL_FIELDS), tensors[n_trunk:]))
        return cls(trunk=trunk, **values, u_max=u_max, groups=trunk.groups, eps=eps)

    @classmethod
    def bind(cls, params: ParamSet, prefix: str, u_max: float, groups: Optional[int] = None, eps: float = 1e-5) -> "DSLParams":
        names = [f"{prefix}.trunk.{suffix}" for _, suffix in _AGB_FIELDS]
        names += [f"{prefix}.{suffix}" for _, suffix in _DSL_FIELDS]
        return cls.from_tensors([params[n] for n in names], u_max, groups, eps)


def _conv_weight(rng: np.random.Generator, c_out: int, c_in: int, kh: int = 1, kw: int = 1) -> np.ndarray:
    bound = 1.0 / np.sqrt(c_in * kh * kw)
    return rng.uniform(-bound, bound, size=(c_out, c_in, kh, kw))


def _add_mlp(params: ParamSet, prefix: str, dim: int, ratio: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.gn2.gamma", np.ones(dim))
    params.add(f"{prefix}.gn2.beta", np.zeros(dim))
    params.add(f"{prefix}.mlp.fc1.weight", _conv_weight(rng, dim * ratio, dim))
    params.add(f"{prefix}.mlp.fc1.bias", np.zeros(dim * ratio))
    params.add(f"{prefix}.mlp.fc2.weight", _conv_weight(rng, dim, dim * ratio))
    params.add(f"{prefix}.mlp.fc2.bias", np.zeros(dim))


def init_agb_params(params: ParamSet, prefix: str, dim: int, kernel_size: int, mlp_ratio: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(kernel_size)
    params.add(f"{prefix}.gn1.gamma", np.ones(dim))
    params.add(f"{prefix}.gn1.beta", np.zeros(dim))
    params.add(f"{prefix}.axial.k_h", rng.uniform(-bound, bound, size=(dim, kernel_size)))
    params.add(f"{prefix}.axial.k_v", rng.uniform(-bound, bound, size=(dim, kernel_size)))
    params.add(f"{prefix}.gate.weight", _conv_weight(rng, dim, dim))
    params.add(f"{prefix}.gate.bias", np.full(dim, GATE_BIAS_INIT))
    params.add(f"{prefix}.mix.weight", _conv_weight(rng, dim, dim))
    params.add(f"{prefix}.mix.bias", np.zeros(dim))
    _add_mlp(params, prefix, dim, mlp_ratio, rng)


def init_dsl_params(params: ParamSet, prefix: str, dim: int, kernel_size: int, mlp_ratio: int, rng: np.random.Generator) -> None:
    init_agb_params(params, f"{prefix}.trunk", dim, kernel_size, mlp_ratio, rng)
    params.add(f"{prefix}.flow.weight", _conv_weight(rng, 2, dim, 3, 3))
    params.add(f"{prefix}.flow.bias", np.zeros(2))
    params.add(f"{prefix}.warp_gate.weight", _conv_weight(rng, dim, dim))
    params.add(f"{prefix}.warp_gate.bias", np.full(dim, GATE_BIAS_INIT))
    params.add(f"{prefix}.warp_mix.weight", _conv_weight(rng, dim, dim))
    params.add(f"{prefix}.warp_mix.bias", np.zeros(dim))
    _add_mlp(params, prefix, dim, mlp_ratio, rng)


def init_dslcast_params(cfg: DSLCastConfig, seed: int, zero_output: bool = False) -> ParamSet:
    """Fresh parameters for ``cfg``; ``zero_output`` makes the whole network output 0."""
    rng = np.random.default_rng(seed)
    d, p = cfg.dim, cfg.patch_size
    params = ParamSet()
    params.add("embed.patch.weight", _conv_weight(rng, d, cfg.in_channels, p, p))
    params.add("embed.patch.bias", np.zeros(d))
    params.add("embed.lat.weight", rng.uniform(-1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0), size=(d, 2)))
    params.add("embed.lat.bias", np.zeros(d))
    for i in range(cfg.encoder_depth):
        if i in cfg.dsl_positions:
            init_dsl_params(params, f"encoder.{i}", d, cfg.kernel_size, cfg.mlp_ratio, rng)
        else:
            init_agb_params(params, f"encoder.{i}", d, cfg.kernel_size, cfg.mlp_ratio, rng)
    for j in range(cfg.decoder_depth):
        init_agb_params(params, f"decoder.{j}", d, cfg.kernel_size, cfg.mlp_ratio, rng)
    up_bound = 1.0 / np.sqrt(d)
    up = rng.uniform(-up_bound, up_bound, size=(d, cfg.out_channels, p, p))
    params.add("head.up.weight", np.zeros_like(up) if zero_output else up)
    params.add("head.up.bias", np.zeros(cfg.out_channels))
    hidden = cfg.refine_hidden
    params.add("refine.conv1.weight", _conv_weight(rng, hidden, cfg.out_channels + cfg.in_channels, 3, 3))
    params.add("refine.conv1.bias", np.zeros(hidden))
    params.add("refine.conv2.weight", _conv_weight(rng, cfg.out_channels, hidden, 3, 3))
    params.add("refine.conv2.bias", np.zeros(cfg.out_channels))
    params.add("refine.gate", np.zeros(cfg.out_channels))
    logger.debug(f"initialised DSLCast with {params.num_elements()} parameters")
    return params


# --- blocks ----------------------------------------------------------------------

def _check_block_input(x: Tensor, dim: int, block: str) -> None:
    if x.ndim != 3 or x.shape[0] != dim:
        raise BlockShapeError(f"{block} expects [{dim}, h, w] input, got {x.shape}")


def channel_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return conv2d(gelu(conv2d(x, w1, b1)), w2, b2)


def _mlp_residual(x: Tensor, p, groups: int, eps: float) -> Tensor:
    normed = group_norm(x, groups, p.gn2_gamma, p.gn2_beta, eps)
    return add(x, channel_mlp(normed, p.mlp1_weight, p.mlp1_bias, p.mlp2_weight, p.mlp2_bias))


def agb_forward(f_in: Tensor, p: AGBParams) -> Tensor:
    _check_block_input(f_in, p.dim, "AGB")
    u = group_norm(f_in, p.groups, p.gn1_gamma, p.gn1_beta, p.eps)
    f_axial = add(depthwise_axial_conv(u, p.k_h, axis="width"), depthwise_axial_conv(u, p.k_v, axis="height"))
    gate = sigmoid(conv2d(u, p.gate_weight, p.gate_bias))
    res = add(f_in, mul(gate, conv2d(f_axial, p.mix_weight, p.mix_bias)))
    return _mlp_residual(res, p, p.groups, p.eps)


def flow_preactivation_limit(dtype) -> float:
    return _FLOW_PREACTIVATION_LIMIT.get(np.dtype(dtype), 8.0)


def predict_flow(f_feat: Tensor, p: DSLParams) -> Tensor:
    """Displacement field ``u = u_max * tanh(C_flow(F))``, in normalized grid units."""
    z = conv2d(f_feat, p.flow_weight, p.flow_bias, padding="same", pad_mode="sphere")
    limit = flow_preactivation_limit(z.dtype)
    u = mul(tanh(clip(z, -limit, limit)), p.u_max)
    if np.max(np.abs(u.data)) >= p.u_max:
        raise FlowBoundError(f"Flow magnitude {np.max(np.abs(u.data))} reached u_max {p.u_max}")
    return u


@lru_cache(maxsize=32)
def _base_grid(height: int, width: int, dtype_name: str) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    grid = np.stack([np.broadcast_to(xs[None, :], (height, width)), np.broadcast_to(ys[:, None], (height, width))])
    grid = grid.astype(dtype_name)
    grid.setflags(write=False)
    return grid


def make_base_grid(height: int, width: int, dtype=None) -> Tensor:
    """Normalized lattice ``[2, h, w]``: channel 0 is x (longitude), channel 1 is y (latitude)."""
    dtype = np.dtype(dtype or get_dtype())
    return constant(_base_grid(height, width, dtype.name), dtype=dtype)


def backward_trace(base_grid: Tensor, u: Tensor) -> Tensor:
    if base_grid.shape != u.shape or base_grid.shape[0] != 2:
        raise BlockShapeError(f"backward_trace needs matching [2, h, w] grids, got {base_grid.shape} and {u.shape}")
    return sub(base_grid, u)


def bilinear_warp(field: Tensor, grid: Tensor) -> Tensor:
    return grid_sample_sphere(field, grid)


def dsl_block_forward(f_in: Tensor, p: DSLParams) -> Tensor:
    _check_block_input(f_in, p.trunk.dim, "DSL-Block")
    f_feat = agb_forward(f_in, p.trunk)
    u = predict_flow(f_feat, p)
    grid = backward_trace(make_base_grid(f_in.shape[1], f_in.shape[2], f_in.dtype), u)
    f_warped = bilinear_warp(f_feat, grid)
    gate = sigmoid(conv2d(f_feat, p.gate_w_weight, p.gate_w_bias))
    res = add(f_in, mul(gate, conv2d(f_warped, p.mix_w_weight, p.mix_w_bias)))
    return _mlp_residual(res, p, p.groups, p.eps)


# --- full model ------------------------------------------------------------------

def _sincos_table(channels: int, length: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)
    index = np.arange(channels)
    freq = 1.0 / np.power(10000.0, 2.0 * (index // 2) / max(channels, 1))
    angles = freq[:, None] * positions[None, :]
    return np.where((index % 2 == 0)[:, None], np.sin(angles), np.cos(angles))


def sinusoidal_positional_encoding(dim: int, height: int, width: int, include_lon: bool = True) -> np.ndarray:
    """Fixed ``[dim, h, w]`` encoding; first half of the channels encode the row, second half the column."""
    half = dim // 2
    enc = np.zeros((dim, height, width))
    enc[:half] = _sincos_table(half, height)[:, :, None]
    if include_lon:
        enc[half:] = _sincos_table(dim - half, width)[:, None, :]
    return enc


def token_latitude_features(cfg: DSLCastConfig) -> np.ndarray:
    """``[2, h]`` array of sin/cos of the mean latitude of each token row."""
    lat = np.deg2rad(np.asarray(cfg.latitudes).reshape(cfg.token_height, cfg.patch_size).mean(axis=1))
    return np.stack([np.sin(lat), np.cos(lat)])


def _embed(x: Tensor, cfg: DSLCastConfig, params: ParamSet) -> Tensor:
    z = conv2d(x, params["embed.patch.weight"], params["embed.patch.bias"], stride=cfg.patch_size)
    pos = sinusoidal_positional_encoding(cfg.dim, cfg.token_height, cfg.token_width, cfg.lon_positional_encoding)
    z = add(z, constant(pos, dtype=z.dtype))
    lat = add_bias(matmul(params["embed.lat.weight"], constant(token_latitude_features(cfg), dtype=z.dtype)), params["embed.lat.bias"])
    return add(z, expand_width(lat, cfg.token_width))


def _check_model_input(x: Tensor, cfg: DSLCastConfig) -> None:
    expected = (cfg.in_channels, cfg.height, cfg.width)
    if x.shape != expected:
        raise ConfigMismatchError(f"DSLCast input shape {x.shape} does not match config {expected}")


def dslcast_decode(x: Tensor, cfg: DSLCastConfig, params: ParamSet) -> Tensor:
    """Everything up to (and including) the un-patchify step, before refinement."""
    _check_model_input(x, cfg)
    z = _embed(x, cfg, params)
    skips = [z]
    for i in range(cfg.encoder_depth):
        if i in cfg.dsl_positions:
            z = dsl_block_forward(z, DSLParams.bind(params, f"encoder.{i}", cfg.u_max, cfg.groups, cfg.norm_eps))
        else:
            z = agb_forward(z, AGBParams.bind(params, f"encoder.{i}", cfg.groups, cfg.norm_eps))
        skips.append(z)
    for j in range(cfg.decoder_depth):
        mirror = cfg.encoder_depth - 1 - j
        if mirror >= 0:
            z = add(z, skips[mirror])
        z = agb_forward(z, AGBParams.bind(params, f"decoder.{j}", cfg.groups, cfg.norm_eps))
    return conv_transpose2d(z, params["head.up.weight"], params["head.up.bias"], stride=cfg.patch_size)


def refinement_head(y_hat: Tensor, x: Tensor, params: ParamSet) -> Tensor:
    hidden = gelu(conv2d(concat([y_hat, x]), params["refine.conv1.weight"], params["refine.conv1.bias"],
                         padding="same", pad_mode="sphere"))
    residual = conv2d(hidden, params["refine.conv2.weight"], params["refine.conv2.bias"], padding="same", pad_mode="sphere")
    return add(y_hat, scale_channels(residual, params["refine.gate"]))


def dslcast_forward(x: Tensor, cfg: DSLCastConfig, params: ParamSet) -> Tensor:
    return refinement_head(dslcast_decode(x, cfg, params), x, params)


# --- gradient-check registrations --------------------------------------------------

def random_agb_arrays(rng: np.random.Generator, dim: int, kernel_size: int = 3, mlp_ratio: int = 2, scale: float = 0.3) -> List[np.ndarray]:
    """Random (non-degenerate) AGB parameter arrays in ``AGBParams`` field order."""
    k = kernel_size
    hidden = dim * mlp_ratio
    return [
        1.0 + 0.1 * rng.standard_normal(dim),
        0.1 * rng.standard_normal(dim),
        scale * rng.standard_normal((dim, k)),
        scale * rng.standard_normal((dim, k)),
        scale * rng.standard_normal((dim, dim, 1, 1)),
        0.1 * rng.standard_normal(dim),
        scale * rng.standard_normal((dim, dim, 1, 1)),
        0.1 * rng.standard_normal(dim),
        1.0 + 0.1 * rng.standard_normal(dim),
        0.1 * rng.standard_normal(dim),
        scale * rng.standard_normal((hidden, dim, 1, 1)),
        0.1 * rng.standard_normal(hidden),
        scale * rng.standard_normal((dim, hidden, 1, 1)),
        0.1 * rng.standard_normal(dim),
    ]


def random_dsl_arrays(rng: np.random.Generator, dim: int, kernel_size: int = 3, mlp_ratio: int = 2, scale: float = 0.3) -> List[np.ndarray]:
    """Random DSL-Block parameter arrays in ``DSLParams.tensors()`` order.

    The flow bias dominates the flow weights so that every sample point sits a
    sizeable fraction of a cell away from the grid nodes.
    """
    hidden = dim * mlp_ratio
    return random_agb_arrays(rng, dim, kernel_size, mlp_ratio, scale) + [
        0.02 * rng.standard_normal((2, dim, 3, 3)),
        np.array([1.5, -1.2]),
        scale * rng.standard_normal((dim, dim, 1, 1)),
        0.1 * rng.standard_normal(dim),
        scale * rng.standard_normal((dim, dim, 1, 1)),
        0.1 * rng.standard_normal(dim),
        1.0 + 0.1 * rng.standard_normal(dim),
        0.1 * rng.standard_normal(dim),
        scale * rng.standard_normal((hidden, dim, 1, 1)),
        0.1 * rng.standard_normal(hidden),
        scale * rng.standard_normal((dim, hidden, 1, 1)),
        0.1 * rng.standard_normal(dim),
    ]


register_op("agb_forward", lambda rng: [rng.standard_normal((4, 5, 7))] + random_agb_arrays(rng, 4))(
    lambda f, *p: agb_forward(f, AGBParams.from_tensors(p))
)
register_op("dsl_block_forward", lambda rng: [rng.standard_normal((4, 5, 7))] + random_dsl_arrays(rng, 4))(
    lambda f, *p: dsl_block_forward(f, DSLParams.from_tensors(p, u_max=0.1))
)
