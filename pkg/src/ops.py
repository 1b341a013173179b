"""
Differentiable kernels on channel-first ``[C, H, W]`` tensors.

Spatial padding follows one of two policies:

- ``"zero"``: zeros on every side.
- ``"sphere"``: circular along the longitude (width) axis, replicate along the
  latitude (height) axis.

Convolutions are cross-correlations (no kernel flip), evaluated with
``sliding_window_view`` + ``einsum``.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.tensor import ShapeMismatchError, Tensor, TensorError, apply_op

logger = logging.getLogger(__name__)

PAD_MODES = ("zero", "sphere")

# Sample coordinates this close to a grid node (in cells) are snapped onto it, so
# that a warp by the base grid reproduces its input bit for bit.
_SNAP_TOLERANCE = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-9}


_mac_state = threading.local()


@contextmanager
def count_macs() -> Iterator[List[int]]:
    """Tally multiply-accumulates of the convolution and sampling kernels run on this thread.

    Yields a one-element list whose entry grows as kernels execute. Counters nest.
    """
    if not hasattr(_mac_state, "stack"):
        _mac_state.stack = []
    tally = [0]
    _mac_state.stack.append(tally)
    try:
        yield tally
    finally:
        _mac_state.stack.pop()


def _add_macs(n: int) -> None:
    for tally in getattr(_mac_state, "stack", ()):
        tally[0] += int(n)


def _check_pad_mode(mode: str) -> None:
    if mode not in PAD_MODES:
        raise TensorError(f"Unknown padding mode '{mode}', expected one of {PAD_MODES}")


def pad_field(x: np.ndarray, pad_h: int, pad_w: int, mode: str) -> np.ndarray:
    """Pad the two trailing axes of ``x`` by ``pad_h`` rows and ``pad_w`` columns per side."""
    _check_pad_mode(mode)
    lead = [(0, 0)] * (x.ndim - 2)
    if mode == "zero":
        return np.pad(x, lead + [(pad_h, pad_h), (pad_w, pad_w)])
    if pad_w > x.shape[-1]:
        raise ShapeMismatchError(f"Circular padding of {pad_w} exceeds width {x.shape[-1]}")
    x = np.pad(x, lead + [(0, 0), (pad_w, pad_w)], mode="wrap")
    return np.pad(x, lead + [(pad_h, pad_h), (0, 0)], mode="edge")


def unpad_gradient(gp: np.ndarray, pad_h: int, pad_w: int, mode: str) -> np.ndarray:
    """Adjoint of ``pad_field``: fold the gradient of padded cells back onto their sources."""
    height = gp.shape[-2] - 2 * pad_h
    width = gp.shape[-1] - 2 * pad_w
    if mode == "zero":
        return gp[..., pad_h:pad_h + height, pad_w:pad_w + width].copy()
    g = gp[..., pad_h:pad_h + height, :].copy()
    if pad_h:
        g[..., 0, :] += gp[..., :pad_h, :].sum(axis=-2)
        g[..., -1, :] += gp[..., pad_h + height:, :].sum(axis=-2)
    out = g[..., pad_w:pad_w + width].copy()
    if pad_w:
        out[..., width - pad_w:] += g[..., :pad_w]
        out[..., :pad_w] += g[..., pad_w + width:]
    return out


def _resolve_padding(padding: Union[int, str], kh: int, kw: int) -> Tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatchError(f"Same padding needs odd kernel extents, got {kh}x{kw}")
        return kh // 2, kw // 2
    if isinstance(padding, int) and padding >= 0:
        return padding, padding
    raise TensorError(f"Invalid padding {padding!r}")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Union[int, str] = 0,
    pad_mode: str = "zero",
) -> Tensor:
    """2-D cross-correlation of ``x[C_in,H,W]`` with ``kernel[C_out,C_in,kh,kw]``."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects [C,H,W] input and 4-D kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeMismatchError(f"conv2d input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatchError(f"conv2d bias shape {bias.shape} does not match {c_out} outputs")
    if stride < 1:
        raise TensorError("conv2d stride must be >= 1")
    if not np.all(np.isfinite(x.data)):
        raise TensorError("conv2d received non-finite input")
    _check_pad_mode(pad_mode)
    ph, pw = _resolve_padding(padding, kh, kw)

    xp = pad_field(x.data, ph, pw, pad_mode) if (ph or pw) else x.data
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeMismatchError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[1:]}")
    k = kernel.data

    if kh == 1 and kw == 1 and stride == 1:
        windows = None
        out = np.tensordot(k[:, :, 0, 0], xp, axes=([1], [0]))
    else:
        windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        out = np.einsum("chwij,ocij->ohw", windows, k, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = out.astype(x.dtype, copy=False)
    h_out, w_out = out.shape[1:]
    _add_macs(c_out * c_in * kh * kw * h_out * w_out)

    def _backward(g):
        if windows is None:
            g_kernel = np.tensordot(g, xp, axes=([1, 2], [1, 2]))[:, :, None, None]
            g_xp = np.tensordot(k[:, :, 0, 0], g, axes=([0], [0]))
        else:
            g_kernel = np.einsum("ohw,chwij->ocij", g, windows, optimize=True)
            g_xp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    g_xp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += np.tensordot(
                        k[:, :, i, j], g, axes=([0], [0])
                    )
        g_x = unpad_gradient(g_xp, ph, pw, pad_mode) if (ph or pw) else g_xp
        g_bias = g.sum(axis=(1, 2)) if bias is not None else None
        return (g_x, g_kernel, g_bias)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return apply_op("conv2d", inputs, out, lambda g: _backward(g)[:len(inputs)])


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: Optional[int] = None) -> Tensor:
    """Transposed convolution with ``kernel[C_in,C_out,p,p]`` and stride ``p``.

    Only the non-overlapping case (kernel extent equal to stride) is supported; this
    is the un-patchify step of the decoder.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeMismatchError(f"conv_transpose2d expects [C,h,w] input and 4-D kernel, got {x.shape}, {kernel.shape}")
    c_in, c_out, kh, kw = kernel.shape
    stride = kh if stride is None else stride
    if kh != kw or kh != stride:
        raise ShapeMismatchError(f"conv_transpose2d needs a square kernel equal to the stride, got {kh}x{kw}/{stride}")
    if x.shape[0] != c_in:
        raise ShapeMismatchError(f"conv_transpose2d input has {x.shape[0]} channels, kernel expects {c_in}")
    h, w = x.shape[1:]
    k = kernel.data
    blocks = np.einsum("chw,coab->ohawb", x.data, k, optimize=True)
    out = blocks.reshape(c_out, h * stride, w * stride)
    _add_macs(c_in * c_out * kh * kw * h * w)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = out.astype(x.dtype, copy=False)

    def _backward(g):
        gb = g.reshape(c_out, h, stride, w, stride)
        g_x = np.einsum("ohawb,coab->chw", gb, k, optimize=True)
        g_kernel = np.einsum("chw,ohawb->coab", x.data, gb, optimize=True)
        return (g_x, g_kernel, g.sum(axis=(1, 2)))

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return apply_op("conv_transpose2d", inputs, out, lambda g: _backward(g)[:len(inputs)])


def depthwise_axial_conv(x: Tensor, kernels: Tensor, axis: str, pad_mode: str = "sphere") -> Tensor:
    """Convolve every channel of ``x[C,H,W]`` with its own 1-D kernel ``kernels[C,k]`` along one axis.

    ``axis="width"`` runs along longitude, ``axis="height"`` along latitude.
    """
    if x.ndim != 3 or kernels.ndim != 2:
        raise ShapeMismatchError(f"depthwise_axial_conv expects [C,H,W] and [C,k], got {x.shape}, {kernels.shape}")
    c, k = kernels.shape
    if c != x.shape[0]:
        raise ShapeMismatchError(f"depthwise_axial_conv has {c} kernels for {x.shape[0]} channels")
    if k % 2 == 0:
        raise ShapeMismatchError(f"depthwise_axial_conv kernel length must be odd, got {k}")
    if axis not in ("height", "width"):
        raise TensorError(f"Unknown axis '{axis}'")
    pad = k // 2
    ph, pw = (pad, 0) if axis == "height" else (0, pad)
    xp = pad_field(x.data, ph, pw, pad_mode)
    axis_index = 1 if axis == "height" else 2
    windows = sliding_window_view(xp, k, axis=axis_index)
    kd = kernels.data
    out = np.einsum("chwk,ck->chw", windows, kd, optimize=True).astype(x.dtype, copy=False)
    height, width = x.shape[1:]
    _add_macs(c * k * height * width)

    def _backward(g):
        g_kernels = np.einsum("chwk,chw->ck", windows, g, optimize=True)
        g_xp = np.zeros_like(xp)
        for j in range(k):
            tap = g * kd[:, j, None, None]
            if axis == "height":
                g_xp[:, j:j + height, :] += tap
            else:
                g_xp[:, :, j:j + width] += tap
        return (unpad_gradient(g_xp, ph, pw, pad_mode), g_kernels)

    return apply_op("depthwise_axial_conv", (x, kernels), out, _backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization over (channels-in-group x H x W), then per-channel affine."""
    c = x.shape[0]
    if groups < 1 or c % groups != 0:
        raise ShapeMismatchError(f"{c} channels are not divisible into {groups} groups")
    if eps <= 0:
        raise TensorError("group_norm eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"group_norm affine params must have shape ({c},)")
    xg = x.data.reshape(groups, -1)
    n = xg.shape[1]
    mean = xg.mean(axis=1, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    gv = gamma.data[:, None, None]
    out = (xhat * gv + beta.data[:, None, None]).astype(x.dtype, copy=False)

    def _backward(g):
        g_gamma = (g * xhat).sum(axis=(1, 2))
        g_beta = g.sum(axis=(1, 2))
        g_xhat = (g * gv).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        g_x = inv_std / n * (n * g_xhat - g_xhat.sum(axis=1, keepdims=True) - xh * (g_xhat * xh).sum(axis=1, keepdims=True))
        return (g_x.reshape(x.shape), g_gamma, g_beta)

    return apply_op("group_norm", (x, gamma, beta), out, _backward)


def _snap(coords: np.ndarray, tolerance: float) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) <= tolerance, nearest, coords)


def grid_sample_sphere(field: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``field[C,h,w]`` at normalized coordinates ``grid[2,h',w']``.

    ``grid[0]`` is the x (longitude) coordinate and ``grid[1]`` the y (latitude)
    coordinate, both mapped from [-1, 1] onto the first/last cell centres. Longitude
    wraps around; latitude is clamped to the border rows, where the coordinate
    gradient is zero.
    """
    if field.ndim != 3 or grid.ndim != 3 or grid.shape[0] != 2:
        raise ShapeMismatchError(f"grid_sample_sphere expects [C,h,w] and [2,h',w'], got {field.shape}, {grid.shape}")
    _, h, w = field.shape
    tol = _SNAP_TOLERANCE.get(np.dtype(field.dtype), 1e-9)
    ix = _snap((grid.data[0] + 1.0) * 0.5 * (w - 1), tol)
    iy = _snap((grid.data[1] + 1.0) * 0.5 * (h - 1), tol)
    inside_y = (iy >= 0) & (iy <= h - 1)
    iy = np.clip(iy, 0, h - 1)

    x0 = np.floor(ix)
    wx = (ix - x0).astype(field.dtype)
    x0i = np.mod(x0.astype(np.int64), w)
    x1i = np.mod(x0i + 1, w)
    y0 = np.floor(iy)
    wy = (iy - y0).astype(field.dtype)
    y0i = y0.astype(np.int64)
    y1i = np.minimum(y0i + 1, h - 1)

    f = field.data
    v00, v01 = f[:, y0i, x0i], f[:, y0i, x1i]
    v10, v11 = f[:, y1i, x0i], f[:, y1i, x1i]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    _add_macs(4 * out.size)
    out = out.astype(field.dtype, copy=False)

    def _backward(g):
        c = f.shape[0]
        g_field = np.zeros((c, h * w), dtype=f.dtype)
        for yi, xi, weight in (
            (y0i, x0i, (1 - wy) * (1 - wx)),
            (y0i, x1i, (1 - wy) * wx),
            (y1i, x0i, wy * (1 - wx)),
            (y1i, x1i, wy * wx),
        ):
            np.add.at(g_field, (slice(None), (yi * w + xi).ravel()), (g * weight).reshape(c, -1))
        g_ix = (g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))).sum(axis=0)
        g_iy = (g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))).sum(axis=0) * inside_y
        g_grid = np.stack([g_ix * 0.5 * (w - 1), g_iy * 0.5 * (h - 1)]).astype(f.dtype, copy=False)
        return (g_field.reshape(f.shape), g_grid)

    return apply_op("grid_sample_sphere", (field, grid), out, _backward)
