"""Dense raster operators and their exact reverse-mode partners.

Tensors are C-contiguous numpy arrays in float32 ("single") or float64
("double"). Every spatial operator accepts a single (C, H, W) raster or a
batched (N, C, H, W) stack and returns the same rank it was given. Forward
functions are pure; each ``*_backward`` consumes the upstream gradient plus
whatever the forward saved and returns exact gradients for every input.

All convolutions are cross-correlations (no kernel flip) and run as im2col
+ GEMM so the single-core BLAS does the heavy lifting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes violate an operator contract."""


def _check_float(op: str, **arrays: np.ndarray) -> None:
    for name, a in arrays.items():
        if a.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"{op}: {name} has dtype {a.dtype}, expected float32/float64")


def _batched(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


def _unbatch(y: np.ndarray, squeeze: bool) -> np.ndarray:
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# conv2d (stride 1, square kernel 1 or 3)
# ---------------------------------------------------------------------------


def _pad_spatial(x4: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x4.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x4.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x4
    return out


def _im2col(x4: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*k*k, Ho*Wo) patch matrix for a stride-1 window.

    Assembled from k*k contiguous slice copies, which beats reshaping a
    strided window view on wide shallow layers.
    """
    if pad:
        x4 = _pad_spatial(x4, pad)
    n, c, h, w = x4.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, c, k * k, ho, wo), dtype=x4.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = x4[:, :, i : i + ho, j : j + wo]
    return cols.reshape(n, c * k * k, ho * wo)


def _corr2d(
    x4: np.ndarray, w: np.ndarray, pad: int, return_cols: bool = False
) -> np.ndarray | tuple[np.ndarray, np.ndarray | None]:
    """Stride-1 cross-correlation of a batched stack with an (O,C,k,k) kernel."""
    n, c, h, wd = x4.shape
    o, _, k, _ = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if k == 1 and pad == 0:
        y = np.matmul(w.reshape(o, c), x4.reshape(n, c, h * wd)).reshape(n, o, h, wd)
        return (y, None) if return_cols else y
    cols = _im2col(x4, k, pad)
    y = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return (y, cols) if return_cols else y


def conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 1, return_cols: bool = False
):
    """Cross-correlate ``x`` (C_in,H,W) with ``w`` (C_out,C_in,k,k) plus bias.

    k must be 1 or 3 and pad 0 or 1; with k=3, pad=1 the spatial dims are
    preserved. Output spatial extent is H+2*pad-k+1 (>= 1 required). With
    ``return_cols`` the patch matrix is handed back for the backward pass.
    """
    x4, squeeze = _batched(x, "conv2d")
    _check_float("conv2d", x=x4, w=w, b=b)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out,C_in,k,k), got {w.shape}")
    k = w.shape[2]
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size {k} not supported, expected 1 or 3")
    if pad not in (0, 1):
        raise ShapeError(f"conv2d: pad {pad} not supported, expected 0 or 1")
    if x4.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x4.shape[1]} channels but weight expects {w.shape[1]} "
            f"(x shape {x.shape}, w shape {w.shape})"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} filters")
    if x4.shape[2] + 2 * pad - k + 1 < 1 or x4.shape[3] + 2 * pad - k + 1 < 1:
        raise ShapeError(f"conv2d: spatial dims {x4.shape[2:]} too small for k={k}, pad={pad}")
    y, cols = _corr2d(x4, w, pad, return_cols=True)
    y += b[:, None, None]
    if return_cols:
        return _unbatch(y, squeeze), cols
    return _unbatch(y, squeeze)


def conv2d_backward(
    dy: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    pad: int,
    cols: np.ndarray | None = None,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv2d given upstream dy.

    ``cols`` may carry the forward pass's patch matrix to skip rebuilding it;
    ``need_dx=False`` skips the input gradient (for convs fed by constants).
    """
    dy4, squeeze = _batched(dy, "conv2d_backward")
    x4, _ = _batched(x, "conv2d_backward")
    n, c, h, wd = x4.shape
    o, _, k, _ = w.shape
    db = dy4.sum(axis=(0, 2, 3))
    # dw[o,c,i,j] = sum_n,hw dy[n,o,hw] * patch[n,(c,i,j),hw]
    if cols is None:
        cols = _im2col(x4, k, pad) if not (k == 1 and pad == 0) else x4.reshape(n, c, h * wd)
    dyr = dy4.reshape(n, o, -1)
    dw = np.matmul(dyr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if not need_dx:
        return None, dw, db
    # dx: full correlation of dy with the flipped, channel-swapped kernel.
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dxp = _corr2d(dy4, wt, k - 1)
    dx = dxp[:, :, pad : pad + h, pad : pad + wd]
    return _unbatch(np.ascontiguousarray(dx), squeeze), dw, db


# ---------------------------------------------------------------------------
# conv_transpose2d (stride 2, kernel 2x2): adjoint of a stride-2 correlation
# ---------------------------------------------------------------------------


def conv_transpose2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed convolution with fixed stride 2 and 2x2 kernel.

    ``w`` has shape (C_in, C_out, 2, 2); output is (C_out, 2H, 2W) with
    out[o, 2h+i, 2w+j] = sum_c x[c,h,w] * w[c,o,i,j] + b[o].
    """
    x4, squeeze = _batched(x, "conv_transpose2d")
    _check_float("conv_transpose2d", x=x4, w=w, b=b)
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d: weight must be (C_in,C_out,2,2), got {w.shape}")
    if x4.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input has {x4.shape[1]} channels but weight expects {w.shape[0]}"
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(
            f"conv_transpose2d: bias shape {b.shape} does not match {w.shape[1]} filters"
        )
    n, ci, h, wd = x4.shape
    co = w.shape[1]
    y = np.matmul(w.reshape(ci, co * 4).T, x4.reshape(n, ci, h * wd))
    y = y.reshape(n, co, 2, 2, h, wd).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, 2 * h, 2 * wd)
    y = np.ascontiguousarray(y)
    y += b[:, None, None]
    return _unbatch(y, squeeze)


def _upsample_blocks(dy4: np.ndarray) -> np.ndarray:
    """(N,Co,2H,2W) -> (N, Co*4, H*W) gathering each 2x2 output block."""
    n, co, h2, w2 = dy4.shape
    h, w = h2 // 2, w2 // 2
    blocks = dy4.reshape(n, co, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(blocks).reshape(n, co * 4, h * w)


def conv_transpose2d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv_transpose2d; dx is a stride-2 correlation."""
    dy4, squeeze = _batched(dy, "conv_transpose2d_backward")
    x4, _ = _batched(x, "conv_transpose2d_backward")
    n, ci, h, wd = x4.shape
    co = w.shape[1]
    db = dy4.sum(axis=(0, 2, 3))
    dyb = _upsample_blocks(dy4)
    dx = np.matmul(w.reshape(ci, co * 4), dyb).reshape(n, ci, h, wd)
    dw = np.matmul(x4.reshape(n, ci, h * wd), dyb.transpose(0, 2, 1)).sum(axis=0)
    return _unbatch(dx, squeeze), dw.reshape(w.shape), db


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2
# ---------------------------------------------------------------------------


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over non-overlapping 2x2 windows; spatial dims must be even.

    Returns the pooled tensor and an argmax map of flat row-major indices
    into ``x`` (first occurrence wins on ties). The backward pass routes the
    whole gradient to the recorded winner of each window.
    """
    x4, squeeze = _batched(x, "maxpool2")
    _check_float("maxpool2", x=x4)
    n, c, h, w = x4.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims ({h},{w}) must be even; pad first")
    windows = x4.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(windows).reshape(n, c, h // 2, w // 2, 4)
    a = flat.argmax(axis=-1)  # row-major window order -> first occurrence on ties
    y = np.take_along_axis(flat, a[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + (a >> 1)
    cols = 2 * np.arange(w // 2)[None, :] + (a & 1)
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h
    idx = ((base + rows) * w + cols).astype(np.int64)
    if squeeze:
        return y[0], idx[0]
    return y, idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    """Scatter dy back to the argmax positions (windows are disjoint)."""
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx.reshape(-1)[idx.reshape(-1)] = dy.reshape(-1)
    return dx


# ---------------------------------------------------------------------------
# group normalization
# ---------------------------------------------------------------------------


def group_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    channels_per_group: int,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize groups of ``channels_per_group`` channels over (group, H, W).

    Each group is centred and scaled by 1/sqrt(var + eps) using the biased
    (population) variance, then the per-channel affine gamma/beta applies.
    """
    y, _, _ = _group_norm_impl(x, gamma, beta, channels_per_group, eps)
    return y


def _group_norm_impl(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    channels_per_group: int,
    eps: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x4, squeeze = _batched(x, "group_norm")
    _check_float("group_norm", x=x4, gamma=gamma, beta=beta)
    n, c, h, w = x4.shape
    if channels_per_group < 1 or c % channels_per_group:
        raise ShapeError(
            f"group_norm: {c} channels not divisible by channels_per_group={channels_per_group}"
        )
    if eps <= 0:
        raise ShapeError(f"group_norm: eps must be positive, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({c},)")
    g = c // channels_per_group
    xg = x4.reshape(n, g, channels_per_group, h, w)
    mean = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x4.dtype))
    xhat = ((xg - mean) * inv).reshape(n, c, h, w)
    y = xhat * gamma[:, None, None] + beta[:, None, None]
    return _unbatch(y, squeeze), _unbatch(xhat, squeeze), inv


def group_norm_backward(
    dy: np.ndarray,
    xhat: np.ndarray,
    inv: np.ndarray,
    gamma: np.ndarray,
    channels_per_group: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgamma, dbeta) of group_norm."""
    dy4, squeeze = _batched(dy, "group_norm_backward")
    xhat4, _ = _batched(xhat, "group_norm_backward")
    n, c, h, w = dy4.shape
    g = c // channels_per_group
    dgamma = (dy4 * xhat4).sum(axis=(0, 2, 3))
    dbeta = dy4.sum(axis=(0, 2, 3))
    dxhat = (dy4 * gamma[:, None, None]).reshape(n, g, channels_per_group, h, w)
    xg = xhat4.reshape(n, g, channels_per_group, h, w)
    m = channels_per_group * h * w
    s1 = dxhat.sum(axis=(2, 3, 4), keepdims=True)
    s2 = (dxhat * xg).sum(axis=(2, 3, 4), keepdims=True)
    dx = inv * (dxhat - s1 / m - xg * (s2 / m))
    return _unbatch(dx.reshape(n, c, h, w), squeeze), dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise / structural ops
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0). Subgradient at 0 is 0."""
    _check_float("relu", x=x)
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, np.zeros((), dtype=dy.dtype))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack b's channels after a's; spatial dims must match exactly."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[-2:] != b.shape[-2:] or (a.ndim == 4 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"concat_channels: spatial dims differ, {a.shape} vs {b.shape}")
    _check_float("concat_channels", a=a, b=b)
    return np.concatenate([a, b], axis=-3)


def concat_channels_backward(dy: np.ndarray, c1: int) -> tuple[np.ndarray, np.ndarray]:
    da = dy[..., :c1, :, :]
    db = dy[..., c1:, :, :]
    return np.ascontiguousarray(da), np.ascontiguousarray(db)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    _check_float("mse", pred=pred, target=target)
    diff = pred - target
    return float(np.mean(diff * diff, dtype=np.float64))


def mse_backward(dy: float, pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scale = np.asarray(2.0 * dy / pred.size, dtype=pred.dtype)
    dpred = scale * (pred - target)
    return dpred, -dpred


@dataclass(frozen=True)
class CropRecord:
    """Original spatial extent, kept so a pad can be undone exactly."""

    height: int
    width: int


def pad_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, CropRecord]:
    """Zero-pad bottom/right so both spatial dims are multiples of ``m``."""
    if m < 1:
        raise ShapeError(f"pad_to_multiple: m must be >= 1, got {m}")
    x4, squeeze = _batched(x, "pad_to_multiple")
    h, w = x4.shape[2], x4.shape[3]
    ph = (-h) % m
    pw = (-w) % m
    rec = CropRecord(h, w)
    if ph == 0 and pw == 0:
        return x, rec
    y = np.pad(x4, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return _unbatch(y, squeeze), rec


def crop_to(x: np.ndarray, rec: CropRecord) -> np.ndarray:
    """Undo pad_to_multiple: keep the top-left (height, width) window."""
    x4, squeeze = _batched(x, "crop_to")
    y = np.ascontiguousarray(x4[:, :, : rec.height, : rec.width])
    return _unbatch(y, squeeze)


def crop_to_backward(dy: np.ndarray, padded_shape: tuple[int, ...]) -> np.ndarray:
    dy4, squeeze = _batched(dy, "crop_to_backward")
    shape = padded_shape if len(padded_shape) == 4 else (1, *padded_shape)
    dx = np.zeros(shape, dtype=dy.dtype)
    dx[:, :, : dy4.shape[2], : dy4.shape[3]] = dy4
    return _unbatch(dx, squeeze)
