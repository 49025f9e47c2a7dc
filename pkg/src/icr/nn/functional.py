"""Differentiable primitives for the 3D segmentation network.

Convolutions use 3x3x3 kernels with 'same' ceil-mode padding:
output spatial dims are ceil(n/stride). Transposed convolution is the
exact adjoint of the strided convolution with matching geometry, so
<conv(x, K, s), y> == <x, conv_transpose(y, K, s)> holds to rounding.

Layout: activations are (channels, nx, ny, nz); conv kernels are
(c_out, c_in, 3, 3, 3); transposed kernels are (c_in, c_out, 3, 3, 3).

Large scratch arrays (pad targets and patch matrices) come from a small
free-list pool: repeated volume-sized allocations otherwise dominate the
step time through page faults. Buffers are released where their last
use is provable, never escape into Tensor data or gradients, and
pooling does not change any computed value.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import Tensor, grad_enabled

KSIZE = 3


_POOL_MAX_PER_BUCKET = 4
_pool: dict[tuple[int, str], list[np.ndarray]] = {}


def _acquire(shape, dtype) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    bucket = _pool.get((n, np.dtype(dtype).str))
    if bucket:
        return bucket.pop().reshape(shape)
    return np.empty(shape, dtype=dtype)


def _release(arr: np.ndarray) -> None:
    key = (arr.size, arr.dtype.str)
    bucket = _pool.setdefault(key, [])
    if len(bucket) < _POOL_MAX_PER_BUCKET:
        bucket.append(arr.reshape(-1))


def _out_dim(n: int, stride: int) -> int:
    return -(-n // stride)


def _pad_amounts(n: int, stride: int) -> tuple[int, int, int]:
    out = _out_dim(n, stride)
    pad_right = max(0, (out - 1) * stride + KSIZE - 1 - n)
    return 1, pad_right, out


def _padded_geometry(dims, stride):
    pads = [_pad_amounts(n, stride) for n in dims]
    out_dims = tuple(p[2] for p in pads)
    padded_dims = tuple(n + p[0] + p[1] for n, p in zip(dims, pads))
    return pads, out_dims, padded_dims


def _pad_input(x: np.ndarray, stride: int):
    """Zero-pad spatial dims into a pooled buffer."""
    dims = x.shape[1:]
    pads, out_dims, padded_dims = _padded_geometry(dims, stride)
    xp = _acquire((x.shape[0], *padded_dims), x.dtype)
    xp.fill(0)
    xp[:, 1 : 1 + dims[0], 1 : 1 + dims[1], 1 : 1 + dims[2]] = x
    return xp, out_dims


def _offset_block(xp: np.ndarray, stride: int, out_dims, di: int, dj: int, dk: int):
    ox, oy, oz = out_dims
    return xp[
        :,
        di : di + stride * ox : stride,
        dj : dj + stride * oy : stride,
        dk : dk + stride * oz : stride,
    ]


def _gather_cols(xp: np.ndarray, stride: int, out_dims) -> np.ndarray:
    """(c_in*27, voxels) patch matrix from a padded (c, nx, ny, nz) array.

    One block copy per kernel offset keeps this at memcpy speed; the row
    order (channel major, offset minor) matches kernel.reshape(c_out, -1).
    Caller owns the returned pooled buffer.
    """
    c = xp.shape[0]
    ox, oy, oz = out_dims
    cols = _acquire((c, KSIZE**3, ox * oy * oz), xp.dtype)
    r = 0
    for di in range(KSIZE):
        for dj in range(KSIZE):
            for dk in range(KSIZE):
                np.copyto(
                    cols[:, r].reshape(c, ox, oy, oz),
                    _offset_block(xp, stride, out_dims, di, dj, dk),
                )
                r += 1
    return cols.reshape(c * KSIZE**3, -1)


def _scatter_cols_into(xp: np.ndarray, cols: np.ndarray, stride: int, out_dims) -> np.ndarray:
    """Adjoint of _gather_cols, accumulating into a zeroed padded buffer."""
    c = xp.shape[0]
    ox, oy, oz = out_dims
    cols_r = cols.reshape(c, KSIZE**3, ox, oy, oz)
    r = 0
    for di in range(KSIZE):
        for dj in range(KSIZE):
            for dk in range(KSIZE):
                _offset_block(xp, stride, out_dims, di, dj, dk)[...] += cols_r[:, r]
                r += 1
    return xp


def conv3d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Strided 3D convolution; spatial dims become ceil(n/stride)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 5 or wd.shape[2:] != (KSIZE,) * 3:
        raise ValueError(f"bad conv shapes: input {xd.shape}, kernel {wd.shape}")
    if xd.shape[0] != wd.shape[1]:
        raise ValueError(f"channel mismatch: input has {xd.shape[0]}, kernel expects {wd.shape[1]}")
    c_out = wd.shape[0]
    xp, out_dims = _pad_input(xd, stride)
    padded_shape = xp.shape
    cols = _gather_cols(xp, stride, out_dims)
    _release(xp)
    wmat = wd.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, *out_dims)
    if not grad_enabled() or not (x.requires_grad or w.requires_grad):
        _release(cols)
        return Tensor(out)

    def backward(g):
        g_flat = g.reshape(c_out, -1)
        if w.requires_grad:
            w._accumulate((g_flat @ cols.T).reshape(wd.shape))
        if x.requires_grad:
            dcols = _acquire((wmat.shape[1], g_flat.shape[1]), g.dtype)
            np.matmul(wmat.T, g_flat, out=dcols)
            dxp = _acquire(padded_shape, g.dtype)
            dxp.fill(0)
            _scatter_cols_into(dxp, dcols, stride, out_dims)
            _release(dcols)
            n0, n1, n2 = xd.shape[1:]
            x._accumulate(dxp[:, 1 : 1 + n0, 1 : 1 + n1, 1 : 1 + n2])
            _release(dxp)
        _release(cols)

    return Tensor(out, requires_grad=True, parents=(x, w), backward=backward)


def conv3d_transpose(y: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of conv3d; spatial dims become stride*n."""
    yd, wd = y.data, w.data
    if yd.ndim != 4 or wd.ndim != 5 or wd.shape[2:] != (KSIZE,) * 3:
        raise ValueError(f"bad transpose-conv shapes: input {yd.shape}, kernel {wd.shape}")
    if yd.shape[0] != wd.shape[0]:
        raise ValueError(f"channel mismatch: input has {yd.shape[0]}, kernel expects {wd.shape[0]}")
    c_out = wd.shape[1]
    in_dims = yd.shape[1:]
    full_dims = tuple(stride * n for n in in_dims)
    pads, check_dims, padded_dims = _padded_geometry(full_dims, stride)
    assert check_dims == in_dims
    padded_shape = (c_out, *padded_dims)
    wmat = wd.reshape(yd.shape[0], -1)  # (c_in, c_out*27)
    y_flat = yd.reshape(yd.shape[0], -1)
    cols = _acquire((wmat.shape[1], y_flat.shape[1]), yd.dtype)
    np.matmul(wmat.T, y_flat, out=cols)
    out_p = _acquire(padded_shape, yd.dtype)
    out_p.fill(0)
    _scatter_cols_into(out_p, cols, stride, in_dims)
    _release(cols)
    crop = tuple(slice(pads[a][0], pads[a][0] + full_dims[a]) for a in range(3))
    out = np.ascontiguousarray(out_p[(slice(None), *crop)])
    _release(out_p)
    if not grad_enabled() or not (y.requires_grad or w.requires_grad):
        return Tensor(out)

    def backward(g):
        gp = _acquire(padded_shape, g.dtype)
        gp.fill(0)
        gp[(slice(None), *crop)] = g
        gcols = _gather_cols(gp, stride, in_dims)
        _release(gp)
        if y.requires_grad:
            y._accumulate((wmat @ gcols).reshape(yd.shape))
        if w.requires_grad:
            w._accumulate((y_flat @ gcols.T).reshape(wd.shape))
        _release(gcols)

    return Tensor(out, requires_grad=True, parents=(y, w), backward=backward)


def pointwise_conv3d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """1x1x1 channel-mixing conv used for residual skip projections.

    Samples the stride-aligned window centers, so shapes match conv3d.
    """
    xd, wd = x.data, w.data
    if xd.shape[0] != wd.shape[1]:
        raise ValueError(f"channel mismatch: input has {xd.shape[0]}, kernel expects {wd.shape[1]}")
    out_dims = tuple(_out_dim(n, stride) for n in xd.shape[1:])
    sub = xd[:, ::stride, ::stride, ::stride][:, : out_dims[0], : out_dims[1], : out_dims[2]]
    sub_flat = np.ascontiguousarray(sub.reshape(sub.shape[0], -1))
    out = (wd @ sub_flat).reshape(wd.shape[0], *out_dims)
    if not grad_enabled() or not (x.requires_grad or w.requires_grad):
        return Tensor(out)

    def backward(g):
        g_flat = g.reshape(g.shape[0], -1)
        if w.requires_grad:
            w._accumulate(g_flat @ sub_flat.T)
        if x.requires_grad:
            dx = np.zeros_like(xd)
            dsub = (wd.T @ g_flat).reshape(sub.shape)
            dx[:, ::stride, ::stride, ::stride][
                :, : out_dims[0], : out_dims[1], : out_dims[2]
            ] = dsub
            x._accumulate(dx)

    return Tensor(out, requires_grad=True, parents=(x, w), backward=backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over spatial dims, then affine scale/shift."""
    xd = x.data
    c = xd.shape[0]
    spatial = xd.reshape(c, -1)
    n = spatial.shape[1]
    mean = spatial.mean(axis=1, keepdims=True)
    centered = spatial - mean
    var = np.einsum("cs,cs->c", centered, centered)[:, None] / n
    istd = 1.0 / np.sqrt(var + eps)
    xhat = centered * istd
    out = (gamma.data[:, None] * xhat + beta.data[:, None]).reshape(xd.shape)
    if not grad_enabled() or not (x.requires_grad or gamma.requires_grad or beta.requires_grad):
        return Tensor(out)

    def backward(g):
        g2 = g.reshape(c, -1)
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=1))
        if gamma.requires_grad:
            gamma._accumulate(np.einsum("cs,cs->c", g2, xhat))
        if x.requires_grad:
            dxhat = g2 * gamma.data[:, None]
            dvar = np.einsum("cs,cs->c", dxhat, centered)[:, None] * (-0.5) * istd**3
            dmean = -dxhat.sum(axis=1, keepdims=True) * istd + dvar * (
                -2.0 * centered.sum(axis=1, keepdims=True) / n
            )
            dx = dxhat * istd + dvar * (2.0 / n) * centered + dmean / n
            x._accumulate(dx.reshape(xd.shape))

    return Tensor(out, requires_grad=True, parents=(x, gamma, beta), backward=backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    if not grad_enabled() or not x.requires_grad:
        return Tensor(out)

    def backward(g):
        x._accumulate(np.where(pos, g, slope * g))

    return Tensor(out, requires_grad=True, parents=(x,), backward=backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    if not grad_enabled() or not x.requires_grad:
        return Tensor(out)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor(out, requires_grad=True, parents=(x,), backward=backward)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    out = x.data + b.data.reshape(-1, 1, 1, 1)
    if not grad_enabled() or not (x.requires_grad or b.requires_grad):
        return Tensor(out)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2, 3)))

    return Tensor(out, requires_grad=True, parents=(x, b), backward=backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(f"spatial dims differ: {a.data.shape} vs {b.data.shape}")
    out = np.concatenate([a.data, b.data], axis=0)
    if not grad_enabled() or not (a.requires_grad or b.requires_grad):
        return Tensor(out)
    ca = a.data.shape[0]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:ca])
        if b.requires_grad:
            b._accumulate(g[ca:])

    return Tensor(out, requires_grad=True, parents=(a, b), backward=backward)


def bce_with_logits_sum(z: Tensor, target: np.ndarray) -> Tensor:
    """Sum over voxels of the stable binary cross entropy on logits."""
    zd = z.data
    if zd.shape != target.shape:
        raise ValueError(f"shape mismatch: logits {zd.shape}, target {target.shape}")
    t = target.astype(zd.dtype)
    per_voxel = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    out = np.asarray(per_voxel.sum(), dtype=zd.dtype)
    if not grad_enabled() or not z.requires_grad:
        return Tensor(out)

    def backward(g):
        z._accumulate(g * (expit(zd) - t))

    return Tensor(out, requires_grad=True, parents=(z,), backward=backward)
