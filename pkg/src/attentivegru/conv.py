"""Spatial ops on NCHW tensors: convolution, deformable convolution, pooling, resizing."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import Tensor, count_macs, note_branch, record

__all__ = [
    "ShapeError",
    "conv2d",
    "pad2d",
    "deform_conv2d",
    "max_pool2d",
    "avg_pool2d",
    "upsample_nearest2d",
    "resize_bilinear",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _out_size(n: int, k: int, stride: int, total_pad: int, what: str) -> int:
    span = n + total_pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{what}: input {n} with kernel {k}, padding {total_pad}, stride {stride} "
            "does not give an integer output size"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({o},)")
    ho = _out_size(h, kh, stride, 2 * padding, "conv2d rows")
    wo = _out_size(w, kw, stride, 2 * padding, "conv2d cols")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    count_macs(n * o * ho * wo * c * kh * kw)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record(np.ascontiguousarray(out), inputs, backward)


def pad2d(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad (positive) or crop (negative) as ``(top, bottom, left, right)``."""
    top, bottom, left, right = pads
    n, c, h, w = x.shape
    src = x.data[:, :, max(-top, 0):h - max(-bottom, 0), max(-left, 0):w - max(-right, 0)]
    out = np.pad(src, ((0, 0), (0, 0), (max(top, 0), max(bottom, 0)), (max(left, 0), max(right, 0))))
    sh, sw = src.shape[2:]

    def backward(g):
        inner = g[:, :, max(top, 0):max(top, 0) + sh, max(left, 0):max(left, 0) + sw]
        full = np.zeros_like(x.data)
        full[:, :, max(-top, 0):max(-top, 0) + sh, max(-left, 0):max(-left, 0) + sw] = inner
        return (full,)

    return record(out, (x,), backward)


def _bilinear_matrices(py: np.ndarray, px: np.ndarray, h: int, w: int, dtype):
    """Sparse bilinear sampling matrix and its derivatives w.r.t. the sample rows/cols.

    ``py``/``px`` have shape ``(n, L)``. The returned ``(n*L, n*H*W)`` matrices
    map a channels-last stack of inputs to the sampled values (block diagonal
    over the batch). Corners outside the input get weight zero.
    """
    n, length = py.shape
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    row_ids = np.arange(n * length).reshape(n, length)
    batch_off = (np.arange(n) * (h * w))[:, None]
    rows, cols, wts, dys, dxs = [], [], [], [], []
    for dy_i, wy, dwy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx_i, wx, dwx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            yy = y0 + dy_i
            xx = x0 + dx_i
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            rows.append(row_ids[valid])
            cols.append((batch_off + yy * w + xx)[valid])
            wts.append((wy * wx)[valid])
            dys.append((dwy * wx)[valid])
            dxs.append((wy * dwx)[valid])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (n * length, n * h * w)

    def build(vals):
        return sparse.csr_matrix((np.concatenate(vals).astype(dtype), (rows, cols)), shape=shape)

    return build(wts), build(dys), build(dxs)


def deform_conv2d(x: Tensor, kernel: Tensor, offsets: Tensor,
                  bias: Tensor | None = None) -> Tensor:
    """Deformable convolution, stride 1, "same" output size.

    ``offsets[N, 2*S*S, H, W]`` holds one (x, y) displacement per kernel tap:
    channel ``2k`` shifts tap ``k`` along columns, channel ``2k+1`` along rows.
    Taps are ordered row-major over the S x S kernel. Samples are bilinear;
    samples outside the input read as zero.
    """
    if x.ndim != 4 or kernel.ndim != 4 or offsets.ndim != 4:
        raise ShapeError("deform_conv2d expects 4-d tensors")
    n, c, h, w = x.shape
    o, ck, s, s2 = kernel.shape
    if s != s2 or s % 2 == 0:
        raise ShapeError(f"deform_conv2d needs an odd square kernel, got {kernel.shape}")
    if ck != c:
        raise ShapeError(f"deform_conv2d channel mismatch: input has {c}, kernel expects {ck}")
    taps = s * s
    if offsets.shape != (n, 2 * taps, h, w):
        raise ShapeError(
            f"deform_conv2d offsets must have shape {(n, 2 * taps, h, w)} for kernel size {s}, "
            f"got {offsets.shape}"
        )
    pad = (s - 1) // 2
    hw = h * w
    length = taps * hw
    off = offsets.data.reshape(n, taps, 2, h, w)
    ky, kx = np.divmod(np.arange(taps), s)
    rows = np.arange(h)[None, None, :, None]
    cols = np.arange(w)[None, None, None, :]
    py = ((rows + (ky - pad)[None, :, None, None]).astype(x.dtype) + off[:, :, 1]).reshape(n, length)
    px = ((cols + (kx - pad)[None, :, None, None]).astype(x.dtype) + off[:, :, 0]).reshape(n, length)
    note_branch(np.floor(py).astype(np.int32))
    note_branch(np.floor(px).astype(np.int32))
    interp, d_row, d_col = _bilinear_matrices(py, px, h, w, x.dtype)

    xs = x.data.transpose(0, 2, 3, 1).reshape(n * hw, c)  # channels last
    sampled = np.asarray(interp @ xs)  # (n*taps*hw, c)
    colmat = sampled.reshape(n, taps, hw, c).transpose(0, 3, 1, 2).reshape(n, c * taps, hw)
    wmat = kernel.data.reshape(o, c * taps)
    out = np.matmul(wmat, colmat).reshape(n, o, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    count_macs(n * o * hw * c * taps)

    def backward(g):
        g3 = g.reshape(n, o, hw)
        gk = np.matmul(g3, colmat.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) \
            if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gcol = np.matmul(wmat.T, g3)  # (n, c*taps, hw)
        gs = gcol.reshape(n, c, taps, hw).transpose(0, 2, 3, 1).reshape(n * length, c)
        gx = None
        if x.requires_grad:
            gx = np.asarray(interp.T @ gs).reshape(n, h, w, c).transpose(0, 3, 1, 2).astype(x.dtype)
        goff = None
        if offsets.requires_grad:
            g_row = (np.asarray(d_row @ xs) * gs).sum(axis=1).reshape(n, taps, h, w)
            g_col = (np.asarray(d_col @ xs) * gs).sum(axis=1).reshape(n, taps, h, w)
            goff = np.stack([g_col, g_row], axis=2).reshape(offsets.shape).astype(x.dtype)
        grads = (gx, gk, goff)
        return grads + (gb,) if bias is not None else grads

    inputs = (x, kernel, offsets, bias) if bias is not None else (x, kernel, offsets)
    return record(out, inputs, backward)


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None, pad_value: float | None = None,
               padding: int = 0) -> Tensor:
    """Max pooling; ties route the gradient to the first (row-major) maximum."""
    stride = size if stride is None else stride
    n, c, h, w = x.shape
    fill = -np.inf if pad_value is None else pad_value
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) \
        if padding else x.data
    ho = _out_size(h, size, stride, 2 * padding, "max_pool2d rows")
    wo = _out_size(w, size, stride, 2 * padding, "max_pool2d cols")
    win = sliding_window_view(xp, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    note_branch(arg.astype(np.int32))
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        di, dj = np.divmod(arg, size)
        ni, ci, ii, jj = np.indices(arg.shape)
        np.add.at(gxp, (ni, ci, ii * stride + di, jj * stride + dj), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return record(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size),)

    return record(out, (x,), backward)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic linear interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize to ``size``; the identity when the size already matches."""
    n, c, h, w = x.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    ry = _interp_matrix(h, ho, x.dtype)
    rx = _interp_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return record(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))
