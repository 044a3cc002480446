"""Numpy (im2col) convolution kernels: the fallback backend.

Stride-1, zero-padded "same" convolution for odd kernel sizes. The column
matrix is materialized once per call and reused by the backward pass via
recomputation; at desk scale memory is not the constraint.
"""

from __future__ import annotations

import numpy as np


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B*H*W, C*kh*kw) patch matrix with zero padding."""
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # windows: (B, C, H, W, kh, kw) -> (B, H, W, C, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(cols).reshape(b * h * w, c * kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(f, -1).T
    if bias is not None:
        out += bias
    return out.reshape(b, h, wd, f).transpose(0, 3, 1, 2).copy()


def conv2d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Gradients (gx, gw, gb) of the same-padded stride-1 convolution."""
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    gcols = gy.transpose(0, 2, 3, 1).reshape(b * h * wd, f)
    gw = (gcols.T @ _im2col(x, kh, kw)).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    # input gradient = full correlation of gy with the kernel flipped in
    # space and transposed in channels
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx_cols = _im2col(gy, kh, kw) @ wflip.reshape(c, -1).T
    gx = gx_cols.reshape(b, h, wd, c).transpose(0, 3, 1, 2).copy()
    return gx, gw, gb
