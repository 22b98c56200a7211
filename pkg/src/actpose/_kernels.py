"""Compiled inner loops for dilated 1-D convolution.

Every reduction runs in a fixed order so results are bit-reproducible:
forward outputs start from the bias and accumulate over input channels
(outer) and kernel taps (inner). Loops are vectorised only across
independent outputs, never across a reduction.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv_forward(x, w, b, dilation):
    n_batch, n_in, length = x.shape
    n_out, _, width = w.shape
    t_out = length - (width - 1) * dilation
    wt = np.ascontiguousarray(w.transpose(1, 2, 0))
    out = np.empty((n_batch, t_out, n_out))
    for n in range(n_batch):
        for t in range(t_out):
            acc = out[n, t]
            for o in range(n_out):
                acc[o] = b[o]
            for c in range(n_in):
                for k in range(width):
                    xv = x[n, c, t + k * dilation]
                    wrow = wt[c, k]
                    for o in range(n_out):
                        acc[o] += xv * wrow[o]
    return np.ascontiguousarray(out.transpose(0, 2, 1))


@njit(cache=True)
def conv_backward_input(g, w, length, dilation):
    n_batch, n_out, t_out = g.shape
    _, n_in, width = w.shape
    wt = np.ascontiguousarray(w.transpose(2, 0, 1))
    gx = np.zeros((n_batch, length, n_in))
    for n in range(n_batch):
        for t in range(t_out):
            for k in range(width):
                acc = gx[n, t + k * dilation]
                for o in range(n_out):
                    gv = g[n, o, t]
                    wrow = wt[k, o]
                    for c in range(n_in):
                        acc[c] += gv * wrow[c]
    return np.ascontiguousarray(gx.transpose(0, 2, 1))


@njit(cache=True)
def conv_backward_params(g, x, width, dilation):
    """Weight gradient laid out as (C_in, K, C_out) plus the bias gradient."""
    n_batch, n_out, t_out = g.shape
    n_in = x.shape[1]
    gt = np.ascontiguousarray(g.transpose(0, 2, 1))
    gw = np.zeros((n_in, width, n_out))
    gb = np.zeros(n_out)
    for n in range(n_batch):
        for t in range(t_out):
            grow = gt[n, t]
            for o in range(n_out):
                gb[o] += grow[o]
            for c in range(n_in):
                for k in range(width):
                    xv = x[n, c, t + k * dilation]
                    dst = gw[c, k]
                    for o in range(n_out):
                        dst[o] += xv * grow[o]
    return gw, gb
