"""Compiled inner loops for 2×2 max pooling over NHWC arrays."""

import numba
import numpy as np


@numba.njit(cache=True)
def maxpool2_fwd(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    arg = np.empty((n, h // 2, w // 2, c), dtype=np.uint8)
    for a in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for k in range(c):
                    best = x[a, 2 * i, 2 * j, k]
                    bi = 0
                    v = x[a, 2 * i, 2 * j + 1, k]
                    if v > best:
                        best = v
                        bi = 1
                    v = x[a, 2 * i + 1, 2 * j, k]
                    if v > best:
                        best = v
                        bi = 2
                    v = x[a, 2 * i + 1, 2 * j + 1, k]
                    if v > best:
                        best = v
                        bi = 3
                    out[a, i, j, k] = best
                    arg[a, i, j, k] = bi
    return out, arg


@numba.njit(cache=True)
def maxpool2_bwd(g, arg):
    n, oh, ow, c = g.shape
    dx = np.zeros((n, 2 * oh, 2 * ow, c), dtype=g.dtype)
    for a in range(n):
        for i in range(oh):
            for j in range(ow):
                for k in range(c):
                    q = arg[a, i, j, k]
                    dx[a, 2 * i + q // 2, 2 * j + q % 2, k] = g[a, i, j, k]
    return dx
