"""Fused numba kernels for multi-resolution hash-grid interpolation.

Layout: tables flattened to [L*T, F]; level ``l`` owns rows [l*T, (l+1)*T).
Points outside [0, 1] are clamped and get zero spatial gradient along the
clamped axis (right-derivative convention at the faces, matching torch.clamp).
"""
from __future__ import annotations

import numba
import numpy as np

P1 = np.int64(2654435761)
P2 = np.int64(805459861)


@numba.njit(cache=True, inline="always")
def _row(cx, cy, cz, res, dense, T):
    if dense:
        return cx + cy * (res + 1) + cz * (res + 1) * (res + 1)
    return (cx ^ (cy * P1) ^ (cz * P2)) & (T - 1)


@numba.njit(cache=True, inline="always")
def _locate(xa, res):
    # returns clamped cell index, fractional offset, clamp mask
    inside = 1.0
    if xa < 0.0:
        xa = 0.0
        inside = 0.0
    elif xa > 1.0:
        xa = 1.0
        inside = 0.0
    pos = xa * res
    c = np.floor(pos)
    if c > res - 1:
        c = res - 1
    return np.int64(c), pos - c, inside


@numba.njit(cache=True)
def encode_forward(x, table, res_arr, dense_arr, T, F, out):
    N = x.shape[0]
    L = res_arr.shape[0]
    for n in range(N):
        for l in range(L):
            res = res_arr[l]
            cx, fx, _ = _locate(x[n, 0], res)
            cy, fy, _ = _locate(x[n, 1], res)
            cz, fz, _ = _locate(x[n, 2], res)
            base = l * T
            for c in range(8):
                bx = c & 1
                by = (c >> 1) & 1
                bz = (c >> 2) & 1
                w = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
                r = base + _row(cx + bx, cy + by, cz + bz, res, dense_arr[l], T)
                for f in range(F):
                    out[n, l * F + f] += w * table[r, f]


@numba.njit(cache=True)
def encode_backward(g, x, table, res_arr, dense_arr, T, F, need_x, need_table, grad_x, grad_table):
    N = x.shape[0]
    L = res_arr.shape[0]
    for n in range(N):
        for l in range(L):
            res = res_arr[l]
            cx, fx, mx = _locate(x[n, 0], res)
            cy, fy, my = _locate(x[n, 1], res)
            cz, fz, mz = _locate(x[n, 2], res)
            base = l * T
            for c in range(8):
                bx = c & 1
                by = (c >> 1) & 1
                bz = (c >> 2) & 1
                px = fx if bx else 1.0 - fx
                py = fy if by else 1.0 - fy
                pz = fz if bz else 1.0 - fz
                r = base + _row(cx + bx, cy + by, cz + bz, res, dense_arr[l], T)
                if need_table:
                    w = px * py * pz
                    for f in range(F):
                        grad_table[r, f] += w * g[n, l * F + f]
                if need_x:
                    s = 0.0
                    for f in range(F):
                        s += table[r, f] * g[n, l * F + f]
                    sx = 1.0 if bx else -1.0
                    sy = 1.0 if by else -1.0
                    sz = 1.0 if bz else -1.0
                    grad_x[n, 0] += res * mx * sx * py * pz * s
                    grad_x[n, 1] += res * my * px * sy * pz * s
                    grad_x[n, 2] += res * mz * px * py * sz * s


@numba.njit(cache=True)
def encode_double_backward(gg_x, gg_table, g, x, table, res_arr, dense_arr, T, F,
                           has_gg_x, has_gg_table, need_g, need_table, need_x, grad_g, grad_table, grad_x):
    """Vector-Jacobian products of ``encode_backward`` w.r.t. g, table and x."""
    N = x.shape[0]
    L = res_arr.shape[0]
    for n in range(N):
        for l in range(L):
            res = res_arr[l]
            cx, fx, mx = _locate(x[n, 0], res)
            cy, fy, my = _locate(x[n, 1], res)
            cz, fz, mz = _locate(x[n, 2], res)
            base = l * T
            for c in range(8):
                bx = c & 1
                by = (c >> 1) & 1
                bz = (c >> 2) & 1
                px = fx if bx else 1.0 - fx
                py = fy if by else 1.0 - fy
                pz = fz if bz else 1.0 - fz
                r = base + _row(cx + bx, cy + by, cz + bz, res, dense_arr[l], T)
                d = 0.0
                if has_gg_x:
                    sx = 1.0 if bx else -1.0
                    sy = 1.0 if by else -1.0
                    sz = 1.0 if bz else -1.0
                    d = res * (gg_x[n, 0] * mx * sx * py * pz
                               + gg_x[n, 1] * my * px * sy * pz
                               + gg_x[n, 2] * mz * px * py * sz)
                if need_g:
                    w = px * py * pz
                    for f in range(F):
                        acc = 0.0
                        if has_gg_table:
                            acc += w * gg_table[r, f]
                        if has_gg_x:
                            acc += d * table[r, f]
                        grad_g[n, l * F + f] += acc
                if need_table and has_gg_x:
                    for f in range(F):
                        grad_table[r, f] += d * g[n, l * F + f]
                if need_x:
                    sx = 1.0 if bx else -1.0
                    sy = 1.0 if by else -1.0
                    sz = 1.0 if bz else -1.0
                    r2 = res * res
                    if has_gg_x:
                        s = 0.0
                        for f in range(F):
                            s += table[r, f] * g[n, l * F + f]
                        # trilinear weights are multilinear: only mixed partials survive
                        grad_x[n, 0] += r2 * mx * s * (gg_x[n, 1] * my * sx * sy * pz + gg_x[n, 2] * mz * sx * py * sz)
                        grad_x[n, 1] += r2 * my * s * (gg_x[n, 0] * mx * sx * sy * pz + gg_x[n, 2] * mz * px * sy * sz)
                        grad_x[n, 2] += r2 * mz * s * (gg_x[n, 0] * mx * sx * py * sz + gg_x[n, 1] * my * px * sy * sz)
                    if has_gg_table:
                        s = 0.0
                        for f in range(F):
                            s += gg_table[r, f] * g[n, l * F + f]
                        grad_x[n, 0] += res * mx * sx * py * pz * s
                        grad_x[n, 1] += res * my * px * sy * pz * s
                        grad_x[n, 2] += res * mz * px * py * sz * s
