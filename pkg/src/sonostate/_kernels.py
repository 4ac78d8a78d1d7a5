"""Compiled inner loops for the tensor primitives (single-threaded, deterministic)."""

import numba
import numpy as np


@numba.njit(cache=True)
def maxpool_fwd(x, kh, kw, s, ho, wo):
    c, h, w = x.shape
    out = np.empty((c, ho, wo), x.dtype)
    idx = np.empty((c, ho, wo), np.int64)
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                r0 = i * s
                c0 = j * s
                best = x[ch, r0, c0]
                bi = (ch * h + r0) * w + c0
                for u in range(kh):
                    for v in range(kw):
                        val = x[ch, r0 + u, c0 + v]
                        if val > best:
                            best = val
                            bi = (ch * h + r0 + u) * w + c0 + v
                out[ch, i, j] = best
                idx[ch, i, j] = bi
    return out, idx


@numba.njit(cache=True)
def scatter_add(flat_idx, values, size):
    out = np.zeros(size, values.dtype)
    fi = flat_idx.ravel()
    vv = values.ravel()
    for n in range(fi.size):
        out[fi[n]] += vv[n]
    return out


@numba.njit(cache=True)
def col2im(dcols, c, h, w, kh, kw, s, ho, wo):
    """Sum (C, kh, kw, Ho, Wo) patch gradients back onto a CxHxW image."""
    dx = np.zeros((c, h, w), dcols.dtype)
    for ch in range(c):
        for u in range(kh):
            for v in range(kw):
                for i in range(ho):
                    r = i * s + u
                    for j in range(wo):
                        dx[ch, r, j * s + v] += dcols[ch, u, v, i, j]
    return dx


@numba.njit(cache=True)
def bilinear(img, xs, ys):
    """Bilinear samples at flat coordinate arrays; out-of-image corners add nothing."""
    h, w = img.shape
    n = xs.shape[0]
    out = np.zeros(n, np.float64)
    for k in range(n):
        x = xs[k]
        y = ys[k]
        if not (x > -1.0 and x < w and y > -1.0 and y < h):
            continue
        fx0 = np.floor(x)
        fy0 = np.floor(y)
        fx = x - fx0
        fy = y - fy0
        x0 = int(fx0)
        y0 = int(fy0)
        acc = 0.0
        for dy in range(2):
            wy = fy if dy else 1 - fy
            yi = y0 + dy
            for dx in range(2):
                wx = fx if dx else 1 - fx
                xi = x0 + dx
                wgt = wx * wy
                if xi >= 0 and xi < w and yi >= 0 and yi < h and wgt != 0:
                    acc += img[yi, xi] * wgt
        out[k] = acc
    return out


@numba.njit(cache=True)
def _bilinear_at(img, x, y):
    h, w = img.shape
    if not (x > -1.0 and x < w and y > -1.0 and y < h):
        return 0.0
    fx0 = np.floor(x)
    fy0 = np.floor(y)
    fx = x - fx0
    fy = y - fy0
    x0 = int(fx0)
    y0 = int(fy0)
    acc = 0.0
    for dy in range(2):
        wy = fy if dy else 1 - fy
        yi = y0 + dy
        for dx in range(2):
            wx = fx if dx else 1 - fx
            xi = x0 + dx
            wgt = wx * wy
            if xi >= 0 and xi < w and yi >= 0 and yi < h and wgt != 0:
                acc += img[yi, xi] * wgt
    return acc


@numba.njit(cache=True)
def rigid_warp(img, rinv, cx, cy, tx, ty):
    """Bilinear resampling of ``img`` at rinv @ (p - c - t) + c for every output pixel p."""
    h, w = img.shape
    out = np.zeros((h, w), np.float64)
    for i in range(h):
        oy = float(i) - cy - ty
        for j in range(w):
            ox = float(j) - cx - tx
            sx = rinv[0, 0] * ox + rinv[0, 1] * oy + cx
            sy = rinv[1, 0] * ox + rinv[1, 1] * oy + cy
            out[i, j] = _bilinear_at(img, sx, sy)
    return out


@numba.njit(cache=True)
def box_sum(img, r):
    """Sums and counts over (2r+1)^2 windows clipped to the image (summed-area table)."""
    h, w = img.shape
    sat = np.zeros((h + 1, w + 1), np.float64)
    for i in range(h):
        row = 0.0
        for j in range(w):
            row += img[i, j]
            sat[i + 1, j + 1] = sat[i, j + 1] + row
    s = np.empty((h, w), np.float64)
    n = np.empty((h, w), np.float64)
    for i in range(h):
        r0 = max(i - r, 0)
        r1 = min(i + r + 1, h)
        for j in range(w):
            c0 = max(j - r, 0)
            c1 = min(j + r + 1, w)
            s[i, j] = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
            n[i, j] = (r1 - r0) * (c1 - c0)
    return s, n
