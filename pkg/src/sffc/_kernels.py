"""Optional numba kernels for the float32 hot paths.

Pure-numpy fallbacks in tensor.py stay authoritative (and are always used in
float64 mode, where conv must match the direct-convolution oracle bitwise).
Every kernel parallelizes over independent output slices only, so results do
not depend on the thread count and runs are reproducible.
"""

from __future__ import annotations

import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range


@njit(parallel=True, cache=True)
def conv2d_fwd(xp, w, stride, groups, out):
    """Direct grouped convolution; inner loop runs along contiguous rows."""
    bsz, _, _, _ = xp.shape
    cout, cing, kh, kw = w.shape
    _, _, oh, ow = out.shape
    m = cout // groups
    for b in prange(bsz):
        for co in range(cout):
            g = co // m
            for oy in range(oh):
                row = out[b, co, oy]
                for ci in range(cing):
                    cidx = g * cing + ci
                    for i in range(kh):
                        xrow = xp[b, cidx, oy * stride + i]
                        for j in range(kw):
                            wv = w[co, ci, i, j]
                            if stride == 1:
                                for ox in range(ow):
                                    row[ox] += wv * xrow[ox + j]
                            else:
                                for ox in range(ow):
                                    row[ox] += wv * xrow[ox * stride + j]


@njit(parallel=True, cache=True)
def conv2d_fwd_3x3(xp, w, groups, out):
    """3x3 stride-1 grouped convolution with a fully unrolled tap loop."""
    bsz = xp.shape[0]
    cout, cing = w.shape[0], w.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    m = cout // groups
    for b in prange(bsz):
        for co in range(cout):
            base = (co // m) * cing
            for ci in range(cing):
                plane = xp[b, base + ci]
                w00 = w[co, ci, 0, 0]; w01 = w[co, ci, 0, 1]; w02 = w[co, ci, 0, 2]
                w10 = w[co, ci, 1, 0]; w11 = w[co, ci, 1, 1]; w12 = w[co, ci, 1, 2]
                w20 = w[co, ci, 2, 0]; w21 = w[co, ci, 2, 1]; w22 = w[co, ci, 2, 2]
                for oy in range(oh):
                    row = out[b, co, oy]
                    x0 = plane[oy]
                    x1 = plane[oy + 1]
                    x2 = plane[oy + 2]
                    for ox in range(ow):
                        row[ox] += (w00 * x0[ox] + w01 * x0[ox + 1] + w02 * x0[ox + 2]
                                    + w10 * x1[ox] + w11 * x1[ox + 1] + w12 * x1[ox + 2]
                                    + w20 * x2[ox] + w21 * x2[ox + 1] + w22 * x2[ox + 2])


@njit(parallel=True, cache=True)
def conv2d_fwd_5x5(xp, w, groups, out):
    """5x5 stride-1 grouped convolution; taps unrolled per kernel row."""
    bsz = xp.shape[0]
    cout, cing = w.shape[0], w.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    m = cout // groups
    for b in prange(bsz):
        for co in range(cout):
            base = (co // m) * cing
            for ci in range(cing):
                plane = xp[b, base + ci]
                for oy in range(oh):
                    row = out[b, co, oy]
                    for i in range(5):
                        xr = plane[oy + i]
                        wi0 = w[co, ci, i, 0]; wi1 = w[co, ci, i, 1]; wi2 = w[co, ci, i, 2]
                        wi3 = w[co, ci, i, 3]; wi4 = w[co, ci, i, 4]
                        for ox in range(ow):
                            row[ox] += (wi0 * xr[ox] + wi1 * xr[ox + 1] + wi2 * xr[ox + 2]
                                        + wi3 * xr[ox + 3] + wi4 * xr[ox + 4])


@njit(parallel=True, cache=True)
def conv2d_bwd_w(xp, dout, stride, groups, dw):
    """dL/dW for the direct grouped convolution; parallel over out channels."""
    bsz = xp.shape[0]
    cout, cing, kh, kw = dw.shape
    oh, ow = dout.shape[2], dout.shape[3]
    m = cout // groups
    for co in prange(cout):
        g = co // m
        for ci in range(cing):
            cidx = g * cing + ci
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for b in range(bsz):
                        for oy in range(oh):
                            xrow = xp[b, cidx, oy * stride + i]
                            drow = dout[b, co, oy]
                            if stride == 1:
                                for ox in range(ow):
                                    acc += drow[ox] * xrow[ox + j]
                            else:
                                for ox in range(ow):
                                    acc += drow[ox] * xrow[ox * stride + j]
                    dw[co, ci, i, j] = acc


@njit(parallel=True, cache=True)
def maxpool_fwd(x, k, stride, pad, out):
    """Max pool with implicit -inf padding.

    Interior windows take a branch-free path; only border windows pay for
    bounds clipping.
    """
    bsz, ch, h, w = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for idx in prange(bsz * ch):
        b = idx // ch
        c = idx % ch
        plane = x[b, c]
        for oy in range(oh):
            y0 = oy * stride - pad
            ylo = -y0 if y0 < 0 else 0
            yhi = h - y0 if y0 + k > h else k
            for ox in range(ow):
                x0 = ox * stride - pad
                if 0 <= x0 and x0 + k <= w:
                    best = plane[y0 + ylo, x0]
                    for i in range(ylo, yhi):
                        prow = plane[y0 + i]
                        for j in range(k):
                            v = prow[x0 + j]
                            if v > best:
                                best = v
                else:
                    xlo = -x0 if x0 < 0 else 0
                    xhi = w - x0 if x0 + k > w else k
                    best = plane[y0 + ylo, x0 + xlo]
                    for i in range(ylo, yhi):
                        prow = plane[y0 + i]
                        for j in range(xlo, xhi):
                            v = prow[x0 + j]
                            if v > best:
                                best = v
                out[b, c, oy, ox] = best


@njit(parallel=True, cache=True)
def maxpool_bwd(x, out, g, k, stride, pad, gx):
    """Route each window's gradient to its first (row-major) max position.

    Windows of one (b, c) plane are handled by a single thread, so the
    overlapping scatter-adds never race.
    """
    bsz, ch, h, w = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for idx in prange(bsz * ch):
        b = idx // ch
        c = idx % ch
        plane = x[b, c]
        gplane = gx[b, c]
        for oy in range(oh):
            y0 = oy * stride - pad
            ylo = -y0 if y0 < 0 else 0
            yhi = h - y0 if y0 + k > h else k
            for ox in range(ow):
                x0 = ox * stride - pad
                xlo = -x0 if x0 < 0 else 0
                xhi = w - x0 if x0 + k > w else k
                target = out[b, c, oy, ox]
                done = False
                for i in range(ylo, yhi):
                    if done:
                        break
                    prow = plane[y0 + i]
                    for j in range(xlo, xhi):
                        if prow[x0 + j] == target:
                            gplane[y0 + i, x0 + j] += g[b, c, oy, ox]
                            done = True
                            break
