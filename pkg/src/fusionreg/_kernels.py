"""JIT-compiled inner loops for the hot primitives.

Everything here is plain array-in/array-out with no knowledge of the tape;
tensor.py wraps these into differentiable ops. Kernels are written once and
specialized by numba for float32 (training) and float64 (gradient checks).
The 3x3 in-plane case carries its own fully unrolled kernels because it
dominates the runtime; other odd kernel extents share a generic path.
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def _conv_generic(xp, w, b, out):
    Co, Ci, kd, kh, kw = w.shape
    D, H, W = out.shape[1], out.shape[2], out.shape[3]
    for z in prange(D):
        acc = np.empty((Co, W), dtype=xp.dtype)
        for y in range(H):
            for co in range(Co):
                for x in range(W):
                    acc[co, x] = b[co]
            for ci in range(Ci):
                for dz in range(kd):
                    for dy in range(kh):
                        row = xp[ci, z + dz, y + dy]
                        for dx in range(kw):
                            for co in range(Co):
                                wv = w[co, ci, dz, dy, dx]
                                for x in range(W):
                                    acc[co, x] += wv * row[x + dx]
            for co in range(Co):
                for x in range(W):
                    out[co, z, y, x] = acc[co, x]


@njit(parallel=True, fastmath=True, cache=True)
def _conv_33(xp, w, b, out):
    # (kh, kw) == (3, 3): all nine in-plane taps fused per accumulator pass
    Co, Ci, kd = w.shape[0], w.shape[1], w.shape[2]
    D, H, W = out.shape[1], out.shape[2], out.shape[3]
    for z in prange(D):
        acc = np.empty((Co, W), dtype=xp.dtype)
        for y in range(H):
            for co in range(Co):
                for x in range(W):
                    acc[co, x] = b[co]
            for ci in range(Ci):
                for dz in range(kd):
                    r0 = xp[ci, z + dz, y]
                    r1 = xp[ci, z + dz, y + 1]
                    r2 = xp[ci, z + dz, y + 2]
                    for co in range(Co):
                        w00 = w[co, ci, dz, 0, 0]
                        w01 = w[co, ci, dz, 0, 1]
                        w02 = w[co, ci, dz, 0, 2]
                        w10 = w[co, ci, dz, 1, 0]
                        w11 = w[co, ci, dz, 1, 1]
                        w12 = w[co, ci, dz, 1, 2]
                        w20 = w[co, ci, dz, 2, 0]
                        w21 = w[co, ci, dz, 2, 1]
                        w22 = w[co, ci, dz, 2, 2]
                        a = acc[co]
                        for x in range(W):
                            a[x] += (
                                w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2]
                                + w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2]
                                + w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2]
                            )
            for co in range(Co):
                for x in range(W):
                    out[co, z, y, x] = acc[co, x]


def conv3d_direct(xp, w, b, out):
    """Cross-correlation of a zero-padded volume with an odd kernel.

    xp:  (Ci, D+kd-1, H+kh-1, W+kw-1) padded input
    w:   (Co, Ci, kd, kh, kw)
    out: (Co, D, H, W), overwritten
    """
    if w.shape[3] == 3 and w.shape[4] == 3:
        _conv_33(xp, w, b, out)
    else:
        _conv_generic(xp, w, b, out)


@njit(parallel=True, fastmath=True, cache=True)
def _dw_generic(xp, g, buf):
    D, Co, Ci, kd, kh, kw = buf.shape
    H, W = g.shape[2], g.shape[3]
    for z in prange(D):
        for y in range(H):
            for co in range(Co):
                grow = g[co, z, y]
                for ci in range(Ci):
                    for dz in range(kd):
                        for dy in range(kh):
                            xrow = xp[ci, z + dz, y + dy]
                            for dx in range(kw):
                                s = xrow.dtype.type(0.0)
                                for x in range(W):
                                    s += grow[x] * xrow[x + dx]
                                buf[z, co, ci, dz, dy, dx] += s


@njit(parallel=True, fastmath=True, cache=True)
def _dw_33(xp, g, buf):
    D, Co, Ci, kd = buf.shape[0], buf.shape[1], buf.shape[2], buf.shape[3]
    H, W = g.shape[2], g.shape[3]
    for z in prange(D):
        for y in range(H):
            for co in range(Co):
                grow = g[co, z, y]
                for ci in range(Ci):
                    for dz in range(kd):
                        r0 = xp[ci, z + dz, y]
                        r1 = xp[ci, z + dz, y + 1]
                        r2 = xp[ci, z + dz, y + 2]
                        zero = grow.dtype.type(0.0)
                        s00 = zero; s01 = zero; s02 = zero
                        s10 = zero; s11 = zero; s12 = zero
                        s20 = zero; s21 = zero; s22 = zero
                        for x in range(W):
                            gv = grow[x]
                            s00 += gv * r0[x]
                            s01 += gv * r0[x + 1]
                            s02 += gv * r0[x + 2]
                            s10 += gv * r1[x]
                            s11 += gv * r1[x + 1]
                            s12 += gv * r1[x + 2]
                            s20 += gv * r2[x]
                            s21 += gv * r2[x + 1]
                            s22 += gv * r2[x + 2]
                        buf[z, co, ci, dz, 0, 0] += s00
                        buf[z, co, ci, dz, 0, 1] += s01
                        buf[z, co, ci, dz, 0, 2] += s02
                        buf[z, co, ci, dz, 1, 0] += s10
                        buf[z, co, ci, dz, 1, 1] += s11
                        buf[z, co, ci, dz, 1, 2] += s12
                        buf[z, co, ci, dz, 2, 0] += s20
                        buf[z, co, ci, dz, 2, 1] += s21
                        buf[z, co, ci, dz, 2, 2] += s22


def conv3d_dw(xp, g, buf):
    """Per-z-slab partials of the weight gradient.

    buf: (D, Co, Ci, kd, kh, kw), zero-initialized; caller sums over axis 0
    so the reduction order stays fixed regardless of thread scheduling.
    """
    if buf.shape[4] == 3 and buf.shape[5] == 3:
        _dw_33(xp, g, buf)
    else:
        _dw_generic(xp, g, buf)


@njit(parallel=True, fastmath=True, cache=True)
def leaky_fwd(x, slope, out):
    n = x.size
    xf = x.reshape(n)
    of = out.reshape(n)
    for i in prange(n):
        v = xf[i]
        of[i] = v if v > 0 else v * slope


@njit(parallel=True, fastmath=True, cache=True)
def leaky_bwd(out, g, slope, dx):
    # slope > 0 preserves sign, so the stored output determines the branch
    n = out.size
    of = out.reshape(n)
    gf = g.reshape(n)
    df = dx.reshape(n)
    for i in prange(n):
        df[i] = gf[i] if of[i] > 0 else gf[i] * slope


@njit(parallel=True, fastmath=True, cache=True)
def inorm_fwd(x, gain, shift, eps, out, mean, inv):
    """Per-channel standardization; float64 accumulators for the statistics."""
    C = x.shape[0]
    n = x.shape[1] * x.shape[2] * x.shape[3]
    for c in prange(C):
        xc = x[c].reshape(n)
        s = 0.0
        ss = 0.0
        for i in range(n):
            v = xc[i]
            s += v
            ss += v * v
        m = s / n
        var = ss / n - m * m
        if var < 0.0:
            var = 0.0
        iv = 1.0 / np.sqrt(var + eps)
        mean[c] = m
        inv[c] = iv
        oc = out[c].reshape(n)
        a = gain[c] * x.dtype.type(iv)
        b = shift[c] - a * x.dtype.type(m)
        for i in range(n):
            oc[i] = a * xc[i] + b


@njit(parallel=True, fastmath=True, cache=True)
def inorm_bwd(x, g, gain, mean, inv, dx, dgain, dshift):
    C = x.shape[0]
    n = x.shape[1] * x.shape[2] * x.shape[3]
    for c in prange(C):
        xc = x[c].reshape(n)
        gc = g[c].reshape(n)
        m = x.dtype.type(mean[c])
        iv = x.dtype.type(inv[c])
        sg = 0.0
        sgx = 0.0
        for i in range(n):
            xh = (xc[i] - m) * iv
            sg += gc[i]
            sgx += gc[i] * xh
        dgain[c] = sgx
        dshift[c] = sg
        k = gain[c] * iv
        mg = x.dtype.type(sg / n)
        mgx = x.dtype.type(sgx / n)
        dc = dx[c].reshape(n)
        for i in range(n):
            xh = (xc[i] - m) * iv
            dc[i] = k * (gc[i] - mg - xh * mgx)


@njit(parallel=True, fastmath=True, cache=True)
def warp_gather(volf, i0z, i0y, i0x, fz, fy, fx, H, W, out):
    """Trilinear gather: out[c, i] = volume sampled at the fractional coords."""
    C, n = volf.shape
    HW = H * W
    for i in prange(n):
        base = i0z[i] * HW + i0y[i] * W + i0x[i]
        az, ay, ax = fz[i], fy[i], fx[i]
        bz, by, bx = 1.0 - az, 1.0 - ay, 1.0 - ax
        w000 = bz * by * bx
        w001 = bz * by * ax
        w010 = bz * ay * bx
        w011 = bz * ay * ax
        w100 = az * by * bx
        w101 = az * by * ax
        w110 = az * ay * bx
        w111 = az * ay * ax
        for c in range(C):
            v = volf[c]
            out[c, i] = (
                v[base] * w000
                + v[base + 1] * w001
                + v[base + W] * w010
                + v[base + W + 1] * w011
                + v[base + HW] * w100
                + v[base + HW + 1] * w101
                + v[base + HW + W] * w110
                + v[base + HW + W + 1] * w111
            )


@njit(fastmath=True, cache=True)
def warp_scatter(volf, gf, i0z, i0y, i0x, fz, fy, fx, mz, my, mx, H, W, dvol, dflow):
    """Backward of the trilinear gather, serial for a fixed reduction order.

    dvol accumulates the scattered output gradient; dflow gets the dot of the
    output gradient with the sampled spatial derivative, masked where the
    source coordinate was clamped at the border.
    """
    C, n = volf.shape
    HW = H * W
    for i in range(n):
        base = i0z[i] * HW + i0y[i] * W + i0x[i]
        az, ay, ax = fz[i], fy[i], fx[i]
        bz, by, bx = 1.0 - az, 1.0 - ay, 1.0 - ax
        w000 = bz * by * bx
        w001 = bz * by * ax
        w010 = bz * ay * bx
        w011 = bz * ay * ax
        w100 = az * by * bx
        w101 = az * by * ax
        w110 = az * ay * bx
        w111 = az * ay * ax
        dzv = volf.dtype.type(0.0)
        dyv = volf.dtype.type(0.0)
        dxv = volf.dtype.type(0.0)
        for c in range(C):
            gv = gf[c, i]
            v = volf[c]
            v000 = v[base]
            v001 = v[base + 1]
            v010 = v[base + W]
            v011 = v[base + W + 1]
            v100 = v[base + HW]
            v101 = v[base + HW + 1]
            v110 = v[base + HW + W]
            v111 = v[base + HW + W + 1]
            d = dvol[c]
            d[base] += gv * w000
            d[base + 1] += gv * w001
            d[base + W] += gv * w010
            d[base + W + 1] += gv * w011
            d[base + HW] += gv * w100
            d[base + HW + 1] += gv * w101
            d[base + HW + W] += gv * w110
            d[base + HW + W + 1] += gv * w111
            dzv += gv * (
                (v100 - v000) * by * bx
                + (v101 - v001) * by * ax
                + (v110 - v010) * ay * bx
                + (v111 - v011) * ay * ax
            )
            dyv += gv * (
                (v010 - v000) * bz * bx
                + (v011 - v001) * bz * ax
                + (v110 - v100) * az * bx
                + (v111 - v101) * az * ax
            )
            dxv += gv * (
                (v001 - v000) * bz * by
                + (v011 - v010) * bz * ay
                + (v101 - v100) * az * by
                + (v111 - v110) * az * ay
            )
        dflow[0, i] = dzv * mz[i]
        dflow[1, i] = dyv * my[i]
        dflow[2, i] = dxv * mx[i]


def warm_up():
    """Force compilation of both dtype specializations (used by the CLI)."""
    for dt in (np.float32, np.float64):
        xp = np.zeros((1, 5, 5, 5), dtype=dt)
        x = np.zeros((1, 3, 3, 3), dtype=dt)
        b = np.zeros(1, dtype=dt)
        out = np.empty((1, 3, 3, 3), dtype=dt)
        w = np.zeros((1, 1, 3, 3, 3), dtype=dt)
        conv3d_direct(xp, w, b, out)
        w5 = np.zeros((1, 1, 5, 1, 1), dtype=dt)
        xp5 = np.zeros((1, 7, 3, 3), dtype=dt)
        conv3d_direct(xp5, w5, b, out)
        buf = np.zeros((3, 1, 1, 3, 3, 3), dtype=dt)
        conv3d_dw(xp, x, buf)
        buf5 = np.zeros((3, 1, 1, 5, 1, 1), dtype=dt)
        conv3d_dw(xp5, x, buf5)
        leaky_fwd(x, dt(0.2), out)
        leaky_bwd(out, x, dt(0.2), np.empty_like(x))
        c1 = np.zeros(1, dtype=dt)
        s64 = np.zeros(1, dtype=np.float64)
        inorm_fwd(x, c1, c1, 1e-5, out, s64.copy(), s64.copy())
        inorm_bwd(x, out, c1, s64, s64 + 1, np.empty_like(x), c1.copy(), c1.copy())
        idx = np.zeros(4, dtype=np.int32)
        fr = np.zeros(4, dtype=dt)
        flat = np.zeros((1, 27), dtype=dt)
        warp_gather(flat, idx, idx, idx, fr, fr, fr, 3, 3,
                    np.empty((1, 4), dtype=dt))
        warp_scatter(flat, np.zeros((1, 4), dtype=dt), idx, idx, idx,
                     fr, fr, fr, fr, fr, fr, 3, 3,
                     np.zeros((1, 27), dtype=dt), np.zeros((3, 4), dtype=dt))
