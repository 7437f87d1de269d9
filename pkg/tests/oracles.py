"""Independent brute-force references used to pin expected values.

Everything here is deliberately naive (nested loops, direct summation) and
shares no code with the package implementation.
"""

import numpy as np


def conv3d_loops(x, w, b):
    """Seven nested loops, zero 'same' padding, cross-correlation."""
    ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    out = np.zeros((co, d, h, wd), dtype=np.float64)
    for o in range(co):
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    acc = float(b[o])
                    for i in range(ci):
                        for dz in range(kd):
                            for dy in range(kh):
                                for dx in range(kw):
                                    zz = z + dz - kd // 2
                                    yy = y + dy - kh // 2
                                    xx2 = xx + dx - kw // 2
                                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx2 < wd:
                                        acc += w[o, i, dz, dy, dx] * x[i, zz, yy, xx2]
                    out[o, z, y, xx] = acc
    return out


def trilinear_sample(vol, z, y, x):
    """Border-clamped trilinear lookup of one scalar volume at one point."""
    d, h, w = vol.shape
    z = min(max(z, 0.0), d - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    z0 = min(int(np.floor(z)), d - 2)
    y0 = min(int(np.floor(y)), h - 2)
    x0 = min(int(np.floor(x)), w - 2)
    fz, fy, fx = z - z0, y - y0, x - x0
    out = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                wt = (
                    (fz if dz else 1 - fz)
                    * (fy if dy else 1 - fy)
                    * (fx if dx else 1 - fx)
                )
                out += wt * vol[z0 + dz, y0 + dy, x0 + dx]
    return out


def warp_loops(vol, flow, nearest=False):
    """Per-voxel pull-back resampling of a (C,D,H,W) volume."""
    c, d, h, w = vol.shape
    out = np.zeros_like(vol, dtype=np.float64)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                sz = z + flow[0, z, y, x]
                sy = y + flow[1, z, y, x]
                sx = x + flow[2, z, y, x]
                if nearest:
                    iz = int(np.rint(min(max(sz, 0), d - 1)))
                    iy = int(np.rint(min(max(sy, 0), h - 1)))
                    ix = int(np.rint(min(max(sx, 0), w - 1)))
                    out[:, z, y, x] = vol[:, iz, iy, ix]
                else:
                    for ch in range(c):
                        out[ch, z, y, x] = trilinear_sample(vol[ch], sz, sy, sx)
    return out


def upsample2_loops(x):
    """Naive trilinear doubling, align-corners false, border clamped."""
    c, d, h, w = x.shape
    out = np.zeros((c, 2 * d, 2 * h, 2 * w), dtype=np.float64)
    for z in range(2 * d):
        for y in range(2 * h):
            for xx in range(2 * w):
                sz = (z + 0.5) / 2.0 - 0.5
                sy = (y + 0.5) / 2.0 - 0.5
                sx = (xx + 0.5) / 2.0 - 0.5
                for ch in range(c):
                    out[ch, z, y, xx] = trilinear_sample(x[ch], sz, sy, sx)
    return out


def box_sum_loops(x, window):
    """Direct window**3 sums with zero padding, spatial axes last."""
    h = window // 2
    lead = x.shape[:-3]
    d, hh, w = x.shape[-3:]
    out = np.zeros_like(x, dtype=np.float64)
    xf = x.reshape((-1, d, hh, w))
    of = out.reshape((-1, d, hh, w))
    for c in range(xf.shape[0]):
        for z in range(d):
            for y in range(hh):
                for xx in range(w):
                    acc = 0.0
                    for dz in range(-h, h + 1):
                        for dy in range(-h, h + 1):
                            for dx in range(-h, h + 1):
                                zz, yy, xx2 = z + dz, y + dy, xx + dx
                                if 0 <= zz < d and 0 <= yy < hh and 0 <= xx2 < w:
                                    acc += xf[c, zz, yy, xx2]
                    of[c, z, y, xx] = acc
    return out.reshape(lead + (d, hh, w))


def ncc_window_loops(i, j, window, eps=1e-5):
    """Squared Pearson correlation of each window's in-bounds samples,
    averaged over voxels (computed per window from first principles)."""
    h = window // 2
    d, hh, w = i.shape[-3:]
    iv = i.reshape(d, hh, w)
    jv = j.reshape(d, hh, w)
    total = 0.0
    for z in range(d):
        for y in range(hh):
            for x in range(w):
                a = iv[
                    max(z - h, 0) : z + h + 1,
                    max(y - h, 0) : y + h + 1,
                    max(x - h, 0) : x + h + 1,
                ].ravel()
                b = jv[
                    max(z - h, 0) : z + h + 1,
                    max(y - h, 0) : y + h + 1,
                    max(x - h, 0) : x + h + 1,
                ].ravel()
                n = a.size
                cross = (a * b).sum() - a.sum() * b.sum() / n
                va = (a * a).sum() - a.sum() ** 2 / n
                vb = (b * b).sum() - b.sum() ** 2 / n
                total += cross * cross / (va * vb + eps)
    return total / (d * hh * w)


def kl_direct(mu, logvar, lam):
    """Direct summation over elements and 6-neighbor edges."""
    _, d, h, w = mu.shape
    total = 0.0
    for comp in range(3):
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    deg = (
                        (z > 0) + (z < d - 1)
                        + (y > 0) + (y < h - 1)
                        + (x > 0) + (x < w - 1)
                    )
                    total += lam * deg * np.exp(logvar[comp, z, y, x])
                    total -= logvar[comp, z, y, x]
    for comp in range(3):
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    if z + 1 < d:
                        total += lam * (mu[comp, z + 1, y, x] - mu[comp, z, y, x]) ** 2
                    if y + 1 < h:
                        total += lam * (mu[comp, z, y + 1, x] - mu[comp, z, y, x]) ** 2
                    if x + 1 < w:
                        total += lam * (mu[comp, z, y, x + 1] - mu[comp, z, y, x]) ** 2
    return 0.5 * total / mu.size


def dice_counting(a_mask, b_mask):
    """2|A∩B| / (|A|+|B|) by explicit voxel counting."""
    inter = 0
    na = nb = 0
    af = a_mask.ravel()
    bf = b_mask.ravel()
    for i in range(af.size):
        if af[i]:
            na += 1
        if bf[i]:
            nb += 1
        if af[i] and bf[i]:
            inter += 1
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def dsc_counting(pred, gt, n_labels):
    """Per-foreground-class Dice with the empty-class conventions."""
    scores = []
    for c in range(1, n_labels):
        pc = pred == c
        gc = gt == c
        if not pc.any() and not gc.any():
            scores.append(1.0)
        elif not pc.any() or not gc.any():
            scores.append(0.0)
        else:
            scores.append(dice_counting(pc, gc))
    return scores, float(np.mean(scores))


def jacobian_det_fd(flow):
    """Symbolic 3x3 determinant over an independently computed finite
    difference gradient (central inside, one-sided on faces)."""
    grads = np.zeros((3, 3) + flow.shape[1:], dtype=np.float64)
    for comp in range(3):
        for ax in range(3):
            f = flow[comp]
            g = np.zeros_like(f, dtype=np.float64)
            sl = [slice(None)] * 3
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            sl[ax] = slice(1, -1)
            lo[ax] = slice(None, -2)
            hi[ax] = slice(2, None)
            g[tuple(sl)] = 0.5 * (f[tuple(hi)] - f[tuple(lo)])
            first = [slice(None)] * 3
            second = [slice(None)] * 3
            first[ax] = 0
            second[ax] = 1
            g[tuple(first)] = f[tuple(second)] - f[tuple(first)]
            first[ax] = -1
            second[ax] = -2
            g[tuple(first)] = f[tuple(first)] - f[tuple(second)]
            grads[comp, ax] = g
    j = grads.copy()
    for a in range(3):
        j[a, a] += 1.0
    return (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )


def euler_flow_translation(v_const, steps=1024):
    """Explicit Euler integration of a constant velocity: x' = v."""
    x = np.zeros(3)
    for _ in range(steps):
        x = x + np.asarray(v_const) / steps
    return x


def adam_scalar(grad_fn, x0, lr, n_steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Reference scalar Adam trace."""
    x, m, v = float(x0), 0.0, 0.0
    xs = []
    for t in range(1, n_steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        x -= lr * mh / (np.sqrt(vh) + eps)
        xs.append(x)
    return xs
