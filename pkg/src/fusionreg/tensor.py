"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous float32/float64 numpy buffer. Ops executed while
a Tape is active are recorded in order; backward() replays the tape once in
reverse, accumulating into the .grad slot of every leaf that requires_grad.
Feature maps follow (channel, depth, height, width) layout, x-fastest.

With no tape active every op is a plain numpy computation, which is the
inference path.
"""

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands do not satisfy an op's shape contract."""


class GradError(RuntimeError):
    """Backward pass rejected (non-scalar loss, non-finite values, ...)."""


class Tape:
    """Ordered record of ops for one forward pass, used as a context manager."""

    _active = []

    def __init__(self):
        self.ops = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active.pop()
        return False

    @staticmethod
    def current():
        return Tape._active[-1] if Tape._active else None


class _TapeOp:
    __slots__ = ("kind", "inputs", "out", "bwd")

    def __init__(self, kind, inputs, out, bwd):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {tuple(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} {tuple(self.shape)} {self.data.dtype.name}>"

    # operator sugar; python scalars become constant operands
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.dtype)
    if isinstance(b, Tensor):
        return _as_tensor(a, b.dtype), b
    raise TypeError("at least one operand must be a Tensor")


def record(kind, inputs, out_data, bwd):
    """Create the output tensor of an op and record it on the active tape.

    bwd(g) must return one gradient array (or None) per input, each freshly
    allocated so the accumulation loop may mutate it.
    """
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(
        t.requires_grad or t._tape is tape for t in inputs
    ):
        out._tape = tape
        out.node_id = len(tape.ops)
        tape.ops.append(_TapeOp(kind, inputs, out, bwd))
    return out


def backward(loss, check_finite=False):
    """Accumulate d(loss)/d(leaf) into .grad for every recorded leaf.

    Repeated calls keep accumulating. Intermediate gradients live in a
    transient map and are freed as soon as their producing op is processed.
    """
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not np.isfinite(loss.data).all():
        raise GradError("loss is not finite")
    tape = loss._tape
    if tape is None:
        raise GradError("loss was not recorded on an active tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.bwd(g)):
            if gi is None:
                continue
            if check_finite and not np.isfinite(gi).all():
                raise GradError(
                    f"non-finite gradient out of op '{op.kind}' (node {op.out.node_id})"
                )
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            elif t._tape is tape:
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = gi
                else:
                    acc += gi


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return np.ascontiguousarray(g)


def _check_same_dtype(*ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}")


# ---------------------------------------------------------------------------
# pointwise / arithmetic


def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        return _unbroadcast(g.copy(), a.shape), _unbroadcast(g.copy(), b.shape)

    return record("add", (a, b), out, bwd)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        return _unbroadcast(g.copy(), a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, bwd)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return record("mul", (a, b), out, bwd)


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}")
    bd, od = b.data, out

    def bwd(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * od / bd, b.shape)

    return record("div", (a, b), out, bwd)


def scale(a, k):
    k = float(k)

    def bwd(g):
        return (g * k,)

    return record("scale", (a,), a.data * k, bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return record("exp", (a,), out, bwd)


def clamped_log(a, floor=1e-8):
    """log(max(a, floor)); zero gradient where the clamp is active."""
    clamped = np.maximum(a.data, floor)
    mask = a.data > floor

    def bwd(g):
        return (g * mask / clamped,)

    return record("clamped_log", (a,), np.log(clamped), bwd)


def powc(a, p):
    """a**p for a >= 0 (constant exponent)."""
    p = float(p)
    ad = a.data
    out = ad**p

    def bwd(g):
        d = np.where(ad > 0, p * ad ** (p - 1.0), 0.0).astype(ad.dtype)
        return (g * d,)

    return record("powc", (a,), out, bwd)


def leaky_relu(a, slope=0.2):
    """max(x, slope*x); the subgradient at 0 uses `slope`."""
    out = np.empty_like(a.data)
    s = a.dtype.type(slope)
    _kernels.leaky_fwd(a.data, s, out)

    def bwd(g):
        dx = np.empty_like(g)
        _kernels.leaky_bwd(out, np.ascontiguousarray(g), s, dx)
        return (dx,)

    return record("leaky_relu", (a,), out, bwd)


def relu(a):
    pos = a.data > 0
    out = np.where(pos, a.data, 0.0).astype(a.dtype)

    def bwd(g):
        return (np.where(pos, g, 0.0).astype(g.dtype),)

    return record("relu", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    n = a.shape

    def bwd(g):
        return (np.full(n, g.item(), dtype=a.dtype),)

    return record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), bwd)


def mean_all(a):
    n = a.size
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g.item() / n, dtype=a.dtype),)

    return record("mean", (a,), np.asarray(a.data.mean(), dtype=a.dtype), bwd)


def sum_spatial(a):
    """Sum over all non-channel axes: (C, ...) -> (C,)."""
    axes = tuple(range(1, a.data.ndim))
    shape = a.shape

    def bwd(g):
        expand = g.reshape((shape[0],) + (1,) * (len(shape) - 1))
        return (np.broadcast_to(expand, shape).astype(a.dtype).copy(),)

    return record("sum_spatial", (a,), a.data.sum(axis=axes), bwd)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(tensors):
    _check_same_dtype(*tensors)
    base = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != base:
            raise ShapeError(
                f"concat: spatial mismatch {t.shape[1:]} vs {base}"
            )
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.shape[0] for t in tensors]

    def bwd(g):
        parts = []
        lo = 0
        for c in sizes:
            parts.append(g[lo : lo + c].copy())
            lo += c
        return tuple(parts)

    return record("concat_channels", tuple(tensors), out, bwd)


def take_channels(a, lo, hi):
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=a.dtype)
        full[lo:hi] = g
        return (full,)

    return record("take_channels", (a,), a.data[lo:hi].copy(), bwd)


def channel_softmax(a):
    """Softmax across axis 0; outputs are positive and sum to 1 per voxel."""
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=0, keepdims=True)
        return (out * (g - dot),)

    return record("channel_softmax", (a,), out, bwd)


# ---------------------------------------------------------------------------
# convolution / resampling / normalization


def _pad_spatial(x, pd, ph, pw):
    C, D, H, W = x.shape
    out = np.empty((C, D + 2 * pd, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    # zero only the border shells instead of the whole buffer
    if pd:
        out[:, :pd] = 0
        out[:, -pd:] = 0
    if ph:
        out[:, pd : pd + D, :ph] = 0
        out[:, pd : pd + D, -ph:] = 0
    if pw:
        out[:, pd : pd + D, ph : ph + H, :pw] = 0
        out[:, pd : pd + D, ph : ph + H, -pw:] = 0
    out[:, pd : pd + D, ph : ph + H, pw : pw + W] = x
    return out


def conv3d(x, w, b):
    """'Same' cross-correlation with zero padding and odd kernel extents."""
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(
            f"conv3d: expected (Ci,D,H,W) and (Co,Ci,kd,kh,kw), "
            f"got {x.shape} and {w.shape}"
        )
    Ci, D, H, W = x.shape
    Co, Ciw, kd, kh, kw = w.shape
    if Ciw != Ci:
        raise ShapeError(f"conv3d: input has {Ci} channels, weight expects {Ciw}")
    if b.shape != (Co,):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({Co},)")
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d: kernel extents must be odd, got {(kd, kh, kw)}")
    _check_same_dtype(x, w, b)

    wd, bd = w.data, b.data
    if (kd, kh, kw) == (1, 1, 1):
        w2 = wd.reshape(Co, Ci)
        out = (w2 @ x.data.reshape(Ci, -1) + bd[:, None]).reshape(Co, D, H, W)
        xd = x.data

        def bwd(g):
            gf = g.reshape(Co, -1)
            dx = (w2.T @ gf).reshape(Ci, D, H, W)
            dw = (gf @ xd.reshape(Ci, -1).T).reshape(w.shape)
            return dx, dw, gf.sum(axis=1)

        return record("conv3d", (x, w, b), out, bwd)

    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = _pad_spatial(x.data, pd, ph, pw)
    out = np.empty((Co, D, H, W), dtype=x.dtype)
    _kernels.conv3d_direct(xp, wd, bd, out)
    tape = Tape.current()
    need_dx = x.requires_grad or (tape is not None and x._tape is tape)

    def bwd(g):
        g = np.ascontiguousarray(g)
        dx = None
        if need_dx:
            # d/dinput is a 'same' conv of g with the flipped, transposed kernel
            wt = np.ascontiguousarray(
                wd.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
            )
            gp = _pad_spatial(g, pd, ph, pw)
            dx = np.empty((Ci, D, H, W), dtype=g.dtype)
            _kernels.conv3d_direct(gp, wt, np.zeros(Ci, dtype=g.dtype), dx)
        buf = np.zeros((D, Co, Ci, kd, kh, kw), dtype=g.dtype)
        _kernels.conv3d_dw(xp, g, buf)
        return dx, buf.sum(axis=0), g.sum(axis=(1, 2, 3))

    return record("conv3d", (x, w, b), out, bwd)


def avg_pool2(x):
    """Halve each spatial extent; each output is the mean of its 2x2x2 block."""
    C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: odd spatial extents {(D, H, W)}")
    r = x.data.reshape(C, D // 2, 2, H // 2, 2, W // 2, 2)
    out = r.mean(axis=(2, 4, 6))

    def bwd(g):
        t = (g / 8.0)[:, :, None, :, None, :, None]
        return (
            np.broadcast_to(t, (C, D // 2, 2, H // 2, 2, W // 2, 2))
            .reshape(C, D, H, W)
            .copy(),
        )

    return record("avg_pool2", (x,), out, bwd)


def _up2_axis(a, ax):
    # align_corners=False doubling: out[2k] = .25 a[k-1] + .75 a[k],
    # out[2k+1] = .75 a[k] + .25 a[k+1], borders clamped
    a = np.moveaxis(a, ax, -1)
    left = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    right = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    even = 0.25 * left + 0.75 * a
    odd = 0.75 * a + 0.25 * right
    out = np.stack([even, odd], axis=-1).reshape(a.shape[:-1] + (2 * a.shape[-1],))
    return np.moveaxis(out, -1, ax)


def _up2_axis_adj(g, ax):
    g = np.moveaxis(g, ax, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dx = 0.75 * ge + 0.75 * go
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, ax)


def upsample2(x):
    """Double each spatial extent by trilinear interpolation."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: expected (C,D,H,W), got {x.shape}")
    out = x.data
    for ax in (1, 2, 3):
        out = _up2_axis(out, ax)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def bwd(g):
        d = g
        for ax in (3, 2, 1):
            d = _up2_axis_adj(d, ax)
        return (np.ascontiguousarray(d, dtype=g.dtype),)

    return record("upsample2", (x,), out, bwd)


def instance_norm(x, gain, shift, eps=1e-5):
    """Per-channel standardization over the spatial axes, then gain/shift."""
    C, D, H, W = x.shape
    if D * H * W < 2:
        raise ShapeError("instance_norm: needs at least 2 voxels per channel")
    if gain.shape != (C,) or shift.shape != (C,):
        raise ShapeError(
            f"instance_norm: gain/shift must be ({C},), got {gain.shape}/{shift.shape}"
        )
    _check_same_dtype(x, gain, shift)
    out = np.empty_like(x.data)
    mean = np.empty(C, dtype=np.float64)
    inv = np.empty(C, dtype=np.float64)
    _kernels.inorm_fwd(x.data, gain.data, shift.data, float(eps), out, mean, inv)
    xd, gaind = x.data, gain.data

    def bwd(g):
        dx = np.empty_like(g)
        dgain = np.empty(C, dtype=g.dtype)
        dshift = np.empty(C, dtype=g.dtype)
        _kernels.inorm_bwd(
            xd, np.ascontiguousarray(g), gaind, mean, inv, dx, dgain, dshift
        )
        return dx, dgain, dshift

    return record("instance_norm", (x, gain, shift), out, bwd)


# ---------------------------------------------------------------------------
# windowed sums and finite differences (loss support)


def _box1d(a, ax, w):
    h = w // 2
    a = np.moveaxis(a, ax, -1)
    n = a.shape[-1]
    c = np.cumsum(a, axis=-1)
    hi = np.minimum(np.arange(n) + h, n - 1)
    lo = np.arange(n) - h - 1
    out = c[..., hi].copy()
    valid = lo >= 0
    out[..., valid] -= c[..., lo[valid]]
    return np.moveaxis(out, -1, ax)


def box_sum(x, window):
    """Sliding window**3 sum over the spatial axes with zero padding."""
    if window % 2 == 0:
        raise ShapeError(f"box_sum: window must be odd, got {window}")
    out = x.data
    for ax in range(x.data.ndim - 3, x.data.ndim):
        out = _box1d(out, ax, window)
    out = np.ascontiguousarray(out)
    nd = x.data.ndim

    def bwd(g):
        # the zero-padded box sum is self-adjoint
        d = g
        for ax in range(nd - 3, nd):
            d = _box1d(d, ax, window)
        return (np.ascontiguousarray(d),)

    return record("box_sum", (x,), out, bwd)


def diff_axis(x, ax):
    """Adjacent differences a[i+1]-a[i] along one axis (length shrinks by 1)."""
    out = np.diff(x.data, axis=ax)

    def bwd(g):
        d = np.zeros(x.shape, dtype=g.dtype)
        sl_hi = [slice(None)] * d.ndim
        sl_lo = [slice(None)] * d.ndim
        sl_hi[ax] = slice(1, None)
        sl_lo[ax] = slice(None, -1)
        d[tuple(sl_hi)] += g
        d[tuple(sl_lo)] -= g
        return (d,)

    return record("diff_axis", (x,), out, bwd)


def grad_axis(x, ax):
    """Spatial derivative: central differences inside, one-sided on the faces."""
    a = np.moveaxis(x.data, ax, -1)
    out = np.empty_like(a)
    out[..., 1:-1] = 0.5 * (a[..., 2:] - a[..., :-2])
    out[..., 0] = a[..., 1] - a[..., 0]
    out[..., -1] = a[..., -1] - a[..., -2]
    out = np.ascontiguousarray(np.moveaxis(out, -1, ax))

    def bwd(g):
        gm = np.moveaxis(g, ax, -1)
        d = np.zeros_like(gm)
        d[..., 2:] += 0.5 * gm[..., 1:-1]
        d[..., :-2] -= 0.5 * gm[..., 1:-1]
        d[..., 1] += gm[..., 0]
        d[..., 0] -= gm[..., 0]
        d[..., -1] += gm[..., -1]
        d[..., -2] -= gm[..., -1]
        return (np.ascontiguousarray(np.moveaxis(d, -1, ax)),)

    return record("grad_axis", (x,), out, bwd)
