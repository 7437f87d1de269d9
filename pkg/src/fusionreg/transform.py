"""Spatial transformation stack: velocity sampling, scaling-and-squaring
integration, warping, flow upsampling and Jacobian analytics.

Deformations are displacement fields in voxel units: a field u maps voxel x
to x + u(x), so the zero field is the identity transform. Sampling outside
the volume clamps to the border.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import (
    ShapeError,
    Tensor,
    add,
    exp,
    grad_axis,
    mul,
    record,
    scale,
    sub,
    take_channels,
    upsample2,
)

FULL, HALF = "full", "half"
VELOCITY, DEFORMATION = "velocity", "deformation"


@dataclass
class FlowField:
    """Dense 3-vector field at a stated scale."""

    field: Tensor  # (3, D, H, W)
    scale: str = FULL
    kind: str = DEFORMATION

    @property
    def shape(self):
        return self.field.shape


@dataclass
class GaussianFlowParams:
    """Mean and log-variance maps parameterizing the velocity posterior."""

    mu: Tensor      # (3, D, H, W) at half scale
    logvar: Tensor  # same shape

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(
                f"flow params shape mismatch {self.mu.shape} vs {self.logvar.shape}"
            )


def sample_velocity(params, rng=None):
    """Reparameterized draw v = mu + exp(logvar/2) * eps.

    With rng=None (deterministic inference) eps is zero and v is the mean.
    """
    if rng is None:
        return FlowField(params.mu, HALF, VELOCITY)
    eps = Tensor(
        rng.standard_normal(params.mu.shape).astype(params.mu.dtype)
    )
    std = exp(scale(params.logvar, 0.5))
    return FlowField(add(params.mu, mul(std, eps)), HALF, VELOCITY)


_grid_cache = {}


def _grid(shape, dtype):
    key = (shape, np.dtype(dtype).name)
    g = _grid_cache.get(key)
    if g is None:
        D, H, W = shape
        gz, gy, gx = np.meshgrid(
            np.arange(D, dtype=dtype),
            np.arange(H, dtype=dtype),
            np.arange(W, dtype=dtype),
            indexing="ij",
        )
        g = (gz.ravel(), gy.ravel(), gx.ravel())
        _grid_cache[key] = g
    return g


def _resolve_coords(flow_data, shape):
    """Voxel coordinates x+u(x), clamped to the border, plus interior masks."""
    D, H, W = shape
    gz, gy, gx = _grid(shape, flow_data.dtype)
    cz = gz + flow_data[0].ravel()
    cy = gy + flow_data[1].ravel()
    cx = gx + flow_data[2].ravel()
    masks = (
        (cz > 0) & (cz < D - 1),
        (cy > 0) & (cy < H - 1),
        (cx > 0) & (cx < W - 1),
    )
    np.clip(cz, 0, D - 1, out=cz)
    np.clip(cy, 0, H - 1, out=cy)
    np.clip(cx, 0, W - 1, out=cx)
    return cz, cy, cx, masks


def _warp_trilinear(vol, flow):
    """Differentiable pull-back resampling: out(x) = vol(x + u(x))."""
    C = vol.shape[0]
    shape = vol.shape[1:]
    D, H, W = shape
    n = D * H * W
    cz, cy, cx, masks = _resolve_coords(flow.data, shape)

    i0z = np.minimum(cz.astype(np.int32), D - 2)
    i0y = np.minimum(cy.astype(np.int32), H - 2)
    i0x = np.minimum(cx.astype(np.int32), W - 2)
    fz = cz - i0z
    fy = cy - i0y
    fx = cx - i0x

    volf = vol.data.reshape(C, n)
    out = np.empty((C, n), dtype=vol.dtype)
    _kernels.warp_gather(volf, i0z, i0y, i0x, fz, fy, fx, H, W, out)

    def bwd(g):
        gf = np.ascontiguousarray(g.reshape(C, n))
        dvol = np.zeros((C, n), dtype=g.dtype)
        dflow = np.empty((3, n), dtype=g.dtype)
        mz, my, mx = (m.astype(g.dtype) for m in masks)
        _kernels.warp_scatter(
            volf, gf, i0z, i0y, i0x, fz, fy, fx, mz, my, mx, H, W, dvol, dflow
        )
        return dvol.reshape(vol.shape), dflow.reshape(flow.shape)

    return record("warp", (vol, flow), out.reshape(vol.shape), bwd)


def _warp_nearest(vol, flow):
    C = vol.shape[0]
    shape = vol.shape[1:]
    D, H, W = shape
    cz, cy, cx, _ = _resolve_coords(flow.data, shape)
    iz = np.rint(cz).astype(np.int32)
    iy = np.rint(cy).astype(np.int32)
    ix = np.rint(cx).astype(np.int32)
    flat = (iz * H + iy) * W + ix
    out = vol.data.reshape(C, -1)[:, flat].reshape(vol.shape)
    return Tensor(out)


def warp(volume, psi, interp="trilinear"):
    """Warp a (C,D,H,W) volume by a full-scale deformation field.

    Trilinear mode is differentiable w.r.t. both operands; nearest mode is
    evaluation-only (hard label maps).
    """
    if psi.scale != FULL:
        raise ShapeError("warp: deformation is half-scale, upsample it first")
    if volume.shape[1:] != psi.field.shape[1:]:
        raise ShapeError(
            f"warp: volume {volume.shape} vs flow {psi.field.shape} spatial mismatch"
        )
    if interp == "trilinear":
        return _warp_trilinear(volume, psi.field)
    if interp == "nearest":
        return _warp_nearest(volume, psi.field)
    raise ValueError(f"unknown interpolation '{interp}'")


def integrate_ss(v, steps=7):
    """Exponentiate a stationary velocity field by scaling and squaring.

    u <- v / 2**steps, then `steps` times u <- u + u(x + u(x)).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    u = scale(v.field, 2.0 ** (-steps))
    for _ in range(steps):
        u = add(u, _warp_trilinear(u, u))
    return FlowField(u, v.scale, DEFORMATION)


def compose(outer, inner):
    """Deformation composing: apply `inner` first, then `outer`."""
    if outer.scale != inner.scale:
        raise ShapeError("compose: mismatched scales")
    warped = _warp_trilinear(outer.field, inner.field)
    return FlowField(add(inner.field, warped), outer.scale, DEFORMATION)


def upsample_flow(f):
    """Half-scale field to full-scale: double the grid and the displacements."""
    if f.scale != HALF:
        raise ShapeError("upsample_flow: field is already full-scale")
    return FlowField(scale(upsample2(f.field), 2.0), FULL, f.kind)


def jacobian_det(psi):
    """Per-voxel determinant of (I + grad u), via finite differences.

    One-sided differences on the faces keep the map defined on the whole
    grid, so folding percentages use the full voxel count.
    """
    if psi.kind != DEFORMATION:
        raise ShapeError("jacobian_det: expected a deformation field")
    u = psi.field
    j = [[None] * 3 for _ in range(3)]
    for d in range(3):
        comp = take_channels(u, d, d + 1)
        for a in range(3):
            g = grad_axis(comp, 1 + a)
            j[d][a] = add(g, 1.0) if d == a else g
    det = add(
        sub(
            mul(j[0][0], sub(mul(j[1][1], j[2][2]), mul(j[1][2], j[2][1]))),
            mul(j[0][1], sub(mul(j[1][0], j[2][2]), mul(j[1][2], j[2][0]))),
        ),
        mul(j[0][2], sub(mul(j[1][0], j[2][1]), mul(j[1][1], j[2][0]))),
    )
    return det


def njd(det_map):
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    d = det_map.data if isinstance(det_map, Tensor) else np.asarray(det_map)
    return 100.0 * float(np.count_nonzero(d <= 0.0)) / d.size
