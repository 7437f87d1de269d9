"""Training objectives: local NCC similarity, KL smoothness regularizer,
folding penalty, FocalDice, and the unsupervised / semi-supervised totals
with missing-label masking.
"""

from dataclasses import dataclass

import numpy as np

from . import transform
from .tensor import (
    ShapeError,
    Tensor,
    add,
    box_sum,
    clamped_log,
    diff_axis,
    exp,
    mean_all,
    mul,
    powc,
    relu,
    scale,
    sub,
    sum_all,
    sum_spatial,
)


@dataclass
class LossConfig:
    sigma: float = 0.01        # weight of the KL term
    lambda_prec: float = 50.0  # smoothing precision inside the KL term
    mu_jd: float = 1e-5        # weight of the folding penalty
    alpha: float = 1.0         # segmentation term weight
    beta: float = 1.0          # registration-segmentation coupling weight
    ncc_window: int = 9
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    dice_eps: float = 1e-5

    def __post_init__(self):
        for f in ("sigma", "lambda_prec", "mu_jd", "alpha", "beta"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd")


_win_count_cache = {}


def _window_counts(shape, window, dtype):
    """In-bounds voxel count of each window (borders see smaller windows)."""
    key = (shape, window, np.dtype(dtype).name)
    counts = _win_count_cache.get(key)
    if counts is None:
        h = window // 2
        counts = np.ones((1,), dtype=dtype)
        per_axis = []
        for n in shape:
            idx = np.arange(n)
            per_axis.append(
                (np.minimum(idx + h, n - 1) - np.maximum(idx - h, 0) + 1).astype(dtype)
            )
        counts = (
            per_axis[0][:, None, None]
            * per_axis[1][None, :, None]
            * per_axis[2][None, None, :]
        )[None]
        _win_count_cache[key] = counts
    return counts


def ncc_local(i, j, window=9):
    """Mean squared local correlation over window**3 neighborhoods, in [0, 1].

    Window sums are zero-padded and each window is normalized by its
    in-bounds voxel count, so border windows measure the correlation of the
    samples they actually contain; the denominator carries a 1e-5 stabilizer.
    The similarity loss term is the negation of this value.
    """
    if i.shape != j.shape:
        raise ShapeError(f"ncc: shape mismatch {i.shape} vs {j.shape}")
    if i.shape[0] != 1:
        raise ShapeError(f"ncc: expected single-channel (1,D,H,W), got {i.shape}")
    inv_n = Tensor(1.0 / _window_counts(i.shape[1:], window, i.dtype))
    s_i = box_sum(i, window)
    s_j = box_sum(j, window)
    s_ii = box_sum(mul(i, i), window)
    s_jj = box_sum(mul(j, j), window)
    s_ij = box_sum(mul(i, j), window)
    cross = sub(s_ij, mul(mul(s_i, s_j), inv_n))
    var_i = sub(s_ii, mul(mul(s_i, s_i), inv_n))
    var_j = sub(s_jj, mul(mul(s_j, s_j), inv_n))
    cc2 = mul(cross, cross) / (add(mul(var_i, var_j), 1e-5))
    return mean_all(cc2)


_deg_cache = {}


def _degree_map(shape, dtype):
    """Number of in-grid 6-neighbors per voxel, shaped (1, D, H, W)."""
    key = (shape, np.dtype(dtype).name)
    deg = _deg_cache.get(key)
    if deg is None:
        D, H, W = shape
        deg = np.zeros((1, D, H, W), dtype=dtype)
        for ax, n in ((1, D), (2, H), (3, W)):
            face = np.full(n, 2.0, dtype=dtype)
            face[0] = face[-1] = 1.0
            sl = [None, None, None, None]
            sl[ax] = slice(None)
            deg += face[tuple(sl)]
        _deg_cache[key] = deg
    return deg


def kl_loss(params, lambda_prec):
    """Smoothness KL over the velocity posterior.

    0.5/N * [ sum(lambda*deg*sigma^2 - log sigma^2)
              + lambda * sum over 6-neighbor edges of squared mu differences ],
    N counting every element of the mean map (components included).
    """
    mu, logvar = params.mu, params.logvar
    deg = Tensor(_degree_map(mu.shape[1:], mu.dtype))
    sigma2 = exp(logvar)
    var_term = sum_all(sub(scale(mul(sigma2, deg), lambda_prec), logvar))
    edge = None
    for ax in (1, 2, 3):
        d = diff_axis(mu, ax)
        s = sum_all(mul(d, d))
        edge = s if edge is None else add(edge, s)
    total = add(var_term, scale(edge, lambda_prec))
    return scale(total, 0.5 / mu.size)


def jd_loss(psi):
    """Mean hinge on folding: mean(max(0, -det J))."""
    det = transform.jacobian_det(psi)
    return mean_all(relu(scale(det, -1.0)))


def focal_dice(pred, target, cfg):
    """Sum of a soft Dice loss and a focal cross-entropy.

    pred is a per-voxel probability map over channels; target is a
    probability or one-hot map of the same shape.
    """
    if pred.shape != target.shape:
        raise ShapeError(
            f"focal_dice: shape mismatch {pred.shape} vs {target.shape}"
        )
    eps = cfg.dice_eps
    inter = sum_spatial(mul(pred, target))
    p_sum = sum_spatial(pred)
    t_sum = sum_spatial(target)
    dice_c = (scale(inter, 2.0) + eps) / (add(p_sum, t_sum) + eps)
    dice_loss = sub(1.0, mean_all(dice_c))

    n_vox = pred.size // pred.shape[0]
    ce = mul(mul(target, powc(sub(1.0, pred), cfg.focal_gamma)), clamped_log(pred))
    focal = scale(sum_all(ce), -cfg.focal_alpha / n_vox)
    return add(dice_loss, focal)


def unsupervised_loss(fixed, warped, params, psi, cfg):
    """-NCC + sigma*KL + mu_jd*JD; returns (total, per-term breakdown)."""
    ncc = ncc_local(fixed, warped, cfg.ncc_window)
    kl = kl_loss(params, cfg.lambda_prec)
    jd = jd_loss(psi)
    total = add(add(scale(ncc, -1.0), scale(kl, cfg.sigma)), scale(jd, cfg.mu_jd))
    breakdown = {
        "ncc": ncc.item(),
        "kl": kl.item(),
        "jd": jd.item(),
        "seg": 0.0,
        "fuse": 0.0,
    }
    return total, breakdown


def one_hot(labels, n_labels, dtype=np.float32):
    """Integer label map (D,H,W) -> one-hot (n_labels,D,H,W) constant tensor."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() >= n_labels:
        raise ValueError(
            f"label ids must lie in [0, {n_labels}), got [{lab.min()}, {lab.max()}]"
        )
    out = np.zeros((n_labels,) + lab.shape, dtype=dtype)
    for c in range(n_labels):
        out[c] = lab == c
    return Tensor(out)


def semisupervised_loss(
    fixed,
    warped,
    params,
    psi,
    seg_f,
    seg_m,
    labels_f,
    labels_m,
    n_labels,
    cfg,
):
    """Unsupervised total plus segmentation and coupling terms.

    labels_f / labels_m are integer maps or None; every FocalDice term whose
    label operand is missing is dropped. Soft maps and one-hot labels are
    warped with trilinear interpolation so gradients flow through psi.
    """
    total, breakdown = unsupervised_loss(fixed, warped, params, psi, cfg)

    lf = one_hot(labels_f, n_labels, seg_f.dtype) if labels_f is not None else None
    lm = one_hot(labels_m, n_labels, seg_m.dtype) if labels_m is not None else None

    seg_terms = []
    if lm is not None:
        seg_terms.append(focal_dice(seg_m, lm, cfg))
    if lf is not None:
        seg_terms.append(focal_dice(seg_f, lf, cfg))

    fuse_terms = []
    warped_seg_m = transform.warp(seg_m, psi)
    if lf is not None:
        fuse_terms.append(focal_dice(warped_seg_m, lf, cfg))
    if lm is not None:
        warped_lm = transform.warp(lm, psi)
        # the soft prediction sits in the target slot here, the warped
        # hard label in the prediction slot
        fuse_terms.append(focal_dice(warped_lm, seg_f, cfg))
        if lf is not None:
            fuse_terms.append(focal_dice(warped_lm, lf, cfg))

    if seg_terms:
        l_seg = seg_terms[0]
        for t in seg_terms[1:]:
            l_seg = add(l_seg, t)
        total = add(total, scale(l_seg, cfg.alpha))
        breakdown["seg"] = l_seg.item()
    if fuse_terms:
        l_fuse = fuse_terms[0]
        for t in fuse_terms[1:]:
            l_fuse = add(l_fuse, t)
        total = add(total, scale(l_fuse, cfg.beta))
        breakdown["fuse"] = l_fuse.item()
    return total, breakdown
