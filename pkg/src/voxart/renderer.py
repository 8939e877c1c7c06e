"""Differentiable over-compositing of voxel segments along rays.

Per ray with segments k = 1..N (optical thickness tau_k = d_k * delta_k):

    alpha_k = 1 - exp(-tau_k)
    T_k     = exp(-sum_{j<k} tau_j)
    w_k     = T_k * alpha_k = exp(-S_{k-1}) - exp(-S_k)
    color   = sum_k w_k * c_k            (+ (1 - acc) * background if composited)
    depth   = sum_k w_k * t_mid_k        (unnormalized expected termination)
    acc     = 1 - exp(-S_N)

The w_k form telescopes, so sum_k w_k + T_{N+1} = 1 to rounding and the
backward pass needs only one segmented suffix sum:

    dL/dtau_j = u_j * exp(-S_j) - sum_{k>j} u_k * w_k,
    u_k = gC . c_k + gD * t_mid_k + gA_eff

with gA_eff folding in the background composite chain. All accumulation runs
in float64 regardless of parameter storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .voxgrid import DensityGrid, RaySegments


@dataclass
class GradBuffer:
    """Per-parameter gradient accumulators for one optimization step.

    d_density: matches the raw density grid (softplus already chained).
    d_color:   (n_voxels, 3) w.r.t. the activated per-voxel colors; chaining
               into sigmoid RGB raws or palette logits is the color
               provider's job.
    """

    d_density: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros(cls, grid_shape: tuple[int, int, int]) -> "GradBuffer":
        n = int(np.prod(grid_shape))
        return cls(
            d_density=np.zeros(grid_shape, dtype=np.float64),
            d_color=np.zeros((n, 3), dtype=np.float64),
        )

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.d_density).all() and np.isfinite(self.d_color).all())


@dataclass
class RenderBatch:
    """Forward outputs plus the per-segment cache the backward pass needs."""

    segs: RaySegments
    color: np.ndarray  # (B, 3) composited when background given, else raw sum
    depth: np.ndarray  # (B,) sum w * t_mid; far value where the ray has no segments
    acc_alpha: np.ndarray  # (B,)
    background: np.ndarray | None
    # caches
    _tau: np.ndarray = field(repr=False, default=None)
    _t_exit_trans: np.ndarray = field(repr=False, default=None)  # exp(-S_k) per segment
    _weights: np.ndarray = field(repr=False, default=None)
    _seg_color: np.ndarray = field(repr=False, default=None)
    _act_grad: np.ndarray = field(repr=False, default=None)  # softplus' at gathered voxels
    _raw_color: np.ndarray = field(repr=False, default=None)  # pre-composite color sum

    @property
    def raw_color(self) -> np.ndarray:
        return self._raw_color


def _segmented_inclusive_cumsum(values: np.ndarray, segs: RaySegments) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive cumsum within each ray plus per-ray totals."""
    totals = np.bincount(segs.ray_of_segment, weights=values, minlength=segs.n_rays)
    cs = np.cumsum(values)
    before = np.concatenate([[0.0], np.cumsum(totals)])[:-1]
    incl = cs - np.repeat(before, segs.counts)
    return incl, totals


def render(
    segs: RaySegments,
    density: DensityGrid,
    voxel_colors: np.ndarray,
    background: np.ndarray | None = None,
    far: float = np.inf,
) -> RenderBatch:
    """Composite a batch of rays.

    voxel_colors: (n_voxels, 3) activated colors indexed by flat voxel id.
    background: optional RGB composited behind the volume (coarse-stage
    training uses white; pixel-art-stage ray losses leave it None).
    far: depth reported for rays with no segments.
    """
    act = density.activated().reshape(-1)
    act_grad = density.activation_grad().reshape(-1)
    vox = segs.voxel
    d = act[vox]
    tau = d * segs.delta
    incl, totals = _segmented_inclusive_cumsum(tau, segs)
    t_exit_trans = np.exp(-incl)
    t_enter_trans = np.exp(-(incl - tau))
    w = t_enter_trans - t_exit_trans  # T_k * alpha_k, telescoping form

    c = np.asarray(voxel_colors, dtype=np.float64)[vox]
    ray = segs.ray_of_segment
    B = segs.n_rays
    color = np.zeros((B, 3), dtype=np.float64)
    for ch in range(3):
        color[:, ch] = np.bincount(ray, weights=w * c[:, ch], minlength=B)
    depth = np.bincount(ray, weights=w * segs.t_mid, minlength=B)
    acc = -np.expm1(-totals)

    empty = segs.counts == 0
    if empty.any():
        depth = np.where(empty, far, depth)

    raw_color = color
    bg = None
    if background is not None:
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
        color = color + (1.0 - acc)[:, None] * bg

    return RenderBatch(
        segs=segs,
        color=color,
        depth=depth,
        acc_alpha=acc,
        background=bg,
        _tau=tau,
        _t_exit_trans=t_exit_trans,
        _weights=w,
        _seg_color=c,
        _act_grad=act_grad,
        _raw_color=raw_color,
    )


def backward(
    batch: RenderBatch,
    g_color: np.ndarray | None,
    g_depth: np.ndarray | None,
    g_acc: np.ndarray | None,
    grads: GradBuffer,
) -> None:
    """Accumulate dL/d(raw density) and dL/d(voxel color) into grads.

    g_color is w.r.t. batch.color (composited when a background was used; the
    composite chain to acc_alpha is handled here). Empty rays contribute
    nothing: their far-value depth is a reporting convention, not a function
    of the parameters.
    """
    segs = batch.segs
    B = segs.n_rays
    gC = np.zeros((B, 3)) if g_color is None else np.asarray(g_color, dtype=np.float64)
    gD = np.zeros(B) if g_depth is None else np.asarray(g_depth, dtype=np.float64)
    gA = np.zeros(B) if g_acc is None else np.asarray(g_acc, dtype=np.float64).copy()
    if batch.background is not None:
        gA = gA - gC @ batch.background  # d(composited)/d(acc) = -bg

    ray = segs.ray_of_segment
    u = (gC[ray] * batch._seg_color).sum(axis=1) + gD[ray] * segs.t_mid + gA[ray]
    uw = u * batch._weights
    incl, totals = _segmented_inclusive_cumsum(uw, segs)
    suffix = totals[ray] - incl  # sum over later segments of the same ray
    g_tau = u * batch._t_exit_trans - suffix

    g_act = np.bincount(segs.voxel, weights=g_tau * segs.delta, minlength=grads.d_color.shape[0])
    grads.d_density += (g_act * batch._act_grad).reshape(grads.d_density.shape)

    wgc = batch._weights[:, None] * gC[ray]
    for ch in range(3):
        grads.d_color[:, ch] += np.bincount(
            segs.voxel, weights=wgc[:, ch], minlength=grads.d_color.shape[0]
        )


def render_image(
    segs: RaySegments,
    density: DensityGrid,
    voxel_colors: np.ndarray,
    shape: tuple[int, int],
    background: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render a full pixel grid -> (color (H,W,3), depth (H,W), acc (H,W))."""
    batch = render(segs, density, voxel_colors, background=background, far=np.inf)
    H, W = shape
    return (
        batch.color.reshape(H, W, 3),
        batch.depth.reshape(H, W),
        batch.acc_alpha.reshape(H, W),
    )
