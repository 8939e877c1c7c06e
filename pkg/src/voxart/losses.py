"""Loss terms and their analytic gradients w.r.t. rendered quantities.

Reduction convention for the squared-error terms: mean over rays, sum over
channels (an all-black vs all-white batch scores 3.0). Every function returns
(value, gradient(s)); gradients are plain numpy arrays shaped like the inputs.

Empty selections follow the zero convention: a depth batch whose supervision
mask is empty contributes value 0 and zero gradient rather than NaN.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import softplus, softplus_grad

# Depth supervision only trusts rays the model actually hits.
DEPTH_ALPHA_FLOOR = 0.1
# Accumulated alpha is clamped away from {0,1} inside the entropy.
ENTROPY_CLAMP = 1e-6

LOSS_CSV_HEADER = "iter,loss_total,loss_pixel,loss_depth,loss_alpha,loss_sem,tau,mode"


@dataclass(frozen=True)
class LossWeights:
    """Stage weights and their iteration switches.

    depth weight steps up from depth_early to depth_late at depth_switch_iter;
    the semantic weight drops to zero at clip_until_iter. Coarse-stage terms:
    bg_entropy and density_tv (the latter ships disabled).
    """

    pixel: float = 10.0
    depth_early: float = 20.0
    depth_late: float = 30.0
    depth_switch_iter: int = 4500
    alpha: float = 20.0
    clip: float = 1.0
    clip_until_iter: int = 6000
    bg_entropy: float = 0.5
    density_tv: float = 0.0

    def depth_at(self, iteration: int) -> float:
        return self.depth_early if iteration < self.depth_switch_iter else self.depth_late

    def clip_at(self, iteration: int) -> float:
        return self.clip if iteration < self.clip_until_iter else 0.0


def pixel_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rays of the per-ray channel-summed squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch")
    b = len(pred)
    if b == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    return float((diff**2).sum() / b), 2.0 * diff / b


def depth_loss(
    pred_depth: np.ndarray,
    gt_depth: np.ndarray,
    foreground: np.ndarray,
    acc_alpha: np.ndarray,
    alpha_floor: float = DEPTH_ALPHA_FLOOR,
) -> tuple[float, np.ndarray]:
    """L1 depth over foreground rays whose accumulated alpha clears the floor.

    The alpha floor acts as a constant gate: no gradient flows through the
    mask itself.
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    mask = np.asarray(foreground, dtype=bool) & (np.asarray(acc_alpha) > alpha_floor)
    grad = np.zeros_like(pred_depth)
    m = int(mask.sum())
    if m == 0:
        return 0.0, grad
    diff = pred_depth[mask] - gt[mask]
    grad[mask] = np.sign(diff) / m
    return float(np.abs(diff).sum() / m), grad


def alpha_loss(acc_alpha: np.ndarray, bg_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the batch of (mask * acc)^2; mask is 1 on background rays."""
    acc = np.asarray(acc_alpha, dtype=np.float64)
    mask = np.asarray(bg_mask, dtype=np.float64)
    b = len(acc)
    if b == 0:
        return 0.0, np.zeros_like(acc)
    masked = mask * acc
    return float((masked**2).sum() / b), 2.0 * masked * mask / b


def tv_loss(raw_density: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference of activated density over face-adjacent pairs.

    Returns the gradient w.r.t. the raw grid (softplus chained). Grids with no
    adjacent pairs score 0.
    """
    raw = np.asarray(raw_density, dtype=np.float64)
    act = softplus(raw)
    n_pairs = 0
    total = 0.0
    grad_act = np.zeros_like(act)
    for axis in range(3):
        if act.shape[axis] < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        d = act[tuple(hi)] - act[tuple(lo)]
        total += float((d**2).sum())
        n_pairs += d.size
        grad_act[tuple(hi)] += 2.0 * d
        grad_act[tuple(lo)] -= 2.0 * d
    if n_pairs == 0:
        return 0.0, np.zeros_like(raw)
    return total / n_pairs, grad_act * softplus_grad(raw) / n_pairs


def bg_entropy_loss(acc_alpha: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary entropy of accumulated alpha, pushing rays opaque-or-empty.

    acc is clamped to [1e-6, 1 - 1e-6] inside the log; the gradient is zero
    outside the clamp (constant region).
    """
    acc = np.asarray(acc_alpha, dtype=np.float64)
    b = len(acc)
    if b == 0:
        return 0.0, np.zeros_like(acc)
    a = np.clip(acc, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    ent = -(a * np.log(a) + (1.0 - a) * np.log(1.0 - a))
    grad = np.where(
        (acc > ENTROPY_CLAMP) & (acc < 1.0 - ENTROPY_CLAMP),
        np.log((1.0 - a) / a),
        0.0,
    ) / b
    return float(ent.sum() / b), grad


def semantic_loss(rendered: np.ndarray, target: np.ndarray, embedder) -> tuple[float, np.ndarray] | None:
    """1 - cosine(embed(rendered), embed(target)) and its pixel gradient.

    Delegates to the embedder; external adapters may fail, in which case the
    term is skipped and None is returned.
    """
    return embedder.pair_loss(rendered, target)


STAGE1 = "stage1"
STAGE2 = "stage2"

_STAGE1_PARTS = ("render", "tv", "bg_entropy")
_STAGE2_PARTS = ("pixel", "depth", "alpha", "semantic")


def part_weights(stage: str, iteration: int, weights: LossWeights) -> dict[str, float]:
    """Scalar weight per loss part for the given stage and iteration."""
    if stage == STAGE1:
        return {"render": 1.0, "tv": weights.density_tv, "bg_entropy": weights.bg_entropy}
    if stage == STAGE2:
        return {
            "pixel": weights.pixel,
            "depth": weights.depth_at(iteration),
            "alpha": weights.alpha,
            "semantic": weights.clip_at(iteration),
        }
    raise ValueError(f"unknown stage {stage!r}")


def total_loss(stage: str, iteration: int, parts: dict[str, float],
               weights: LossWeights | None = None) -> float:
    """Weighted sum of loss part values for a stage at an iteration."""
    weights = weights or LossWeights()
    w = part_weights(stage, iteration, weights)
    expected = _STAGE1_PARTS if stage == STAGE1 else _STAGE2_PARTS
    unknown = set(parts) - set(expected)
    if unknown:
        raise ValueError(f"unknown loss parts for {stage}: {sorted(unknown)}")
    return float(sum(w[name] * value for name, value in parts.items()))
