"""Differentiable discrete palette selection via Gumbel-Softmax.

Noisy logits Y_n = logit_n + g_n with g = -log(-log(u)), u ~ U(eps, 1-eps),
give soft weights s = softmax(Y / tau). Early iterations use the soft mix of
palette colors; after the switch iteration the forward pass snaps to the
argmax one-hot while the backward pass keeps the soft Jacobian
(straight-through). Finalization is the plain argmax of the clean logits,
ties to the lowest index.

Noise is counter-based: a Philox stream keyed by (seed, iteration) makes the
draw for (iteration, voxel) independent of batch composition, so reruns and
per-voxel queries agree bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GUMBEL_EPS = 1e-10
DEFAULT_SWITCH_ITER = 3000

MODE_SOFT = "soft"
MODE_STRAIGHT_THROUGH = "straight_through"
MODE_DETERMINISTIC = "deterministic"  # zero noise, soft forward

# (start_iteration, tau) rows; each tau applies until the next row's start.
# Deliberately non-monotone: the 0.6 stretch re-warms exploration after the
# first hard phase before the final freeze.
DEFAULT_TAU_TABLE = ((0, 1.0), (1000, 0.8), (3000, 0.3), (4000, 0.6), (5000, 0.3), (6001, 0.1))

_M64 = (1 << 64) - 1


@dataclass(frozen=True)
class TemperatureSchedule:
    """Piecewise-constant tau over iterations."""

    table: tuple[tuple[int, float], ...] = DEFAULT_TAU_TABLE

    def __post_init__(self):
        if not self.table or self.table[0][0] != 0:
            raise ValueError("schedule must start at iteration 0")
        starts = [s for s, _ in self.table]
        if sorted(starts) != starts or len(set(starts)) != len(starts):
            raise ValueError("schedule starts must be strictly increasing")
        if any(t <= 0 for _, t in self.table):
            raise ValueError("temperatures must be positive")

    def tau_at(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        value = self.table[0][1]
        for start, tau in self.table:
            if iteration >= start:
                value = tau
            else:
                break
        return value


def mode_for(iteration: int, switch_iter: int = DEFAULT_SWITCH_ITER) -> str:
    """Soft mixing before switch_iter, straight-through from it onward."""
    return MODE_SOFT if iteration < switch_iter else MODE_STRAIGHT_THROUGH


@dataclass(frozen=True)
class GumbelSampler:
    """Deterministic per-(iteration, voxel) Gumbel noise source."""

    seed: int
    mode: str = MODE_SOFT

    def __post_init__(self):
        if self.mode not in (MODE_SOFT, MODE_STRAIGHT_THROUGH, MODE_DETERMINISTIC):
            raise ValueError(f"unknown sampler mode {self.mode!r}")

    def _bitgen(self, iteration: int) -> np.random.Philox:
        key = (int(self.seed) & _M64) | ((int(iteration) & _M64) << 64)
        return np.random.Philox(key=key)

    def noise_grid(self, iteration: int, n_voxels: int, n_colors: int) -> np.ndarray:
        """(n_voxels, n_colors) Gumbel noise for one iteration."""
        if self.mode == MODE_DETERMINISTIC:
            return np.zeros((n_voxels, n_colors))
        rng = np.random.Generator(self._bitgen(iteration))
        u = GUMBEL_EPS + (1.0 - 2.0 * GUMBEL_EPS) * rng.random(n_voxels * n_colors)
        return -np.log(-np.log(u)).reshape(n_voxels, n_colors)

    def noise_voxel(self, iteration: int, voxel: int, n_colors: int) -> np.ndarray:
        """(n_colors,) noise for one voxel; matches the grid slice exactly."""
        if self.mode == MODE_DETERMINISTIC:
            return np.zeros(n_colors)
        bg = self._bitgen(iteration)
        bg.advance(int(voxel) * n_colors)  # one uint64 per uniform double
        rng = np.random.Generator(bg)
        u = GUMBEL_EPS + (1.0 - 2.0 * GUMBEL_EPS) * rng.random(n_colors)
        return -np.log(-np.log(u))


def soft_weights(logits: np.ndarray, tau: float, noise: np.ndarray | None = None) -> np.ndarray:
    """softmax((logits + noise) / tau) along the last axis, max-subtracted."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    y = np.asarray(logits, dtype=np.float64)
    if noise is not None:
        y = y + np.asarray(noise, dtype=np.float64)
    y = y / tau
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    return e / e.sum(axis=-1, keepdims=True)


def _one_hot_argmax(s: np.ndarray) -> np.ndarray:
    idx = s.argmax(axis=-1)  # np.argmax: ties to the lowest index
    hard = np.zeros_like(s)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return hard


@dataclass
class ColorSelection:
    """Per-voxel palette mixing with cached state for the backward pass."""

    colors: np.ndarray  # (N, 3)
    soft: np.ndarray  # (N, C) soft weights (backward path in both modes)
    palette: np.ndarray  # (C, 3)
    tau: float
    mode: str

    def backward(self, g_colors: np.ndarray) -> np.ndarray:
        """Chain dL/d(voxel color) -> dL/d(logits), shape (N, C).

        Straight-through uses the identical soft Jacobian; only the forward
        differs. q_n = gC . palette_n; dL/dlogit_m = s_m (q_m - q . s) / tau.
        """
        q = np.asarray(g_colors, dtype=np.float64) @ self.palette.T  # (N, C)
        inner = (q * self.soft).sum(axis=-1, keepdims=True)
        return self.soft * (q - inner) / self.tau


def select_colors(
    logits: np.ndarray,
    palette: np.ndarray,
    tau: float,
    mode: str,
    noise: np.ndarray | None = None,
) -> ColorSelection:
    """Mix palette colors for a batch of voxels.

    logits: (N, C); palette: (C, 3); noise: (N, C) or None.
    Soft mode blends with s; straight-through snaps the forward to the noisy
    argmax one-hot.
    """
    pal = np.asarray(palette, dtype=np.float64)
    s = soft_weights(logits, tau, noise)
    if mode == MODE_STRAIGHT_THROUGH:
        forward = _one_hot_argmax(s)
    elif mode in (MODE_SOFT, MODE_DETERMINISTIC):
        forward = s
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ColorSelection(colors=forward @ pal, soft=s, palette=pal, tau=tau, mode=mode)


def voxel_color(
    logits: np.ndarray,
    palette: np.ndarray,
    tau: float,
    mode: str,
    noise: np.ndarray | None = None,
):
    """Single-voxel convenience: returns (rgb (3,), backward closure).

    The closure maps dL/d(rgb) to dL/d(logits) for this voxel.
    """
    sel = select_colors(np.asarray(logits)[None, :], palette, tau, mode,
                        None if noise is None else np.asarray(noise)[None, :])
    def grad(g_rgb: np.ndarray) -> np.ndarray:
        return sel.backward(np.asarray(g_rgb)[None, :])[0]
    return sel.colors[0], grad


def finalize(logits: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Hard palette index per voxel: argmax of clean logits, lowest index wins."""
    lg = np.asarray(logits)
    if lg.shape[-1] != len(palette):
        raise ValueError("logit count does not match palette size")
    return lg.argmax(axis=-1)
