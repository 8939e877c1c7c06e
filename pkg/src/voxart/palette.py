"""Palette extraction over pooled pixel-art colors.

All strategies operate on a multiset of linear-RGB colors in [0,1]^3 with
plain Euclidean distance, take the target color count C in [2, 256], and are
deterministic given their seed. Internally the multiset is collapsed to
(distinct colors, counts); np.unique makes that collapse order-independent.

Strategies
    kmeans       Lloyd's algorithm with k-means++ seeding
    kmeans-rare  same, with rare colors' weights boosted first
    mediancut    classic box subdivision, arbitrary C
    maxmin       greedy farthest-point dispersion, deterministic
    anneal       simulated annealing over C-subsets of the distinct colors
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_COLORS = 2
MAX_COLORS = 256

KMEANS_MAX_ITERS = 100
KMEANS_SHIFT_TOL = 1e-6

ANNEAL_T0 = 0.1
ANNEAL_COOLING = 0.95
DEFAULT_ANNEAL_ITERS = 10_000
DEFAULT_BOOST_QUANTILE = 0.25

STRATEGY_NAMES = ("kmeans", "kmeans-rare", "mediancut", "maxmin", "anneal")


class InsufficientColorsError(ValueError):
    """Fewer distinct input colors than the requested palette size."""


@dataclass(frozen=True)
class Palette:
    """colors: (C, 3) float64, pairwise distinct, order fixed by the strategy."""

    colors: np.ndarray
    method: str
    seed: int | None = None

    def __post_init__(self):
        colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if colors.ndim != 2 or colors.shape[1] != 3:
            raise ValueError("palette colors must be (C, 3)")
        if not (MIN_COLORS <= len(colors) <= MAX_COLORS):
            raise ValueError(f"palette size must be in [{MIN_COLORS}, {MAX_COLORS}]")
        if len(np.unique(colors, axis=0)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")
        colors.flags.writeable = False
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.colors)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "colors": [[float(c) for c in row] for row in self.colors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Palette":
        return cls(colors=np.asarray(d["colors"], dtype=np.float64),
                   method=d["method"], seed=d.get("seed"))


def pool_views(views) -> np.ndarray:
    """Concatenate foreground cell colors from several PixelArtViews."""
    parts = [v.foreground_colors() for v in views]
    if not parts:
        return np.zeros((0, 3))
    return np.concatenate(parts, axis=0)


def _validate(pixels: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapse a pixel multiset to (distinct colors, counts); enforce preconditions."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if not (MIN_COLORS <= count <= MAX_COLORS):
        raise ValueError(f"palette size must be in [{MIN_COLORS}, {MAX_COLORS}]")
    colors, counts = np.unique(pixels, axis=0, return_counts=True)
    if len(colors) < count:
        raise InsufficientColorsError(
            f"need at least {count} distinct colors, got {len(colors)}"
        )
    return colors, counts.astype(np.float64)


def palette_energy(pixels: np.ndarray, colors: np.ndarray) -> float:
    """Sum over pixels of squared distance to the nearest palette color."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64)
    d2 = ((pixels[:, None, :] - colors[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def _weighted_energy(colors, counts, centers) -> float:
    d2 = ((colors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float((d2.min(axis=1) * counts).sum())


# ---------------------------------------------------------------------------
# k-means


def _kmeans_pp_seed(colors, counts, k, rng):
    n = len(colors)
    probs = counts / counts.sum()
    centers = np.empty((k, 3), dtype=np.float64)
    first = rng.choice(n, p=probs)
    centers[0] = colors[first]
    d2 = ((colors - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        weights = counts * d2
        total = weights.sum()
        if total <= 0:  # all remaining mass sits on chosen centers
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.choice(n, p=weights / total)
        centers[i] = colors[idx]
        d2 = np.minimum(d2, ((colors - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(colors, counts, centers, max_iters=KMEANS_MAX_ITERS, tol=KMEANS_SHIFT_TOL):
    k = len(centers)
    centers = centers.copy()
    for _ in range(max_iters):
        d2 = ((colors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            sel = assign == j
            mass = counts[sel].sum()
            if mass > 0:
                new[j] = (colors[sel] * counts[sel, None]).sum(axis=0) / mass
            else:
                # Empty cluster: reseed on the point farthest from its center.
                far = (d2.min(axis=1) * counts).argmax()
                new[j] = colors[far]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    return centers


def _dedupe_centers(centers, colors):
    """Nudge exact duplicate centroids apart by reseeding on distinct inputs."""
    if len(np.unique(centers, axis=0)) == len(centers):
        return centers
    used = {tuple(c) for c in centers}
    out = centers.copy()
    seen = set()
    for i, c in enumerate(out):
        key = tuple(c)
        if key not in seen:
            seen.add(key)
            continue
        for cand in colors:  # np.unique order: deterministic
            ck = tuple(cand)
            if ck not in used:
                out[i] = cand
                used.add(ck)
                seen.add(ck)
                break
    return out


def extract_kmeans(pixels, count: int, seed: int = 0) -> Palette:
    """Lloyd's k-means with k-means++ seeding on the color multiset."""
    colors, counts = _validate(pixels, count)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_seed(colors, counts, count, rng)
    centers = _lloyd(colors, counts, centers)
    centers = _dedupe_centers(centers, colors)
    return Palette(colors=centers, method="kmeans", seed=seed)


def extract_kmeans_rare_boost(
    pixels, count: int, seed: int = 0, boost_quantile: float = DEFAULT_BOOST_QUANTILE
) -> Palette:
    """k-means after boosting the weight of infrequent colors.

    Colors whose frequency falls strictly below the boost_quantile quantile of
    the frequency distribution have their weights scaled by a common factor so
    their total equals the median frequency. The factor is clamped to >= 1 (a
    boost, never a demotion); boost_quantile=0 therefore reduces to plain
    k-means, as does any input with a flat histogram.
    """
    if not (0.0 <= boost_quantile <= 1.0):
        raise ValueError("boost_quantile must be in [0, 1]")
    colors, counts = _validate(pixels, count)
    cutoff = np.quantile(counts, boost_quantile)
    rare = counts < cutoff
    boosted = counts.copy()
    rare_total = counts[rare].sum()
    if rare_total > 0:
        factor = max(1.0, float(np.median(counts)) / rare_total)
        boosted[rare] = counts[rare] * factor
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_seed(colors, boosted, count, rng)
    centers = _lloyd(colors, boosted, centers)
    centers = _dedupe_centers(centers, colors)
    return Palette(colors=centers, method="kmeans-rare", seed=seed)


# ---------------------------------------------------------------------------
# median cut


def extract_median_cut(pixels, count: int) -> Palette:
    """Split the widest box at its weighted median until C boxes exist.

    Ties on channel range go to the lowest channel index; the palette is the
    weighted mean of each final box, in box creation order.
    """
    colors, counts = _validate(pixels, count)
    boxes = [np.arange(len(colors))]
    while len(boxes) < count:
        ranges = []
        for bi, idx in enumerate(boxes):
            sub = colors[idx]
            r = sub.max(axis=0) - sub.min(axis=0) if len(idx) > 1 else np.zeros(3)
            ranges.append(r)
        ranges = np.asarray(ranges)
        widest = float(ranges.max())
        if widest <= 0:
            # Only singleton-color boxes left, yet fewer than C: cannot happen
            # when >= C distinct colors exist, but guard anyway.
            raise InsufficientColorsError("ran out of splittable boxes")
        bi = int(ranges.max(axis=1).argmax())
        ch = int(ranges[bi].argmax())
        idx = boxes[bi]
        sub = colors[idx]
        order = np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0], sub[:, ch]))
        sorted_idx = idx[order]
        w = counts[sorted_idx]
        cum = np.cumsum(w)
        split = int(np.searchsorted(cum, cum[-1] / 2.0, side="left")) + 1
        split = min(max(split, 1), len(idx) - 1)
        boxes[bi] = sorted_idx[:split]
        boxes.append(sorted_idx[split:])
    centers = np.array(
        [(colors[idx] * counts[idx, None]).sum(axis=0) / counts[idx].sum() for idx in boxes]
    )
    return Palette(colors=centers, method="mediancut")


# ---------------------------------------------------------------------------
# max-min dispersion


def _maxmin_indices(colors, counts, count: int) -> list[int]:
    mean = (colors * counts[:, None]).sum(axis=0) / counts.sum()
    d_mean = np.sqrt(((colors - mean) ** 2).sum(axis=1))
    chosen = [_argmax_lex(d_mean, colors)]
    min_d = np.sqrt(((colors - colors[chosen[0]]) ** 2).sum(axis=1))
    for _ in range(1, count):
        min_d[chosen] = -np.inf  # never re-pick
        nxt = _argmax_lex(min_d, colors)
        chosen.append(nxt)
        min_d = np.minimum(min_d, np.sqrt(((colors - colors[nxt]) ** 2).sum(axis=1)))
    return chosen


def _argmax_lex(values, colors) -> int:
    """Index of the max value; ties broken by lowest (r, g, b) lexicographic."""
    best = values.max()
    tied = np.flatnonzero(values >= best - 1e-12)
    if len(tied) == 1:
        return int(tied[0])
    sub = colors[tied]
    order = np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))
    return int(tied[order[0]])


def extract_maxmin(pixels, count: int) -> Palette:
    """Greedy dispersion: start farthest from the mean, then maximize the
    minimum distance to the colors already picked."""
    colors, counts = _validate(pixels, count)
    idx = _maxmin_indices(colors, counts, count)
    return Palette(colors=colors[idx], method="maxmin")


# ---------------------------------------------------------------------------
# simulated annealing


def extract_simanneal(
    pixels, count: int, seed: int = 0, iters: int = DEFAULT_ANNEAL_ITERS
) -> Palette:
    """Anneal a C-subset of the distinct colors under quantization energy.

    Moves swap one palette slot for a random unused distinct color; Metropolis
    acceptance with geometric cooling (T *= 0.95 every iters/100 steps, from
    T0 = 0.1). The best state ever visited is returned. The initial state is
    the max-min palette, so the result never scores worse than max-min.
    """
    colors, counts = _validate(pixels, count)
    rng = np.random.default_rng(seed)
    state = list(_maxmin_indices(colors, counts, count))
    energy = _weighted_energy(colors, counts, colors[state])
    best_state, best_energy = list(state), energy
    n = len(colors)
    if iters > 0 and n > count:
        in_state = np.zeros(n, dtype=bool)
        in_state[state] = True
        temp = ANNEAL_T0
        cool_every = max(1, iters // 100)
        for step in range(iters):
            slot = int(rng.integers(count))
            cand = int(rng.integers(n))
            while in_state[cand]:
                cand = int(rng.integers(n))
            old = state[slot]
            state[slot] = cand
            new_energy = _weighted_energy(colors, counts, colors[state])
            delta = new_energy - energy
            if delta <= 0 or rng.random() < np.exp(-delta / temp):
                in_state[old] = False
                in_state[cand] = True
                energy = new_energy
                if energy < best_energy:
                    best_energy = energy
                    best_state = list(state)
            else:
                state[slot] = old
            if (step + 1) % cool_every == 0:
                temp *= ANNEAL_COOLING
    return Palette(colors=colors[best_state], method="anneal", seed=seed)


def extract(
    method: str,
    pixels,
    count: int,
    seed: int = 0,
    *,
    boost_quantile: float = DEFAULT_BOOST_QUANTILE,
    anneal_iters: int = DEFAULT_ANNEAL_ITERS,
) -> Palette:
    """Dispatch by strategy name (see STRATEGY_NAMES)."""
    if method == "kmeans":
        return extract_kmeans(pixels, count, seed)
    if method == "kmeans-rare":
        return extract_kmeans_rare_boost(pixels, count, seed, boost_quantile)
    if method == "mediancut":
        return extract_median_cut(pixels, count)
    if method == "maxmin":
        return extract_maxmin(pixels, count)
    if method == "anneal":
        return extract_simanneal(pixels, count, seed, anneal_iters)
    raise ValueError(f"unknown palette method {method!r}")
