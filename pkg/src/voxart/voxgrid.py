"""Explicit voxel grids, exact ray traversal, and grid checkpoints.

Voxels are cubic and piecewise constant: a ray crossing a voxel contributes
one segment with the voxel's value over its full chord. Traversal computes
every axis-plane crossing analytically and reads each segment's voxel from
its midpoint, which sidesteps the usual DDA boundary-tie headaches while
staying exact: segment lengths always sum to the ray/box chord length.

Grid checkpoint format VXG1 (little-endian):
    magic   4 bytes  "VXG1"
    dims    4 x u32  Nx, Ny, Nz, C
    density Nx*Ny*Nz f32, x varying fastest
    values  Nx*Ny*Nz*C f32, channels contiguous per voxel, voxels x-fastest
C is 3 for a coarse-stage RGB grid and the palette size for a logit grid.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BoundingBox
from .numerics import sigmoid, sigmoid_grad, softplus, softplus_grad

VXG_MAGIC = b"VXG1"

# Segments shorter than this (in t units) are dropped: they are artifacts of
# rays grazing voxel corners/edges and carry no volume.
_MIN_SEGMENT = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid: resolution, world box, image-cell pairing.

    cell_size and image_width record the pixel pairing the grid was built
    for: one cell_size-pixel image cell spans exactly one voxel face when the
    camera extent matches the box.
    """

    resolution: tuple[int, int, int]
    bbox: BoundingBox
    cell_size: int
    image_width: int

    def __post_init__(self):
        if any(n < 1 for n in self.resolution):
            raise ValueError("resolution must be >= 1 per axis")
        if self.cell_size < 1 or self.image_width < 1:
            raise ValueError("cell_size and image_width must be >= 1")

    @property
    def voxel_edge(self) -> float:
        return float(self.bbox.longest_side * self.cell_size / self.image_width)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        _, ny, nz = self.resolution
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        _, ny, nz = self.resolution
        i, rem = np.divmod(np.asarray(flat), ny * nz)
        j, k = np.divmod(rem, nz)
        return np.stack([i, j, k], axis=-1)

    def voxel_centers(self) -> np.ndarray:
        """(Nx, Ny, Nz, 3) world-space voxel centers."""
        nx, ny, nz = self.resolution
        e = self.voxel_edge
        axes = [self.bbox.lo[a] + (np.arange(n) + 0.5) * e for a, n in enumerate((nx, ny, nz))]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def make_grid_spec(bbox: BoundingBox, image_width: int, cell_size: int) -> GridSpec:
    """Grid covering bbox with cubic voxels of edge = longest_side * cell_size / W.

    image_width must be divisible by cell_size. Per-axis counts are the box
    extents over the voxel edge, rounded to the nearest integer (covering
    counts for near-integer ratios; all supported pipelines hit exact ones).
    """
    if image_width % cell_size:
        raise ValueError("image_width must be divisible by cell_size")
    edge = bbox.longest_side * cell_size / image_width
    if edge <= 0:
        raise ValueError("bbox must have positive extent")
    counts = []
    for a in range(3):
        ratio = bbox.size[a] / edge
        n = int(round(ratio))
        if n < ratio - 1e-9:  # round would leave part of the box uncovered
            n += 1
        counts.append(max(1, n))
    return GridSpec(resolution=tuple(counts), bbox=bbox, cell_size=cell_size, image_width=image_width)


@dataclass
class DensityGrid:
    """Raw (pre-activation) density values; activation is softplus."""

    raw: np.ndarray

    def __post_init__(self):
        if self.raw.ndim != 3:
            raise ValueError("density raw must be (Nx, Ny, Nz)")

    @classmethod
    def zeros(cls, spec: GridSpec, fill: float = 0.0, dtype=np.float32) -> "DensityGrid":
        return cls(raw=np.full(spec.resolution, fill, dtype=dtype))

    def activated(self) -> np.ndarray:
        return softplus(self.raw)

    def activation_grad(self) -> np.ndarray:
        return softplus_grad(self.raw)


@dataclass
class ColorGrid:
    """Raw per-voxel RGB logits; activation is sigmoid per channel."""

    raw: np.ndarray

    def __post_init__(self):
        if self.raw.ndim != 4 or self.raw.shape[3] != 3:
            raise ValueError("color raw must be (Nx, Ny, Nz, 3)")

    @classmethod
    def zeros(cls, spec: GridSpec, fill: float = 0.0, dtype=np.float32) -> "ColorGrid":
        return cls(raw=np.full((*spec.resolution, 3), fill, dtype=dtype))

    def activated(self) -> np.ndarray:
        return sigmoid(self.raw)

    def activation_grad(self) -> np.ndarray:
        return sigmoid_grad(self.raw)


@dataclass
class LogitGrid:
    """Per-voxel palette logits, shape (Nx, Ny, Nz, C)."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError("logits must be (Nx, Ny, Nz, C)")

    @property
    def n_colors(self) -> int:
        return self.values.shape[3]


@dataclass(frozen=True)
class RaySegmentList:
    """Ordered voxel segments of one ray: (n,3) indices, entry/exit t values."""

    voxel: np.ndarray
    t_enter: np.ndarray
    t_exit: np.ndarray

    def __len__(self) -> int:
        return len(self.t_enter)

    @property
    def delta(self) -> np.ndarray:
        return self.t_exit - self.t_enter

    @property
    def t_mid(self) -> np.ndarray:
        return 0.5 * (self.t_enter + self.t_exit)


@dataclass(frozen=True)
class RaySegments:
    """CSR batch of ray segments over one grid.

    ray_ptr: (B+1,) int64; segments of ray b live in [ray_ptr[b], ray_ptr[b+1])
    voxel:   (S,) int64 flat voxel ids, t-ordered within each ray
    t_enter, t_exit: (S,) float64
    """

    ray_ptr: np.ndarray
    voxel: np.ndarray
    t_enter: np.ndarray
    t_exit: np.ndarray

    @property
    def n_rays(self) -> int:
        return len(self.ray_ptr) - 1

    @property
    def n_segments(self) -> int:
        return len(self.voxel)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.ray_ptr)

    @property
    def ray_of_segment(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rays), self.counts)

    @property
    def delta(self) -> np.ndarray:
        return self.t_exit - self.t_enter

    @property
    def t_mid(self) -> np.ndarray:
        return 0.5 * (self.t_enter + self.t_exit)

    def gather(self, rays: np.ndarray) -> "RaySegments":
        """Sub-batch for the given ray indices (repeats allowed), in order."""
        rays = np.asarray(rays, dtype=np.int64)
        counts = self.counts[rays]
        ptr = np.concatenate([[0], np.cumsum(counts)])
        starts = self.ray_ptr[rays]
        # Flat source indices: for each picked ray, a run start..start+count.
        idx = np.repeat(starts - ptr[:-1], counts) + np.arange(ptr[-1])
        return RaySegments(
            ray_ptr=ptr,
            voxel=self.voxel[idx],
            t_enter=self.t_enter[idx],
            t_exit=self.t_exit[idx],
        )

    @classmethod
    def from_lists(cls, spec: GridSpec, seg_lists: list[RaySegmentList]) -> "RaySegments":
        counts = [len(s) for s in seg_lists]
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if sum(counts):
            voxel = np.concatenate([spec.flat_index(s.voxel) for s in seg_lists if len(s)])
            t0 = np.concatenate([s.t_enter for s in seg_lists if len(s)])
            t1 = np.concatenate([s.t_exit for s in seg_lists if len(s)])
        else:
            voxel = np.zeros(0, dtype=np.int64)
            t0 = np.zeros(0)
            t1 = np.zeros(0)
        return cls(ray_ptr=ptr, voxel=voxel.astype(np.int64), t_enter=t0, t_exit=t1)


def _box_interval(lo, hi, origins, direction):
    """Per-ray [t0, t1] of ray/box overlap for t >= 0; t1 <= t0 means miss."""
    n = len(origins)
    t0 = np.zeros(n)
    t1 = np.full(n, np.inf)
    for a in range(3):
        d = direction[a]
        o = origins[:, a]
        if abs(d) > 1e-300:
            ta = (lo[a] - o) / d
            tb = (hi[a] - o) / d
            t0 = np.maximum(t0, np.minimum(ta, tb))
            t1 = np.minimum(t1, np.maximum(ta, tb))
        else:
            outside = (o < lo[a]) | (o > hi[a])
            t1 = np.where(outside, -np.inf, t1)
    return t0, t1


def traverse_parallel(spec: GridSpec, origins: np.ndarray, direction: np.ndarray) -> RaySegments:
    """Exact traversal of many parallel rays (shared direction).

    Returns CSR segments sorted by t within each ray. Segments partition the
    ray/box intersection: deltas sum to the chord length. Zero-length corner
    grazes are dropped.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    nrm = np.linalg.norm(direction)
    if not np.isfinite(nrm) or nrm <= 0:
        raise ValueError("direction must be a nonzero vector")
    direction = direction / nrm
    lo, hi = spec.bbox.lo, spec.bbox.hi
    nx, ny, nz = spec.resolution
    edge = (hi - lo) / np.array([nx, ny, nz], dtype=np.float64)
    B = len(origins)

    t0, t1 = _box_interval(lo, hi, origins, direction)
    hit = t1 > t0 + _MIN_SEGMENT
    t0 = np.where(hit, t0, 0.0)
    t1 = np.where(hit, t1, 0.0)

    # Candidate boundaries: every axis plane crossing, plus entry and exit.
    cols = [t0[:, None], t1[:, None]]
    for a, n in enumerate((nx, ny, nz)):
        d = direction[a]
        if abs(d) <= 1e-300:
            continue
        planes = lo[a] + np.arange(n + 1) * edge[a]
        cols.append((planes[None, :] - origins[:, a : a + 1]) / d)
    times = np.concatenate(cols, axis=1)
    times = np.clip(times, t0[:, None], t1[:, None])
    times.sort(axis=1)

    starts = times[:, :-1]
    ends = times[:, 1:]
    deltas = ends - starts
    keep = deltas > _MIN_SEGMENT

    mids = 0.5 * (starts + ends)
    pos = origins[:, None, :] + mids[..., None] * direction[None, None, :]
    ijk = np.floor((pos - lo) / edge).astype(np.int64)
    np.clip(ijk, 0, np.array([nx - 1, ny - 1, nz - 1]), out=ijk)
    flat = spec.flat_index(ijk)

    counts = keep.sum(axis=1)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    sel = keep.ravel()  # row-major keeps per-ray t order
    return RaySegments(
        ray_ptr=ptr,
        voxel=flat.ravel()[sel],
        t_enter=starts.ravel()[sel],
        t_exit=ends.ravel()[sel],
    )


def traverse(spec: GridSpec, origin: np.ndarray, direction: np.ndarray) -> RaySegmentList:
    """Segments of a single ray through the grid (see traverse_parallel)."""
    batch = traverse_parallel(spec, np.asarray(origin, dtype=np.float64)[None, :], direction)
    return RaySegmentList(
        voxel=spec.unflatten(batch.voxel),
        t_enter=batch.t_enter,
        t_exit=batch.t_exit,
    )


def init_logits(color_grid: ColorGrid, palette_colors: np.ndarray, scale: float = 5.0) -> LogitGrid:
    """Seed palette logits from coarse-stage colors.

    logit[v, n] = -scale * ||rgb_v - palette_n||_2, so the argmax over n is
    the nearest palette color of each voxel.
    """
    pal = np.asarray(palette_colors, dtype=np.float64)
    if pal.ndim != 2 or pal.shape[1] != 3:
        raise ValueError("palette colors must be (C, 3)")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rgb = color_grid.activated()
    diff = rgb[..., None, :] - pal[None, None, None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    return LogitGrid(values=(-scale * dist).astype(np.float32))


def save_checkpoint(path: str | Path, density: DensityGrid, values: np.ndarray) -> None:
    """Write a VXG1 checkpoint. values is (Nx,Ny,Nz,3) RGB raw or (Nx,Ny,Nz,C) logits."""
    raw = np.asarray(density.raw, dtype=np.float32)
    vals = np.asarray(values, dtype=np.float32)
    if vals.shape[:3] != raw.shape:
        raise ValueError("density and value grids disagree on resolution")
    nx, ny, nz = raw.shape
    c = vals.shape[3]
    with open(path, "wb") as fh:
        fh.write(VXG_MAGIC)
        fh.write(struct.pack("<4I", nx, ny, nz, c))
        fh.write(raw.ravel(order="F").astype("<f4").tobytes())
        # x-fastest voxel order with the C channels contiguous per voxel
        fh.write(vals.transpose(3, 0, 1, 2).ravel(order="F").astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a VXG1 checkpoint -> (density raw (Nx,Ny,Nz), values (Nx,Ny,Nz,C))."""
    data = Path(path).read_bytes()
    if data[:4] != VXG_MAGIC:
        raise ValueError("not a VXG1 checkpoint")
    nx, ny, nz, c = struct.unpack_from("<4I", data, 4)
    n = nx * ny * nz
    off = 4 + 16
    need = off + 4 * n * (1 + c)
    if len(data) != need:
        raise ValueError(f"checkpoint truncated: expected {need} bytes, got {len(data)}")
    dens = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape((nx, ny, nz), order="F")
    vals = (
        np.frombuffer(data, dtype="<f4", count=n * c, offset=off + 4 * n)
        .reshape((c, nx, ny, nz), order="F")
        .transpose(1, 2, 3, 0)
    )
    return dens.copy(), vals.copy()
