"""Hard voxel models and their on-disk formats (.vox, cube PLY, PNG).

Occupancy: a voxel is kept when its activated density d satisfies
d * voxel_edge >= ln 2, i.e. a single voxel chord absorbs at least half the
light. Colors are the finalized palette indices.

MagicaVoxel export writes "VOX " + version 150 with MAIN/SIZE/XYZI/RGBA
chunks. Grid axes map straight through (grid z = vox z = up); voxel color
bytes are palette index + 1 (index 0 is reserved by the format). The RGBA
chunk always holds 256 entries: palette colors first, zeros after, alpha 255
everywhere. Grids larger than 256 per axis cannot be exported (u8 coords).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import OrthoCamera
from .quantizer import finalize
from .voxgrid import DensityGrid, GridSpec, LogitGrid, traverse_parallel

VOX_VERSION = 150
VOX_MAX_DIM = 256

# Activated density whose alpha over one voxel edge reaches 1/2.
def occupancy_threshold(voxel_edge: float) -> float:
    return float(np.log(2.0) / voxel_edge)


@dataclass(frozen=True)
class QuantizedModel:
    """Hard model: per-voxel occupancy plus palette indices.

    occupancy: (Nx, Ny, Nz) bool
    indices:   (Nx, Ny, Nz) int, palette index (valid where occupied)
    palette:   (C, 3) float in [0, 1]
    """

    occupancy: np.ndarray
    indices: np.ndarray
    palette: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=bool)
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        pal = np.ascontiguousarray(self.palette, dtype=np.float64)
        if occ.shape != idx.shape or occ.ndim != 3:
            raise ValueError("occupancy and indices must be matching 3-d grids")
        if pal.ndim != 2 or pal.shape[1] != 3:
            raise ValueError("palette must be (C, 3)")
        if occ.any():
            used = idx[occ]
            if used.min() < 0 or used.max() >= len(pal):
                raise ValueError("palette index out of range")
        for arr in (occ, idx, pal):
            arr.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "palette", pal)

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())


def quantize_model(
    density: DensityGrid,
    logits: LogitGrid | np.ndarray,
    palette: np.ndarray,
    spec: GridSpec,
    threshold: float | None = None,
) -> QuantizedModel:
    """Harden a trained grid: threshold density, argmax palette logits."""
    lg = logits.values if isinstance(logits, LogitGrid) else np.asarray(logits)
    if threshold is None:
        threshold = occupancy_threshold(spec.voxel_edge)
    occ = density.activated() > threshold
    idx = finalize(lg, palette)
    return QuantizedModel(occupancy=occ, indices=idx, palette=np.asarray(palette, dtype=np.float64))


# ---------------------------------------------------------------------------
# MagicaVoxel


def _chunk(cid: bytes, content: bytes, children: bytes = b"") -> bytes:
    return cid + struct.pack("<II", len(content), len(children)) + content + children


def write_vox(model: QuantizedModel, path: str | Path) -> None:
    nx, ny, nz = model.occupancy.shape
    if max(nx, ny, nz) > VOX_MAX_DIM:
        raise ValueError(f".vox supports at most {VOX_MAX_DIM} voxels per axis")
    xyz = np.argwhere(model.occupancy)
    voxels = bytearray(struct.pack("<I", len(xyz)))
    for x, y, z in xyz:
        ci = int(model.indices[x, y, z]) + 1  # vox palette is 1-based
        voxels += struct.pack("<4B", int(x), int(y), int(z), ci)

    rgba = bytearray()
    pal8 = np.round(model.palette * 255.0).astype(np.uint8)
    for n in range(256):
        if n < len(pal8):
            rgba += bytes((int(pal8[n, 0]), int(pal8[n, 1]), int(pal8[n, 2]), 255))
        else:
            rgba += bytes((0, 0, 0, 255))

    children = (
        _chunk(b"SIZE", struct.pack("<III", nx, ny, nz))
        + _chunk(b"XYZI", bytes(voxels))
        + _chunk(b"RGBA", bytes(rgba))
    )
    blob = b"VOX " + struct.pack("<I", VOX_VERSION) + _chunk(b"MAIN", b"", children)
    Path(path).write_bytes(blob)


def read_vox(path: str | Path) -> QuantizedModel:
    """Inverse of write_vox for round-trip checks (subset of the format)."""
    data = Path(path).read_bytes()
    if data[:4] != b"VOX " or struct.unpack_from("<I", data, 4)[0] != VOX_VERSION:
        raise ValueError("not a supported .vox file")
    if data[8:12] != b"MAIN":
        raise ValueError("missing MAIN chunk")
    content_len, children_len = struct.unpack_from("<II", data, 12)
    off = 20 + content_len
    end = off + children_len
    size = None
    voxels = None
    rgba = None
    while off < end:
        cid = data[off : off + 4]
        clen, kids = struct.unpack_from("<II", data, off + 4)
        body = data[off + 12 : off + 12 + clen]
        if cid == b"SIZE":
            size = struct.unpack("<III", body)
        elif cid == b"XYZI":
            n = struct.unpack_from("<I", body, 0)[0]
            voxels = np.frombuffer(body, dtype=np.uint8, offset=4).reshape(n, 4)
        elif cid == b"RGBA":
            rgba = np.frombuffer(body, dtype=np.uint8).reshape(256, 4)
        off += 12 + clen + kids
    if size is None or voxels is None or rgba is None:
        raise ValueError("vox file missing SIZE/XYZI/RGBA")
    occ = np.zeros(size, dtype=bool)
    idx = np.zeros(size, dtype=np.int64)
    if len(voxels):
        x, y, z, ci = voxels[:, 0], voxels[:, 1], voxels[:, 2], voxels[:, 3]
        occ[x, y, z] = True
        idx[x, y, z] = ci.astype(np.int64) - 1
    used = int(idx.max()) + 1 if len(voxels) else 1
    n_colors = max(2, used)
    palette = rgba[:n_colors, :3].astype(np.float64) / 255.0
    return QuantizedModel(occupancy=occ, indices=idx, palette=palette)


# ---------------------------------------------------------------------------
# PLY cubes


def write_ply_cubes(model: QuantizedModel, spec: GridSpec, path: str | Path) -> None:
    """ASCII PLY with one colored cube (8 verts, 12 tris) per occupied voxel."""
    e = spec.voxel_edge
    lo = spec.bbox.lo
    pal8 = np.round(model.palette * 255.0).astype(np.uint8)
    cells = np.argwhere(model.occupancy)
    n = len(cells)
    corners = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
        dtype=np.float64,
    )
    # Quad faces of a unit cube, each split into two triangles.
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (3, 0, 4, 7)]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {8 * n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {12 * n}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for vi, (x, y, z) in enumerate(cells):
        base = lo + np.array([x, y, z], dtype=np.float64) * e
        col = pal8[int(model.indices[x, y, z])]
        for c in corners:
            p = base + c * e
            lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {col[0]} {col[1]} {col[2]}")
    for vi in range(n):
        b = 8 * vi
        for a, bq, cq, dq in quads:
            lines.append(f"3 {b + a} {b + bq} {b + cq}")
            lines.append(f"3 {b + a} {b + cq} {b + dq}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# PNG renders

# Raw density whose activation is opaque over any voxel chord.
_OPAQUE_RAW = 1e6


def render_model_cells(model: QuantizedModel, spec: GridSpec, cam: OrthoCamera,
                       cell_size: int) -> tuple[np.ndarray, np.ndarray]:
    """First-hit palette color per image cell -> (rgb (h,w,3), hit (h,w))."""
    origins = cam.cell_ray_origins(cell_size)
    h, w = cam.height // cell_size, cam.width // cell_size
    return _first_hit(model, spec, origins, (h, w))


def _first_hit(model, spec, origins, shape):
    segs = traverse_parallel(spec, origins, None_direction := None) if False else None
    raise NotImplementedError


def render_png(model: QuantizedModel, spec: GridSpec, cam: OrthoCamera, path: str | Path) -> None:
    """Render a hard model to an RGBA PNG through the volume renderer.

    Occupied voxels are opaque (huge density), so each pixel takes the color
    of the first occupied voxel along its ray; empty pixels stay transparent.
    """
    rgb, acc = render_model_image(model, spec, cam)
    rgba = np.zeros((cam.height, cam.width, 4), dtype=np.uint8)
    rgba[..., :3] = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgba[..., 3] = np.round(np.clip(acc, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgba, "RGBA").save(str(path))


def render_model_image(model: QuantizedModel, spec: GridSpec, cam: OrthoCamera):
    """Volume-render a hard model -> (rgb (H,W,3), acc (H,W))."""
    from .renderer import render  # local import to avoid a cycle

    density = DensityGrid(raw=np.where(model.occupancy, _OPAQUE_RAW, -_OPAQUE_RAW).astype(np.float64))
    colors = model.palette[np.clip(model.indices, 0, len(model.palette) - 1)].reshape(-1, 3)
    segs = traverse_parallel(spec, cam.pixel_ray_origins(), cam.view_dir)
    batch = render(segs, density, colors, background=None, far=0.0)
    H, W = cam.height, cam.width
    return batch.color.reshape(H, W, 3), batch.acc_alpha.reshape(H, W)
