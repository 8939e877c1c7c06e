"""Colored triangle meshes, orthographic cameras and z-buffer rasterization.

Meshes carry mandatory per-vertex RGB in [0,1]. The six canonical views and
their fixed up-vector conventions live here; everything downstream (pixel-art
targets, supervision rays, exports) is phrased in terms of these cameras.

View naming convention (right-handed world, z up):
    front  looks along +y (camera on the -y side),  up = +z
    back   looks along -y,                          up = +z
    left   looks along +x (camera on the -x side),  up = +z
    right  looks along -x,                          up = +z
    top    looks along -z (camera above),           up = +y
    bottom looks along +z,                          up = +y
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .parallel import ordered_map

# Margin applied around the normalized mesh when building the scene cube. The
# mesh (longest side 1) sits strictly inside so silhouettes never touch the
# image border, while grid voxels and image cells stay exactly aligned.
SCENE_MARGIN = 1.1

CANONICAL_VIEW_NAMES = ("front", "back", "left", "right", "top", "bottom")

_CANONICAL_DIRS = {
    "front": ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
    "back": ((0.0, -1.0, 0.0), (0.0, 0.0, 1.0)),
    "left": ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
    "right": ((-1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
    "top": ((0.0, 0.0, -1.0), (0.0, 1.0, 0.0)),
    "bottom": ((0.0, 0.0, 1.0), (0.0, 1.0, 0.0)),
}


class MeshError(ValueError):
    """Base class for mesh ingestion failures."""


class MeshFormatError(MeshError):
    """File exists but cannot be parsed as OBJ/PLY."""


class MissingVertexColorsError(MeshError):
    """Mesh parsed but one or more vertices lack RGB attributes."""


class EmptyMeshError(MeshError):
    """Mesh parsed but contains no triangles."""


class DegenerateMeshError(MeshError):
    """Mesh bounding box has zero extent; cannot be normalized."""


@dataclass(frozen=True)
class BoundingBox:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if np.any(self.hi < self.lo):
            raise ValueError("bounding box hi must be >= lo per axis")

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def longest_side(self) -> float:
        return float(np.max(self.size))


@dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh with per-vertex colors.

    vertices: (V, 3) float64
    triangles: (T, 3) int64 indices into vertices
    colors: (V, 3) float64 in [0, 1]
    """

    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        c = np.ascontiguousarray(self.colors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must be (T, 3)")
        if c.shape != v.shape:
            raise MeshError("colors must match vertices shape")
        if t.size == 0:
            raise EmptyMeshError("mesh has no triangles")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if c.size and (c.min() < -1e-9 or c.max() > 1 + 1e-9):
            raise MeshError("vertex colors must lie in [0, 1]")
        for arr in (v, t, c):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "colors", c)

    @property
    def bounds(self) -> BoundingBox:
        return BoundingBox(self.vertices.min(axis=0), self.vertices.max(axis=0))


def load_mesh(path: str | Path) -> Mesh:
    """Load an OBJ (v x y z r g b) or PLY (ascii / binary LE) colored mesh.

    Raises FileNotFoundError for missing files, MeshFormatError for
    unparseable content, MissingVertexColorsError when color attributes are
    absent, EmptyMeshError when no triangles survive parsing.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshFormatError(f"unsupported mesh format: {path.name} (want .obj or .ply)")


def _load_obj(path: Path) -> Mesh:
    verts, colors, faces = [], [], []
    missing_color = False
    with open(path, "r", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    vals = [float(p) for p in parts[1:]]
                except ValueError as exc:
                    raise MeshFormatError(f"{path.name}:{lineno}: bad vertex line") from exc
                if len(vals) < 3:
                    raise MeshFormatError(f"{path.name}:{lineno}: vertex needs 3 coords")
                verts.append(vals[:3])
                if len(vals) >= 6:
                    colors.append(vals[3:6])
                else:
                    missing_color = True
                    colors.append([0.0, 0.0, 0.0])
            elif tag == "f":
                idx = []
                for p in parts[1:]:
                    head = p.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path.name}:{lineno}: bad face index") from exc
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise MeshFormatError(f"{path.name}:{lineno}: face needs >= 3 indices")
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if missing_color:
        raise MissingVertexColorsError(f"{path.name}: OBJ vertices lack r g b fields")
    if not faces:
        raise EmptyMeshError(f"{path.name}: no faces")
    return Mesh(np.array(verts), np.array(faces), np.clip(np.array(colors), 0.0, 1.0))


_PLY_SCALAR = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path: Path) -> Mesh:
    data = path.read_bytes()
    if not data.startswith(b"ply"):
        raise MeshFormatError(f"{path.name}: missing ply magic")
    header_end = data.find(b"end_header")
    if header_end < 0:
        raise MeshFormatError(f"{path.name}: unterminated ply header")
    body_start = data.find(b"\n", header_end) + 1
    header = data[:header_end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []  # list of (name, count, [(prop_name, dtype) | ("__list__", name, count_t, item_t)])
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path.name}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("__list__", parts[4], parts[2], parts[3]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path.name}: unsupported ply format {fmt!r}")

    vert_el = next((e for e in elements if e[0] == "vertex"), None)
    face_el = next((e for e in elements if e[0] == "face"), None)
    if vert_el is None or face_el is None:
        raise MeshFormatError(f"{path.name}: ply needs vertex and face elements")
    vert_props = [p[0] for p in vert_el[2]]
    for want in ("x", "y", "z"):
        if want not in vert_props:
            raise MeshFormatError(f"{path.name}: vertex missing {want}")
    has_color = all(ch in vert_props for ch in ("red", "green", "blue"))
    if not has_color:
        raise MissingVertexColorsError(f"{path.name}: ply vertices lack red/green/blue")

    if fmt == "ascii":
        verts, faces = _read_ply_ascii(path, data[body_start:], elements)
    else:
        verts, faces = _read_ply_binary(path, data[body_start:], elements)

    if len(faces) == 0:
        raise EmptyMeshError(f"{path.name}: no faces")
    v = verts[:, :3]
    c = verts[:, 3:6]
    return Mesh(v, np.asarray(faces), np.clip(c, 0.0, 1.0))


def _color_scale(type_name: str) -> float:
    return 255.0 if _PLY_SCALAR.get(type_name, "f4").startswith(("u", "i")) else 1.0


def _read_ply_ascii(path, body: bytes, elements):
    tokens = body.decode("ascii", errors="replace").split("\n")
    rows = [t.split() for t in tokens]
    rows = [r for r in rows if r]
    cursor = 0
    verts = None
    faces = []
    for name, count, props in elements:
        if name == "vertex":
            cols = {p[0]: i for i, p in enumerate(props)}
            types = {p[0]: p[1] for p in props if p[0] != "__list__"}
            scales = {ch: _color_scale(types.get(ch, "uchar")) for ch in ("red", "green", "blue")}
            out = np.empty((count, 6), dtype=np.float64)
            for i in range(count):
                row = rows[cursor + i]
                out[i, 0] = float(row[cols["x"]])
                out[i, 1] = float(row[cols["y"]])
                out[i, 2] = float(row[cols["z"]])
                for j, ch in enumerate(("red", "green", "blue")):
                    out[i, 3 + j] = float(row[cols[ch]]) / scales[ch]
            verts = out
            cursor += count
        elif name == "face":
            for i in range(count):
                row = [int(x) for x in rows[cursor + i]]
                n = row[0]
                idx = row[1 : 1 + n]
                for k in range(1, n - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            cursor += count
        else:
            cursor += count
    if verts is None:
        raise MeshFormatError(f"{path.name}: vertex element missing")
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply_binary(path, body: bytes, elements):
    offset = 0
    verts = None
    faces = []
    for name, count, props in elements:
        if name == "vertex":
            if any(p[0] == "__list__" for p in props):
                raise MeshFormatError(f"{path.name}: list property on vertex unsupported")
            dt = np.dtype([(p[0], "<" + _PLY_SCALAR[p[1]]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            out = np.empty((count, 6), dtype=np.float64)
            for j, ch in enumerate(("x", "y", "z")):
                out[:, j] = arr[ch]
            meta = {p[0]: p[1] for p in props}
            for j, ch in enumerate(("red", "green", "blue")):
                out[:, 3 + j] = arr[ch] / _color_scale(meta[ch])
            verts = out
        elif name == "face":
            lst = next((p for p in props if p[0] == "__list__"), None)
            if lst is None:
                raise MeshFormatError(f"{path.name}: face element lacks index list")
            cnt_t = np.dtype("<" + _PLY_SCALAR[lst[2]])
            item_t = np.dtype("<" + _PLY_SCALAR[lst[3]])
            for _ in range(count):
                n = int(np.frombuffer(body, dtype=cnt_t, count=1, offset=offset)[0])
                offset += cnt_t.itemsize
                idx = np.frombuffer(body, dtype=item_t, count=n, offset=offset).astype(np.int64)
                offset += item_t.itemsize * n
                for k in range(1, n - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
        else:
            raise MeshFormatError(f"{path.name}: cannot skip unknown binary element {name!r}")
    if verts is None:
        raise MeshFormatError(f"{path.name}: vertex element missing")
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def normalize_mesh(mesh: Mesh) -> tuple[Mesh, BoundingBox]:
    """Center the mesh at the origin and scale its longest side to 1.

    Returns the transformed mesh and its tight bounding box.
    """
    b = mesh.bounds
    longest = b.longest_side
    if longest <= 0:
        raise DegenerateMeshError("mesh bounding box has zero extent")
    verts = (mesh.vertices - b.center) / longest
    out = Mesh(verts, mesh.triangles, mesh.colors)
    return out, out.bounds


def scene_box(bbox: BoundingBox, margin: float = SCENE_MARGIN) -> BoundingBox:
    """Cubic box enclosing a normalized mesh box with a safety margin.

    The cube is what both the canonical cameras and the voxel grid are built
    from, which is what keeps image cells and voxel columns exactly aligned.
    """
    half = 0.5 * margin * bbox.longest_side
    center = bbox.center
    return BoundingBox(center - half, center + half)


@dataclass(frozen=True)
class OrthoCamera:
    """Orthographic camera with square pixels.

    Rays travel along view_dir and start on the near plane, which sits tangent
    to the scene box on the camera side; reported depths are distances along
    view_dir from that plane.
    """

    view_dir: np.ndarray
    up: np.ndarray
    width: int
    height: int
    extent: float  # world units spanned by the image width
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near_offset: float = 0.0  # distance from center back to the near plane

    def __post_init__(self):
        d = np.asarray(self.view_dir, dtype=np.float64)
        u = np.asarray(self.up, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9 or abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("view_dir and up must be unit vectors")
        if abs(float(d @ u)) > 1e-9:
            raise ValueError("view_dir and up must be orthogonal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        for arr in (d, u, c):
            arr.flags.writeable = False
        object.__setattr__(self, "view_dir", d)
        object.__setattr__(self, "up", u)
        object.__setattr__(self, "center", c)

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.view_dir, self.up)

    @property
    def near_center(self) -> np.ndarray:
        return self.center - self.view_dir * self.near_offset

    def ray_origins(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Ray origins for continuous pixel coordinates (row, col centers at +0.5)."""
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        u = (cols + 0.5) / self.width - 0.5
        v = 0.5 - (rows + 0.5) / self.height
        return (
            self.near_center
            + np.multiply.outer(u * self.extent, self.right)
            + np.multiply.outer(v * self.extent, self.up)
        )

    def pixel_ray_origins(self) -> np.ndarray:
        """Origins for all height*width pixel-center rays, row-major."""
        rr, cc = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return self.ray_origins(rr.ravel(), cc.ravel())

    def cell_ray_origins(self, cell_size: int) -> np.ndarray:
        """Origins for rays through cell centers, cells being cell_size-pixel squares."""
        if self.width % cell_size or self.height % cell_size:
            raise ValueError("image dims must be divisible by cell_size")
        h, w = self.height // cell_size, self.width // cell_size
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rows = (rr.ravel() + 0.5) * cell_size - 0.5
        cols = (cc.ravel() + 0.5) * cell_size - 0.5
        return self.ray_origins(rows, cols)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> (px, py, depth); px/py have pixel centers at integers."""
        rel = np.asarray(points, dtype=np.float64) - self.center
        a = rel @ self.right
        b = rel @ self.up
        t = rel @ self.view_dir + self.near_offset
        px = (a / self.extent + 0.5) * self.width - 0.5
        py = (0.5 - b / self.extent) * self.height - 0.5
        return px, py, t


def _near_offset_for(box: BoundingBox, view_dir: np.ndarray) -> float:
    # Near plane tangent to the box: largest backward projection of any corner.
    half = 0.5 * box.size
    return float(np.abs(view_dir) @ half)


def canonical_cameras(box: BoundingBox, width: int) -> dict[str, OrthoCamera]:
    """The six axis-aligned views of a (cubic) scene box at width x width pixels.

    Extent equals the box side so that one cell of cell_size pixels spans
    exactly one voxel face.
    """
    extent = box.longest_side
    cams = {}
    for name in CANONICAL_VIEW_NAMES:
        d, up = _CANONICAL_DIRS[name]
        d = np.asarray(d)
        cams[name] = OrthoCamera(
            view_dir=d,
            up=np.asarray(up),
            width=width,
            height=width,
            extent=extent,
            center=box.center.copy(),
            near_offset=_near_offset_for(box, d),
        )
    return cams


def diagonal_cameras(box: BoundingBox, width: int, margin: float = 1.05) -> list[OrthoCamera]:
    """Eight corner-diagonal orthographic views used as extra coarse-stage targets.

    Their extent is fit to the projected box span; they are never used for
    pixel-art supervision, so cell alignment is not required of them.
    """
    cams = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                d = -np.array([sx, sy, sz]) / np.sqrt(3.0)  # camera at corner, looking in
                up = np.array([0.0, 0.0, 1.0])
                up = up - (up @ d) * d
                up /= np.linalg.norm(up)
                right = np.cross(d, up)
                corners = np.array(
                    [[box.lo[0] if i & 1 else box.hi[0],
                      box.lo[1] if i & 2 else box.hi[1],
                      box.lo[2] if i & 4 else box.hi[2]] for i in range(8)]
                )
                rel = corners - box.center
                span = 2.0 * max(np.abs(rel @ right).max(), np.abs(rel @ up).max())
                cams.append(
                    OrthoCamera(
                        view_dir=d,
                        up=up,
                        width=width,
                        height=width,
                        extent=margin * span,
                        center=box.center.copy(),
                        near_offset=_near_offset_for(box, d),
                    )
                )
    return cams


@dataclass(frozen=True)
class ViewRaster:
    """Result of rasterizing a mesh under one camera.

    color: (H, W, 3) interpolated vertex color where covered, else 0
    depth: (H, W) distance from the near plane, +inf where uncovered
    coverage: (H, W) bool
    """

    color: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        for arr in (self.color, self.depth, self.coverage):
            np.asarray(arr).flags.writeable = False

    def composite(self, background: np.ndarray | float = 1.0) -> np.ndarray:
        """Color image with uncovered pixels filled by a background color."""
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
        out = np.where(self.coverage[..., None], self.color, bg)
        return out


def rasterize(mesh: Mesh, cam: OrthoCamera) -> ViewRaster:
    """Orthographic z-buffer rasterization with barycentric color/depth.

    A pixel is covered when its center lies inside the projected triangle
    (edges inclusive); the nearest depth wins. Both triangle windings render.
    """
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3), dtype=np.float64)
    depth = np.full((H, W), np.inf, dtype=np.float64)
    covered = np.zeros((H, W), dtype=bool)

    px, py, pt = cam.project(mesh.vertices)
    tris = mesh.triangles
    vcol = mesh.colors

    for a, b, c in tris:
        x0, y0, x1, y1, x2, y2 = px[a], py[a], px[b], py[b], px[c], py[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        cmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        cmax = min(int(np.floor(max(x0, x1, x2))), W - 1)
        rmin = max(int(np.ceil(min(y0, y1, y2))), 0)
        rmax = min(int(np.floor(max(y0, y1, y2))), H - 1)
        if cmin > cmax or rmin > rmax:
            continue
        cc, rr = np.meshgrid(np.arange(cmin, cmax + 1), np.arange(rmin, rmax + 1))
        fx = cc.astype(np.float64)
        fy = rr.astype(np.float64)
        w0 = (x2 - x1) * (fy - y1) - (y2 - y1) * (fx - x1)
        w1 = (x0 - x2) * (fy - y2) - (y0 - y2) * (fx - x2)
        w2 = (x1 - x0) * (fy - y0) - (y1 - y0) * (fx - x0)
        if area < 0:
            w0, w1, w2, sarea = -w0, -w1, -w2, -area
        else:
            sarea = area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        l0 = w0[inside] / sarea
        l1 = w1[inside] / sarea
        l2 = w2[inside] / sarea
        t = l0 * pt[a] + l1 * pt[b] + l2 * pt[c]
        rows = rr[inside]
        cols = cc[inside]
        closer = t < depth[rows, cols]
        if not closer.any():
            continue
        rows, cols, t = rows[closer], cols[closer], t[closer]
        col = (
            l0[closer, None] * vcol[a]
            + l1[closer, None] * vcol[b]
            + l2[closer, None] * vcol[c]
        )
        depth[rows, cols] = t
        color[rows, cols] = np.clip(col, 0.0, 1.0)
        covered[rows, cols] = True

    return ViewRaster(color=color, depth=depth, coverage=covered)


def rasterize_views(mesh: Mesh, cams: list[OrthoCamera]) -> list[ViewRaster]:
    """Rasterize several cameras, fanning out to the worker pool when enabled."""
    return ordered_map(lambda cam: rasterize(mesh, cam), cams)
