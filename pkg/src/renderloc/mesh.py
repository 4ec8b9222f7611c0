"""Triangle-mesh map: loading, BVH construction, and ray queries.

Supported formats are Wavefront OBJ (v / vt / f, optional MTL with a Kd
color or map_Kd texture, vertex colors as ``v x y z r g b``) and PLY
(ascii or binary_little_endian with x,y,z and optional red,green,blue).
Meshes without any color source are painted uniform gray.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptyMesh, ParseError, UnsupportedFormat

DEFAULT_GRAY = 0.5
LEAF_SIZE = 8
RAY_TMIN = 1e-6


@dataclass
class TriangleMesh:
    """Indexed triangles with per-vertex color, all immutable after init.

    vertices: (N, 3) float64 meters, map frame
    triangles: (M, 3) int32 vertex indices
    colors: (N, 3) float64 in [0, 1]
    uvs/texture: optional; kept only when a texture was loaded unbaked
    """

    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None
    uvs: np.ndarray | None = None
    texture: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int32))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must be (M, 3)")
        if not np.isfinite(v).all():
            raise ValueError("vertices contain non-finite values")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(t) and (
            (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        ).any():
            raise ValueError("triangle repeats a vertex index")
        c = self.colors
        if c is None:
            c = np.full((len(v), 3), DEFAULT_GRAY)
        c = np.ascontiguousarray(np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0))
        if c.shape != (len(v), 3):
            raise ValueError("colors must be (N, 3)")
        for arr in (v, t, c):
            arr.setflags(write=False)
        self.vertices, self.triangles, self.colors = v, t, c
        if self.uvs is not None:
            u = np.ascontiguousarray(np.asarray(self.uvs, dtype=np.float64))
            if u.shape != (len(v), 2):
                raise ValueError("uvs must be (N, 2)")
            u.setflags(write=False)
            self.uvs = u
        if self.texture is not None:
            tex = np.ascontiguousarray(np.asarray(self.texture, dtype=np.float64))
            if tex.ndim != 3 or tex.shape[2] != 3:
                raise ValueError("texture must be (H, W, 3)")
            tex.setflags(write=False)
            self.texture = tex

    @property
    def aabb(self):
        """(min (3,), max (3,)) axis-aligned bounds; empty mesh gives zeros."""
        if len(self.vertices) == 0:
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def corners(self):
        """Per-triangle vertex positions (M, 3, 3)."""
        return self.vertices[self.triangles]


@dataclass
class Bvh:
    """Binary AABB tree over triangle indices, median split, leaves <= 8.

    Leaf nodes have count > 0 and index into `order`, the permutation of
    triangle ids.
    """

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    def arrays(self):
        return (self.node_min, self.node_max, self.left, self.right,
                self.start, self.count, self.order)


@dataclass
class RayHit:
    t: float
    triangle_id: int
    barycentric: np.ndarray  # weights for the triangle's three vertices


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest axis of the node bounds."""
    m = len(mesh.triangles)
    if m == 0:
        zero = np.zeros((1, 3))
        return Bvh(zero, zero, np.full(1, -1, np.int32), np.full(1, -1, np.int32),
                   np.zeros(1, np.int32), np.zeros(1, np.int32),
                   np.empty(0, np.int64))
    tris = mesh.corners()
    tri_min = tris.min(axis=1)
    tri_max = tris.max(axis=1)
    centroids = tris.mean(axis=1)

    node_min, node_max = [], []
    left, right, start, count = [], [], [], []
    order = np.arange(m, dtype=np.int64)

    # (node_index, lo, hi) ranges into `order`
    stack = [(0, 0, m)]
    _new_node = lambda: (node_min.append(None), node_max.append(None),
                         left.append(-1), right.append(-1),
                         start.append(0), count.append(0))
    _new_node()
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        bmin = tri_min[idx].min(axis=0)
        bmax = tri_max[idx].max(axis=0)
        node_min[node] = bmin
        node_max[node] = bmax
        if hi - lo <= leaf_size:
            start[node] = lo
            count[node] = hi - lo
            continue
        axis = int(np.argmax(bmax - bmin))
        mid = (hi - lo) // 2
        part = np.argpartition(centroids[idx, axis], mid)
        order[lo:hi] = idx[part]
        lchild = len(node_min)
        _new_node()
        rchild = len(node_min)
        _new_node()
        left[node] = lchild
        right[node] = rchild
        stack.append((lchild, lo, lo + mid))
        stack.append((rchild, lo + mid, hi))

    return Bvh(
        np.ascontiguousarray(node_min, dtype=np.float64),
        np.ascontiguousarray(node_max, dtype=np.float64),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(start, dtype=np.int32),
        np.asarray(count, dtype=np.int32),
        order,
    )


def _split_corners(mesh: TriangleMesh):
    tris = mesh.corners()
    return (np.ascontiguousarray(tris[:, 0]),
            np.ascontiguousarray(tris[:, 1]),
            np.ascontiguousarray(tris[:, 2]))


def raycast(mesh: TriangleMesh, bvh: Bvh, origin, direction,
            tmin: float = RAY_TMIN) -> RayHit | None:
    """Nearest intersection along the unit ray, or None."""
    d = np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit norm, |d| = {n:.8f}")
    if len(mesh.triangles) == 0:
        return None
    tv0, tv1, tv2 = _split_corners(mesh)
    t, tid, u, v, w = _kernels.raycast_single(
        bvh.arrays(), tv0, tv1, tv2,
        np.asarray(origin, dtype=np.float64), d, tmin,
    )
    if tid < 0:
        return None
    return RayHit(float(t), int(tid), np.array([u, v, w]))


def raycast_batch(mesh: TriangleMesh, bvh: Bvh, origins, dirs,
                  tmin: float = RAY_TMIN):
    """Vectorized raycast. Returns (t (N,), triangle_id (N,), bary (N, 3));
    misses have t = +inf and triangle_id = -1."""
    if len(mesh.triangles) == 0:
        n = len(origins)
        return np.full(n, np.inf), np.full(n, -1, np.int64), np.zeros((n, 3))
    tv0, tv1, tv2 = _split_corners(mesh)
    return _kernels.raycast_batch(
        bvh.arrays(), tv0, tv1, tv2,
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64), tmin,
    )


def raycast_brute(mesh: TriangleMesh, origin, direction,
                  tmin: float = RAY_TMIN) -> RayHit | None:
    """All-triangle reference intersector (classic Moller-Trumbore).

    Independent of the BVH path; used as its oracle in tests. Ties on t
    resolve to the lowest triangle id, like the BVH traversal.
    """
    if len(mesh.triangles) == 0:
        return None
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    tris = mesh.corners()
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_det = 1.0 / det
        tvec = o - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = qvec @ d * inv_det
        t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    ok = (det != 0.0) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > tmin)
    ok &= np.isfinite(t)
    if not ok.any():
        return None
    t = np.where(ok, t, np.inf)
    best = np.lexsort((np.arange(len(t)), t))[0]
    return RayHit(float(t[best]), int(best),
                  np.array([1.0 - u[best] - v[best], u[best], v[best]]))


def floor_height(mesh: TriangleMesh, bvh: Bvh, x: float, y: float) -> float | None:
    """z of the highest surface in the vertical column at (x, y).

    Casts straight down from just above the mesh bounds, so a prior on a
    rooftop lands on the roof, not the street below it.
    """
    if len(mesh.triangles) == 0:
        return None
    _, top = mesh.aabb
    origin = np.array([x, y, top[2] + 1.0])
    hit = raycast(mesh, bvh, origin, np.array([0.0, 0.0, -1.0]))
    if hit is None:
        return None
    return float(origin[2] - hit.t)


def floor_height_low(mesh: TriangleMesh, bvh: Bvh, x: float, y: float) -> float | None:
    """z of the lowest surface in the column (first hit going up).

    Companion to floor_height for priors stranded on rooftops: the
    street level under the roof, when one exists.
    """
    if len(mesh.triangles) == 0:
        return None
    bottom, _ = mesh.aabb
    origin = np.array([x, y, bottom[2] - 1.0])
    hit = raycast(mesh, bvh, origin, np.array([0.0, 0.0, 1.0]))
    if hit is None:
        return None
    return float(origin[2] + hit.t)


# -- file I/O --------------------------------------------------------------

def load_mesh(path, bake_texture: bool = True) -> TriangleMesh:
    """Load an OBJ or PLY mesh and validate it.

    With bake_texture (default) any texture is sampled into per-vertex
    colors at load time; pass False to keep the texture for full
    per-pixel sampling in the renderer.
    """
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        mesh = _load_obj(path)
    elif ext == ".ply":
        mesh = _load_ply(path)
    else:
        raise UnsupportedFormat(f"unrecognized mesh extension {ext!r} for {path}")
    if len(mesh.triangles) == 0:
        raise EmptyMesh(f"{path} contains no triangles")
    if bake_texture and mesh.texture is not None and mesh.uvs is not None:
        colors = _sample_texture(mesh.texture, mesh.uvs)
        mesh = TriangleMesh(mesh.vertices, mesh.triangles, colors)
    return mesh


def _sample_texture(texture, uvs):
    th, tw = texture.shape[:2]
    tc = np.clip(np.floor(uvs[:, 0] * (tw - 1) + 0.5).astype(np.int64), 0, tw - 1)
    tr = np.clip((th - 1) - np.floor(uvs[:, 1] * (th - 1) + 0.5).astype(np.int64),
                 0, th - 1)
    return texture[tr, tc]


def _resolve_index(raw: int, n: int, line_no: int, kind: str) -> int:
    if raw == 0:
        raise ParseError(f"{kind} index 0 is invalid (OBJ indices are 1-based)",
                         line=line_no)
    idx = raw - 1 if raw > 0 else n + raw
    if not (0 <= idx < n):
        raise ParseError(f"{kind} index {raw} out of range (have {n})", line=line_no)
    return idx


def _load_obj(path) -> TriangleMesh:
    verts, vcolors, vts = [], [], []
    faces = []  # (vertex ids, uv ids or None, line number)
    mtl_color = {}
    mtl_texture = {}
    active_color = None
    active_texture = None
    texture = None

    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex needs 3 coordinates", line=line_no)
                try:
                    vals = [float(p) for p in parts[1:]]
                except ValueError:
                    raise ParseError(f"bad vertex number in {line!r}", line=line_no)
                verts.append(vals[:3])
                vcolors.append(vals[3:6] if len(vals) >= 6 else None)
            elif tag == "vt":
                if len(parts) < 3:
                    raise ParseError("texture coordinate needs u v", line=line_no)
                try:
                    vts.append((float(parts[1]), float(parts[2])))
                except ValueError:
                    raise ParseError(f"bad uv number in {line!r}", line=line_no)
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face needs at least 3 vertices", line=line_no)
                vi, ti = [], []
                for chunk in parts[1:]:
                    fields = chunk.split("/")
                    try:
                        vi.append(int(fields[0]))
                    except ValueError:
                        raise ParseError(f"bad face vertex {chunk!r}", line=line_no)
                    if len(fields) > 1 and fields[1]:
                        try:
                            ti.append(int(fields[1]))
                        except ValueError:
                            raise ParseError(f"bad face uv {chunk!r}", line=line_no)
                    else:
                        ti.append(None)
                faces.append((vi, ti, line_no, active_color, active_texture))
            elif tag == "mtllib":
                mtl_path = os.path.join(os.path.dirname(str(path)), parts[1])
                if os.path.exists(mtl_path):
                    _load_mtl(mtl_path, mtl_color, mtl_texture)
            elif tag == "usemtl":
                name = parts[1] if len(parts) > 1 else ""
                active_color = mtl_color.get(name)
                active_texture = mtl_texture.get(name)
            # vn, s, o, g, l: ignored

    n = len(verts)
    triangles, tri_lines = [], []
    uvs = np.full((n, 2), -1.0)
    colors = np.full((n, 3), DEFAULT_GRAY)
    have_color = np.zeros(n, dtype=bool)
    for i, c in enumerate(vcolors):
        if c is not None and len(c) == 3:
            colors[i] = c
            have_color[i] = True

    for vi, ti, line_no, face_color, face_texture in faces:
        ids = [_resolve_index(r, n, line_no, "vertex") for r in vi]
        uv_ids = [None if r is None else _resolve_index(r, len(vts), line_no, "uv")
                  for r in ti]
        for k, vid in enumerate(ids):
            if uv_ids[k] is not None and uvs[vid, 0] < 0.0:
                uvs[vid] = vts[uv_ids[k]]
            if face_color is not None and not have_color[vid]:
                colors[vid] = face_color
        if face_texture is not None:
            texture = face_texture
        for k in range(1, len(ids) - 1):
            tri = (ids[0], ids[k], ids[k + 1])
            if len(set(tri)) != 3:
                raise ParseError("face repeats a vertex", line=line_no)
            triangles.append(tri)
            tri_lines.append(line_no)

    has_uv = (uvs[:, 0] >= 0.0).any()
    return TriangleMesh(
        np.asarray(verts, dtype=np.float64).reshape(len(verts), 3),
        np.asarray(triangles, dtype=np.int32).reshape(len(triangles), 3),
        colors,
        uvs=np.clip(uvs, 0.0, 1.0) if has_uv and texture is not None else None,
        texture=texture,
    )


def _load_mtl(path, mtl_color, mtl_texture):
    current = None
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for raw_line in fh:
            parts = raw_line.strip().split()
            if not parts:
                continue
            if parts[0] == "newmtl" and len(parts) > 1:
                current = parts[1]
            elif parts[0] == "Kd" and current and len(parts) >= 4:
                mtl_color[current] = [float(p) for p in parts[1:4]]
            elif parts[0] == "map_Kd" and current and len(parts) > 1:
                img_path = os.path.join(os.path.dirname(str(path)), parts[-1])
                from PIL import Image

                with Image.open(img_path) as im:
                    tex = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                mtl_texture[current] = tex


def _load_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        data = fh.read()

    # header is ascii either way
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", line=1)
    end_line = data.index(b"\n", end) + 1
    header_lines = data[:end_line].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []  # (name, count, [(prop_type, prop_name) or ('list', ct, it, name)])
    for line_no, line in enumerate(header_lines, start=1):
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) < 3:
                raise ParseError("bad element line", line=line_no)
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", line=line_no)
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[1], parts[2]))

    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"PLY format {fmt!r} is not supported")

    scalar = {
        "char": ("b", 1), "int8": ("b", 1), "uchar": ("B", 1), "uint8": ("B", 1),
        "short": ("h", 2), "int16": ("h", 2), "ushort": ("H", 2), "uint16": ("H", 2),
        "int": ("i", 4), "int32": ("i", 4), "uint": ("I", 4), "uint32": ("I", 4),
        "float": ("f", 4), "float32": ("f", 4), "double": ("d", 8), "float64": ("d", 8),
    }
    np_type = {
        "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
        "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
        "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
        "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    }

    verts = colors = None
    faces = []
    if fmt == "ascii":
        rows = data[end_line:].decode("ascii", errors="replace").split("\n")
        cursor = 0
        base_line = len(header_lines)
        for name, cnt, props in elements:
            values = []
            for i in range(cnt):
                while cursor < len(rows) and not rows[cursor].strip():
                    cursor += 1
                if cursor >= len(rows):
                    raise ParseError(f"unexpected end of {name} data",
                                     line=base_line + cursor + 1)
                values.append((rows[cursor].split(), base_line + cursor + 1))
                cursor += 1
            if name == "vertex":
                verts, colors = _ply_vertex_rows(values, props)
            elif name == "face":
                for row, ln in values:
                    k = int(row[0])
                    ids = [int(x) for x in row[1:1 + k]]
                    faces.append((ids, ln))
    else:
        offset = end_line
        for name, cnt, props in elements:
            if name == "vertex":
                if any(p[0] == "list" for p in props):
                    raise ParseError("list property on vertex element unsupported",
                                     line=1)
                dt = np.dtype([(p[1], np_type[p[0]]) for p in props])
                raw = np.frombuffer(data, dtype=dt, count=cnt, offset=offset)
                offset += dt.itemsize * cnt
                table = {p[1]: np.asarray(raw[p[1]], dtype=np.float64)
                         for p in props}
                verts, colors = _ply_vertex_table(table, props)
            elif name == "face":
                for i in range(cnt):
                    for p in props:
                        if p[0] == "list":
                            cfmt, csz = scalar[p[1]]
                            ifmt, isz = scalar[p[2]]
                            (k,) = struct.unpack_from("<" + cfmt, data, offset)
                            offset += csz
                            ids = list(struct.unpack_from("<" + str(k) + ifmt,
                                                          data, offset))
                            offset += isz * k
                            if p[3] in ("vertex_indices", "vertex_index"):
                                faces.append((ids, i + 1))
                        else:
                            offset += scalar[p[0]][1]
            else:
                # skip unknown fixed-size elements
                row = sum(scalar[p[0]][1] for p in props if p[0] != "list")
                if any(p[0] == "list" for p in props):
                    raise ParseError(f"cannot skip list element {name!r}", line=1)
                offset += row * cnt

    if verts is None:
        raise ParseError("PLY has no vertex element", line=1)
    triangles, n = [], len(verts)
    for ids, ln in faces:
        for k in range(1, len(ids) - 1):
            tri = (ids[0], ids[k], ids[k + 1])
            if min(tri) < 0 or max(tri) >= n:
                raise ParseError(f"face index out of range (have {n})", line=ln)
            if len(set(tri)) != 3:
                raise ParseError("face repeats a vertex", line=ln)
            triangles.append(tri)
    return TriangleMesh(
        verts,
        np.asarray(triangles, dtype=np.int32).reshape(len(triangles), 3),
        colors,
    )


def _ply_vertex_rows(values, props):
    names = [p[1] for p in props if p[0] != "list"]
    cols = {nm: [] for nm in names}
    for row, ln in values:
        if len(row) < len(names):
            raise ParseError("vertex row too short", line=ln)
        try:
            for j, nm in enumerate(names):
                cols[nm].append(float(row[j]))
        except ValueError:
            raise ParseError(f"bad vertex number in {row!r}", line=ln)
    table = {nm: np.asarray(v) for nm, v in cols.items()}
    return _ply_vertex_table(table, props)


def _ply_vertex_table(table, props):
    for axis in ("x", "y", "z"):
        if axis not in table:
            raise ParseError(f"vertex element missing property {axis!r}", line=1)
    verts = np.stack([table["x"], table["y"], table["z"]], axis=1)
    colors = None
    if all(c in table for c in ("red", "green", "blue")):
        rgb = np.stack([table["red"], table["green"], table["blue"]], axis=1)
        # uchar colors are 0..255, float colors already 0..1
        types = {p[1]: p[0] for p in props if p[0] != "list"}
        if types.get("red") in ("uchar", "uint8", "int", "int32", "short"):
            rgb = rgb / 255.0
        colors = rgb
    return verts, colors


def save_obj(mesh: TriangleMesh, path):
    """Write positions, per-vertex colors and faces.

    Colors use the common ``v x y z r g b`` extension that `load_mesh`
    reads back; textures are not written.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for p, c in zip(mesh.vertices, mesh.colors):
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                     f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
