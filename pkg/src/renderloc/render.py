"""Software rasterizer: RGB plus metric depth from a pose and intrinsics.

Pixels are sampled at integer coordinates, so the ray through pixel
(x, y) is exactly the one `geom.backproject` produces for that pixel.
Depth is camera-space z with +inf marking empty pixels; interpolation is
perspective-correct (1/z weighted). Triangles crossing the near plane
(0.05 m) are clipped against it; back faces are kept because aerial
meshes have no consistent winding. Shading is a headlight term
max(0.2, |n . view|) per face, disabled via shade=False for flat color.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ParseError
from .geom import Intrinsics, Pose
from .mesh import TriangleMesh

NEAR_PLANE = 0.05
SHADE_FLOOR = 0.2
DEPTH_MAGIC = b"RNCD"
DEPTH_SENTINEL = np.inf


@dataclass
class RenderedView:
    """Output of one render: color, metric depth, and the camera that
    produced them. `triangle_ids` maps pixels to mesh triangles (-1 for
    background); the rasterizer needs it for depth tie-breaks and tests
    use it as a diagnostic."""

    rgb: np.ndarray          # (H, W, 3) float64 in [0, 1]
    depth: np.ndarray        # (H, W) float64, camera-space z, +inf empty
    pose: Pose
    intrinsics: Intrinsics
    triangle_ids: np.ndarray  # (H, W) int32, -1 for background

    def __post_init__(self):
        for arr in (self.rgb, self.depth, self.triangle_ids):
            arr.setflags(write=False)

    @property
    def coverage(self) -> float:
        """Fraction of pixels hit by geometry."""
        return float(np.isfinite(self.depth).mean())


def _clip_polygon(points, attrs, near):
    """Sutherland-Hodgman clip of one triangle against z = near.

    points: list of 3 camera-space vertices; attrs: matching attribute
    rows. Attributes interpolate linearly along camera-space edges,
    which is exact before projection.
    """
    out_p, out_a = [], []
    n = len(points)
    for i in range(n):
        p0, a0 = points[i], attrs[i]
        p1, a1 = points[(i + 1) % n], attrs[(i + 1) % n]
        in0, in1 = p0[2] > near, p1[2] > near
        if in0:
            out_p.append(p0)
            out_a.append(a0)
        if in0 != in1:
            s = (near - p0[2]) / (p1[2] - p0[2])
            out_p.append(p0 + s * (p1 - p0))
            out_a.append(a0 + s * (a1 - a0))
    return out_p, out_a


def _face_shade(cam_corners, enabled):
    """Headlight term per face: max(0.2, |unit normal . unit view|)."""
    m = len(cam_corners)
    if not enabled or m == 0:
        return np.ones(m)
    e1 = cam_corners[:, 1] - cam_corners[:, 0]
    e2 = cam_corners[:, 2] - cam_corners[:, 0]
    normal = np.cross(e1, e2)
    centroid = cam_corners.mean(axis=1)
    nn = np.linalg.norm(normal, axis=1)
    cn = np.linalg.norm(centroid, axis=1)
    denom = np.where((nn > 0) & (cn > 0), nn * cn, 1.0)
    cos = np.abs(np.einsum("ij,ij->i", normal, centroid)) / denom
    return np.maximum(SHADE_FLOOR, cos)


def _prepare(mesh: TriangleMesh, pose: Pose, K: Intrinsics, shade: bool):
    """Transform, clip, and project; returns per-triangle raster inputs.

    Output triangle order follows ascending mesh triangle id (clip
    fragments inherit their source id), which the kernels rely on for
    deterministic depth tie-breaking.
    """
    textured = mesh.texture is not None and mesh.uvs is not None
    cam = mesh.vertices @ pose.R.T + pose.t
    tris = mesh.triangles
    corners = cam[tris]                      # (M, 3, 3)
    z = corners[:, :, 2]
    shade_f = _face_shade(corners, shade)

    if textured:
        attr = mesh.uvs[tris]                # (M, 3, 2)
    else:
        attr = mesh.colors[tris] * shade_f[:, None, None]

    front = (z > NEAR_PLANE).all(axis=1)
    crossing = ~front & (z > NEAR_PLANE).any(axis=1)

    out_corners = [corners[front]]
    out_attr = [attr[front]]
    out_ids = [np.nonzero(front)[0]]
    out_shade = [shade_f[front]]
    for ti in np.nonzero(crossing)[0]:
        pts, ats = _clip_polygon(list(corners[ti]), list(attr[ti]), NEAR_PLANE)
        for k in range(1, len(pts) - 1):
            out_corners.append(np.array([pts[0], pts[k], pts[k + 1]])[None])
            out_attr.append(np.array([ats[0], ats[k], ats[k + 1]])[None])
            out_ids.append(np.array([ti]))
            out_shade.append(np.array([shade_f[ti]]))

    cc = np.concatenate(out_corners) if out_corners else np.empty((0, 3, 3))
    aa = np.concatenate(out_attr) if out_attr else np.empty((0, 3, attr.shape[2]))
    ids = np.concatenate(out_ids).astype(np.int32)
    sh = np.concatenate(out_shade)

    zz = cc[:, :, 2]
    inv_z = 1.0 / zz if len(zz) else zz
    v2d = np.empty((len(cc), 3, 2))
    if len(cc):
        v2d[:, :, 0] = K.fx * cc[:, :, 0] * inv_z + K.cx
        v2d[:, :, 1] = K.fy * cc[:, :, 1] * inv_z + K.cy
    attr_over_z = aa * inv_z[:, :, None] if len(aa) else aa
    return v2d, inv_z, attr_over_z, ids, sh, textured


def render(mesh: TriangleMesh, pose: Pose, K: Intrinsics,
           shade: bool = True) -> RenderedView:
    """Rasterize the mesh from `pose`. Deterministic: the same inputs give
    bit-identical buffers for any backend thread count."""
    v2d, inv_z, attr_over_z, ids, shade_f, textured = _prepare(mesh, pose, K, shade)
    if textured:
        rgb, depth, idbuf = _kernels.rasterize_texture(
            v2d, inv_z, attr_over_z, shade_f, ids, mesh.texture,
            K.width, K.height,
        )
    else:
        rgb, depth, idbuf = _kernels.rasterize_color(
            v2d, inv_z, attr_over_z, ids, K.width, K.height,
        )
    return RenderedView(rgb, depth, pose, K, idbuf)


def render_batch(mesh: TriangleMesh, poses, K: Intrinsics,
                 shade: bool = True) -> list[RenderedView]:
    """Element-wise `render` over poses, order preserved."""
    return [render(mesh, p, K, shade=shade) for p in poses]


def depth_edge_mask(depth: np.ndarray, jump: float = 0.5) -> np.ndarray:
    """Pixels adjacent (8-neighborhood) to a depth discontinuity > `jump`.

    Background counts as infinitely far, so silhouettes are flagged too.
    """
    d = np.where(np.isfinite(depth), depth, 1e30)
    h, w = d.shape
    pad = np.pad(d, 1, mode="edge")
    mask = np.zeros((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            mask |= np.abs(d - nb) > jump
    return mask


# -- debug file formats ----------------------------------------------------

def write_depth(path, depth: np.ndarray):
    """Binary depth dump: 16-byte header (magic 'RNCD', u32 width, u32
    height, u32 reserved), then row-major little-endian float32."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != DEPTH_MAGIC:
            raise ParseError(f"{path} is not an RNCD depth file")
        w, h, _ = struct.unpack("<III", head[4:])
        data = np.frombuffer(fh.read(w * h * 4), dtype="<f4")
        if data.size != w * h:
            raise ParseError(f"{path} is truncated")
    return data.reshape(h, w).astype(np.float64)


def save_png(path, rgb: np.ndarray):
    """Write [0,1] float RGB (or a grayscale 2D array) as 8-bit PNG."""
    from PIL import Image

    arr = np.clip(rgb, 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path) -> np.ndarray:
    """Read an image file as float RGB in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma; accepts (H, W, 3) or already-gray (H, W)."""
    if rgb.ndim == 2:
        return rgb
    return rgb[:, :, 0] * 0.299 + rgb[:, :, 1] * 0.587 + rgb[:, :, 2] * 0.114


def rgb_to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
