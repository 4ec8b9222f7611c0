"""Pure-numpy rasterizer fallback.

Triangles are processed sequentially in ascending order over their
clamped pixel bounding boxes with vectorized edge tests. Arithmetic per
fragment matches the numba kernels operation for operation, so the two
backends produce the same images.
"""

import numpy as np

from .common import alloc_buffers, covered_pixel_bbox


def _raster_loop(v2d, inv_z, tri_ids, width, height, write_fragment):
    rgb, depth, ids = alloc_buffers(width, height)
    if len(v2d) == 0:
        return rgb, depth, ids
    x0s, x1s, y0s, y1s = covered_pixel_bbox(v2d, width, height)
    for tr in range(len(v2d)):
        x0, x1, y0, y1 = x0s[tr], x1s[tr], y0s[tr], y1s[tr]
        if x0 > x1 or y0 > y1:
            continue
        (ax, ay), (bx, by), (cx, cy) = v2d[tr]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        inv_area = 1.0 / area
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        px = xs.astype(np.float64)
        py = ys.astype(np.float64)
        w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside = ((w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)) | (
            (w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0)
        )
        if not inside.any():
            continue
        l0 = w0 * inv_area
        l1 = w1 * inv_area
        l2 = w2 * inv_area
        iz = l0 * inv_z[tr, 0] + l1 * inv_z[tr, 1] + l2 * inv_z[tr, 2]
        inside &= iz > 0.0
        if not inside.any():
            continue
        with np.errstate(divide="ignore"):
            z = 1.0 / iz
        yy, xx = ys[inside], xs[inside]
        zz = z[inside]
        cur_z = depth[yy, xx]
        cur_id = ids[yy, xx]
        better = (zz < cur_z) | ((zz == cur_z) & (tri_ids[tr] < cur_id))
        if not better.any():
            continue
        yy, xx, zz = yy[better], xx[better], zz[better]
        lam = (l0[inside][better], l1[inside][better], l2[inside][better])
        depth[yy, xx] = zz
        ids[yy, xx] = tri_ids[tr]
        write_fragment(rgb, tr, yy, xx, zz, lam)
    return rgb, depth, ids


def rasterize_color(v2d, inv_z, attr_over_z, tri_ids, width, height):
    def write(rgb, tr, yy, xx, zz, lam):
        l0, l1, l2 = lam
        col = (
            np.outer(l0, attr_over_z[tr, 0])
            + np.outer(l1, attr_over_z[tr, 1])
            + np.outer(l2, attr_over_z[tr, 2])
        ) * zz[:, None]
        rgb[yy, xx] = col

    return _raster_loop(v2d, inv_z, tri_ids, width, height, write)


def rasterize_texture(v2d, inv_z, uv_over_z, shade, tri_ids, texture, width, height):
    th, tw = texture.shape[:2]

    def write(rgb, tr, yy, xx, zz, lam):
        l0, l1, l2 = lam
        u = (l0 * uv_over_z[tr, 0, 0] + l1 * uv_over_z[tr, 1, 0]
             + l2 * uv_over_z[tr, 2, 0]) * zz
        v = (l0 * uv_over_z[tr, 0, 1] + l1 * uv_over_z[tr, 1, 1]
             + l2 * uv_over_z[tr, 2, 1]) * zz
        tc = np.clip(np.floor(u * (tw - 1) + 0.5).astype(np.int64), 0, tw - 1)
        tr_row = np.clip(
            (th - 1) - np.floor(v * (th - 1) + 0.5).astype(np.int64), 0, th - 1
        )
        rgb[yy, xx] = texture[tr_row, tc] * shade[tr]

    return _raster_loop(v2d, inv_z, tri_ids, width, height, write)
