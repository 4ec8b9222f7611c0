"""Numba tile-parallel rasterizer.

Each tile owns its pixels exclusively, so prange over tiles is free of
write races and the output is identical for any thread count. Within a
tile triangles are visited in ascending id order; the strict z test then
awards equal-depth fragments to the lower triangle id.
"""

import numpy as np
from numba import njit, prange

from .common import TILE, alloc_buffers, bin_triangles


@njit(cache=True, parallel=True, nogil=True)
def _raster_color(v2d, inv_z, attr_over_z, tri_ids, tile_offsets, tile_tris,
                  width, height, tile, tiles_x, rgb, depth, idbuf):
    ntiles = tile_offsets.shape[0] - 1
    for ti in prange(ntiles):
        tx = ti % tiles_x
        ty = ti // tiles_x
        px0 = tx * tile
        px1 = min(width - 1, px0 + tile - 1)
        py0 = ty * tile
        py1 = min(height - 1, py0 + tile - 1)
        for k in range(tile_offsets[ti], tile_offsets[ti + 1]):
            tr = tile_tris[k]
            ax, ay = v2d[tr, 0, 0], v2d[tr, 0, 1]
            bx, by = v2d[tr, 1, 0], v2d[tr, 1, 1]
            cx, cy = v2d[tr, 2, 0], v2d[tr, 2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0:
                continue
            inv_area = 1.0 / area
            xmn = min(ax, min(bx, cx))
            xmx = max(ax, max(bx, cx))
            ymn = min(ay, min(by, cy))
            ymx = max(ay, max(by, cy))
            x0 = max(px0, int(np.ceil(xmn)))
            x1 = min(px1, int(np.floor(xmx)))
            y0 = max(py0, int(np.ceil(ymn)))
            y1 = min(py1, int(np.floor(ymx)))
            for y in range(y0, y1 + 1):
                py = float(y)
                for x in range(x0, x1 + 1):
                    px = float(x)
                    w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                    w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                    w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                    if not ((w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0)
                            or (w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0)):
                        continue
                    l0 = w0 * inv_area
                    l1 = w1 * inv_area
                    l2 = w2 * inv_area
                    iz = l0 * inv_z[tr, 0] + l1 * inv_z[tr, 1] + l2 * inv_z[tr, 2]
                    if iz <= 0.0:
                        continue
                    z = 1.0 / iz
                    if z < depth[y, x] or (z == depth[y, x] and tri_ids[tr] < idbuf[y, x]):
                        depth[y, x] = z
                        idbuf[y, x] = tri_ids[tr]
                        for c in range(3):
                            rgb[y, x, c] = (l0 * attr_over_z[tr, 0, c]
                                            + l1 * attr_over_z[tr, 1, c]
                                            + l2 * attr_over_z[tr, 2, c]) * z
    return rgb, depth, idbuf


@njit(cache=True, parallel=True, nogil=True)
def _raster_texture(v2d, inv_z, uv_over_z, shade, tri_ids, texture,
                    tile_offsets, tile_tris, width, height, tile, tiles_x,
                    rgb, depth, idbuf):
    ntiles = tile_offsets.shape[0] - 1
    th = texture.shape[0]
    tw = texture.shape[1]
    for ti in prange(ntiles):
        tx_ = ti % tiles_x
        ty_ = ti // tiles_x
        px0 = tx_ * tile
        px1 = min(width - 1, px0 + tile - 1)
        py0 = ty_ * tile
        py1 = min(height - 1, py0 + tile - 1)
        for k in range(tile_offsets[ti], tile_offsets[ti + 1]):
            tr = tile_tris[k]
            ax, ay = v2d[tr, 0, 0], v2d[tr, 0, 1]
            bx, by = v2d[tr, 1, 0], v2d[tr, 1, 1]
            cx, cy = v2d[tr, 2, 0], v2d[tr, 2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0:
                continue
            inv_area = 1.0 / area
            xmn = min(ax, min(bx, cx))
            xmx = max(ax, max(bx, cx))
            ymn = min(ay, min(by, cy))
            ymx = max(ay, max(by, cy))
            x0 = max(px0, int(np.ceil(xmn)))
            x1 = min(px1, int(np.floor(xmx)))
            y0 = max(py0, int(np.ceil(ymn)))
            y1 = min(py1, int(np.floor(ymx)))
            for y in range(y0, y1 + 1):
                py = float(y)
                for x in range(x0, x1 + 1):
                    px = float(x)
                    w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                    w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                    w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                    if not ((w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0)
                            or (w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0)):
                        continue
                    l0 = w0 * inv_area
                    l1 = w1 * inv_area
                    l2 = w2 * inv_area
                    iz = l0 * inv_z[tr, 0] + l1 * inv_z[tr, 1] + l2 * inv_z[tr, 2]
                    if iz <= 0.0:
                        continue
                    z = 1.0 / iz
                    if z < depth[y, x] or (z == depth[y, x] and tri_ids[tr] < idbuf[y, x]):
                        depth[y, x] = z
                        idbuf[y, x] = tri_ids[tr]
                        u = (l0 * uv_over_z[tr, 0, 0] + l1 * uv_over_z[tr, 1, 0]
                             + l2 * uv_over_z[tr, 2, 0]) * z
                        v = (l0 * uv_over_z[tr, 0, 1] + l1 * uv_over_z[tr, 1, 1]
                             + l2 * uv_over_z[tr, 2, 1]) * z
                        # nearest texel (half-up rounding, identical in
                        # both backends); OBJ uv origin is bottom-left
                        tc = int(np.floor(u * (tw - 1) + 0.5))
                        tr_row = (th - 1) - int(np.floor(v * (th - 1) + 0.5))
                        tc = min(max(tc, 0), tw - 1)
                        tr_row = min(max(tr_row, 0), th - 1)
                        s = shade[tr]
                        for c in range(3):
                            rgb[y, x, c] = texture[tr_row, tc, c] * s
    return rgb, depth, idbuf


def rasterize_color(v2d, inv_z, attr_over_z, tri_ids, width, height):
    rgb, depth, ids = alloc_buffers(width, height)
    if len(v2d):
        offsets, tris, tiles_x, _ = bin_triangles(v2d, width, height, TILE)
        _raster_color(v2d, inv_z, attr_over_z, tri_ids, offsets, tris,
                      width, height, TILE, tiles_x, rgb, depth, ids)
    return rgb, depth, ids


def rasterize_texture(v2d, inv_z, uv_over_z, shade, tri_ids, texture, width, height):
    rgb, depth, ids = alloc_buffers(width, height)
    if len(v2d):
        offsets, tris, tiles_x, _ = bin_triangles(v2d, width, height, TILE)
        _raster_texture(v2d, inv_z, uv_over_z, shade, tri_ids, texture,
                        offsets, tris, width, height, TILE, tiles_x,
                        rgb, depth, ids)
    return rgb, depth, ids
