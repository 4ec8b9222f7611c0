"""Backend-independent setup shared by the rasterizer implementations."""

import numpy as np

TILE = 32


def covered_pixel_bbox(v2d, width, height):
    """Integer pixel bounds [x0, x1] x [y0, y1] each triangle can cover.

    Pixels are sampled at integer coordinates, so the bounds are the
    integer points inside the float bounding box, clamped to the image.
    Triangles covering no integer pixel get x0 > x1.
    """
    xmin = v2d[:, :, 0].min(axis=1)
    xmax = v2d[:, :, 0].max(axis=1)
    ymin = v2d[:, :, 1].min(axis=1)
    ymax = v2d[:, :, 1].max(axis=1)
    x0 = np.maximum(np.ceil(xmin), 0.0).astype(np.int64)
    x1 = np.minimum(np.floor(xmax), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(ymin), 0.0).astype(np.int64)
    y1 = np.minimum(np.floor(ymax), height - 1).astype(np.int64)
    return x0, x1, y0, y1


def bin_triangles(v2d, width, height, tile=TILE):
    """CSR lists of triangle indices per screen tile.

    Returns (tile_offsets (ntiles+1,), tri_indices (K,), tiles_x, tiles_y).
    Triangle order inside each tile is ascending, which makes a strict
    z-buffer comparison resolve depth ties toward the lower triangle id.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    ntiles = tiles_x * tiles_y
    if len(v2d) == 0:
        return np.zeros(ntiles + 1, dtype=np.int64), np.empty(0, dtype=np.int64), tiles_x, tiles_y

    x0, x1, y0, y1 = covered_pixel_bbox(v2d, width, height)
    tx0, tx1 = x0 // tile, x1 // tile
    ty0, ty1 = y0 // tile, y1 // tile
    valid = (x0 <= x1) & (y0 <= y1)
    ntx = np.where(valid, tx1 - tx0 + 1, 0)
    nty = np.where(valid, ty1 - ty0 + 1, 0)
    counts = ntx * nty
    total = int(counts.sum())
    if total == 0:
        return np.zeros(ntiles + 1, dtype=np.int64), np.empty(0, dtype=np.int64), tiles_x, tiles_y

    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    tri_rep = np.repeat(np.arange(len(v2d), dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    ntx_rep = np.repeat(ntx, counts)
    tx = np.repeat(tx0, counts) + local % ntx_rep
    ty = np.repeat(ty0, counts) + local // ntx_rep
    tile_of = ty * tiles_x + tx

    order = np.lexsort((tri_rep, tile_of))
    tile_sorted = tile_of[order]
    tri_sorted = tri_rep[order]
    tile_offsets = np.searchsorted(tile_sorted, np.arange(ntiles + 1))
    return tile_offsets.astype(np.int64), tri_sorted, tiles_x, tiles_y


def alloc_buffers(width, height):
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)
    ids = np.full((height, width), -1, dtype=np.int32)
    return rgb, depth, ids
