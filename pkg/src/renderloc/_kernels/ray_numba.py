"""Numba BVH traversal with watertight ray/triangle intersection.

The triangle test is the shear-and-scale formulation that cannot leak
rays through shared edges; done in double precision throughout. Ties on
identical hit distance resolve to the lower triangle id so results are
independent of traversal order.
"""

import numpy as np
from numba import njit

_STACK = 128


@njit(cache=True, nogil=True, inline="always")
def _ray_setup(d):
    kz = 0
    if abs(d[1]) > abs(d[kz]):
        kz = 1
    if abs(d[2]) > abs(d[kz]):
        kz = 2
    kx = kz + 1
    if kx == 3:
        kx = 0
    ky = kx + 1
    if ky == 3:
        ky = 0
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sz = 1.0 / d[kz]
    sx = d[kx] * sz
    sy = d[ky] * sz
    return kx, ky, kz, sx, sy, sz


@njit(cache=True, nogil=True, inline="always")
def _intersect_tri(v0, v1, v2, o, kx, ky, kz, sx, sy, sz, tmin, tmax):
    """Returns (hit, t, u, v, w) with barycentric weights for v0, v1, v2."""
    akx = v0[kx] - o[kx]
    aky = v0[ky] - o[ky]
    akz = v0[kz] - o[kz]
    bkx = v1[kx] - o[kx]
    bky = v1[ky] - o[ky]
    bkz = v1[kz] - o[kz]
    ckx = v2[kx] - o[kx]
    cky = v2[ky] - o[ky]
    ckz = v2[kz] - o[kz]

    ax = akx - sx * akz
    ay = aky - sy * akz
    bx = bkx - sx * bkz
    by = bky - sy * bkz
    cx = ckx - sx * ckz
    cy = cky - sy * ckz

    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return False, 0.0, 0.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    az = sz * akz
    bz = sz * bkz
    cz = sz * ckz
    t = (u * az + v * bz + w * cz) / det
    if t <= tmin or t >= tmax:
        return False, 0.0, 0.0, 0.0, 0.0
    inv = 1.0 / det
    return True, t, u * inv, v * inv, w * inv


@njit(cache=True, nogil=True, inline="always")
def _hit_box(bmin, bmax, o, inv_d, tmax):
    t0 = 0.0
    t1 = tmax
    for i in range(3):
        lo = (bmin[i] - o[i]) * inv_d[i]
        hi = (bmax[i] - o[i]) * inv_d[i]
        # 0 * inf: origin exactly on the slab plane with zero direction
        # component; the axis imposes no constraint
        if lo != lo or hi != hi:
            continue
        if lo > hi:
            lo, hi = hi, lo
        if lo > t0:
            t0 = lo
        if hi < t1:
            t1 = hi
        if t0 > t1:
            return False
    return True


@njit(cache=True, nogil=True)
def _traverse(node_min, node_max, left, right, start, count, order,
              tv0, tv1, tv2, o, d, tmin):
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    inv_d = np.empty(3)
    for i in range(3):
        inv_d[i] = 1.0 / d[i] if d[i] != 0.0 else np.inf

    best_t = np.inf
    best_id = -1
    bu = 0.0
    bv = 0.0
    bw = 0.0

    stack = np.empty(_STACK, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _hit_box(node_min[node], node_max[node], o, inv_d, best_t):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                tri = order[k]
                hit, t, u, v, w = _intersect_tri(
                    tv0[tri], tv1[tri], tv2[tri], o,
                    kx, ky, kz, sx, sy, sz, tmin, np.inf,
                )
                if hit and (t < best_t or (t == best_t and tri < best_id)):
                    best_t = t
                    best_id = tri
                    bu, bv, bw = u, v, w
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return best_t, best_id, bu, bv, bw


@njit(cache=True, nogil=True)
def _traverse_batch(node_min, node_max, left, right, start, count, order,
                    tv0, tv1, tv2, origins, dirs, tmin,
                    out_t, out_id, out_bary):
    for i in range(origins.shape[0]):
        t, tid, u, v, w = _traverse(
            node_min, node_max, left, right, start, count, order,
            tv0, tv1, tv2, origins[i], dirs[i], tmin,
        )
        out_t[i] = t
        out_id[i] = tid
        out_bary[i, 0] = u
        out_bary[i, 1] = v
        out_bary[i, 2] = w


def raycast_single(bvh_arrays, tv0, tv1, tv2, origin, direction, tmin=1e-6):
    node_min, node_max, left, right, start, count, order = bvh_arrays
    return _traverse(node_min, node_max, left, right, start, count, order,
                     tv0, tv1, tv2, origin, direction, tmin)


def raycast_batch(bvh_arrays, tv0, tv1, tv2, origins, dirs, tmin=1e-6):
    node_min, node_max, left, right, start, count, order = bvh_arrays
    n = len(origins)
    out_t = np.empty(n)
    out_id = np.empty(n, dtype=np.int64)
    out_bary = np.empty((n, 3))
    _traverse_batch(node_min, node_max, left, right, start, count, order,
                    tv0, tv1, tv2, origins, dirs, tmin,
                    out_t, out_id, out_bary)
    return out_t, out_id, out_bary
