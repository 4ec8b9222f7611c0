"""Pure-numpy BVH traversal (fallback backend).

Python-level node stack with vectorized watertight triangle tests per
leaf. Same tie-break as the numba backend: nearest t, then lowest id.
"""

import numpy as np


def _ray_setup(d):
    kz = int(np.argmax(np.abs(d)))
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sz = 1.0 / d[kz]
    return kx, ky, kz, d[kx] * sz, d[ky] * sz, sz


def _leaf_hits(tv0, tv1, tv2, o, kx, ky, kz, sx, sy, sz, tmin):
    """Watertight test over a leaf's triangle block. Returns (t, u, v, w)
    arrays with t = +inf for misses."""
    akx = tv0[:, kx] - o[kx]
    aky = tv0[:, ky] - o[ky]
    akz = tv0[:, kz] - o[kz]
    bkx = tv1[:, kx] - o[kx]
    bky = tv1[:, ky] - o[ky]
    bkz = tv1[:, kz] - o[kz]
    ckx = tv2[:, kx] - o[kx]
    cky = tv2[:, ky] - o[ky]
    ckz = tv2[:, kz] - o[kz]

    ax = akx - sx * akz
    ay = aky - sy * akz
    bx = bkx - sx * bkz
    by = bky - sy * bkz
    cx = ckx - sx * ckz
    cy = cky - sy * ckz

    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    same_sign = ~(((u < 0) | (v < 0) | (w < 0)) & ((u > 0) | (v > 0) | (w > 0)))
    det = u + v + w
    ok = same_sign & (det != 0.0)
    t = np.full(len(tv0), np.inf)
    if ok.any():
        num = u * (sz * akz) + v * (sz * bkz) + w * (sz * ckz)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ok = num[ok] / det[ok]
        t_ok = np.where(t_ok > tmin, t_ok, np.inf)
        t[ok] = t_ok
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(det != 0.0, 1.0 / det, 0.0)
    return t, u * inv, v * inv, w * inv


def _hit_box(bmin, bmax, o, inv_d, tmax):
    lo = (bmin - o) * inv_d
    hi = (bmax - o) * inv_d
    near = np.minimum(lo, hi)
    far = np.maximum(lo, hi)
    # 0 * inf: origin on the slab plane with zero direction component;
    # that axis imposes no constraint
    near = np.where(np.isnan(near), -np.inf, near)
    far = np.where(np.isnan(far), np.inf, far)
    return max(near.max(), 0.0) <= min(far.min(), tmax)


def raycast_single(bvh_arrays, tv0, tv1, tv2, origin, direction, tmin=1e-6):
    node_min, node_max, left, right, start, count, order = bvh_arrays
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    with np.errstate(divide="ignore"):
        inv_d = np.where(d != 0.0, 1.0 / d, np.inf)

    best_t = np.inf
    best_id = -1
    best_bary = (0.0, 0.0, 0.0)
    stack = [0]
    while stack:
        node = stack.pop()
        if not _hit_box(node_min[node], node_max[node], o, inv_d, best_t):
            continue
        if count[node] > 0:
            prims = order[start[node]:start[node] + count[node]]
            t, u, v, w = _leaf_hits(tv0[prims], tv1[prims], tv2[prims], o,
                                    kx, ky, kz, sx, sy, sz, tmin)
            # nearest hit within the leaf, ties to the lowest triangle id
            j = np.lexsort((prims, t))[0]
            if np.isfinite(t[j]):
                tri = int(prims[j])
                if t[j] < best_t or (t[j] == best_t and tri < best_id):
                    best_t = float(t[j])
                    best_id = tri
                    best_bary = (float(u[j]), float(v[j]), float(w[j]))
        else:
            stack.append(int(left[node]))
            stack.append(int(right[node]))
    return best_t, best_id, best_bary[0], best_bary[1], best_bary[2]


def raycast_batch(bvh_arrays, tv0, tv1, tv2, origins, dirs, tmin=1e-6):
    n = len(origins)
    out_t = np.empty(n)
    out_id = np.empty(n, dtype=np.int64)
    out_bary = np.empty((n, 3))
    for i in range(n):
        t, tid, u, v, w = raycast_single(
            bvh_arrays, tv0, tv1, tv2, origins[i], dirs[i], tmin
        )
        out_t[i] = t
        out_id[i] = tid
        out_bary[i] = (u, v, w)
    return out_t, out_id, out_bary
