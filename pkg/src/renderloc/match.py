"""2D-2D correspondences between the query image and a rendered view.

Three interchangeable sources feed the pipeline:

  * a classical Harris + patch-descriptor matcher (render poses sit near
    the query, so translation-covariant patches are enough);
  * a ground-truth oracle for synthetic tests, which lifts query pixels
    through the true geometry and re-projects them with controlled noise
    and outliers;
  * a CSV ingestion path for matches computed offline by external
    (learned) matchers.

All sets can then be pruned with a RANSAC fundamental-matrix filter.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ImageTooSmall, InsufficientOverlap, OutOfBounds, ParseError
from .geom import backproject_pixels, project_points
from .render import RenderedView

HARRIS_K = 0.04
NMS_RADIUS = 4
PATCH = 11  # descriptor patch side, 121-dim descriptor
GRID = 8    # spatial bucketing grid
RESPONSE_REL_THRESH = 0.01
MATCH_CSV_HEADER = ["query_id", "seed_id", "u_q", "v_q", "u_r", "v_r", "confidence"]


@dataclass
class Keypoint:
    position: np.ndarray    # (2,) sub-pixel (u, v)
    response: float
    descriptor: np.ndarray  # (121,) unit norm


@dataclass
class MatchSet:
    """Pixel correspondences between one query image and one rendering.

    `degenerate` marks sets the fundamental filter passed through
    unpruned. `outlier_mask` is oracle-only label metadata (True where a
    pair was replaced by a random outlier); real matchers leave it None.
    """

    query_px: np.ndarray   # (N, 2)
    render_px: np.ndarray  # (N, 2)
    confidence: np.ndarray  # (N,) in [0, 1]
    query_id: str = ""
    seed_id: int = 0
    degenerate: bool = False
    outlier_mask: np.ndarray | None = None

    def __post_init__(self):
        self.query_px = np.asarray(self.query_px, dtype=np.float64).reshape(-1, 2)
        self.render_px = np.asarray(self.render_px, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.query_px)

    def subset(self, idx) -> "MatchSet":
        return replace(
            self,
            query_px=self.query_px[idx],
            render_px=self.render_px[idx],
            confidence=self.confidence[idx],
            outlier_mask=None if self.outlier_mask is None else self.outlier_mask[idx],
        )


# -- classical detector/matcher ---------------------------------------------


def _box3(a):
    p = np.pad(a, 1, mode="edge")
    return (p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:])


def _sobel(img):
    p = np.pad(img, 1, mode="edge")
    gx = ((p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
          - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]))
    gy = ((p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
          - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]))
    return gx, gy


def _window_max(a, radius):
    """Running maximum over a (2r+1)^2 window, separable."""
    out = a
    p = np.pad(out, ((radius, radius), (0, 0)), mode="constant",
               constant_values=-np.inf)
    out = p[:a.shape[0]]
    for k in range(1, 2 * radius + 1):
        out = np.maximum(out, p[k:k + a.shape[0]])
    p = np.pad(out, ((0, 0), (radius, radius)), mode="constant",
               constant_values=-np.inf)
    res = p[:, :a.shape[1]]
    for k in range(1, 2 * radius + 1):
        res = np.maximum(res, p[:, k:k + a.shape[1]])
    return res


def harris_response(img):
    """Harris corner response with 3x3 Sobel gradients and a 3x3 window."""
    gx, gy = _sobel(img)
    sxx = _box3(gx * gx)
    syy = _box3(gy * gy)
    sxy = _box3(gx * gy)
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def detect_and_describe(image, max_keypoints: int = 1000) -> list[Keypoint]:
    """Harris corners with sub-pixel refinement and 11x11 patch descriptors.

    Keypoints are spatially bucketed on an 8x8 grid (per-cell quota) so
    one textured corner of the image cannot hog the whole budget.
    Descriptors are mean-subtracted, L2-normalized intensity patches.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("detect_and_describe expects a grayscale image")
    h, w = img.shape
    if h < 32 or w < 32:
        raise ImageTooSmall(f"image {w}x{h} is below the 32x32 minimum")

    r = harris_response(img)
    rmax = r.max()
    if rmax <= 0.0:
        return []
    local_max = r >= _window_max(r, NMS_RADIUS)
    cand = local_max & (r > RESPONSE_REL_THRESH * rmax)
    margin = PATCH // 2 + 1
    cand[:margin, :] = False
    cand[-margin:, :] = False
    cand[:, :margin] = False
    cand[:, -margin:] = False
    ys, xs = np.nonzero(cand)
    if len(ys) == 0:
        return []
    resp = r[ys, xs]

    # strongest first; ties broken by position for determinism
    order = np.lexsort((xs, ys, -resp))
    ys, xs, resp = ys[order], xs[order], resp[order]

    # per-cell quota, then global cap
    quota = max(1, int(np.ceil(max_keypoints / (GRID * GRID))))
    cell = (ys * GRID // h) * GRID + (xs * GRID // w)
    keep = np.zeros(len(ys), dtype=bool)
    used = {}
    for i, c in enumerate(cell):
        if used.get(c, 0) < quota:
            used[c] = used.get(c, 0) + 1
            keep[i] = True
    ys, xs, resp = ys[keep], xs[keep], resp[keep]
    if len(ys) > max_keypoints:
        sel = np.lexsort((xs, ys, -resp))[:max_keypoints]
        ys, xs, resp = ys[sel], xs[sel], resp[sel]

    # sub-pixel peak of the response via a 2D quadratic fit
    dx = (r[ys, xs + 1] - r[ys, xs - 1]) * 0.5
    dy = (r[ys + 1, xs] - r[ys - 1, xs]) * 0.5
    dxx = r[ys, xs + 1] - 2.0 * r[ys, xs] + r[ys, xs - 1]
    dyy = r[ys + 1, xs] - 2.0 * r[ys, xs] + r[ys - 1, xs]
    dxy = (r[ys + 1, xs + 1] - r[ys + 1, xs - 1]
           - r[ys - 1, xs + 1] + r[ys - 1, xs - 1]) * 0.25
    det = dxx * dyy - dxy * dxy
    with np.errstate(divide="ignore", invalid="ignore"):
        off_x = -(dyy * dx - dxy * dy) / det
        off_y = -(dxx * dy - dxy * dx) / det
    bad = ~np.isfinite(off_x) | ~np.isfinite(off_y)
    off_x = np.clip(np.where(bad, 0.0, off_x), -0.5, 0.5)
    off_y = np.clip(np.where(bad, 0.0, off_y), -0.5, 0.5)

    half = PATCH // 2
    dyy_g, dxx_g = np.mgrid[-half:half + 1, -half:half + 1]
    patches = img[ys[:, None, None] + dyy_g, xs[:, None, None] + dxx_g]
    desc = patches.reshape(len(ys), -1)
    desc = desc - desc.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(desc, axis=1)
    ok = norms > 1e-12
    desc = desc[ok] / norms[ok, None]

    kps = []
    for i, j in enumerate(np.nonzero(ok)[0]):
        kps.append(
            Keypoint(
                position=np.array([xs[j] + off_x[j], ys[j] + off_y[j]]),
                response=float(resp[j]),
                descriptor=desc[i],
            )
        )
    return kps


def match_descriptors(a: list[Keypoint], b: list[Keypoint],
                      ratio: float = 0.9) -> MatchSet:
    """Mutual nearest neighbors passing Lowe's ratio test.

    Confidence is 1 - observed ratio: a match whose runner-up is far away
    scores near 1.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must be in (0, 1]")
    if len(a) == 0 or len(b) == 0:
        return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
    da = np.stack([k.descriptor for k in a])
    db = np.stack([k.descriptor for k in b])
    # unit descriptors: ||x - y||^2 = 2 - 2 x.y
    d2 = np.maximum(2.0 - 2.0 * (da @ db.T), 0.0)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    mutual = np.nonzero(nn_ba[nn_ab] == np.arange(len(a)))[0]

    q_px, r_px, conf = [], [], []
    for i in mutual:
        j = nn_ab[i]
        row = np.sqrt(d2[i])
        best = row[j]
        if len(row) > 1:
            second = np.partition(row, 1)[1]
        else:
            second = np.inf
        obs = best / second if second > 0.0 else 1.0
        if obs < ratio:
            q_px.append(a[i].position)
            r_px.append(b[j].position)
            conf.append(1.0 - obs)
    if not q_px:
        return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
    return MatchSet(np.array(q_px), np.array(r_px), np.array(conf))


# -- ground-truth oracle -----------------------------------------------------


def oracle_match(query_gt: RenderedView, rendered: RenderedView,
                 noise_px: float = 0.0, outlier_frac: float = 0.0,
                 n: int = 200, rng_seed: int = 0) -> MatchSet:
    """Correspondences from true geometry plus controlled corruption.

    Samples pixels with finite query depth, lifts them through the query
    ground truth, projects into the rendered view, and keeps pairs that
    land in bounds and pass a 1% relative occlusion check against the
    rendered depth. Gaussian pixel noise is then added on the render
    side, and floor(outlier_frac * kept) pairs are replaced by uniform
    random pixels. `outlier_mask` labels the replaced pairs.
    """
    rng = np.random.default_rng(rng_seed)
    ys, xs = np.nonzero(np.isfinite(query_gt.depth))
    if len(ys) == 0:
        raise InsufficientOverlap("query view has no finite depth")
    if len(ys) > n:
        pick = rng.choice(len(ys), size=n, replace=False)
        ys, xs = ys[pick], xs[pick]

    q_px = np.stack([xs, ys], axis=1).astype(np.float64)
    depths = query_gt.depth[ys, xs]
    world = backproject_pixels(q_px, depths, query_gt.pose, query_gt.intrinsics)
    uv, z = project_points(world, rendered.pose, rendered.intrinsics)

    kr = rendered.intrinsics
    inside = (
        (z > 0.0)
        & (uv[:, 0] >= 0.0) & (uv[:, 0] <= kr.width - 1.0)
        & (uv[:, 1] >= 0.0) & (uv[:, 1] <= kr.height - 1.0)
    )
    ui = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    vi = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    ui = np.clip(ui, 0, kr.width - 1)
    vi = np.clip(vi, 0, kr.height - 1)
    d_r = rendered.depth[vi, ui]
    visible = inside & np.isfinite(d_r) & (np.abs(z - d_r) <= 0.01 * d_r)

    if visible.sum() < 8:
        raise InsufficientOverlap(
            f"only {int(visible.sum())} co-visible pairs survive"
        )
    q_px = q_px[visible]
    r_px = uv[visible]
    m = len(q_px)

    if noise_px > 0.0:
        r_px = r_px + rng.normal(0.0, noise_px, size=r_px.shape)
    outlier_mask = np.zeros(m, dtype=bool)
    k = int(np.floor(outlier_frac * m))
    if k > 0:
        idx = rng.choice(m, size=k, replace=False)
        r_px[idx, 0] = rng.uniform(0.0, kr.width - 1.0, size=k)
        r_px[idx, 1] = rng.uniform(0.0, kr.height - 1.0, size=k)
        outlier_mask[idx] = True
    r_px[:, 0] = np.clip(r_px[:, 0], 0.0, kr.width - 1.0)
    r_px[:, 1] = np.clip(r_px[:, 1], 0.0, kr.height - 1.0)

    return MatchSet(q_px, r_px, np.ones(m), outlier_mask=outlier_mask)


# -- fundamental-matrix pruning ----------------------------------------------


def _hartley_normalize(pts):
    mean = pts.mean(axis=0)
    centered = pts - mean
    dist = np.linalg.norm(centered, axis=1).mean()
    scale = np.sqrt(2.0) / dist if dist > 1e-12 else 1.0
    T = np.array([
        [scale, 0.0, -scale * mean[0]],
        [0.0, scale, -scale * mean[1]],
        [0.0, 0.0, 1.0],
    ])
    return centered * scale, T


def _eight_point(x1, x2):
    """Least-squares fundamental matrix from >= 8 normalized pairs, with
    rank-2 enforcement by SVD truncation."""
    a = np.column_stack([
        x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
        x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
        x1[:, 0], x1[:, 1], np.ones(len(x1)),
    ])
    _, _, vt = np.linalg.svd(a)
    f = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(f)
    s[2] = 0.0
    return u @ np.diag(s) @ vt


def sampson_distance(F, pts1, pts2):
    """First-order geometric distance (pixels) to the epipolar constraint."""
    x1 = np.column_stack([pts1, np.ones(len(pts1))])
    x2 = np.column_stack([pts2, np.ones(len(pts2))])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    e = np.einsum("ij,ij->i", x2, Fx1)
    denom = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(e) / np.sqrt(denom)
    return np.where(np.isfinite(d), d, np.inf)


def filter_fundamental(matches: MatchSet, threshold_px: float = 3.0,
                       max_iters: int = 1000, rng_seed: int = 0) -> MatchSet:
    """RANSAC 8-point pruning of a match set by Sampson distance.

    Returns the inlier subset of the best model. Sets with fewer than 8
    pairs, or whose best inlier ratio stays under 0.25 (planar or
    zero-baseline geometry makes F meaningless), pass through unchanged
    with `degenerate=True`: downstream pose RANSAC still rejects
    outliers, while pruning here would throw away good matches.
    """
    n = len(matches)
    if n < 8:
        return replace(matches, degenerate=True)

    pts1 = matches.query_px
    pts2 = matches.render_px
    n1, t1 = _hartley_normalize(pts1)
    n2, t2 = _hartley_normalize(pts2)

    rng = np.random.default_rng(rng_seed)
    best_count = 0
    best_mask = None
    needed = max_iters
    i = 0
    while i < max_iters and i < needed:
        sample = rng.choice(n, size=8, replace=False)
        f_hat = _eight_point(n1[sample], n2[sample])
        F = t2.T @ f_hat @ t1
        d = sampson_distance(F, pts1, pts2)
        mask = d < threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0 - 1e-12:
                needed = 0
            else:
                needed = int(np.ceil(np.log(1e-4) / np.log(1.0 - w ** 8)))
        i += 1

    if best_count < 0.25 * n:
        return replace(matches, degenerate=True)
    return matches.subset(best_mask)


# -- CSV wire format ----------------------------------------------------------


def ingest_matches(path, image_sizes=None) -> list[MatchSet]:
    """Parse the match CSV into MatchSets keyed by (query_id, seed_id).

    Wire format: header ``query_id,seed_id,u_q,v_q,u_r,v_r,confidence``,
    one match per row, UTF-8, LF line endings. `image_sizes` may be a
    single (width, height) or a mapping query_id -> (width, height); when
    given, coordinates are validated against it. Negative coordinates are
    always rejected.
    """
    groups: dict[tuple[str, int], list] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        if [h.strip() for h in header] != MATCH_CSV_HEADER:
            raise ParseError(
                f"bad header {header!r}, expected {','.join(MATCH_CSV_HEADER)}",
                line=1,
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise ParseError(f"expected 7 fields, got {len(row)}", line=line_no)
            qid = row[0]
            try:
                seed_id = int(row[1])
                u_q, v_q, u_r, v_r = (float(x) for x in row[2:6])
                conf = float(row[6])
            except ValueError:
                raise ParseError(f"bad number in {row!r}", line=line_no)
            if min(u_q, v_q, u_r, v_r) < 0.0:
                raise OutOfBounds(
                    f"negative pixel coordinate in {row!r}", row=line_no
                )
            if image_sizes is not None:
                size = (image_sizes.get(qid) if isinstance(image_sizes, dict)
                        else image_sizes)
                if size is not None:
                    wz, hz = size
                    if max(u_q, u_r) > wz - 1 or max(v_q, v_r) > hz - 1:
                        raise OutOfBounds(
                            f"pixel outside {wz}x{hz} image in {row!r}",
                            row=line_no,
                        )
            if not (0.0 <= conf <= 1.0):
                raise ParseError(f"confidence {conf} outside [0, 1]", line=line_no)
            groups.setdefault((qid, seed_id), []).append((u_q, v_q, u_r, v_r, conf))

    out = []
    for (qid, seed_id), rows in groups.items():
        arr = np.asarray(rows)
        out.append(MatchSet(arr[:, 0:2], arr[:, 2:4], arr[:, 4],
                            query_id=qid, seed_id=seed_id))
    return out


def write_matches(path, matchsets: list[MatchSet]):
    """Inverse of ingest_matches."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(MATCH_CSV_HEADER) + "\n")
        for ms in matchsets:
            for (uq, vq), (ur, vr), c in zip(ms.query_px, ms.render_px,
                                             ms.confidence):
                fh.write(f"{ms.query_id},{ms.seed_id},{uq:.4f},{vq:.4f},"
                         f"{ur:.4f},{vr:.4f},{c:.6f}\n")
