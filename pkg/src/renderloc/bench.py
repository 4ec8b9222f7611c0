"""Synthetic benchmark: scene fixture, query generation, recall metrics,
and the iteration/seed ablation driver.

Queries are renderings of the same mesh the pipeline localizes against,
which isolates the geometry and convergence behavior from feature
domain-gap effects. Priors are the ground truth corrupted by uniform
noise in x, y, and yaw, mirroring how the real sensor priors degrade.
"""

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MissingGroundTruth, SceneTooSmall
from .geom import Intrinsics, Pose, SensorPrior, heading_of, pose_error, \
    pose_from_heading_pitch
from .mesh import Bvh, TriangleMesh, build_bvh, floor_height
from .pipeline import (
    LocalizationResult,
    PipelineConfig,
    QuerySpec,
    localize_batch,
)
from .render import render, rgb_to_uint8
from .util import derive_seed, log

DEFAULT_THRESHOLDS = [(0.25, 2.0), (0.5, 5.0), (1.0, 10.0)]
SEED_MODES = ("none", "xy", "yaw", "both")
COVERAGE_MIN = 0.3
STRUCTURE_MIN = 0.08  # ground queries must see some above-ground geometry
MAX_REJECTS = 1000


@dataclass
class Thresholds:
    """Ordered (translation m, rotation deg) recall gates, loosening."""

    pairs: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))

    def __post_init__(self):
        pairs = [(float(t), float(r)) for t, r in self.pairs]
        for (t0, r0), (t1, r1) in zip(pairs, pairs[1:]):
            if not (t1 > t0 and r1 > r0):
                raise ValueError("thresholds must strictly increase in both parts")
        self.pairs = pairs

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


@dataclass
class BenchmarkCase:
    query: QuerySpec
    noise_applied: tuple  # (dx m, dy m, dyaw deg) for stratified reporting
    scene_id: str = "fixture"

    @property
    def gt_pose(self) -> Pose:
        return self.query.gt_pose


# -- fixture scene ---------------------------------------------------------


def fixture_scene(n_target: int = 2000, extent: float = 80.0,
                  seed: int = 0) -> TriangleMesh:
    """Procedural town-block fixture: a color-tiled ground plane plus a
    scatter of colored boxes.

    Vertices are duplicated per face so colors step sharply at every
    edge, which gives the classical matcher dense, distinctive corners.
    Roughly `n_target` triangles.
    """
    rng = np.random.default_rng(seed)
    verts, tris, cols = [], [], []

    def add_quad(p0, p1, p2, p3, color):
        base = len(verts)
        verts.extend([p0, p1, p2, p3])
        cols.extend([color] * 4)
        tris.append((base, base + 1, base + 2))
        tris.append((base, base + 2, base + 3))

    n_boxes = 20
    box_quads = n_boxes * 5  # 4 walls + roof
    grid = max(4, int(math.sqrt(max(1, (n_target // 2) - box_quads * 2))))
    cell = extent / grid
    half = extent / 2.0
    for gy in range(grid):
        for gx in range(grid):
            x0, y0 = -half + gx * cell, -half + gy * cell
            base_col = np.array([0.25, 0.45, 0.25]) if (gx + gy) % 2 == 0 \
                else np.array([0.55, 0.5, 0.4])
            color = np.clip(base_col + rng.uniform(-0.18, 0.18, 3), 0.05, 0.95)
            add_quad([x0, y0, 0.0], [x0 + cell, y0, 0.0],
                     [x0 + cell, y0 + cell, 0.0], [x0, y0 + cell, 0.0], color)

    for _ in range(n_boxes):
        w, d = rng.uniform(3.0, 7.0, 2)
        h = rng.uniform(3.0, 9.0)
        cx, cy = rng.uniform(-half * 0.75, half * 0.75, 2)
        x0, x1 = cx - w / 2, cx + w / 2
        y0, y1 = cy - d / 2, cy + d / 2
        wall_col = np.clip(rng.uniform(0.2, 0.9, 3), 0.05, 0.95)
        trim = np.clip(wall_col + rng.uniform(-0.3, 0.3, 3), 0.05, 0.95)
        add_quad([x0, y0, 0], [x1, y0, 0], [x1, y0, h], [x0, y0, h], wall_col)
        add_quad([x1, y1, 0], [x0, y1, 0], [x0, y1, h], [x1, y1, h], wall_col)
        add_quad([x1, y0, 0], [x1, y1, 0], [x1, y1, h], [x1, y0, h], trim)
        add_quad([x0, y1, 0], [x0, y0, 0], [x0, y0, h], [x0, y1, h], trim)
        add_quad([x0, y0, h], [x1, y0, h], [x1, y1, h], [x0, y1, h],
                 np.clip(trim * 0.7, 0.05, 0.95))

    return TriangleMesh(np.asarray(verts, dtype=np.float64),
                        np.asarray(tris, dtype=np.int32),
                        np.asarray(cols, dtype=np.float64))


def default_intrinsics(width: int = 320, height: int = 240,
                       hfov_deg: float = 70.0) -> Intrinsics:
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return Intrinsics(f, f, width / 2.0, height / 2.0, width, height)


# -- benchmark generation ----------------------------------------------------


def _structure_fraction(view, ground_z: float, subsample: int = 3) -> float:
    """Fraction of pixels seeing geometry above the ground level.

    Views of bare ground at grazing angles carry no depth-stable
    correspondences for any matcher; ground-style queries are required
    to photograph some structure, like real localization queries do.
    """
    from .geom import backproject_pixels

    d = view.depth[::subsample, ::subsample]
    ys, xs = np.nonzero(np.isfinite(d))
    if len(ys) == 0:
        return 0.0
    px = np.stack([xs * subsample, ys * subsample], axis=1).astype(np.float64)
    world = backproject_pixels(px, d[ys, xs], view.pose, view.intrinsics)
    elevated = world[:, 2] > ground_z + 0.3
    return float(elevated.sum()) / d.size


def _sample_gt_pose(mesh, bvh, sampler, rng):
    bmin, bmax = mesh.aabb
    margin = 6.0
    x = rng.uniform(bmin[0] + margin, bmax[0] - margin)
    y = rng.uniform(bmin[1] + margin, bmax[1] - margin)
    floor = floor_height(mesh, bvh, x, y)
    if floor is None:
        return None
    if sampler == "ground":
        # phones stand on walkable ground, not rooftops
        if floor > bmin[2] + 0.5:
            return None
        z = floor + 1.5
        pitch = rng.uniform(-10.0, 20.0)
    else:
        z = floor + rng.uniform(15.0, 40.0)
        pitch = rng.uniform(-60.0, -20.0)
    heading = rng.uniform(0.0, 360.0)
    return pose_from_heading_pitch(np.array([x, y, z]), heading, pitch)


def make_benchmark(mesh: TriangleMesh, bvh: Bvh, n_queries: int,
                   pose_sampler: str = "ground",
                   noise_xy: float = 5.0, noise_yaw: float = 60.0,
                   intrinsics: Intrinsics | None = None,
                   rng_seed: int = 0, shade: bool = True,
                   min_coverage: float = COVERAGE_MIN) -> list[BenchmarkCase]:
    """Render `n_queries` ground-truth views and attach noisy priors.

    GT poses are rejection-sampled until at least `min_coverage` of the
    image sees geometry; SceneTooSmall after 1000 consecutive rejects.
    Priors perturb x, y by U(+-noise_xy) and yaw by U(+-noise_yaw); the
    gravity direction is taken exact, matching how real devices behave.
    """
    if pose_sampler not in ("ground", "aerial"):
        raise ValueError(f"unknown pose sampler {pose_sampler!r}")
    K = intrinsics or default_intrinsics()
    rng = np.random.default_rng(rng_seed)
    cases = []
    rejects = 0
    while len(cases) < n_queries:
        gt = _sample_gt_pose(mesh, bvh, pose_sampler, rng)
        if gt is not None:
            view = render(mesh, gt, K, shade=shade)
            ok = view.coverage >= min_coverage
            if ok and pose_sampler == "ground":
                ok = _structure_fraction(view, float(mesh.aabb[0][2])) \
                    >= STRUCTURE_MIN
            if ok:
                rejects = 0
                dx = rng.uniform(-noise_xy, noise_xy)
                dy = rng.uniform(-noise_xy, noise_xy)
                dyaw = rng.uniform(-noise_yaw, noise_yaw)
                center = gt.center
                gravity = gt.R @ np.array([0.0, 0.0, -1.0])
                gravity /= np.linalg.norm(gravity)
                prior = SensorPrior(
                    heading_deg=(heading_of(gt) + dyaw) % 360.0,
                    gravity=gravity,
                    x=float(center[0] + dx), y=float(center[1] + dy),
                    altitude_m=float(center[2])
                    if pose_sampler == "aerial" else None,
                )
                qid = f"{pose_sampler}-{len(cases):04d}"
                query = QuerySpec(
                    id=qid, intrinsics=K, prior=prior,
                    image=rgb_to_uint8(view.rgb), gt_pose=gt,
                    device="uav" if pose_sampler == "aerial" else "phone",
                )
                cases.append(BenchmarkCase(query, (dx, dy, dyaw)))
                continue
        rejects += 1
        if rejects >= MAX_REJECTS:
            raise SceneTooSmall(
                f"{MAX_REJECTS} consecutive pose rejections; scene too small"
            )
    return cases


# -- metrics ------------------------------------------------------------------


def recall(results: list[LocalizationResult], gts: list[Pose],
           thresholds: Thresholds | None = None) -> list[float]:
    """Fraction of queries jointly within each (trans, rot) gate.

    Non-converged queries count as misses outright: a failure that
    happens to leave the prior near the truth is still a failure.
    """
    thresholds = thresholds or Thresholds()
    if len(results) != len(gts):
        raise ValueError("results and ground truths differ in length")
    for res, gt in zip(results, gts):
        if gt is None:
            raise MissingGroundTruth(f"query {res.query_id} has no GT pose")
    if not results:
        return [0.0 for _ in thresholds]
    errors = []
    for res, gt in zip(results, gts):
        if not res.converged:
            errors.append((np.inf, np.inf))
        else:
            errors.append(pose_error(res.final_pose, gt))
    out = []
    for t_thr, r_thr in thresholds:
        hits = sum(1 for te, re_ in errors if te <= t_thr and re_ <= r_thr)
        out.append(hits / len(errors))
    return out


def per_query_errors(results, gts):
    """(trans m, rot deg) per query; misses are +inf."""
    out = []
    for res, gt in zip(results, gts):
        out.append(pose_error(res.final_pose, gt) if res.converged
                   else (np.inf, np.inf))
    return out


# -- ablation driver -----------------------------------------------------------


def seed_mode_config(cfg: PipelineConfig, mode: str) -> PipelineConfig:
    """Table-style seed ablation: none disables augmentation entirely,
    xy and yaw keep one axis each, both keeps the full box."""
    if mode == "none":
        return replace(cfg, k=1)
    if mode == "xy":
        return replace(cfg, yaw_range=0.0)
    if mode == "yaw":
        return replace(cfg, xy_range=0.0)
    if mode == "both":
        return cfg
    raise ValueError(f"unknown seed mode {mode!r}")


@dataclass
class AblationCell:
    h: int
    seed_mode: str
    matcher: str
    recalls: list[float]
    n_converged: int
    failed: bool = False


@dataclass
class AblationReport:
    thresholds: Thresholds
    cells: list[AblationCell]
    per_query: dict = field(default_factory=dict)

    def cell(self, h: int, seed_mode: str, matcher: str) -> AblationCell | None:
        for c in self.cells:
            if c.h == h and c.seed_mode == seed_mode and c.matcher == matcher:
                return c
        return None


def run_ablation(mesh: TriangleMesh, bvh: Bvh, benchmark: list[BenchmarkCase],
                 base_cfg: PipelineConfig, grid: list[dict],
                 thresholds: Thresholds | None = None,
                 parallelism: int = 1) -> AblationReport:
    """Run localize_batch once per grid cell on the identical benchmark.

    Each cell dict holds h, seed_mode, and matcher. The benchmark cases
    and the base rng seed are shared bit-identically across cells, so
    recall differences are attributable to the config alone.
    """
    thresholds = thresholds or Thresholds()
    queries = [case.query for case in benchmark]
    gts = [case.gt_pose for case in benchmark]
    report = AblationReport(thresholds, [])
    for cell_spec in grid:
        h = int(cell_spec.get("h", base_cfg.h))
        seed_mode = cell_spec.get("seed_mode", "both")
        matcher = cell_spec.get("matcher", base_cfg.matcher)
        cfg = seed_mode_config(
            replace(base_cfg, h=h, matcher=matcher), seed_mode
        )
        log("INFO", stage="ablation", h=h, seed_mode=seed_mode, matcher=matcher,
            queries=len(queries))
        try:
            results = localize_batch(queries, mesh, bvh, cfg,
                                     parallelism=parallelism)
            cell = AblationCell(
                h, seed_mode, matcher,
                recall(results, gts, thresholds),
                sum(1 for r in results if r.converged),
            )
            report.per_query[(h, seed_mode, matcher)] = per_query_errors(
                results, gts
            )
        except Exception as exc:  # noqa: BLE001 - mark the cell, keep going
            log("ERROR", stage="ablation", h=h, seed_mode=seed_mode,
                msg=f"cell_failed:{exc}")
            cell = AblationCell(h, seed_mode, matcher,
                                [0.0] * len(thresholds), 0, failed=True)
        report.cells.append(cell)
    return report


def check_trends(report: AblationReport) -> list[str]:
    """Violations of the expected ablation orderings (empty = all good).

    Iterations: recall must not drop from h=1 to h=3 at any threshold and
    must strictly rise at the tightest one. Seeds: the full box beats
    each single axis, single axes are not below no augmentation, and the
    strict gaps both > xy-only and yaw-only > none must hold at the
    loosest threshold.
    """
    violations = []
    for matcher in {c.matcher for c in report.cells}:
        h_cells = {c.h: c for c in report.cells
                   if c.matcher == matcher and c.seed_mode == "both"
                   and not c.failed}
        if 1 in h_cells and 3 in h_cells:
            tight1 = h_cells[1].recalls[0]
            tight3 = h_cells[3].recalls[0]
            if not tight3 > tight1:
                violations.append(
                    f"{matcher}: recall@tightest h=3 ({tight3:.3f}) "
                    f"not above h=1 ({tight1:.3f})"
                )
            for ti in range(len(report.thresholds)):
                if h_cells[3].recalls[ti] < h_cells[1].recalls[ti] - 1e-12:
                    violations.append(
                        f"{matcher}: recall[{ti}] drops from h=1 to h=3"
                    )
        modes = {c.seed_mode: c for c in report.cells
                 if c.matcher == matcher and not c.failed}
        if all(m in modes for m in SEED_MODES):
            h_vals = {modes[m].h for m in SEED_MODES}
            if len(h_vals) == 1:
                loose = len(report.thresholds) - 1
                r = {m: modes[m].recalls[loose] for m in SEED_MODES}
                if not r["both"] > r["xy"]:
                    violations.append(
                        f"{matcher}: both ({r['both']:.3f}) not above "
                        f"xy-only ({r['xy']:.3f})"
                    )
                if not r["yaw"] > r["none"]:
                    violations.append(
                        f"{matcher}: yaw-only ({r['yaw']:.3f}) not above "
                        f"none ({r['none']:.3f})"
                    )
                if r["both"] < max(r["xy"], r["yaw"]) - 1e-12:
                    violations.append(f"{matcher}: both below a single axis")
                if max(r["xy"], r["yaw"]) < r["none"] - 1e-12:
                    violations.append(
                        f"{matcher}: best single axis below none"
                    )
    return violations


# -- report output --------------------------------------------------------------


def write_report_csv(path, report: AblationReport):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["matcher", "h", "seed_mode", "n_converged", "failed"]
        header += [f"recall@{t}m_{r}deg" for t, r in report.thresholds]
        writer.writerow(header)
        for c in report.cells:
            row = [c.matcher, c.h, c.seed_mode, c.n_converged, int(c.failed)]
            row += [f"{x:.6f}" for x in c.recalls]
            writer.writerow(row)


def write_summary_json(path, report: AblationReport, extra=None):
    payload = {
        "thresholds": [list(t) for t in report.thresholds],
        "cells": [
            {"matcher": c.matcher, "h": c.h, "seed_mode": c.seed_mode,
             "recalls": c.recalls, "n_converged": c.n_converged,
             "failed": c.failed}
            for c in report.cells
        ],
        "per_query_errors": {
            f"h{h}-{mode}-{matcher}": [
                [e if math.isfinite(e) else None for e in pair]
                for pair in pairs
            ]
            for (h, mode, matcher), pairs in sorted(report.per_query.items())
        },
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_error_cdf_png(path, report: AblationReport):
    """Optional translation-error CDF plot; needs matplotlib."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log("WARN", stage="plot", msg="matplotlib_missing_skipping_cdf")
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, pairs in sorted(report.per_query.items()):
        errs = np.sort([p[0] for p in pairs if math.isfinite(p[0])])
        if len(errs) == 0:
            continue
        frac = np.arange(1, len(errs) + 1) / len(pairs)
        ax.step(errs, frac, where="post", label=f"h{key[0]}-{key[1]}-{key[2]}")
    ax.set_xlabel("translation error [m]")
    ax.set_ylabel("fraction of queries")
    ax.set_xlim(0, 2.0)
    ax.set_ylim(0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return True
