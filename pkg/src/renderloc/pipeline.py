"""End-to-end localization: sensor prior -> seeds -> render -> match ->
solve, iterated until the pose stops improving or the budget runs out.

One localization round renders the mesh at the current estimate, matches
the query against the rendering, lifts the matches through the rendered
depth, and re-solves the pose. The first round additionally picks the
best of k perturbed seed poses by surviving match count.

All randomness is derived from the config seed with stable hashes, so a
batch gives identical results at any parallelism.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    InsufficientOverlap,
    MatchingFailed,
    NoFloorFound,
    NoModelFound,
    RenderlocError,
    TooFewCorrespondences,
)
from .geom import (
    Intrinsics,
    Pose,
    SensorPrior,
    gps_to_xy,
    rotation_from_gravity_compass,
    yaw_rotated,
)
from .match import (
    MatchSet,
    detect_and_describe,
    filter_fundamental,
    match_descriptors,
    oracle_match,
)
from .mesh import Bvh, TriangleMesh, floor_height, floor_height_low
from .render import RenderedView, load_image, render, render_batch, to_gray
from .solve import RansacConfig, lift_matches, ransac_pnp
from .util import derive_seed, log, stage_timer

STATUS_CONVERGED = "Converged"
STATUS_MATCHING_FAILED = "MatchingFailed"
STATUS_SOLVER_FAILED = "SolverFailed"

ITERATION_TAG_BASE = 1000  # match-set tag for refinement rounds, after seed ids


@dataclass
class PipelineConfig:
    """Knobs for one localization run; defaults follow the method setup
    (k=15 seeds over +-5 m / +-60 deg, h=3 solve rounds, phone at 1.5 m)."""

    k: int = 15
    h: int = 3
    xy_range: float = 5.0
    yaw_range: float = 60.0
    phone_height: float = 1.5
    device: str = "phone"            # phone | uav
    matcher: str = "classical"       # classical | oracle | ingest
    shade: bool = True
    fundamental_filter: bool = True
    refilter_iterations: bool = True
    fund_threshold_px: float = 3.0
    fund_max_iters: int = 1000
    max_keypoints: int = 1200
    ratio: float = 0.9
    oracle_noise_px: float = 1.0
    oracle_outlier_frac: float = 0.2
    oracle_n: int = 300
    gps_origin: tuple | None = None  # (lat0, lon0) for lat/lon priors
    ransac: RansacConfig = field(default_factory=RansacConfig)
    rng_seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.h < 1:
            raise ValueError("k and h must be at least 1")
        if self.xy_range < 0 or self.yaw_range < 0:
            raise ValueError("perturbation ranges must be non-negative")
        if self.matcher not in ("classical", "oracle", "ingest"):
            raise ValueError(f"unknown matcher {self.matcher!r}")
        if self.device not in ("phone", "uav"):
            raise ValueError(f"unknown device {self.device!r}")


@dataclass
class IterationRecord:
    pose: Pose
    match_count: int
    inlier_count: int


@dataclass
class LocalizationResult:
    query_id: str
    final_pose: Pose
    status: str
    trace: list[IterationRecord]
    selected_seed_id: int            # -1 when seed selection never succeeded
    timings: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED


@dataclass
class QuerySpec:
    """One query: image (in memory or on disk), camera, prior, optional GT."""

    id: str
    intrinsics: Intrinsics
    prior: SensorPrior
    image: np.ndarray | None = None
    image_path: str | None = None
    gt_pose: Pose | None = None
    device: str | None = None        # overrides the config default

    def load(self) -> np.ndarray:
        if self.image is not None:
            img = self.image
            if img.dtype == np.uint8:
                return img.astype(np.float64) / 255.0
            return img
        if self.image_path is None:
            raise RenderlocError(f"query {self.id} has no image")
        return load_image(self.image_path)


# -- matchers ------------------------------------------------------------------


class ClassicalMatcher:
    """Harris + patch matching; detects the query once, each render per call."""

    supports_iterations = True

    def __init__(self, query_image, cfg: PipelineConfig):
        self._query_kps = detect_and_describe(
            to_gray(query_image), cfg.max_keypoints
        )
        self._cfg = cfg

    def match(self, rendered: RenderedView, tag: int) -> MatchSet:
        kps = detect_and_describe(to_gray(rendered.rgb), self._cfg.max_keypoints)
        ms = match_descriptors(self._query_kps, kps, self._cfg.ratio)
        return replace(ms, seed_id=tag)


class OracleMatcher:
    """Ground-truth-driven matches with configured noise and outliers.

    Renders the query's GT view lazily once and reuses it for every seed
    and iteration. Per-call RNG streams are derived from (seed, tag).
    """

    supports_iterations = True

    def __init__(self, mesh: TriangleMesh, gt_pose: Pose, K: Intrinsics,
                 cfg: PipelineConfig):
        self._mesh = mesh
        self._gt_pose = gt_pose
        self._K = K
        self._cfg = cfg
        self._gt_view: RenderedView | None = None

    def _view(self) -> RenderedView:
        if self._gt_view is None:
            self._gt_view = render(self._mesh, self._gt_pose, self._K,
                                   shade=self._cfg.shade)
        return self._gt_view

    def match(self, rendered: RenderedView, tag: int) -> MatchSet:
        cfg = self._cfg
        try:
            ms = oracle_match(
                self._view(), rendered,
                noise_px=cfg.oracle_noise_px,
                outlier_frac=cfg.oracle_outlier_frac,
                n=cfg.oracle_n,
                rng_seed=derive_seed(cfg.rng_seed, "oracle", tag),
            )
        except InsufficientOverlap:
            return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0),
                            seed_id=tag)
        return replace(ms, seed_id=tag)


class IngestMatcher:
    """Serves externally computed matches keyed by (query_id, seed_id).

    Offline matchers only see the k seed renderings, so refinement
    rounds beyond the first solve have no match source; the loop ends
    after the initial solve.
    """

    supports_iterations = False

    def __init__(self, matchsets: list[MatchSet], query_id: str):
        self._by_seed = {
            ms.seed_id: ms for ms in matchsets if ms.query_id == query_id
        }

    def match(self, rendered: RenderedView, tag: int) -> MatchSet:
        ms = self._by_seed.get(tag)
        if ms is None:
            return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0),
                            seed_id=tag)
        return ms


def build_matcher(query: QuerySpec, mesh: TriangleMesh, cfg: PipelineConfig,
                  ingested: list[MatchSet] | None = None):
    if cfg.matcher == "classical":
        return ClassicalMatcher(query.load(), cfg)
    if cfg.matcher == "oracle":
        if query.gt_pose is None:
            raise RenderlocError(
                f"query {query.id}: oracle matching needs a ground-truth pose"
            )
        return OracleMatcher(mesh, query.gt_pose, query.intrinsics, cfg)
    if ingested is None:
        raise RenderlocError("matcher=ingest requires a match file")
    return IngestMatcher(ingested, query.id)


# -- prior and seeds -----------------------------------------------------------


def prior_pose(prior: SensorPrior, mesh: TriangleMesh, bvh: Bvh,
               device: str = "phone", phone_height: float = 1.5,
               gps_origin: tuple | None = None) -> Pose:
    """Assemble the 6-DoF prior from position, floor height, and sensors.

    Phones stand `phone_height` above the highest surface in their
    column; UAVs carry their altitude in the prior record.
    """
    if prior.x is not None:
        x, y = float(prior.x), float(prior.y)
    else:
        if gps_origin is None:
            raise RenderlocError("lat/lon prior needs a configured gps_origin")
        x, y = gps_to_xy(prior.lat, prior.lon, gps_origin[0], gps_origin[1])
    if device == "uav":
        if prior.altitude_m is None:
            raise RenderlocError("uav prior needs altitude_m")
        z = float(prior.altitude_m)
    else:
        floor = floor_height(mesh, bvh, x, y)
        if floor is None:
            raise NoFloorFound(f"no surface under prior position ({x:.2f}, {y:.2f})")
        z = floor + phone_height
    R = rotation_from_gravity_compass(prior)
    return Pose.from_center(R, np.array([x, y, z]))


def generate_seeds(prior: Pose, cfg: PipelineConfig) -> list[Pose]:
    """Seed 0 is the untouched prior; the rest perturb x, y uniformly in
    +-xy_range and yaw in +-yaw_range. z, roll, and pitch stay fixed (the
    gravity estimate is trusted, position and heading are not)."""
    seeds = [prior]
    rng = np.random.default_rng(derive_seed(cfg.rng_seed, "seeds"))
    for _ in range(cfg.k - 1):
        dx, dy = rng.uniform(-cfg.xy_range, cfg.xy_range, size=2)
        dyaw = rng.uniform(-cfg.yaw_range, cfg.yaw_range)
        moved = Pose.from_center(prior.R, prior.center + np.array([dx, dy, 0.0]))
        seeds.append(yaw_rotated(moved, dyaw))
    return seeds


@dataclass
class SelectedSeed:
    seed_id: int
    matches: MatchSet
    rendered: RenderedView


def select_seed(query_image, seeds: list[Pose], mesh: TriangleMesh,
                K: Intrinsics, cfg: PipelineConfig, matcher=None,
                views: list[RenderedView] | None = None) -> SelectedSeed:
    """Render every seed, match the query against each, keep the one with
    the most surviving matches (ties to the lowest seed id)."""
    if matcher is None:
        matcher = ClassicalMatcher(query_image, cfg)
    if views is None:
        views = render_batch(mesh, seeds, K, shade=cfg.shade)
    best = None
    for sid, view in enumerate(views):
        ms = matcher.match(view, sid)
        if cfg.fundamental_filter and len(ms):
            ms = filter_fundamental(
                ms, cfg.fund_threshold_px, cfg.fund_max_iters,
                rng_seed=derive_seed(cfg.rng_seed, "fund", sid),
            )
        if best is None or len(ms) > len(best.matches):
            best = SelectedSeed(sid, ms, view)
    if best is None or len(best.matches) < cfg.ransac.min_inliers:
        have = 0 if best is None else len(best.matches)
        raise MatchingFailed(
            f"best seed has {have} matches < min_inliers {cfg.ransac.min_inliers}"
        )
    return best


# -- the loop ------------------------------------------------------------------


def _fallback_prior(prior: SensorPrior, mesh: TriangleMesh,
                    cfg: PipelineConfig, gps_origin) -> Pose:
    """Prior for an off-map position: stand on the mesh's lowest level so
    the failure path still reports a pose."""
    if prior.x is not None:
        x, y = float(prior.x), float(prior.y)
    else:
        x, y = gps_to_xy(prior.lat, prior.lon, gps_origin[0], gps_origin[1])
    z = float(mesh.aabb[0][2]) + cfg.phone_height
    if prior.altitude_m is not None:
        z = float(prior.altitude_m)
    return Pose.from_center(rotation_from_gravity_compass(prior),
                            np.array([x, y, z]))


def localize(query: QuerySpec, mesh: TriangleMesh, bvh: Bvh,
             cfg: PipelineConfig,
             ingested: list[MatchSet] | None = None) -> LocalizationResult:
    """Full render-and-compare localization of one query.

    Failures never raise: the status records what broke and final_pose
    holds the last successful estimate (the prior when nothing solved).
    A round whose pose jumps more than twice the seed range while losing
    inliers is rejected and stops the loop (divergence guard).
    """
    timings: dict[str, float] = {}
    K = query.intrinsics
    device = query.device or cfg.device

    with stage_timer(timings, "prior"):
        try:
            prior = prior_pose(query.prior, mesh, bvh, device=device,
                               phone_height=cfg.phone_height,
                               gps_origin=cfg.gps_origin)
        except NoFloorFound:
            log("WARN", query=query.id, stage="prior",
                msg="no_floor_under_prior_using_mesh_bottom")
            prior = _fallback_prior(query.prior, mesh, cfg, cfg.gps_origin)
        seeds = generate_seeds(prior, cfg)

    def failed(status, pose, trace, seed_id):
        return LocalizationResult(query.id, pose, status, trace, seed_id, timings)

    with stage_timer(timings, "match"):
        try:
            matcher = build_matcher(query, mesh, cfg, ingested)
        except RenderlocError as exc:
            log("WARN", query=query.id, stage="matcher", msg=str(exc))
            return failed(STATUS_MATCHING_FAILED, prior, [], -1)

    def attempt(seed_poses):
        with stage_timer(timings, "render"):
            views = render_batch(mesh, seed_poses, K, shade=cfg.shade)
        with stage_timer(timings, "match"):
            return select_seed(None, seed_poses, mesh, K, cfg,
                               matcher=matcher, views=views)

    try:
        selected = attempt(seeds)
    except MatchingFailed:
        # A prior column topped by a roof strands every seed high above
        # the scene the query actually sees; retry once from the lowest
        # surface in the column before giving up.
        retry_prior = None
        if device == "phone":
            x, y = float(prior.center[0]), float(prior.center[1])
            low = floor_height_low(mesh, bvh, x, y)
            if low is not None and \
                    prior.center[2] - cfg.phone_height - low > 1.0:
                retry_prior = Pose.from_center(
                    prior.R, np.array([x, y, low + cfg.phone_height])
                )
        if retry_prior is None:
            return failed(STATUS_MATCHING_FAILED, prior, [], -1)
        log("INFO", query=query.id, stage="select",
            msg="roof_prior_retry_at_street_level")
        try:
            selected = attempt(generate_seeds(retry_prior, cfg))
        except MatchingFailed:
            return failed(STATUS_MATCHING_FAILED, prior, [], -1)

    trace: list[IterationRecord] = []
    estimate = None
    current_view = selected.rendered
    current_matches = selected.matches
    status = STATUS_CONVERGED

    for round_idx in range(cfg.h):
        with stage_timer(timings, "solve"):
            corrs = lift_matches(current_matches, current_view)
            try:
                result = ransac_pnp(
                    corrs, K,
                    replace(cfg.ransac,
                            rng_seed=derive_seed(cfg.rng_seed, "pnp", round_idx)),
                )
            except (TooFewCorrespondences, NoModelFound):
                status = STATUS_SOLVER_FAILED
                break
        new_record = IterationRecord(result.pose, len(current_matches),
                                     int(result.inlier_mask.sum()))
        if trace:
            jump = float(np.linalg.norm(result.pose.center
                                        - trace[-1].pose.center))
            if jump > 2.0 * cfg.xy_range and \
                    new_record.inlier_count < trace[-1].inlier_count:
                log("WARN", query=query.id, round=round_idx,
                    msg="divergence_guard_stop", jump_m=jump)
                break
        trace.append(new_record)
        estimate = result.pose

        last_round = round_idx == cfg.h - 1
        if last_round or not matcher.supports_iterations:
            break
        with stage_timer(timings, "render"):
            current_view = render(mesh, estimate, K, shade=cfg.shade)
        with stage_timer(timings, "match"):
            ms = matcher.match(current_view, ITERATION_TAG_BASE + round_idx)
            if cfg.fundamental_filter and cfg.refilter_iterations and len(ms):
                ms = filter_fundamental(
                    ms, cfg.fund_threshold_px, cfg.fund_max_iters,
                    rng_seed=derive_seed(cfg.rng_seed, "fund-iter", round_idx),
                )
        if len(ms) < cfg.ransac.min_inliers:
            status = STATUS_MATCHING_FAILED
            break
        current_matches = ms

    final = estimate if estimate is not None else prior
    return LocalizationResult(query.id, final, status, trace,
                              selected.seed_id, timings)


def localize_batch(queries: list[QuerySpec], mesh: TriangleMesh, bvh: Bvh,
                   cfg: PipelineConfig, parallelism: int = 1,
                   ingested: list[MatchSet] | None = None
                   ) -> list[LocalizationResult]:
    """Element-wise localize with per-query seeds hashed from the query id,
    so results are independent of execution order and parallelism."""

    def run_one(query: QuerySpec) -> LocalizationResult:
        per_query = replace(cfg, rng_seed=derive_seed(cfg.rng_seed, query.id))
        try:
            return localize(query, mesh, bvh, per_query, ingested)
        except Exception as exc:  # noqa: BLE001 - batch must never abort
            log("ERROR", query=query.id, msg=f"unexpected_failure:{exc}")
            fallback = _fallback_prior(query.prior, mesh, per_query,
                                       per_query.gps_origin)
            return LocalizationResult(query.id, fallback,
                                      STATUS_MATCHING_FAILED, [], -1, {})

    if parallelism <= 1 or len(queries) <= 1:
        return [run_one(q) for q in queries]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run_one, queries))


# -- manifest / result serialization -------------------------------------------


def pose_to_dict(pose: Pose) -> dict:
    return {"r": [float(x) for x in pose.R.reshape(-1)],
            "t": [float(x) for x in pose.t]}


def pose_from_dict(d) -> Pose:
    return Pose(np.asarray(d["r"], dtype=np.float64).reshape(3, 3),
                np.asarray(d["t"], dtype=np.float64))


def intrinsics_from_dict(d) -> Intrinsics:
    return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                      float(d["cy"]), int(d["width"]), int(d["height"]))


def prior_from_dict(d) -> SensorPrior:
    return SensorPrior(
        heading_deg=float(d["heading_deg"]),
        gravity=np.asarray(d["gravity"], dtype=np.float64),
        x=d.get("x"), y=d.get("y"), lat=d.get("lat"), lon=d.get("lon"),
        altitude_m=d.get("altitude_m"),
    )


def read_manifest(path, image_root=None) -> list[QuerySpec]:
    """Query manifest: JSON Lines, one object per query."""
    import os

    queries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RenderlocError(f"{path}:{line_no}: bad JSON ({exc})")
            img = obj.get("image")
            if img is not None and image_root is not None \
                    and not os.path.isabs(img):
                img = os.path.join(image_root, img)
            queries.append(QuerySpec(
                id=str(obj["id"]),
                intrinsics=intrinsics_from_dict(obj["intrinsics"]),
                prior=prior_from_dict(obj["prior"]),
                image_path=img,
                gt_pose=pose_from_dict(obj["gt_pose"])
                if obj.get("gt_pose") else None,
                device=obj.get("device"),
            ))
    return queries


def result_to_dict(res: LocalizationResult) -> dict:
    """Deterministic wire form: wall times are intentionally excluded so
    repeated runs produce byte-identical result files."""
    return {
        "id": res.query_id,
        "status": res.status,
        "final_pose": pose_to_dict(res.final_pose),
        "selected_seed_id": res.selected_seed_id,
        "trace": [
            {"pose": pose_to_dict(r.pose), "match_count": r.match_count,
             "inlier_count": r.inlier_count}
            for r in res.trace
        ],
    }


def write_results(path, results: list[LocalizationResult]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for res in results:
            fh.write(json.dumps(result_to_dict(res), sort_keys=True) + "\n")
