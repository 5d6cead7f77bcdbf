"""Per-frame mapping pipeline: ground, corn plane, tracking, localization, map."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .errors import RowSlamError
from .geometry import Plane, RigidTransform
from .mapping import MapBuilder, StalkObservation, localize_pixel
from .plane_estimation import (
    corn_plane_normal,
    corridor_plane,
    downsample_uniform,
    estimate_plane_distance,
    orient_ground_axes,
    pca_axes,
    ransac_plane_fit,
    sideview_plane_distance,
)
from .simulator import ObservationLog, RigSpec
from .tracking import FlowTracker, SortTracker

log = logging.getLogger(__name__)

PLANE_SOURCES = ("multiview_sfm", "corridor", "sideview_ransac")
TRACKERS = ("sort", "flow")
ODOMETRY_PROFILES = ("ground", "front", "side")


@dataclass
class RunConfig:
    plane_source: str = "multiview_sfm"
    tracker: str = "sort"
    odometry_profile: str = "ground"
    seed: int = 0
    # ground plane and row direction
    ground_threshold: float = 0.01
    ground_iterations: int = 200
    downsample_cell: float = 0.05
    # corn plane offset
    inlier_px: float = 2.0
    plane_iterations: int = 200
    min_translation: float = 0.005
    min_plane_inliers: int = 8
    sideview_inlier_m: float = 0.02
    corridor_line_offset_px: float = 200.0
    # tracking
    iou_threshold: float = 0.3
    max_age: int = 5
    min_hits: int = 3
    redetect_every: int = 200
    flow_gate_px: float = 20.0
    # map
    min_support: int = 5
    mad_k: float = 3.0
    merge_radius: float = 0.10

    def __post_init__(self):
        if self.plane_source not in PLANE_SOURCES:
            raise ValueError(f"plane_source must be one of {PLANE_SOURCES}")
        if self.tracker not in TRACKERS:
            raise ValueError(f"tracker must be one of {TRACKERS}")
        if self.odometry_profile not in ODOMETRY_PROFILES:
            raise ValueError(f"odometry_profile must be one of {ODOMETRY_PROFILES}")
        positive = ["ground_threshold", "downsample_cell", "inlier_px", "sideview_inlier_m",
                    "corridor_line_offset_px", "flow_gate_px", "mad_k"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("ground_iterations", "plane_iterations", "redetect_every", "min_hits", "min_support"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in [0, 1]")
        if self.max_age < 0 or self.min_translation < 0 or self.merge_radius < 0 or self.min_plane_inliers < 1:
            raise ValueError("max_age, min_translation and merge_radius must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})


# the full method followed by its baseline analogs
BENCHMARK_METHODS = (
    ("ours", {}),
    ("corridor", {"plane_source": "corridor"}),
    ("front_view_slam", {"odometry_profile": "front"}),
    ("side_view_slam", {"odometry_profile": "side"}),
    ("ransac_plane_fitting", {"plane_source": "sideview_ransac"}),
    ("optical_flow", {"tracker": "flow"}),
)


@dataclass
class GroundStage:
    """Front-camera ground plane, row direction and corn normal for one frame."""

    ground_front: Plane
    n_p_front: np.ndarray


@dataclass(eq=False)
class RunResult:
    map: object
    # frame -> [(track_id, det_index)]; det_index is -1 for flow points
    assignments: dict
    dropped: list


def ground_stage(points, config: RunConfig, frame: int) -> GroundStage:
    fit = ransac_plane_fit(points, config.ground_threshold, config.ground_iterations, [config.seed, frame])
    sparse = downsample_uniform(np.asarray(points)[fit.inlier_indices], config.downsample_cell)
    axes = pca_axes(sparse)
    ground, n_g, v_l = orient_ground_axes(fit, axes)
    return GroundStage(ground, corn_plane_normal(n_g, v_l))


def side_step(bundle, profile: str, rig: RigSpec) -> RigidTransform:
    """Side-camera odometry step (frame i-1 -> i) for the requested profile."""
    if profile == "ground":
        step = bundle.odometry
    else:
        try:
            step = bundle.alt_odometry[profile]
        except KeyError:
            raise RowSlamError(f"log has no '{profile}' odometry profile") from None
    if bundle.odometry_frame == "back":
        A = rig.side_from("back")
        step = A @ step @ A.inverse()
    return step


def _corn_plane(bundle, config, rig, ground: GroundStage, step: RigidTransform) -> Plane:
    side_from_front = rig.side_from("front")
    if config.plane_source == "corridor":
        vp = bundle.vp_obs["vp"]
        slope = bundle.vp_obs["slopes"][0]
        dv = config.corridor_line_offset_px
        line_px = (vp[0] + slope * dv, vp[1] + dv)
        est = corridor_plane(vp, line_px, rig.intrinsics["front"], ground.ground_front)
        return est.plane.transformed(side_from_front)
    n_p = side_from_front.rotation @ ground.n_p_front
    if config.plane_source == "sideview_ransac":
        est = sideview_plane_distance(bundle.side_points, n_p, config.sideview_inlier_m,
                                      config.plane_iterations, [config.seed, bundle.frame])
        return est.plane
    if bundle.frame == 0 or len(bundle.matches) == 0:
        raise RowSlamError("no matches with a previous frame")
    m = bundle.matches
    # first view is the current frame, second the previous one
    est = estimate_plane_distance(
        np.column_stack((m[:, 2:], m[:, :2])), rig.intrinsics["side"], step.inverse(), n_p,
        config.min_translation, config.inlier_px, config.plane_iterations,
        [config.seed, bundle.frame], config.min_plane_inliers,
    )
    return est.plane


def _flow_step(tracker: FlowTracker, bundle, gate: float):
    redetect = (tracker.frame + 1) % tracker.redetect_every == 0
    if redetect:
        return tracker.step(None, bundle.detections)
    samples = bundle.displacements
    lost, disp = [], []
    for tid, c in zip(tracker.ids, tracker.centroids):
        if len(samples):
            dist = np.hypot(samples[:, 0] - c[0], samples[:, 1] - c[1])
            k = int(np.argmin(dist))
            if dist[k] <= gate:
                disp.append(samples[k, 2:])
                continue
        lost.append(tid)
    tracker.drop(lost)
    return tracker.step(disp)


def run_pipeline(obs_log: ObservationLog, config: Optional[RunConfig] = None,
                 rig: Optional[RigSpec] = None, ground_cache: Optional[dict] = None,
                 method: str = "") -> RunResult:
    """Process every frame of a log into a semantic map.

    Frames whose ground or corn plane cannot be estimated are dropped from
    localization but still advance the tracker and the trajectory.
    ``ground_cache`` (frame -> GroundStage or exception) lets several runs
    over the same log share the ground stage.
    """
    config = config or RunConfig()
    rig = rig or obs_log.rig
    K = rig.intrinsics["side"]
    side_from_front = rig.side_from("front")
    builder = MapBuilder()
    dropped: list = []
    assignments: dict = {}
    cache = ground_cache if ground_cache is not None else {}

    if config.tracker == "sort":
        tracker = SortTracker(config.iou_threshold, config.max_age, config.min_hits)
    else:
        tracker = FlowTracker(config.redetect_every, tuple(rig.image_size))

    pose = obs_log.anchor_pose
    for k, bundle in enumerate(obs_log.frames):
        step = side_step(bundle, config.odometry_profile, rig)
        if k > 0:
            pose = pose @ step.inverse()
        builder.trajectory.append(pose)

        if config.tracker == "sort":
            boxes = tracker.step(bundle.detections)
            tracked = [(tb.track_id, tb.bbox) for tb in boxes]
            assignments[bundle.frame] = [(tb.track_id, tb.det_index) for tb in boxes]
        else:
            pts = _flow_step(tracker, bundle, config.flow_gate_px)
            tracked = [(fp.track_id, (fp.centroid[0], fp.centroid[1]) * 2) for fp in pts]
            assignments[bundle.frame] = [(fp.track_id, -1) for fp in pts]
        builder.tracks[bundle.frame] = tracked

        if bundle.frame not in cache:
            try:
                cache[bundle.frame] = ground_stage(bundle.ground_points, config, bundle.frame)
            except RowSlamError as exc:
                cache[bundle.frame] = exc
        ground = cache[bundle.frame]
        if isinstance(ground, Exception):
            dropped.append((bundle.frame, "ground", str(ground)))
            continue
        try:
            corn = _corn_plane(bundle, config, rig, ground, step)
        except RowSlamError as exc:
            dropped.append((bundle.frame, "corn_plane", str(exc)))
            continue

        builder.add_planes(ground.ground_front.transformed(pose @ side_from_front),
                           corn.transformed(pose))
        for tid, bbox in tracked:
            centroid = ((bbox[0] + bbox[2]) / 2, (bbox[1] + bbox[3]) / 2)
            try:
                X = localize_pixel(centroid, K, corn, pose)
            except RowSlamError as exc:
                dropped.append((bundle.frame, f"track {tid}", str(exc)))
                continue
            builder.accumulate(StalkObservation(tid, bundle.frame, X))

    for frame, stage, msg in dropped:
        log.debug("frame %d dropped at %s: %s", frame, stage, msg)
    smap = builder.finalize(config.min_support, config.mad_k, config.merge_radius, method)
    return RunResult(smap, assignments, dropped)
