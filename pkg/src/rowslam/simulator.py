"""Deterministic synthetic cornfield and the observation streams of a three-camera rig.

Frames
    The rig frame sits on the ground between the rows: x forward, y left,
    z up. The observed corn row is the left one, at ``y = +row_width / 2``
    in the world. The side camera looks left at the row; the front camera
    looks ahead, pitched down; the back camera looks behind, pitched down.

Every random draw for frame ``i`` comes from
``np.random.default_rng([seed, i, stream])`` so frames are independent of
rendering order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IndexOutOfRange, LogFormatError
from .geometry import (
    CameraIntrinsics,
    Plane,
    RigidTransform,
    backproject_rays,
    rotation_about,
    rotation_from_rotvec,
)
from .tracking import Detection

LOG_FORMAT_VERSION = 1
SCENE_FORMAT_VERSION = 1

# rng stream ids
_DETECT, _FALSE_POS, _MATCH, _GROUND, _ODOM, _FLOW, _SIDE = range(7)
_PROFILE_STREAMS = {"front": 20, "side": 21}
_SCENE_STREAM = 1 << 20
_WOBBLE_STREAM = 1 << 21
_VP_STREAM = 1 << 22


def _frame_rng(seed: int, frame: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, frame, stream])


def _check_unit_interval(obj, names):
    for name in names:
        v = getattr(obj, name)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _check_nonneg(obj, names):
    for name in names:
        v = getattr(obj, name)
        if not v >= 0.0:
            raise ValueError(f"{name} must be non-negative, got {v}")


def _from_known(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass
class FieldSpec:
    stalk_count: int = 40
    mean_spacing: float = 0.20
    spacing_jitter: float = 0.02
    row_width: float = 0.70
    stalk_height: float = 0.60
    stalk_width: float = 0.03
    weed_outlier_rate: float = 0.2

    def __post_init__(self):
        if self.stalk_count < 0:
            raise ValueError("stalk_count must be non-negative")
        if not self.mean_spacing > 0:
            raise ValueError("mean_spacing must be positive")
        if not self.row_width > 0:
            raise ValueError("row_width must be positive")
        if not (self.stalk_height > 0 and self.stalk_width > 0):
            raise ValueError("stalk dimensions must be positive")
        _check_nonneg(self, ["spacing_jitter"])
        _check_unit_interval(self, ["weed_outlier_rate"])

    @property
    def row_offset(self) -> float:
        return self.row_width / 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSpec":
        return _from_known(cls, d)


def camera_mount(position, forward, right) -> RigidTransform:
    """Extrinsic ``camera <- rig`` for a camera at ``position`` looking along ``forward``."""
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    x = np.asarray(right, dtype=float)
    x = x - (x @ z) * z
    x = x / np.linalg.norm(x)
    R = np.vstack((x, np.cross(z, x), z))
    return RigidTransform(R, -R @ np.asarray(position, dtype=float))


def _default_intrinsics() -> dict:
    K = CameraIntrinsics(380.0, 380.0, 319.5, 239.5)
    return {"front": K, "side": K, "back": K}


def _default_extrinsics() -> dict:
    front_pitch, back_pitch = math.radians(20.0), math.radians(35.0)
    return {
        "front": camera_mount(
            (0.25, 0.0, 0.30), (math.cos(front_pitch), 0.0, -math.sin(front_pitch)), (0.0, -1.0, 0.0)
        ),
        "side": camera_mount((0.0, 0.0, 0.25), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)),
        "back": camera_mount(
            (-0.25, 0.0, 0.30), (-math.cos(back_pitch), 0.0, -math.sin(back_pitch)), (0.0, 1.0, 0.0)
        ),
    }


@dataclass
class RigSpec:
    intrinsics: dict = dc_field(default_factory=_default_intrinsics)
    extrinsics: dict = dc_field(default_factory=_default_extrinsics)
    frame_rate: float = 30.0
    image_size: tuple = (640, 480)

    def __post_init__(self):
        for name in ("front", "side", "back"):
            if name not in self.intrinsics or name not in self.extrinsics:
                raise ValueError(f"rig needs intrinsics and extrinsics for the {name} camera")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    def side_from(self, camera: str) -> RigidTransform:
        """Transform taking ``camera`` coordinates to side-camera coordinates."""
        return self.extrinsics["side"] @ self.extrinsics[camera].inverse()

    def to_dict(self) -> dict:
        return {
            "intrinsics": {k: v.to_dict() for k, v in self.intrinsics.items()},
            "extrinsics": {k: v.to_dict() for k, v in self.extrinsics.items()},
            "frame_rate": self.frame_rate,
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigSpec":
        base = cls()
        intr = dict(base.intrinsics)
        intr.update({k: CameraIntrinsics.from_dict(v) for k, v in d.get("intrinsics", {}).items()})
        extr = dict(base.extrinsics)
        extr.update({k: RigidTransform.from_dict(v) for k, v in d.get("extrinsics", {}).items()})
        return cls(intr, extr, float(d.get("frame_rate", base.frame_rate)),
                   tuple(d.get("image_size", base.image_size)))


@dataclass
class NoiseSpec:
    pixel_sigma: float = 1.0
    match_outlier_rate: float = 0.2
    depth_sigma: float = 0.005
    detect_dropout: float = 0.1
    false_positive_rate: float = 0.05
    odom_rot_sigma: float = 1e-4
    odom_trans_sigma: float = 5e-5
    vp_sigma: float = 8.0
    vp_correlation_frames: float = 30.0
    flow_sigma: float = 0.8
    side_clutter_rate: float = 0.7
    # off-plane match contaminants sit this far (m) in front of the corn plane
    leaf_offset_min: float = 0.05
    leaf_offset_max: float = 0.20
    # leaves occluding the stalks in side-view depth, several per box
    side_leaf_offset_min: float = 0.01
    side_leaf_offset_max: float = 0.06
    side_leaves_per_box: int = 3
    # odometry-noise multipliers standing in for SLAM fed by other camera views
    profile_factors: dict = dc_field(default_factory=lambda: {"front": 10.0, "side": 20.0})

    def __post_init__(self):
        _check_unit_interval(self, ["match_outlier_rate", "detect_dropout", "side_clutter_rate"])
        _check_nonneg(self, ["pixel_sigma", "depth_sigma", "false_positive_rate", "odom_rot_sigma",
                             "odom_trans_sigma", "vp_sigma", "vp_correlation_frames", "flow_sigma"])
        if not (0 < self.leaf_offset_min <= self.leaf_offset_max
                and 0 < self.side_leaf_offset_min <= self.side_leaf_offset_max):
            raise ValueError("leaf offsets must satisfy 0 < min <= max")
        if self.side_leaves_per_box < 1:
            raise ValueError("side_leaves_per_box must be at least 1")
        for k, v in self.profile_factors.items():
            if not v >= 1.0:
                raise ValueError(f"profile factor {k} must be at least 1")

    @classmethod
    def noise_free(cls) -> "NoiseSpec":
        return cls(pixel_sigma=0.0, match_outlier_rate=0.0, depth_sigma=0.0, detect_dropout=0.0,
                   false_positive_rate=0.0, odom_rot_sigma=0.0, odom_trans_sigma=0.0, vp_sigma=0.0,
                   flow_sigma=0.0, side_clutter_rate=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return _from_known(cls, d)


@dataclass
class WobbleSpec:
    """Sinusoidal lateral offset (m) and yaw (rad) of the rig along its path."""

    lateral: float = 0.01
    yaw: float = 0.01
    period: float = 1.5

    def __post_init__(self):
        _check_nonneg(self, ["lateral", "yaw"])
        if not self.period > 0:
            raise ValueError("wobble period must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WobbleSpec":
        return _from_known(cls, d)


@dataclass
class SamplingSpec:
    matches_per_frame: int = 60
    side_points_per_box: int = 20
    ground_pixel_step: int = 16
    ground_max_range: float = 3.0
    ground_margin: float = 0.05
    odometry_frame: str = "side"

    def __post_init__(self):
        if self.odometry_frame not in ("side", "back"):
            raise ValueError("odometry_frame must be 'side' or 'back'")
        if self.matches_per_frame < 0 or self.side_points_per_box < 0 or self.ground_pixel_step <= 0:
            raise ValueError("sample counts must be non-negative and the pixel step positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingSpec":
        return _from_known(cls, d)


@dataclass
class SimulationSpec:
    field: FieldSpec = dc_field(default_factory=FieldSpec)
    rig: RigSpec = dc_field(default_factory=RigSpec)
    noise: NoiseSpec = dc_field(default_factory=NoiseSpec)
    wobble: WobbleSpec = dc_field(default_factory=WobbleSpec)
    sampling: SamplingSpec = dc_field(default_factory=SamplingSpec)
    length: float = 3.0
    speed: float = 0.3

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if not self.length >= 0:
            raise ValueError("length must be non-negative")

    @classmethod
    def noise_free(cls, **kwargs) -> "SimulationSpec":
        """Spec whose logs admit exact recovery: no noise, no weeds, straight path."""
        spec = cls(**kwargs)
        spec.noise = NoiseSpec.noise_free()
        spec.field = replace(spec.field, weed_outlier_rate=0.0)
        spec.wobble = WobbleSpec(0.0, 0.0, spec.wobble.period)
        return spec

    def to_dict(self) -> dict:
        return {
            "field": self.field.to_dict(),
            "rig": self.rig.to_dict(),
            "noise": self.noise.to_dict(),
            "wobble": self.wobble.to_dict(),
            "sampling": self.sampling.to_dict(),
            "length": self.length,
            "speed": self.speed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        unknown = set(d) - {"field", "rig", "noise", "wobble", "sampling", "length", "speed"}
        if unknown:
            raise ValueError(f"unknown simulation spec keys: {sorted(unknown)}")
        return cls(
            FieldSpec.from_dict(d.get("field", {})),
            RigSpec.from_dict(d.get("rig", {})),
            NoiseSpec.from_dict(d.get("noise", {})),
            WobbleSpec.from_dict(d.get("wobble", {})),
            SamplingSpec.from_dict(d.get("sampling", {})),
            float(d.get("length", 3.0)),
            float(d.get("speed", 0.3)),
        )


@dataclass(eq=False)
class GroundTruth:
    field: FieldSpec
    stalk_positions_world: np.ndarray
    neighbor_gaps: np.ndarray
    planes: dict
    trajectory: list = dc_field(default_factory=list)
    seed: int = 0

    @property
    def stalk_count(self) -> int:
        return len(self.stalk_positions_world)

    def to_dict(self) -> dict:
        return {
            "format_version": SCENE_FORMAT_VERSION,
            "seed": self.seed,
            "field": self.field.to_dict(),
            "stalk_positions_world": self.stalk_positions_world.tolist(),
            "neighbor_gaps": self.neighbor_gaps.tolist(),
            "planes": {k: p.to_dict() for k, p in self.planes.items()},
            "trajectory": [T.to_dict() for T in self.trajectory],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        if d.get("format_version") != SCENE_FORMAT_VERSION:
            raise LogFormatError(f"unsupported scene format_version {d.get('format_version')!r}")
        try:
            return cls(
                FieldSpec.from_dict(d["field"]),
                np.asarray(d["stalk_positions_world"], dtype=float).reshape(-1, 3),
                np.asarray(d["neighbor_gaps"], dtype=float).reshape(-1),
                {k: Plane.from_dict(p) for k, p in d["planes"].items()},
                [RigidTransform.from_dict(T) for T in d["trajectory"]],
                int(d["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(f"malformed scene document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def __eq__(self, other):
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _array_field(x, width: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, width)


@dataclass(eq=False)
class FrameBundle:
    """One timestep of rig observations.

    ``odometry`` maps frame ``i-1`` camera coordinates into frame ``i``
    (identity at frame 0). ``matches`` rows are ``[u1, v1, u2, v2]`` with
    ``1`` the previous side frame and ``2`` this one. ``displacements``
    rows are ``[u, v, du, dv]``: image motion from the previous frame of
    the point under ``(u, v)``. ``ground_points`` are in the front-camera
    frame and ``side_points`` in the side-camera frame. ``vp_obs`` holds the
    front-camera vanishing point and the ``du/dv`` slopes of the observed
    (left) and opposite corn lines.
    """

    frame: int
    odometry: RigidTransform
    detections: list
    matches: np.ndarray
    displacements: np.ndarray
    ground_points: np.ndarray
    side_points: np.ndarray
    vp_obs: dict
    truth: dict
    odometry_frame: str = "side"
    alt_odometry: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        t = self.truth
        return {
            "frame": self.frame,
            "odometry": self.odometry.to_dict(),
            "odometry_frame": self.odometry_frame,
            "alt_odometry": {k: v.to_dict() for k, v in self.alt_odometry.items()},
            "detections": [list(d.bbox) for d in self.detections],
            "matches": self.matches.tolist(),
            "displacements": self.displacements.tolist(),
            "ground_points": self.ground_points.tolist(),
            "side_points": self.side_points.tolist(),
            "vp_obs": {"vp": list(self.vp_obs["vp"]), "slopes": list(self.vp_obs["slopes"])},
            "truth": {
                "side_pose_world": t["side_pose_world"].to_dict(),
                "corn_plane_cam": t["corn_plane_cam"].to_dict(),
                "ground_plane_cam": t["ground_plane_cam"].to_dict(),
                "ground_plane_front": t["ground_plane_front"].to_dict(),
                "stalk_ids": list(t["stalk_ids"]),
                "flow_stalk_ids": list(t["flow_stalk_ids"]),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameBundle":
        t = d["truth"]
        frame = int(d["frame"])
        return cls(
            frame=frame,
            odometry=RigidTransform.from_dict(d["odometry"]),
            odometry_frame=d.get("odometry_frame", "side"),
            alt_odometry={k: RigidTransform.from_dict(v) for k, v in d.get("alt_odometry", {}).items()},
            detections=[Detection(tuple(b), 1.0, frame) for b in d["detections"]],
            matches=_array_field(d["matches"], 4),
            displacements=_array_field(d["displacements"], 4),
            ground_points=_array_field(d["ground_points"], 3),
            side_points=_array_field(d["side_points"], 3),
            vp_obs={"vp": tuple(d["vp_obs"]["vp"]), "slopes": tuple(d["vp_obs"]["slopes"])},
            truth={
                "side_pose_world": RigidTransform.from_dict(t["side_pose_world"]),
                "corn_plane_cam": Plane.from_dict(t["corn_plane_cam"]),
                "ground_plane_cam": Plane.from_dict(t["ground_plane_cam"]),
                "ground_plane_front": Plane.from_dict(t["ground_plane_front"]),
                "stalk_ids": [int(i) for i in t["stalk_ids"]],
                "flow_stalk_ids": [int(i) for i in t["flow_stalk_ids"]],
            },
        )

    def __eq__(self, other):
        if not isinstance(other, FrameBundle):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(eq=False)
class ObservationLog:
    header: dict
    frames: list

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def spec(self) -> Optional[SimulationSpec]:
        s = self.header.get("specs")
        return SimulationSpec.from_dict(s) if s is not None else None

    @property
    def rig(self) -> RigSpec:
        s = self.header.get("specs")
        return RigSpec.from_dict(s["rig"]) if s else RigSpec()

    @property
    def anchor_pose(self) -> RigidTransform:
        a = self.header.get("anchor_pose")
        return RigidTransform.from_dict(a) if a else RigidTransform.identity()

    def __eq__(self, other):
        if not isinstance(other, ObservationLog):
            return NotImplemented
        return self.header == other.header and self.frames == other.frames


# ---------------------------------------------------------------------------
# scene and trajectory


def generate_scene(field_spec: FieldSpec, seed: int) -> GroundTruth:
    """Stalk bases on the corn line ``y = row_width / 2``; the truth map."""
    rng = np.random.default_rng([seed, _SCENE_STREAM])
    i = np.arange(field_spec.stalk_count, dtype=float)
    x = i * field_spec.mean_spacing + rng.normal(0.0, 1.0, field_spec.stalk_count) * field_spec.spacing_jitter
    pos = np.column_stack((x, np.full_like(x, field_spec.row_offset), np.zeros_like(x)))
    gaps = np.diff(np.sort(x))
    planes = {
        "ground": Plane((0.0, 0.0, 1.0), 0.0),
        "corn": Plane((0.0, 1.0, 0.0), -field_spec.row_offset),
    }
    return GroundTruth(field_spec, pos, gaps, planes, [], seed)


def pose_count(length: float, speed: float, frame_rate: float) -> int:
    # the guard keeps float noise in length/speed from adding a pose
    return max(int(math.ceil(length / speed * frame_rate - 1e-9)), 0)


def generate_trajectory(length: float, speed: float = 0.3, rig: Optional[RigSpec] = None,
                        wobble: Optional[WobbleSpec] = None, seed: int = 0) -> list:
    """Rig poses (rig -> world) at the rig frame rate."""
    if not speed > 0:
        raise ValueError("speed must be positive")
    rig = rig or RigSpec()
    wobble = wobble if wobble is not None else WobbleSpec()
    n = pose_count(length, speed, rig.frame_rate)
    rng = np.random.default_rng([seed, _WOBBLE_STREAM])
    phase_y, phase_yaw = rng.uniform(0.0, 2 * np.pi, 2)
    poses = []
    for k in range(n):
        s = k * speed / rig.frame_rate
        w = 2 * np.pi * s / wobble.period
        y = wobble.lateral * math.sin(w + phase_y)
        yaw = wobble.yaw * math.sin(w + phase_yaw)
        poses.append(RigidTransform(rotation_about("z", yaw), (s, y, 0.0)))
    return poses


def _camera_poses(truth: GroundTruth, rig: RigSpec, i: int) -> dict:
    side = truth.trajectory[i]
    rig_pose = side @ rig.extrinsics["side"]
    return {name: rig_pose @ rig.extrinsics[name].inverse() for name in ("front", "side", "back")}


# ---------------------------------------------------------------------------
# per-frame rendering


def _project(K: CameraIntrinsics, X: np.ndarray):
    z = X[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * X[:, 0] / z + K.cx
        v = K.fy * X[:, 1] / z + K.cy
    return u, v, z


def _stalk_boxes(truth: GroundTruth, K: CameraIntrinsics, cam_pose: RigidTransform, size):
    """Noise-free clipped boxes of all stalks and their visibility mask."""
    W, H = size
    world_to_cam = cam_pose.inverse()
    base = truth.stalk_positions_world
    top = base + np.array([0.0, 0.0, truth.field.stalk_height])
    ub, vb, zb = _project(K, world_to_cam.apply(base.reshape(-1, 3)))
    ut, vt, zt = _project(K, world_to_cam.apply(top.reshape(-1, 3)))
    front = (zb > 0) & (zt > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (ub + ut) / 2
        hw = K.fx * truth.field.stalk_width / 2 / ((zb + zt) / 2)
    y0 = np.clip(np.minimum(vb, vt), 0, H)
    y1 = np.clip(np.maximum(vb, vt), 0, H)
    boxes = np.column_stack((u - hw, y0, u + hw, y1))
    visible = front & (boxes[:, 0] >= 0) & (boxes[:, 2] <= W) & (y1 - y0 > 1.0)
    centre_in = front & (u >= 0) & (u < W) & (y1 - y0 > 1.0)
    return boxes, visible, centre_in


def _render_detections(truth, rig, noise, poses, seed, i):
    W, H = rig.image_size
    K = rig.intrinsics["side"]
    boxes, visible, _ = _stalk_boxes(truth, K, poses["side"], rig.image_size)
    rng = _frame_rng(seed, i, _DETECT)
    n = len(boxes)
    dropped = rng.random(n) < noise.detect_dropout
    jitter = rng.normal(0.0, 1.0, (n, 4)) * noise.pixel_sigma
    out, ids = [], []
    for k in np.flatnonzero(visible & ~dropped):
        b = boxes[k] + jitter[k]
        b = np.clip(b, [0, 0, 0, 0], [W, H, W, H])
        if b[0] < b[2] and b[1] < b[3]:
            out.append(tuple(float(v) for v in b))
            ids.append(int(k))

    rng = _frame_rng(seed, i, _FALSE_POS)
    for _ in range(rng.poisson(noise.false_positive_rate)):
        w, h = rng.uniform(15.0, 50.0), rng.uniform(100.0, H)
        x0, y0 = rng.uniform(0.0, W - w), rng.uniform(0.0, H - h)
        out.append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
        ids.append(-1)

    order = rng.permutation(len(out))
    dets = [Detection(out[k], 1.0, i) for k in order]
    return dets, [ids[k] for k in order], boxes, visible


def _render_matches(truth, rig, noise, sampling, poses_prev, poses, seed, i):
    W, H = rig.image_size
    K = rig.intrinsics["side"]
    _, _, in_prev = _stalk_boxes(truth, K, poses_prev["side"], rig.image_size)
    _, _, in_cur = _stalk_boxes(truth, K, poses["side"], rig.image_size)
    candidates = np.flatnonzero(in_prev & in_cur)
    m = sampling.matches_per_frame
    if len(candidates) == 0 or m == 0:
        return np.zeros((0, 4))
    rng = _frame_rng(seed, i, _MATCH)
    n = 4 * m
    f = truth.field
    stalk = truth.stalk_positions_world[rng.choice(candidates, n)]
    outlier = rng.random(n) < noise.match_outlier_rate
    dx = np.where(outlier, rng.uniform(-0.1, 0.1, n), rng.uniform(-f.stalk_width / 2, f.stalk_width / 2, n))
    dy = np.where(outlier, -rng.uniform(noise.leaf_offset_min, noise.leaf_offset_max, n), 0.0)
    z = rng.uniform(0.02, f.stalk_height, n)
    X = np.column_stack((stalk[:, 0] + dx, stalk[:, 1] + dy, z))
    u1, v1, z1 = _project(K, poses_prev["side"].inverse().apply(X))
    u2, v2, z2 = _project(K, poses["side"].inverse().apply(X))
    ok = (z1 > 0) & (z2 > 0) & (u1 >= 0) & (u1 < W) & (v1 >= 0) & (v1 < H)
    ok &= (u2 >= 0) & (u2 < W) & (v2 >= 0) & (v2 < H)
    px = np.column_stack((u1, v1, u2, v2))[ok][:m]
    return px + rng.normal(0.0, 1.0, (n, 4))[: len(px)] * noise.pixel_sigma


_GRID_CACHE: dict = {}


def _ground_pixel_grid(K: CameraIntrinsics, size, step: int) -> np.ndarray:
    """Pixel grid mirror-symmetric about the principal point column."""
    key = (K, tuple(size), step)
    if key not in _GRID_CACHE:
        W, H = size
        half = np.arange(0.5, W, 1.0) * step
        us = np.concatenate((K.cx - half[::-1], K.cx + half))
        us = us[(us >= 0) & (us < W)]
        vs = K.cy + np.arange(-math.floor(K.cy / step) - 0.5, H / step, 1.0) * step
        vs = vs[(vs >= 0) & (vs < H)]
        uu, vv = np.meshgrid(us, vs)
        _GRID_CACHE[key] = backproject_rays(K, np.column_stack((uu.ravel(), vv.ravel())))
    return _GRID_CACHE[key]


def _render_ground(truth, rig, noise, sampling, poses, seed, i):
    K = rig.intrinsics["front"]
    pose = poses["front"]
    rays = _ground_pixel_grid(K, rig.image_size, sampling.ground_pixel_step)
    d = rays @ pose.rotation.T
    o = pose.translation
    down = d[:, 2] < -1e-9
    d = d[down]
    t = -o[2] / d[:, 2]
    X = o + t[:, None] * d
    keep = np.abs(X[:, 1]) < truth.field.row_offset - sampling.ground_margin
    keep &= t <= sampling.ground_max_range
    d, t = d[keep], t[keep]
    rng = _frame_rng(seed, i, _GROUND)
    n = len(t)
    weed = rng.random(n) < truth.field.weed_outlier_rate
    h = rng.uniform(0.03, 0.30, n)
    weed &= h < o[2]
    t = np.where(weed, (h - o[2]) / d[:, 2], t)
    X = o + t[:, None] * d
    Xc = pose.inverse().apply(X)
    z = Xc[:, 2]
    scale = (z + rng.normal(0.0, 1.0, n) * noise.depth_sigma) / z
    return Xc * scale[:, None]


def _smooth_noise(seed: int, stream: int, frame: int, corr: float) -> float:
    """Unit-variance noise with a Gaussian temporal correlation of ``corr`` frames."""
    if corr <= 0:
        return float(_frame_rng(seed, frame, _VP_STREAM + stream).normal())
    rng = np.random.default_rng([seed, _VP_STREAM, stream])
    m = 64
    omega = rng.normal(0.0, 1.0 / corr, m)
    phase = rng.uniform(0.0, 2 * np.pi, m)
    return float(np.sqrt(2.0 / m) * np.sum(np.cos(omega * frame + phase)))


def _render_vp(truth, rig, noise, poses, seed, i):
    K = rig.intrinsics["front"]
    to_cam = poses["front"].inverse()
    row_dir = to_cam.rotation @ np.array([1.0, 0.0, 0.0])
    vp = np.array([K.fx * row_dir[0] / row_dir[2] + K.cx, K.fy * row_dir[1] / row_dir[2] + K.cy])
    ahead = poses["front"].translation[0] + 1.0
    y = truth.field.row_offset
    line_pts = to_cam.apply(np.array([[ahead, y, 0.0], [ahead, -y, 0.0]]))
    pu, pv, _ = _project(K, line_pts)
    s = noise.vp_sigma
    c = noise.vp_correlation_frames
    vp_n = vp + s * np.array([_smooth_noise(seed, 0, i, c), _smooth_noise(seed, 1, i, c)])
    pu_n = pu + s * np.array([_smooth_noise(seed, 2, i, c), _smooth_noise(seed, 3, i, c)])
    slopes = (pu_n - vp_n[0]) / (pv - vp_n[1])
    return {"vp": (float(vp_n[0]), float(vp_n[1])), "slopes": (float(slopes[0]), float(slopes[1]))}


def _render_flow(truth, rig, noise, poses_prev, poses, seed, i):
    K = rig.intrinsics["side"]
    W, H = rig.image_size
    boxes, _, centre_in = _stalk_boxes(truth, K, poses_prev["side"], rig.image_size)
    idx = np.flatnonzero(centre_in)
    if len(idx) == 0:
        return np.zeros((0, 4)), []
    c = np.column_stack(((boxes[idx, 0] + boxes[idx, 2]) / 2, (boxes[idx, 1] + boxes[idx, 3]) / 2))
    rays = backproject_rays(K, c)
    corn = truth.planes["corn"].transformed(poses_prev["side"].inverse())
    depth = -corn.offset / (rays @ corn.normal)
    X = poses_prev["side"].apply(rays * depth[:, None])
    u, v, z = _project(K, poses["side"].inverse().apply(X))
    ok = z > 0
    rng = _frame_rng(seed, i, _FLOW)
    disp = np.column_stack((u - c[:, 0], v - c[:, 1])) + rng.normal(0.0, 1.0, (len(idx), 2)) * noise.flow_sigma
    rows = np.column_stack((c, disp))[ok]
    return rows, [int(k) for k in idx[ok]]


def _render_side_points(truth, rig, noise, sampling, poses, dets, ids, seed, i):
    K = rig.intrinsics["side"]
    W, H = rig.image_size
    f = truth.field
    rng = _frame_rng(seed, i, _SIDE)
    n = sampling.side_points_per_box
    chunks = []
    for det, sid in zip(dets, ids):
        frac = 1.0 if sid < 0 else min(rng.uniform(0.0, 2 * noise.side_clutter_rate), 0.95)
        if sid < 0:
            # clutter behind a false positive: a leaf somewhere in front of the row
            x0, _, x1, _ = det.bbox
            ray = backproject_rays(K, [((x0 + x1) / 2, K.cy)])[0]
            corn = truth.planes["corn"].transformed(poses["side"].inverse())
            anchor = poses["side"].apply(ray * (-corn.offset / (ray @ corn.normal)))
            anchor_x = anchor[0]
        else:
            anchor_x = truth.stalk_positions_world[sid, 0]
        clutter = rng.random(n) < frac
        leaves = rng.uniform(noise.side_leaf_offset_min, noise.side_leaf_offset_max, noise.side_leaves_per_box)
        offset = leaves[rng.integers(0, len(leaves), n)]
        phi = rng.uniform(-np.pi / 2, np.pi / 2, n)
        r = f.stalk_width / 2
        x = np.where(clutter, anchor_x + rng.uniform(-0.05, 0.05, n), anchor_x + r * np.sin(phi))
        y = np.where(clutter, f.row_offset - offset + rng.normal(0.0, 0.005, n), f.row_offset - r * np.cos(phi))
        z = rng.uniform(0.02, f.stalk_height, n)
        Xc = poses["side"].inverse().apply(np.column_stack((x, y, z)))
        u, v, depth = _project(K, Xc)
        ok = (depth > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        scale = (depth + rng.normal(0.0, 1.0, n) * noise.depth_sigma) / depth
        chunks.append((Xc * scale[:, None])[ok])
    return np.vstack(chunks) if chunks else np.zeros((0, 3))


def _perturb(T: RigidTransform, rng, rot_sigma: float, trans_sigma: float) -> RigidTransform:
    dR = rotation_from_rotvec(rng.normal(0.0, 1.0, 3) * rot_sigma)
    dc = rng.normal(0.0, 1.0, 3) * trans_sigma
    return RigidTransform(dR @ T.rotation, T.translation + dc)


def render_frame(scene: GroundTruth, pose_idx: int, rig: RigSpec, noise: NoiseSpec, seed: int,
                 sampling: Optional[SamplingSpec] = None) -> FrameBundle:
    """Observations of frame ``pose_idx``; ``scene.trajectory`` must hold the side-camera poses."""
    if not 0 <= pose_idx < len(scene.trajectory):
        raise IndexOutOfRange(f"frame {pose_idx} outside trajectory of {len(scene.trajectory)} poses")
    sampling = sampling or SamplingSpec()
    i = pose_idx
    poses = _camera_poses(scene, rig, i)
    prev = _camera_poses(scene, rig, i - 1) if i > 0 else poses

    # true side-camera step from frame i-1 to frame i
    step = poses["side"].inverse() @ prev["side"] if i > 0 else RigidTransform.identity()
    if sampling.odometry_frame == "back":
        to_back = rig.side_from("back").inverse()
        step = to_back @ step @ to_back.inverse()
    odom = _perturb(step, _frame_rng(seed, i, _ODOM), noise.odom_rot_sigma, noise.odom_trans_sigma)
    alt = {}
    for name, factor in sorted(noise.profile_factors.items()):
        stream = _PROFILE_STREAMS.get(name, 30 + sum(map(ord, name)))
        alt[name] = _perturb(step, _frame_rng(seed, i, stream),
                             noise.odom_rot_sigma * factor, noise.odom_trans_sigma * factor)

    dets, ids, _, _ = _render_detections(scene, rig, noise, poses, seed, i)
    if i > 0:
        matches = _render_matches(scene, rig, noise, sampling, prev, poses, seed, i)
        flow, flow_ids = _render_flow(scene, rig, noise, prev, poses, seed, i)
    else:
        matches, flow, flow_ids = np.zeros((0, 4)), np.zeros((0, 4)), []

    world_to_side = poses["side"].inverse()
    truth = {
        "side_pose_world": poses["side"],
        "corn_plane_cam": scene.planes["corn"].transformed(world_to_side),
        "ground_plane_cam": scene.planes["ground"].transformed(world_to_side),
        "ground_plane_front": scene.planes["ground"].transformed(poses["front"].inverse()),
        "stalk_ids": ids,
        "flow_stalk_ids": flow_ids,
    }
    return FrameBundle(
        frame=i,
        odometry=odom,
        detections=dets,
        matches=matches,
        displacements=flow,
        ground_points=_render_ground(scene, rig, noise, sampling, poses, seed, i),
        side_points=_render_side_points(scene, rig, noise, sampling, poses, dets, ids, seed, i),
        vp_obs=_render_vp(scene, rig, noise, poses, seed, i),
        truth=truth,
        odometry_frame=sampling.odometry_frame,
        alt_odometry=alt,
    )


def simulate(spec: SimulationSpec, seed: int) -> tuple:
    """Generate the scene, the trajectory and every frame. Returns ``(truth, log)``."""
    truth = generate_scene(spec.field, seed)
    rig_poses = generate_trajectory(spec.length, spec.speed, spec.rig, spec.wobble, seed)
    side_mount = spec.rig.extrinsics["side"].inverse()
    truth.trajectory = [P @ side_mount for P in rig_poses]
    frames = [render_frame(truth, i, spec.rig, spec.noise, seed, spec.sampling) for i in range(len(rig_poses))]
    header = {
        "format_version": LOG_FORMAT_VERSION,
        "seed": seed,
        "specs": spec.to_dict(),
        "anchor_pose": truth.trajectory[0].to_dict() if truth.trajectory else None,
    }
    return truth, ObservationLog(header, frames)


# ---------------------------------------------------------------------------
# JSON Lines log


def write_log(bundles, path, header: Optional[dict] = None) -> None:
    if isinstance(bundles, ObservationLog):
        header = {**bundles.header, **(header or {})}
        bundles = bundles.frames
    head = {"format_version": LOG_FORMAT_VERSION, **(header or {})}
    head["format_version"] = LOG_FORMAT_VERSION
    with open(path, "w") as fh:
        fh.write(json.dumps(head, separators=(",", ":")) + "\n")
        for b in bundles:
            fh.write(json.dumps(b.to_dict(), separators=(",", ":")) + "\n")


def read_log(path) -> ObservationLog:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise LogFormatError(f"{path}:1: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{path}:1: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("format_version") != LOG_FORMAT_VERSION:
        raise LogFormatError(f"{path}:1: unsupported format_version {header.get('format_version')!r}"
                             if isinstance(header, dict) else f"{path}:1: header must be an object")
    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            frames.append(FrameBundle.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
            raise LogFormatError(f"{path}:{lineno}: malformed frame ({type(exc).__name__}: {exc})") from exc
    return ObservationLog(header, frames)
