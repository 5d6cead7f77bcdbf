"""World-frame stalk landmarks and the semantic map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyMap, LogFormatError
from .geometry import (
    CameraIntrinsics,
    Plane,
    RigidTransform,
    backproject_ray,
    intersect_ray_plane,
)

MAP_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class StalkObservation:
    track_id: int
    frame: int
    world_point: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.world_point, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("observation point must be finite")
        object.__setattr__(self, "world_point", p)


@dataclass(eq=False)
class StalkLandmark:
    id: int
    position: np.ndarray
    support: int
    rejected: int = 0
    track_ids: tuple = ()


@dataclass(eq=False)
class SemanticMap:
    landmarks: list
    ground: Optional[Plane]
    corn: Optional[Plane]
    trajectory: list
    # frame -> [(track_id, bbox)], kept so re-projection error can be evaluated from the file
    tracks: dict = field(default_factory=dict)
    method: str = ""

    def to_dict(self) -> dict:
        return {
            "format_version": MAP_FORMAT_VERSION,
            "method": self.method,
            "landmarks": [
                {
                    "id": lm.id,
                    "position_m": np.asarray(lm.position).tolist(),
                    "support": lm.support,
                    "rejected": lm.rejected,
                    "track_ids": list(lm.track_ids),
                }
                for lm in self.landmarks
            ],
            "ground": self.ground.to_dict() if self.ground is not None else None,
            "corn": self.corn.to_dict() if self.corn is not None else None,
            "trajectory": [T.to_dict() for T in self.trajectory],
            "tracks": [
                {"frame": f, "track_id": tid, "bbox": list(bbox)}
                for f in sorted(self.tracks)
                for tid, bbox in self.tracks[f]
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticMap":
        try:
            landmarks = [
                StalkLandmark(
                    int(lm["id"]),
                    np.asarray(lm["position_m"], dtype=float),
                    int(lm["support"]),
                    int(lm.get("rejected", 0)),
                    tuple(lm.get("track_ids", ())),
                )
                for lm in d["landmarks"]
            ]
            tracks: dict = {}
            for t in d.get("tracks", []):
                tracks.setdefault(int(t["frame"]), []).append((int(t["track_id"]), tuple(t["bbox"])))
            return cls(
                landmarks=landmarks,
                ground=Plane.from_dict(d["ground"]) if d.get("ground") else None,
                corn=Plane.from_dict(d["corn"]) if d.get("corn") else None,
                trajectory=[RigidTransform.from_dict(T) for T in d["trajectory"]],
                tracks=tracks,
                method=d.get("method", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(f"malformed semantic map: {exc}") from exc

    def save(self, path, extra: Optional[dict] = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SemanticMap":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def localize_pixel(px, K: CameraIntrinsics, corn_cam: Plane, cam_pose_world: RigidTransform) -> np.ndarray:
    X = intersect_ray_plane(np.zeros(3), backproject_ray(K, px), corn_cam)
    return cam_pose_world.apply(X)


def localize_centroid(bbox, K: CameraIntrinsics, corn_cam: Plane, cam_pose_world: RigidTransform) -> np.ndarray:
    """World position of a box centroid projected onto the corn plane."""
    x0, y0, x1, y1 = bbox
    return localize_pixel(((x0 + x1) / 2, (y0 + y1) / 2), K, corn_cam, cam_pose_world)


def median_plane(planes) -> Optional[Plane]:
    """Component-wise median of sign-aligned planes."""
    planes = list(planes)
    if not planes:
        return None
    ref = planes[0].normal
    aligned = [p.oriented_like(ref) for p in planes]
    n = np.median(np.array([p.normal for p in aligned]), axis=0)
    d = float(np.median([p.offset for p in aligned]))
    norm = np.linalg.norm(n)
    return Plane(n / norm, d / norm)


class MapBuilder:
    def __init__(self):
        self.buffers: dict[int, list] = {}
        self.ground_planes: list[Plane] = []
        self.corn_planes: list[Plane] = []
        self.trajectory: list[RigidTransform] = []
        self.tracks: dict[int, list] = {}

    def accumulate(self, obs: StalkObservation) -> None:
        self.buffers.setdefault(obs.track_id, []).append((obs.frame, obs.world_point))

    def add_planes(self, ground_world: Optional[Plane], corn_world: Optional[Plane]) -> None:
        if ground_world is not None:
            self.ground_planes.append(ground_world)
        if corn_world is not None:
            self.corn_planes.append(corn_world)

    def finalize(self, min_support: int = 5, mad_k: float = 3.0, merge_radius: float = 0.10,
                 method: str = "") -> SemanticMap:
        if not self.buffers:
            raise EmptyMap("no stalk observations were accumulated")

        candidates = []
        for tid in sorted(self.buffers):
            obs = sorted(self.buffers[tid], key=lambda fo: (fo[0], *fo[1]))
            P = np.array([p for _, p in obs])
            med = np.median(P, axis=0)
            dist = np.linalg.norm(P - med, axis=1)
            keep = dist <= mad_k * np.median(dist)
            if keep.sum() < min_support:
                continue
            # mean taken as an offset from the median keeps constant input exact
            mean = med + (P[keep] - med).mean(axis=0)
            candidates.append(StalkLandmark(-1, mean, int(keep.sum()), int((~keep).sum()), (tid,)))

        landmarks = _merge_close(candidates, merge_radius)
        if not landmarks:
            raise EmptyMap("no track reached the minimum support")
        landmarks.sort(key=lambda lm: min(lm.track_ids))
        for i, lm in enumerate(landmarks):
            lm.id = i
        return SemanticMap(
            landmarks=landmarks,
            ground=median_plane(self.ground_planes),
            corn=median_plane(self.corn_planes),
            trajectory=list(self.trajectory),
            tracks={f: list(v) for f, v in self.tracks.items()},
            method=method,
        )


def accumulate(builder: MapBuilder, obs: StalkObservation) -> None:
    builder.accumulate(obs)


def finalize(builder: MapBuilder, min_support: int = 5, mad_k: float = 3.0,
             merge_radius: float = 0.10) -> SemanticMap:
    return builder.finalize(min_support, mad_k, merge_radius)


def _merge_close(landmarks: list, radius: float) -> list:
    """Greedily merge the closest pair until all pairs are at least ``radius`` apart."""
    lms = list(landmarks)
    while len(lms) > 1:
        P = np.array([lm.position for lm in lms])
        D = np.linalg.norm(P[:, None] - P[None], axis=2)
        np.fill_diagonal(D, np.inf)
        i, j = np.unravel_index(np.argmin(D), D.shape)
        if D[i, j] >= radius:
            break
        a, b = lms[min(i, j)], lms[max(i, j)]
        w = a.support + b.support
        merged = StalkLandmark(
            -1,
            (a.support * a.position + b.support * b.position) / w,
            w,
            a.rejected + b.rejected,
            tuple(sorted(a.track_ids + b.track_ids)),
        )
        lms = [lm for k, lm in enumerate(lms) if k not in (i, j)] + [merged]
        lms.sort(key=lambda lm: min(lm.track_ids))
    return lms
