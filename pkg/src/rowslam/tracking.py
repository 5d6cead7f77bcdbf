"""Stalk tracking: SORT (Kalman + Hungarian + IoU) and a centroid-flow baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import MissingDisplacement

# constant-velocity model over (u, v, s, r, du, dv, ds)
F = np.eye(7)
F[0, 4] = F[1, 5] = F[2, 6] = 1.0
H = np.eye(4, 7)

# reference SORT covariances
MEASUREMENT_NOISE = np.diag([1.0, 1.0, 10.0, 10.0])
PROCESS_NOISE = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4])
INITIAL_COVARIANCE = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)[:, None, :]
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)[None, :, :]
    ix = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iy = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def hungarian_min_cost(cost) -> dict[int, int]:
    """Minimum-cost assignment of ``min(n, m)`` row/column pairs."""
    c = np.asarray(cost, dtype=float)
    if c.size == 0:
        return {}
    rows, cols = linear_sum_assignment(c)
    return {int(r): int(k) for r, k in zip(rows, cols)}


@dataclass(frozen=True)
class Detection:
    bbox: tuple
    score: float = 1.0
    frame: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.bbox)
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"invalid box {self.bbox}")
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))

    @property
    def centroid(self) -> np.ndarray:
        x0, y0, x1, y1 = self.bbox
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2])


def bbox_to_measurement(bbox) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    return np.array([x0 + w / 2, y0 + h / 2, w * h, w / h])


def measurement_to_bbox(z) -> tuple:
    w = np.sqrt(max(z[2] * z[3], 0.0))
    h = z[2] / w if w > 0 else 0.0
    return (z[0] - w / 2, z[1] - h / 2, z[0] + w / 2, z[1] + h / 2)


@dataclass(frozen=True, eq=False)
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_bbox(cls, bbox) -> "TrackState":
        x = np.zeros(7)
        x[:4] = bbox_to_measurement(bbox)
        return cls(x, INITIAL_COVARIANCE.copy())

    @property
    def bbox(self) -> tuple:
        return measurement_to_bbox(self.mean[:4])


def kalman_predict(ts: TrackState, process_noise: np.ndarray = PROCESS_NOISE) -> TrackState:
    x = ts.mean.copy()
    if x[2] + x[6] <= 0:
        x[6] = 0.0
    P = F @ ts.covariance @ F.T + process_noise
    return TrackState(F @ x, (P + P.T) / 2)


def kalman_update(ts: TrackState, det, measurement_noise: np.ndarray = MEASUREMENT_NOISE) -> TrackState:
    """Linear-Gaussian update with a box measurement (Detection or bbox tuple)."""
    R = np.asarray(measurement_noise, dtype=float)
    if not np.all(np.isfinite(R)):
        return TrackState(ts.mean.copy(), ts.covariance.copy())
    bbox = det.bbox if isinstance(det, Detection) else det
    z = bbox_to_measurement(bbox)
    P = ts.covariance
    S = H @ P @ H.T + R
    gain = np.linalg.solve(S, H @ P).T
    x = ts.mean + gain @ (z - H @ ts.mean)
    P_new = (np.eye(7) - gain @ H) @ P
    return TrackState(x, (P_new + P_new.T) / 2)


@dataclass
class Track:
    id: int
    state: TrackState
    hits: int = 1
    misses_since_hit: int = 0
    age: int = 0


class TrackedBox(NamedTuple):
    track_id: int
    bbox: tuple
    det_index: int


class SortTracker:
    """SORT with detection boxes reported for matched tracks.

    The reported box of a confirmed track is the detection it was associated
    with in the current frame; the Kalman state is used only to predict and
    gate the association.
    """

    def __init__(self, iou_threshold: float = 0.3, max_age: int = 5, min_hits: int = 3):
        self.iou_threshold = iou_threshold
        self.max_age = max_age
        self.min_hits = min_hits
        self.tracks: list[Track] = []
        self.frame_count = 0
        self._next_id = 0

    def _spawn(self, bbox) -> Track:
        t = Track(self._next_id, TrackState.from_bbox(bbox))
        self._next_id += 1
        return t

    def step(self, detections: Sequence) -> list[TrackedBox]:
        self.frame_count += 1
        boxes = [d.bbox if isinstance(d, Detection) else tuple(d) for d in detections]

        for t in self.tracks:
            t.state = kalman_predict(t.state)
            t.age += 1
        self.tracks = [t for t in self.tracks if np.all(np.isfinite(t.state.mean))]

        matched: dict[int, int] = {}
        if self.tracks and boxes:
            overlaps = iou_matrix([t.state.bbox for t in self.tracks], boxes)
            for r, c in hungarian_min_cost(1.0 - overlaps).items():
                if overlaps[r, c] >= self.iou_threshold:
                    matched[r] = c

        for r, t in enumerate(self.tracks):
            if r in matched:
                t.state = kalman_update(t.state, boxes[matched[r]])
                t.hits += 1
                t.misses_since_hit = 0
            else:
                t.misses_since_hit += 1

        det_of_track = {self.tracks[r].id: c for r, c in matched.items()}
        used = set(matched.values())
        for c, b in enumerate(boxes):
            if c not in used:
                t = self._spawn(b)
                self.tracks.append(t)
                det_of_track[t.id] = c

        self.tracks = [t for t in self.tracks if t.misses_since_hit <= self.max_age]
        out = [
            TrackedBox(t.id, boxes[det_of_track[t.id]], det_of_track[t.id])
            for t in self.tracks
            if t.misses_since_hit == 0 and t.hits >= self.min_hits
        ]
        return sorted(out, key=lambda tb: tb.track_id)


def sort_step(tracker: SortTracker, detections: Sequence) -> list[TrackedBox]:
    return tracker.step(detections)


# ---------------------------------------------------------------------------
# centroid flow baseline


class FlowPoint(NamedTuple):
    track_id: int
    centroid: np.ndarray


@dataclass
class FlowTracker:
    """Centroids re-detected every ``redetect_every`` frames, advanced by flow in between.

    ``bounds`` is the image ``(width, height)``; centroids leaving it are
    retired.
    """

    redetect_every: int = 200
    bounds: Optional[tuple] = None
    ids: list = field(default_factory=list)
    centroids: list = field(default_factory=list)
    frame: int = -1
    _next_id: int = 0

    def drop(self, track_ids) -> None:
        gone = set(track_ids)
        keep = [i for i, tid in enumerate(self.ids) if tid not in gone]
        self.ids = [self.ids[i] for i in keep]
        self.centroids = [self.centroids[i] for i in keep]

    def step(self, displacements, detections: Optional[Sequence] = None) -> list[FlowPoint]:
        self.frame += 1
        if self.frame % self.redetect_every == 0 and detections is not None:
            self.ids, self.centroids = [], []
            for d in detections:
                det = d if isinstance(d, Detection) else Detection(tuple(d))
                self.ids.append(self._next_id)
                self.centroids.append(det.centroid)
                self._next_id += 1
        else:
            disp = list(displacements) if displacements is not None else []
            if len(disp) != len(self.centroids) or any(d is None for d in disp):
                raise MissingDisplacement(
                    f"{len(self.centroids)} live centroids but {len(disp)} displacements"
                )
            self.centroids = [c + np.asarray(d, dtype=float) for c, d in zip(self.centroids, disp)]
        if self.bounds is not None:
            w, h = self.bounds
            outside = [
                tid for tid, c in zip(self.ids, self.centroids)
                if not (0 <= c[0] < w and 0 <= c[1] < h)
            ]
            self.drop(outside)
        return [FlowPoint(tid, c.copy()) for tid, c in zip(self.ids, self.centroids)]


def flow_track_step(tracker: FlowTracker, displacements, maybe_detections=None) -> list[FlowPoint]:
    return tracker.step(displacements, maybe_detections)
