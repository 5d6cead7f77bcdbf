"""Map quality metrics and the method comparison table.

``epsilon1`` compares neighbouring-stalk gaps along the row line with the
measured ones; ``epsilon2`` re-projects each landmark into the frames where
its track was seen and measures the distance to the tracked box centroids.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput, InsufficientLandmarks, NoLinkedTracks, RowSlamError
from .geometry import CameraIntrinsics
from .mapping import SemanticMap
from .pipeline import BENCHMARK_METHODS, RunConfig, run_pipeline
from .simulator import FieldSpec, GroundTruth, ObservationLog, generate_scene

CSV_HEADER = ("method", "epsilon1_cm", "epsilon2_px", "matched", "unmatched")


@dataclass(frozen=True, eq=False)
class LineFit1D:
    point: np.ndarray
    direction: np.ndarray

    def coordinates(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float).reshape(-1, 3) - self.point) @ self.direction


@dataclass
class MetricReport:
    method_name: str
    epsilon1_cm: float
    epsilon2_px: float
    matched_landmarks: int
    unmatched_truth: int
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


def fit_trajectory_line(positions) -> LineFit1D:
    """Total-least-squares line; the direction points from the first position toward the last."""
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(p) < 2 or np.all(np.ptp(p, axis=0) == 0):
        raise DegenerateInput("line fit needs at least two distinct positions")
    centroid = p.mean(axis=0)
    _, _, vt = np.linalg.svd(p - centroid, full_matrices=False)
    direction = vt[0]
    if direction @ (p[-1] - p[0]) < 0:
        direction = -direction
    return LineFit1D(centroid, direction)


@dataclass
class GapMatch:
    epsilon1_cm: float
    matched: int
    unmatched_truth: int
    # (truth index, landmark id) pairs in row order
    pairs: list


def match_gaps(smap: SemanticMap, truth: GroundTruth) -> GapMatch:
    if len(smap.landmarks) < 2:
        raise InsufficientLandmarks(f"need at least 2 landmarks, map has {len(smap.landmarks)}")
    line = fit_trajectory_line([T.translation for T in smap.trajectory])
    pred = line.coordinates([lm.position for lm in smap.landmarks])
    ids = np.array([lm.id for lm in smap.landmarks])
    true = line.coordinates(truth.stalk_positions_world)
    order = np.argsort(true, kind="stable")
    true_sorted = true[order]

    # nearest truth per landmark, then the closest landmark per truth (ties to the lower id)
    nearest = np.abs(pred[:, None] - true_sorted[None, :])
    owner = np.argmin(nearest, axis=1)
    best: dict = {}
    for k in np.lexsort((ids, nearest[np.arange(len(pred)), owner])):
        best.setdefault(int(owner[k]), k)
    matched_truth = sorted(best)

    diffs = []
    for a, b in zip(matched_truth, matched_truth[1:]):
        if b != a + 1:
            continue
        gap_true = true_sorted[b] - true_sorted[a]
        gap_pred = pred[best[b]] - pred[best[a]]
        diffs.append(abs(gap_pred - gap_true))
    if not diffs:
        raise InsufficientLandmarks("no pair of neighbouring truth stalks is matched")
    pairs = [(int(order[t]), int(ids[best[t]])) for t in matched_truth]
    return GapMatch(100.0 * float(np.mean(diffs)), len(matched_truth),
                    len(true) - len(matched_truth), pairs)


def epsilon1(smap: SemanticMap, truth: GroundTruth) -> float:
    """Mean absolute neighbouring-gap error in centimetres."""
    return match_gaps(smap, truth).epsilon1_cm


def epsilon2(smap: SemanticMap, log=None, tracks: Optional[dict] = None,
             K: Optional[CameraIntrinsics] = None) -> float:
    """Mean pixel distance between re-projected landmarks and their tracked box centroids.

    ``tracks`` maps frame -> [(track_id, bbox)] and defaults to the tracks
    stored in the map; ``K`` defaults to the side camera of ``log``.
    """
    tracks = smap.tracks if tracks is None else tracks
    if K is None:
        if log is None:
            raise ValueError("either K or a log with a rig description is required")
        K = log.rig.intrinsics["side"]
    owner = {tid: lm for lm in smap.landmarks for tid in lm.track_ids}
    errors = []
    for frame in sorted(tracks):
        if frame >= len(smap.trajectory):
            continue
        to_cam = smap.trajectory[frame].inverse()
        for tid, bbox in tracks[frame]:
            lm = owner.get(tid)
            if lm is None:
                continue
            X = to_cam.apply(lm.position)
            if X[2] <= 0:
                continue
            u = K.fx * X[0] / X[2] + K.cx
            v = K.fy * X[1] / X[2] + K.cy
            errors.append(math.hypot(u - (bbox[0] + bbox[2]) / 2, v - (bbox[1] + bbox[3]) / 2))
    if not errors:
        raise NoLinkedTracks("no landmark is linked to a tracked box")
    return float(np.mean(errors))


def count_identity_switches(assignments: dict, log) -> int:
    """Changes of the track id reported for the same true stalk.

    ``assignments`` maps frame -> [(track_id, det_index)]; detections of
    false positives (truth id -1) are ignored.
    """
    frames = {b.frame: b for b in log}
    last: dict = {}
    switches = 0
    for frame in sorted(assignments):
        stalk_ids = frames[frame].truth["stalk_ids"]
        for tid, det in assignments[frame]:
            if det < 0:
                continue
            sid = stalk_ids[det]
            if sid < 0:
                continue
            if sid in last and last[sid] != tid:
                switches += 1
            last[sid] = tid
    return switches


def truth_from_log(obs_log: ObservationLog) -> GroundTruth:
    """Regenerate the scene a simulated log was rendered from."""
    specs = obs_log.header.get("specs")
    if specs is None or "seed" not in obs_log.header:
        raise RowSlamError("log header carries no simulation spec to regenerate the truth from")
    return generate_scene(FieldSpec.from_dict(specs.get("field", {})), int(obs_log.header["seed"]))


def evaluate_map(smap: SemanticMap, truth: GroundTruth, obs_log, method: str = "") -> MetricReport:
    gm = match_gaps(smap, truth)
    e2 = epsilon2(smap, obs_log)
    return MetricReport(method or smap.method, gm.epsilon1_cm, e2, gm.matched, gm.unmatched_truth)


def benchmark(obs_log: ObservationLog, methods: Optional[Sequence] = None,
              truth: Optional[GroundTruth] = None, base: Optional[RunConfig] = None) -> list:
    """One report per ``(name, config overrides)`` method; failures become failed rows."""
    methods = BENCHMARK_METHODS if methods is None else methods
    truth = truth if truth is not None else truth_from_log(obs_log)
    base = base or RunConfig()
    ground_cache: dict = {}
    reports = []
    for name, overrides in methods:
        cfg = overrides if isinstance(overrides, RunConfig) else base.replace(**overrides)
        try:
            result = run_pipeline(obs_log, cfg, ground_cache=ground_cache, method=name)
            reports.append(evaluate_map(result.map, truth, obs_log, name))
        except RowSlamError as exc:
            reports.append(MetricReport(name, math.nan, math.nan, 0, truth.stalk_count,
                                        f"{type(exc).__name__}: {exc}"))
    return reports


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow([r.method_name, repr(float(r.epsilon1_cm)), repr(float(r.epsilon2_px)),
                    r.matched_landmarks, r.unmatched_truth])
    return buf.getvalue()


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(reports_to_csv(reports))


def read_reports_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricReport(r["method"], float(r["epsilon1_cm"]), float(r["epsilon2_px"]),
                         int(r["matched"]), int(r["unmatched"])) for r in rows]
