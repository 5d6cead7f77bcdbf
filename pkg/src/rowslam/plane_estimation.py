"""Ground plane, row direction and corn plane estimation.

The corn plane normal comes from the front camera: a RANSAC ground fit, a
PCA of the (downsampled) ground inliers whose largest axis is the row
direction, and the cross product of ground normal and row direction.

The corn plane distance comes from the side camera: every feature match
between two side frames whose relative motion is known from odometry
constrains the single unknown ``d``. Writing the frame-1 ray as
``r = K^-1 x1``, the feature depth is ``lam = -d / (n . r)`` and its image in
frame 2 is proportional to ``d * l + s`` with::

    l = -(1 / (n . r)) * K R r        s = K c

so each match yields two equations linear in ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateInput,
    InsufficientMotion,
    NearParallelInputs,
    NoConsensus,
)
from .geometry import (
    CameraIntrinsics,
    Pixel,
    Plane,
    RigidTransform,
    backproject_ray,
    intersect_ray_plane,
)

DEFAULT_MIN_TRANSLATION = 0.005
DEFAULT_INLIER_PX = 2.0
DEFAULT_GROUND_THRESHOLD = 0.01
DEFAULT_SIDEVIEW_INLIER_M = 0.02
DEFAULT_ITERATIONS = 200


class FeatureMatch(NamedTuple):
    px1: Pixel
    px2: Pixel


@dataclass(frozen=True, eq=False)
class PlaneFit:
    plane: Plane
    inlier_indices: np.ndarray
    rms_residual: float


@dataclass(frozen=True, eq=False)
class PcaAxes:
    axes: np.ndarray  # rows, sorted by descending eigenvalue
    eigenvalues: np.ndarray


@dataclass(frozen=True, eq=False)
class CornPlaneEstimate:
    """Corn plane in the observing camera frame.

    ``rms_residual`` is the inlier RMS of whatever residual the estimator
    scores: pixels for the multi-view estimator, meters for the side-view
    fit, zero for the corridor construction.
    """

    plane: Plane
    inlier_count: int
    rms_residual: float


def _points(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        return p.reshape(0, 3)
    return p.reshape(-1, 3)


def _covariance_eig(p: np.ndarray):
    centroid = p.mean(axis=0)
    q = p - centroid
    cov = q.T @ q / len(p)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    return centroid, np.clip(w[order], 0.0, None), V[:, order].T


def pca_axes(points) -> PcaAxes:
    p = _points(points)
    if len(p) < 3:
        raise DegenerateInput(f"PCA needs at least 3 points, got {len(p)}")
    _, w, axes = _covariance_eig(p)
    if not w[0] > 0 or w[1] <= 1e-15 * w[0]:
        raise DegenerateInput("point covariance is degenerate (identical or collinear points)")
    return PcaAxes(axes=axes, eigenvalues=w)


def downsample_uniform(points, cell: float) -> np.ndarray:
    """Replace the members of each occupied cubic cell by their centroid."""
    if not cell > 0:
        raise ValueError("cell size must be positive")
    p = _points(points)
    if len(p) == 0:
        return p
    keys = np.floor(p / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, p)
    return sums / counts[:, None]


def _fit_plane_lsq(p: np.ndarray) -> Plane:
    centroid, _, axes = _covariance_eig(p)
    n = axes[2] / np.linalg.norm(axes[2])
    return Plane(n, -n @ centroid)


def ransac_plane_fit(
    points,
    threshold: float = DEFAULT_GROUND_THRESHOLD,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
) -> PlaneFit:
    """Three-point RANSAC followed by a least-squares refit of the inliers."""
    p = _points(points)
    n_pts = len(p)
    if n_pts < 3:
        raise DegenerateInput(f"plane fit needs at least 3 points, got {n_pts}")
    _, w, _ = _covariance_eig(p)
    if not w[0] > 0 or w[1] <= 1e-15 * w[0]:
        raise DegenerateInput("points are identical or collinear")

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n_pts, size=(iterations, 3))
    a, b, c = p[idx[:, 0]], p[idx[:, 1]], p[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    scale = np.sqrt(w[0])
    valid = norms > 1e-12 * scale * scale
    normals[valid] /= norms[valid, None]
    offsets = -np.einsum("ij,ij->i", normals, a)
    resid = p @ normals.T
    resid += offsets
    counts = np.count_nonzero(np.abs(resid, out=resid) <= threshold, axis=0)
    counts[~valid] = -1
    best = int(np.argmax(counts))
    if counts[best] < 3:
        raise NoConsensus(f"best plane hypothesis has {max(counts[best], 0)} inliers")

    plane = Plane(normals[best], offsets[best])
    inliers = np.flatnonzero(np.abs(plane.signed_distance(p)) <= threshold)
    for _ in range(2):
        if len(inliers) < 3:
            break
        plane = _fit_plane_lsq(p[inliers])
        inliers = np.flatnonzero(np.abs(plane.signed_distance(p)) <= threshold)
    if len(inliers) < 3:
        raise NoConsensus(f"refit plane keeps only {len(inliers)} inliers")
    resid = plane.signed_distance(p[inliers])
    return PlaneFit(plane, inliers, float(np.sqrt(np.mean(resid**2))))


def corn_plane_normal(n_g, v_l) -> np.ndarray:
    """Corn plane normal as the cross product of ground normal and row direction."""
    g = np.asarray(n_g, dtype=float).reshape(3)
    v = np.asarray(v_l, dtype=float).reshape(3)
    g = g / np.linalg.norm(g)
    v = v / np.linalg.norm(v)
    if abs(g @ v) >= 0.5:
        raise NearParallelInputs(f"|n_g . v_l| = {abs(g @ v):.3f} is too large")
    n = np.cross(g, v)
    return n / np.linalg.norm(n)


# ---------------------------------------------------------------------------
# multi-view plane distance


def _match_arrays(matches) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(matches, np.ndarray):
        m = np.asarray(matches, dtype=float).reshape(-1, 4)
        return m[:, :2], m[:, 2:]
    px1 = np.array([m[0] for m in matches], dtype=float).reshape(-1, 2)
    px2 = np.array([m[1] for m in matches], dtype=float).reshape(-1, 2)
    return px1, px2


def distance_terms(px1, K: CameraIntrinsics, T: RigidTransform, n_p):
    """Per-match ``l`` vectors, ``n . r`` denominators and the shared ``s = K c``."""
    px1 = np.asarray(px1, dtype=float).reshape(-1, 2)
    n = np.asarray(n_p, dtype=float).reshape(3)
    rays = np.column_stack((px1, np.ones(len(px1)))) @ K.inverse.T
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        l = -(rays @ (K.matrix @ T.rotation).T) / denom[:, None]
    s = K.matrix @ T.translation
    return l, denom, s


def reproject_with_distance(px1, K: CameraIntrinsics, T: RigidTransform, n_p, d: float) -> np.ndarray:
    """Frame-2 pixels of frame-1 pixels assumed to lie on plane ``(n_p, d)``."""
    l, _, s = distance_terms(px1, K, T, n_p)
    h = d * l + s
    return h[:, :2] / h[:, 2:3]


def _linear_system(l, s, px2):
    """Rows ``a * d = b`` obtained by clearing the projection denominators."""
    u2, v2 = px2[:, 0], px2[:, 1]
    a = np.stack((l[:, 0] - u2 * l[:, 2], l[:, 1] - v2 * l[:, 2]), axis=1)
    b = np.stack((u2 * s[2] - s[0], v2 * s[2] - s[1]), axis=1)
    return a, b


def _lsq(a: np.ndarray, b: np.ndarray) -> float:
    den = np.sum(a * a)
    return float(np.sum(a * b) / den) if den > 0 else np.nan


def estimate_plane_distance(
    matches,
    K: CameraIntrinsics,
    T: RigidTransform,
    n_p,
    min_translation: float = DEFAULT_MIN_TRANSLATION,
    inlier_px: float = DEFAULT_INLIER_PX,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    min_inliers: int = 1,
) -> CornPlaneEstimate:
    """Estimate the corn plane offset ``d`` from side-view matches.

    ``T`` maps frame-1 camera coordinates into frame 2 and ``n_p`` is the
    plane normal in frame 1. Single-match hypotheses are scored by their
    nonlinear reprojection error; the final offset is the least-squares
    solution of the linear equations of all inliers.
    """
    baseline = float(np.linalg.norm(T.translation))
    if baseline < min_translation:
        raise InsufficientMotion(f"translation {baseline:.4g} m below {min_translation} m")
    px1, px2 = _match_arrays(matches)
    if len(px1) == 0:
        raise NoConsensus("no feature matches")
    n = np.asarray(n_p, dtype=float).reshape(3)
    n = n / np.linalg.norm(n)
    l, denom, s = distance_terms(px1, K, T, n)
    a, b = _linear_system(l, s, px2)
    usable = np.isfinite(l).all(axis=1) & (np.abs(denom) > 1e-12)

    with np.errstate(divide="ignore", invalid="ignore"):
        hyp_all = np.sum(a * b, axis=1) / np.sum(a * a, axis=1)

    if len(px1) <= iterations:
        order = np.arange(len(px1))
    else:
        order = np.random.default_rng(seed).choice(len(px1), size=iterations, replace=False)
    hyp = hyp_all[order]
    # a hypothesis must put its own feature in front of the first camera
    ok = usable[order] & np.isfinite(hyp) & (-hyp / denom[order] > 0)
    if not ok.any():
        raise BehindCamera("every hypothesis places its feature behind the camera")

    def classify(d):
        d = np.atleast_1d(d)
        h = d[:, None, None] * l[None] + s
        depth1 = -d[:, None] / denom[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.hypot(h[..., 0] / h[..., 2] - px2[:, 0], h[..., 1] / h[..., 2] - px2[:, 1])
        good = usable & (depth1 > 0) & (h[..., 2] > 0) & (err <= inlier_px)
        return good, err

    good, _ = classify(np.where(ok, hyp, np.nan))
    counts = np.where(ok, good.sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < max(min_inliers, 1):
        raise NoConsensus(f"best hypothesis has {max(counts[best], 0)} inliers")

    inliers = good[best]
    # re-classify around the least-squares offset until the consensus set is stable
    for _ in range(10):
        refined = classify(_lsq(a[inliers], b[inliers]))[0][0]
        if refined.sum() < max(min_inliers, 1) or np.array_equal(refined, inliers):
            break
        inliers = refined
    d = _lsq(a[inliers], b[inliers])
    final, err = classify(d)
    final, err = final[0], err[0]
    if final.sum() < max(min_inliers, 1):
        raise NoConsensus("refined offset loses its consensus set")
    # the refit is only accepted if every inlier it used stays in front of camera 1
    if np.any(-d / denom[inliers] <= 0):
        raise BehindCamera("refined offset places an inlier behind the camera")
    rms = float(np.sqrt(np.mean(err[final] ** 2)))
    return CornPlaneEstimate(Plane(n, d), int(final.sum()), rms)


# ---------------------------------------------------------------------------
# baselines


def corridor_plane(vp, line_px, K: CameraIntrinsics, ground: Plane) -> CornPlaneEstimate:
    """Corn plane from a vanishing point and one pixel on the corn line.

    ``ground`` is the ground plane in the same camera frame as the pixels.
    """
    n_g = ground.normal
    v_l = backproject_ray(K, vp)
    v_l = v_l - (v_l @ n_g) * n_g
    norm = np.linalg.norm(v_l)
    if norm < 1e-9:
        raise NearParallelInputs("vanishing direction is parallel to the ground normal")
    v_l = v_l / norm
    n_p = corn_plane_normal(n_g, v_l)
    P = intersect_ray_plane(np.zeros(3), backproject_ray(K, line_px), ground)
    return CornPlaneEstimate(Plane(n_p, -n_p @ P), 1, 0.0)


def sideview_plane_distance(
    points,
    n_p,
    inlier_m: float = DEFAULT_SIDEVIEW_INLIER_M,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
) -> CornPlaneEstimate:
    """Plane offset from 3D samples inside detection boxes, one point per hypothesis."""
    p = _points(points)
    if len(p) == 0:
        raise NoConsensus("no side-view points")
    n = np.asarray(n_p, dtype=float).reshape(3)
    n = n / np.linalg.norm(n)
    proj = p @ n
    if len(p) <= iterations:
        order = np.arange(len(p))
    else:
        order = np.random.default_rng(seed).choice(len(p), size=iterations, replace=False)
    hyp = -proj[order]
    counts = (np.abs(proj[None, :] + hyp[:, None]) <= inlier_m).sum(axis=1)
    best = int(np.argmax(counts))
    inliers = np.abs(proj + hyp[best]) <= inlier_m
    d = float(-np.mean(proj[inliers]))
    resid = proj[inliers] + d
    return CornPlaneEstimate(Plane(n, d), int(inliers.sum()), float(np.sqrt(np.mean(resid**2))))


def orient_ground_axes(fit: PlaneFit, axes: PcaAxes, forward=(0.0, 0.0, 1.0)):
    """Return ``(ground, n_g, v_l)`` with consistent signs.

    The ground normal is flipped to point toward the camera (positive
    offset) and the row direction to point along the camera's forward axis.
    """
    ground = fit.plane if fit.plane.offset >= 0 else fit.plane.flipped()
    n_g = axes.axes[2] if axes.axes[2] @ ground.normal >= 0 else -axes.axes[2]
    v_l = axes.axes[0] if axes.axes[0] @ np.asarray(forward, dtype=float) >= 0 else -axes.axes[0]
    return ground, n_g, v_l

