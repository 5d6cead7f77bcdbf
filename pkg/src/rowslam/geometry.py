"""Pinhole cameras, rigid transforms and planes.

Conventions used throughout the package:

Camera frame
    x right, y down, z forward (along the optical axis). Pixel ``u`` grows
    rightward and ``v`` downward.
World frame
    x along the crop row, z up, y pointing from the robot path toward the
    observed corn plane. The ground is ``z = 0``.
Rigid transforms
    ``T = (R, c)`` maps frame-1 coordinates into frame 2: ``X2 = R @ X1 + c``.
    A camera *pose* in the world is the transform that maps camera
    coordinates into world coordinates.
Planes
    ``n . X + d = 0`` with unit ``n``; the sign of ``d`` is unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    IntersectionBehindCamera,
    NonPositiveDepth,
    RayParallelToPlane,
    ZeroOffsetPlane,
)

ORTHO_TOL = 1e-9
PARALLEL_TOL = 1e-9
_EYE3 = np.eye(3)


class Pixel(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``R`` and translation ``c`` with ``X2 = R @ X1 + c``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        c = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(c)):
            raise ValueError("translation must be finite")
        if not np.abs(R.T @ R - _EYE3).max() <= ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        det = (R[0, 0] * (R[1, 1] * R[2, 2] - R[1, 2] * R[2, 1])
               - R[0, 1] * (R[1, 0] * R[2, 2] - R[1, 2] * R[2, 0])
               + R[0, 2] * (R[1, 0] * R[2, 1] - R[1, 1] * R[2, 0]))
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        self._freeze(R, c)

    def _freeze(self, R, c):
        R.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", c)

    @classmethod
    def _product(cls, R, c) -> "RigidTransform":
        # products and inverses of valid transforms skip re-validation
        obj = object.__new__(cls)
        obj._freeze(np.asarray(R, dtype=float), np.asarray(c, dtype=float))
        return obj

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T.copy()
        return RigidTransform._product(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform._product(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def to_dict(self) -> dict:
        return {"R": self.rotation.reshape(-1).tolist(), "c": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["R"], dtype=float).reshape(3, 3), d["c"])

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"RigidTransform(R={self.rotation.tolist()}, c={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``normal . X + offset = 0``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > ORTHO_TOL:
            raise ValueError("plane normal must be unit length")
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_normal(cls, normal, offset: float) -> "Plane":
        n = _as_vec3(normal)
        norm = np.linalg.norm(n)
        return cls(n / norm, offset / norm)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)

    def transformed(self, T: RigidTransform) -> "Plane":
        """Express the plane in the target frame of ``T``."""
        n = T.rotation @ self.normal
        return Plane(n, self.offset - n @ T.translation)

    def oriented_like(self, reference) -> "Plane":
        """Flip so the normal has non-negative dot with ``reference``."""
        return self.flipped() if self.normal @ _as_vec3(reference) < 0 else self

    def to_dict(self) -> dict:
        return {"n": self.normal.tolist(), "d": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "Plane":
        return cls(d["n"], d["d"])

    def __eq__(self, other):
        if not isinstance(other, Plane):
            return NotImplemented
        return np.array_equal(self.normal, other.normal) and self.offset == other.offset

    def __repr__(self):
        return f"Plane(n={self.normal.tolist()}, d={self.offset!r})"


def project(K: CameraIntrinsics, point) -> Pixel:
    x, y, z = _as_vec3(point)
    if not z > 0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return Pixel(K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def project_points(K: CameraIntrinsics, points) -> np.ndarray:
    """Vectorised :func:`project` for an (N, 3) array; returns (N, 2)."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    if np.any(~(z > 0)):
        raise NonPositiveDepth("at least one point has non-positive depth")
    return np.column_stack((K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy))


def backproject_ray(K: CameraIntrinsics, px) -> np.ndarray:
    u, v = float(px[0]), float(px[1])
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return ray / np.linalg.norm(ray)


def backproject_rays(K: CameraIntrinsics, pixels) -> np.ndarray:
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rays = np.column_stack(
        ((px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy, np.ones(len(px)))
    )
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def intersect_ray_plane(origin, direction, plane: Plane) -> np.ndarray:
    o = _as_vec3(origin)
    r = _as_vec3(direction)
    denom = plane.normal @ r
    if abs(denom) < PARALLEL_TOL:
        raise RayParallelToPlane(f"|n.dir| = {abs(denom):.3g} below tolerance")
    t = -(plane.normal @ o + plane.offset) / denom
    if t <= 0:
        raise IntersectionBehindCamera(f"ray parameter t = {t:.6g} is not positive")
    X = o + t * r
    # one Newton step along the ray removes the rounding left by o + t*r
    X = X - (plane.signed_distance(X) / denom) * r
    return X


def plane_homography(K: CameraIntrinsics, T: RigidTransform, plane: Plane) -> np.ndarray:
    """Homography mapping frame-1 pixels of points on ``plane`` to frame 2.

    ``plane`` is expressed in frame 1; ``H = K (R - c n^T / d) K^-1``.
    """
    if plane.offset == 0.0:
        raise ZeroOffsetPlane("plane passes through the camera centre")
    A = T.rotation - np.outer(T.translation, plane.normal) / plane.offset
    return K.matrix @ A @ K.inverse


def apply_homography(H: np.ndarray, pixels) -> np.ndarray:
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    h = np.column_stack((px, np.ones(len(px)))) @ np.asarray(H).T
    return h[:, :2] / h[:, 2:3]


def rotation_about(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)
    raise ValueError(f"unknown axis {axis!r}")


def rotation_from_rotvec(rotvec) -> np.ndarray:
    """Rodrigues formula; exact identity for a zero vector."""
    w = _as_vec3(rotvec)
    theta = np.linalg.norm(w)
    if theta == 0.0:
        return np.eye(3)
    k = w / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * (Kx @ Kx)


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)
