"""Pinhole camera model, rigid transforms, and oriented 3D boxes.

Coordinate conventions (OpenCV style):

* World/LiDAR frame: right-handed, z up, meters.
* Camera frame: x right, y down, z forward along the optical axis. The
  extrinsics map world points into the camera frame:
  ``P_cam = R @ P_world + t``.
* Image frame: u right, v down, origin at the top-left corner. A camera
  point projects to ``u = fx * X/Z + cx``, ``v = fy * Y/Z + cy``; the
  pixel (i, j) of the raster covers [j, j+1) x [i, i+1), so its center
  sits at (u, v) = (j + 0.5, i + 0.5).

Rotations are stored as unit quaternions (w, x, y, z) and converted to
matrices at use sites, so optimization output cannot drift off SO(3).
Points with camera-frame depth <= NEAR_PLANE never produce pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvariantViolation

NEAR_PLANE = 1e-6


def _as_vec3(x, name: str) -> np.ndarray:
    # always copy so callers can freeze their own arrays without the copy
    # leaking read-only buffers into scipy
    v = np.array(x, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise InvariantViolation(f"{name} must be a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvariantViolation(f"{name} must be finite, got {v}")
    return v


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for a rectified image (no distortion model)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width):
            raise InvariantViolation(f"cx={self.cx} outside (0, {self.width})")
        if not (0 < self.cy < self.height):
            raise InvariantViolation(f"cy={self.cy} outside (0, {self.height})")

    def matrix(self) -> np.ndarray:
        """3x3 projection matrix K."""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """World-to-camera rigid transform, rotation kept as a unit quaternion.

    The quaternion is (w, x, y, z). Inputs within 1e-6 of unit norm are
    renormalized on construction; anything further off is rejected.
    """

    quat_wxyz: np.ndarray
    translation: np.ndarray

    def __init__(self, quat_wxyz, translation):
        q = np.asarray(quat_wxyz, dtype=float).reshape(-1)
        if q.shape != (4,):
            raise InvariantViolation(f"quaternion must have 4 elements, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise InvariantViolation(f"quaternion must be finite, got {q}")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-6:
            raise InvariantViolation(f"quaternion norm {norm} deviates from 1 by more than 1e-6")
        q = q / norm
        t = _as_vec3(translation, "translation")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat_wxyz", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation) -> "CameraExtrinsics":
        """Build from a rotation matrix; raises if R is not in SO(3)."""
        R = np.asarray(rotation, dtype=float)
        if R.shape != (3, 3):
            raise InvariantViolation(f"rotation matrix must be 3x3, got {R.shape}")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvariantViolation("rotation matrix is not orthonormal with det +1 within 1e-6")
        q = Rotation.from_matrix(R).as_quat()  # scipy order (x, y, z, w)
        return cls((q[3], q[0], q[1], q[2]), translation)

    def rotation(self) -> Rotation:
        q = self.quat_wxyz
        return Rotation.from_quat([q[1], q[2], q[3], q[0]])

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix."""
        return self.rotation().as_matrix()

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World -> camera for an (N, 3) array (or a single 3-vector)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = p @ self.matrix().T + self.translation
        return out[0] if np.asarray(points).ndim == 1 else out

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """Camera -> world, the exact inverse of :meth:`transform`."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = (p - self.translation) @ self.matrix()
        return out[0] if np.asarray(points).ndim == 1 else out

    def compose_delta(self, rot_delta, trans_delta) -> "CameraExtrinsics":
        """Left-multiply an axis-angle correction: R <- exp([w]x) R, t <- t + dt."""
        w = _as_vec3(rot_delta, "rot_delta")
        dt = _as_vec3(trans_delta, "trans_delta")
        rot = Rotation.from_rotvec(w) * self.rotation()
        q = rot.as_quat()
        return CameraExtrinsics((q[3], q[0], q[1], q[2]), self.translation + dt)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    y = float((yaw + np.pi) % (2.0 * np.pi) - np.pi)
    return np.pi if y == -np.pi else y


@dataclass(frozen=True, eq=False)
class Box3D:
    """Oriented box in the world frame: center, (length, width, height), yaw about +z."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float
    class_id: int = 0
    track_id: Optional[int] = None

    def __init__(self, center, dims, yaw, class_id=0, track_id=None):
        c = _as_vec3(center, "center")
        d = _as_vec3(dims, "dims")
        if np.any(d <= 0):
            raise InvariantViolation(f"box dims must be positive, got {d}")
        if not np.isfinite(yaw):
            raise InvariantViolation(f"yaw must be finite, got {yaw}")
        c.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", normalize_yaw(yaw))
        object.__setattr__(self, "class_id", int(class_id))
        object.__setattr__(self, "track_id", None if track_id is None else int(track_id))

    @property
    def length(self) -> float:
        return float(self.dims[0])

    @property
    def width(self) -> float:
        return float(self.dims[1])

    @property
    def height(self) -> float:
        return float(self.dims[2])


class Pixel(NamedTuple):
    """Sub-pixel image location with the camera-frame depth that produced it."""

    u: float
    v: float
    depth: float


# Local corner offsets in half-dim units. Order is fixed: bottom face
# counter-clockwise seen from above (+z), starting at (+x, +y), then the
# top face in the same order. Keypoint corner indices rely on this.
_CORNER_SIGNS = np.array(
    [
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, -1, +1],
        [+1, -1, +1],
    ],
    dtype=float,
)


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 world-frame corners of a box, in the documented fixed order."""
    offsets = _CORNER_SIGNS * (box.dims / 2.0)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return offsets @ rot.T + box.center


def project(point, extr: CameraExtrinsics, intr: CameraIntrinsics) -> Optional[Pixel]:
    """Project a world point; returns None when it falls behind the near plane.

    The returned pixel may lie outside the image bounds; callers clip.
    """
    p = extr.transform(_as_vec3(point, "point"))
    z = float(p[2])
    if z <= NEAR_PLANE:
        return None
    return Pixel(
        u=float(intr.fx * p[0] / z + intr.cx),
        v=float(intr.fy * p[1] / z + intr.cy),
        depth=z,
    )


def project_points(points: np.ndarray, extr: CameraExtrinsics, intr: CameraIntrinsics):
    """Vectorized projection of an (N, 3) array.

    Returns (uv, depth, in_front): uv is (N, 2); entries with
    ``in_front == False`` hold garbage and must be masked by the caller.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    cam = p @ extr.matrix().T + extr.translation
    z = cam[:, 2]
    in_front = z > NEAR_PLANE
    safe_z = np.where(in_front, z, 1.0)
    uv = np.empty((len(p), 2))
    uv[:, 0] = intr.fx * cam[:, 0] / safe_z + intr.cx
    uv[:, 1] = intr.fy * cam[:, 1] / safe_z + intr.cy
    return uv, z, in_front


def back_project(u: float, v: float, depth: float, extr: CameraExtrinsics, intr: CameraIntrinsics) -> np.ndarray:
    """Invert :func:`project`: pixel (u, v) at camera depth -> world point."""
    if depth <= 0:
        raise InvariantViolation(f"depth must be positive, got {depth}")
    x = (u - intr.cx) / intr.fx * depth
    y = (v - intr.cy) / intr.fy * depth
    return extr.inverse_transform(np.array([x, y, depth]))


def point_in_view(point, extr: CameraExtrinsics, intr: CameraIntrinsics) -> bool:
    """True iff the point projects in front of the camera and inside the image."""
    px = project(point, extr, intr)
    if px is None:
        return False
    return 0.0 <= px.u < intr.width and 0.0 <= px.v < intr.height


def in_view(box: Box3D, extr: CameraExtrinsics, intr: CameraIntrinsics) -> bool:
    """Per-camera visibility predicate for a box, evaluated at its center only."""
    return point_in_view(box.center, extr, intr)


def look_at_extrinsics(eye, target, up=(0.0, 0.0, 1.0)) -> CameraExtrinsics:
    """World -> camera pose for a camera at eye looking toward target.

    The camera x axis points right (forward x up), y points down, z points
    at the target. Raises if forward is parallel to up.
    """
    eye = _as_vec3(eye, "eye")
    forward = _as_vec3(target, "target") - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvariantViolation("eye and target coincide")
    forward = forward / norm
    up = _as_vec3(up, "up")
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise InvariantViolation("viewing direction is parallel to up")
    right = right / rnorm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraExtrinsics.from_matrix(R, -R @ eye)


@dataclass(frozen=True)
class RigCamera:
    """One camera of a rig: id plus its calibration."""

    camera_id: str
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics


@dataclass(frozen=True, eq=False)
class CameraRig:
    """All cameras observing a scene; ids are unique."""

    cameras: tuple

    def __init__(self, cameras):
        cams = tuple(cameras)
        ids = [c.camera_id for c in cams]
        if len(set(ids)) != len(ids):
            raise InvariantViolation(f"duplicate camera ids in rig: {ids}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    @property
    def ids(self):
        return [c.camera_id for c in self.cameras]

    def get(self, camera_id: str) -> RigCamera:
        for c in self.cameras:
            if c.camera_id == camera_id:
                return c
        raise KeyError(camera_id)
