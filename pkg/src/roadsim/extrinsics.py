"""Camera extrinsic refinement from user-adjusted 2D keypoints.

Fixed roadside cameras drift over time; given a handful of 2D targets
for known 3D box corners, this module solves for a 6-DoF correction to
the camera pose by minimizing squared reprojection error with BFGS.

The correction is applied multiplicatively, ``R = exp([w]x) @ R0`` and
``t = t0 + dt``, so every candidate pose is a valid rigid transform and
the problem stays unconstrained. Gradients default to central finite
differences; an analytic Jacobian is available as a fast path and is
held to the same finite-difference agreement check in the tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, InsufficientKeypoints, InvariantViolation, NonFiniteResidual
from .geometry import NEAR_PLANE, Box3D, CameraExtrinsics, CameraIntrinsics, box_corners

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Keypoint:
    """One 2D target for a specific corner of a specific box."""

    box: Box3D
    corner_index: int
    target: np.ndarray  # (u, v) pixels

    def __init__(self, box: Box3D, corner_index: int, target):
        if not 0 <= int(corner_index) < 8:
            raise InvariantViolation(f"corner_index must be in [0, 8), got {corner_index}")
        t = np.asarray(target, dtype=float).reshape(-1)
        if t.shape != (2,) or not np.all(np.isfinite(t)):
            raise InvariantViolation(f"target must be a finite 2-vector, got {target}")
        t.flags.writeable = False
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "corner_index", int(corner_index))
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class KeypointSet:
    """Keypoints gathered for one camera."""

    entries: Sequence[Keypoint]
    camera_id: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def distinct_boxes(self) -> int:
        return len({id(e.box) for e in self.entries})

    def validate_targets(self, intr: CameraIntrinsics) -> None:
        """Targets may sit slightly out of frame (clipped boxes) but not far out."""
        lo_u, hi_u = -0.25 * intr.width, 1.25 * intr.width
        lo_v, hi_v = -0.25 * intr.height, 1.25 * intr.height
        for e in self.entries:
            u, v = e.target
            if not (lo_u <= u <= hi_u and lo_v <= v <= hi_v):
                raise InvariantViolation(
                    f"keypoint target ({u:.1f}, {v:.1f}) outside the allowed "
                    f"[{lo_u}, {hi_u}] x [{lo_v}, {hi_v}] margin"
                )


@dataclass(frozen=True)
class ExtrinsicDelta:
    """Axis-angle rotation correction (radians) plus translation correction (m)."""

    rot_delta: np.ndarray
    trans_delta: np.ndarray

    def __init__(self, rot_delta, trans_delta):
        w = np.asarray(rot_delta, dtype=float).reshape(-1)
        dt = np.asarray(trans_delta, dtype=float).reshape(-1)
        if w.shape != (3,) or dt.shape != (3,):
            raise InvariantViolation("rot_delta and trans_delta must be 3-vectors")
        if np.linalg.norm(w) >= np.pi:
            raise InvariantViolation(f"|rot_delta| = {np.linalg.norm(w):.4f} must stay below pi")
        w.flags.writeable = False
        dt.flags.writeable = False
        object.__setattr__(self, "rot_delta", w)
        object.__setattr__(self, "trans_delta", dt)

    @classmethod
    def zero(cls) -> "ExtrinsicDelta":
        return cls(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class OptimizerConfig:
    grad_tol: float = 1e-8
    max_iter: int = 200
    rot_step: float = 1e-7  # finite-difference step on rotation components
    trans_step: float = 1e-6  # finite-difference step on translation (m)
    analytic_gradient: bool = False


@dataclass(frozen=True)
class OptimizationReport:
    initial_rmse: float
    final_rmse: float
    iterations: int
    converged: bool
    optimized: CameraExtrinsics
    delta: ExtrinsicDelta


def _corner_points_and_targets(keypoints: KeypointSet):
    """Expand referenced box corners once; returns (N,3) points and (N,2) targets."""
    pts = np.empty((len(keypoints.entries), 3))
    tgt = np.empty((len(keypoints.entries), 2))
    cache = {}
    for i, e in enumerate(keypoints.entries):
        key = id(e.box)
        if key not in cache:
            cache[key] = box_corners(e.box)
        pts[i] = cache[key][e.corner_index]
        tgt[i] = e.target
    return pts, tgt


def _residual(x: np.ndarray, rotated: np.ndarray, t0: np.ndarray, intr: CameraIntrinsics, targets: np.ndarray) -> float:
    """Sum of squared pixel errors at parameter vector x = (w, dt); inf if any corner is behind."""
    cam = rotated @ Rotation.from_rotvec(x[:3]).as_matrix().T + t0 + x[3:]
    z = cam[:, 2]
    if np.any(z <= NEAR_PLANE):
        return np.inf
    du = intr.fx * cam[:, 0] / z + intr.cx - targets[:, 0]
    dv = intr.fy * cam[:, 1] / z + intr.cy - targets[:, 1]
    return float(np.dot(du, du) + np.dot(dv, dv))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def _gradient_analytic(x, rotated, t0, intr, targets) -> np.ndarray:
    A = Rotation.from_rotvec(x[:3]).as_matrix()
    q = rotated @ A.T  # camera points minus translation
    cam = q + t0 + x[3:]
    z = cam[:, 2]
    if np.any(z <= NEAR_PLANE):
        return np.zeros(6)
    ru = intr.fx * cam[:, 0] / z + intr.cx - targets[:, 0]
    rv = intr.fy * cam[:, 1] / z + intr.cy - targets[:, 1]
    # g = 2 * J_proj^T r per point, (N, 3)
    g = np.empty_like(cam)
    g[:, 0] = 2.0 * intr.fx * ru / z
    g[:, 1] = 2.0 * intr.fy * rv / z
    g[:, 2] = -2.0 * (intr.fx * ru * cam[:, 0] + intr.fy * rv * cam[:, 1]) / z**2
    grad_t = g.sum(axis=0)
    grad_w = _so3_left_jacobian(x[:3]).T @ np.cross(q, g).sum(axis=0)
    return np.concatenate([grad_w, grad_t])


def _gradient_fd(x, rotated, t0, intr, targets, rot_step, trans_step) -> np.ndarray:
    grad = np.zeros(6)
    for i in range(6):
        h = rot_step if i < 3 else trans_step
        e = np.zeros(6)
        e[i] = h
        fp = _residual(x + e, rotated, t0, intr, targets)
        fm = _residual(x - e, rotated, t0, intr, targets)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return np.zeros(6)  # at an infeasible point the line search only needs f
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def reprojection_residual(
    extr: CameraExtrinsics,
    delta: ExtrinsicDelta,
    intr: CameraIntrinsics,
    keypoints: KeypointSet,
) -> float:
    """Sum over keypoints of squared pixel distance between projected corner and target.

    Raises BehindCamera if any referenced corner has camera depth <= the
    near plane under the composed pose.
    """
    keypoints.validate_targets(intr)
    pts, targets = _corner_points_and_targets(keypoints)
    rotated = pts @ extr.matrix().T
    x = np.concatenate([delta.rot_delta, delta.trans_delta])
    val = _residual(x, rotated, extr.translation, intr, targets)
    if not np.isfinite(val):
        raise BehindCamera("a keypoint's corner falls behind the camera under this pose")
    return val


def optimize(
    extr0: CameraExtrinsics,
    intr: CameraIntrinsics,
    keypoints: KeypointSet,
    config: Optional[OptimizerConfig] = None,
) -> OptimizationReport:
    """Refine extrinsics with BFGS over the 6-dim correction, starting at zero.

    Identifiability requires >= 4 keypoints across >= 2 distinct boxes,
    or >= 6 keypoints from a single box.
    """
    cfg = config or OptimizerConfig()
    n = len(keypoints.entries)
    if n < 4 or (n < 6 and keypoints.distinct_boxes() < 2):
        raise InsufficientKeypoints(
            f"{n} keypoints over {keypoints.distinct_boxes()} boxes; need >= 4 spanning "
            "2 boxes, or >= 6 from one box"
        )
    keypoints.validate_targets(intr)
    pts, targets = _corner_points_and_targets(keypoints)
    rotated = pts @ extr0.matrix().T
    t0 = extr0.translation

    def fun(x):
        return _residual(x, rotated, t0, intr, targets)

    if cfg.analytic_gradient:
        def jac(x):
            return _gradient_analytic(x, rotated, t0, intr, targets)
    else:
        def jac(x):
            return _gradient_fd(x, rotated, t0, intr, targets, cfg.rot_step, cfg.trans_step)

    x0 = np.zeros(6)
    f0 = fun(x0)
    g0 = jac(x0)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise NonFiniteResidual(f"objective {f0} or gradient non-finite at the start pose")

    # The pixel objective is badly scaled (rotation components see gradients
    # ~1e6 larger than translation), so scipy's line search can bail out with
    # "precision loss" long before the optimum. Restarting with a fresh
    # identity inverse-Hessian at the stall point fixes this reliably; the
    # iteration budget is shared across restarts.
    x_best, f_best = x0, f0
    total_nit = 0
    while total_nit < cfg.max_iter:
        res = minimize(
            fun,
            x_best,
            jac=jac,
            method="BFGS",
            options={"gtol": cfg.grad_tol, "maxiter": cfg.max_iter - total_nit},
        )
        total_nit += max(int(res.nit), 1)
        improved = np.isfinite(res.fun) and res.fun < f_best - 1e-15
        if improved:
            x_best, f_best = res.x, float(res.fun)
        if not improved or np.max(np.abs(jac(x_best))) < cfg.grad_tol:
            break
    if f_best > f0:
        log.warning("BFGS returned a non-improving point (f=%g vs f0=%g); keeping start pose", f_best, f0)
        x_best, f_best = x0, f0
    converged = bool(np.max(np.abs(jac(x_best))) < cfg.grad_tol)
    delta = ExtrinsicDelta(x_best[:3], x_best[3:])
    return OptimizationReport(
        initial_rmse=float(np.sqrt(f0 / n)),
        final_rmse=float(np.sqrt(max(f_best, 0.0) / n)),
        iterations=total_nit,
        converged=converged,
        optimized=extr0.compose_delta(delta.rot_delta, delta.trans_delta),
        delta=delta,
    )


def keypoints_from_pose(
    boxes: List[Box3D],
    extr: CameraExtrinsics,
    intr: CameraIntrinsics,
    corner_indices: Optional[Sequence[int]] = None,
    camera_id: str = "",
) -> KeypointSet:
    """Generate keypoints by projecting box corners under a known pose.

    Corners that fall behind the camera are skipped. Used by fixtures
    (targets from the true pose) and by the service projection endpoint.
    """
    idx = list(corner_indices) if corner_indices is not None else list(range(8))
    entries = []
    R, t = extr.matrix(), extr.translation
    for box in boxes:
        corners = box_corners(box)
        cam = corners @ R.T + t
        for i in idx:
            z = cam[i, 2]
            if z <= NEAR_PLANE:
                continue
            u = intr.fx * cam[i, 0] / z + intr.cx
            v = intr.fy * cam[i, 1] / z + intr.cy
            entries.append(Keypoint(box, i, (u, v)))
    return KeypointSet(entries=entries, camera_id=camera_id)
