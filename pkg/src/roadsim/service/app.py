"""Calibration HTTP service: serve frames, project boxes, refine poses.

Sessions hold a working copy of one camera's extrinsics. All edits and
optimization results stay session-local until an explicit commit, which
rewrites the dataset's calib file atomically (temp file + rename).
Errors carry machine-readable codes in `detail.code`.
"""

from __future__ import annotations

import os
import threading
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import FileResponse

from ..errors import InsufficientKeypoints, MissingFile, RoadSimError
from ..extrinsics import Keypoint, KeypointSet, optimize
from ..geometry import CameraExtrinsics, box_corners, project
from ..pipeline import discover_frames
from ..scene_io import CameraFrame, SceneFrame, load_scene, save_calib
from .models import (
    BoxProjection,
    CommitResponse,
    CornerPoint,
    ExtrinsicsModel,
    FrameListResponse,
    FrameSummary,
    KeypointEdit,
    KeypointSetResponse,
    KeypointUpdateRequest,
    OpenSessionRequest,
    OptimizationReportModel,
    ProjectionResponse,
    SessionStateResponse,
)


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"code": code, "message": message})


def _extr_model(extr: CameraExtrinsics) -> ExtrinsicsModel:
    return ExtrinsicsModel(
        quat_wxyz=[float(v) for v in extr.quat_wxyz],
        translation=[float(v) for v in extr.translation],
    )


class Session:
    """One operator's working state for a single (frame, camera)."""

    def __init__(self, session_id: str, frame_id: str, camera_id: str, extrinsics: CameraExtrinsics):
        self.session_id = session_id
        self.frame_id = frame_id
        self.camera_id = camera_id
        self.extrinsics = extrinsics
        self.keypoints: Dict[Tuple[int, int], Tuple[float, float]] = {}
        self.history: List[OptimizationReportModel] = []
        self.lock = threading.Lock()  # serializes state mutations
        self.flight = threading.Lock()  # held while an optimize call runs

    def edits(self) -> List[KeypointEdit]:
        return [
            KeypointEdit(box_index=bi, corner_index=ci, u=u, v=v)
            for (bi, ci), (u, v) in sorted(self.keypoints.items())
        ]

    def state(self) -> SessionStateResponse:
        return SessionStateResponse(
            session_id=self.session_id,
            frame_id=self.frame_id,
            camera_id=self.camera_id,
            extrinsics=_extr_model(self.extrinsics),
            keypoints=self.edits(),
            history=list(self.history),
            optimizing=self.flight.locked(),
        )


class ServiceState:
    def __init__(self, scene_root):
        self.scene_root = Path(scene_root)
        self.sessions: Dict[str, Session] = {}
        self._frames: Dict[str, SceneFrame] = {}
        self._cache_lock = threading.Lock()

    def frame(self, frame_id: str) -> SceneFrame:
        with self._cache_lock:
            cached = self._frames.get(frame_id)
        if cached is not None:
            return cached
        try:
            frame = load_scene(self.scene_root, frame_id)
        except MissingFile as exc:
            raise _error(404, "unknown_frame", str(exc))
        except RoadSimError as exc:
            raise _error(500, "scene_load_failed", str(exc))
        with self._cache_lock:
            self._frames[frame_id] = frame
        return frame

    def camera(self, frame_id: str, camera_id: str) -> CameraFrame:
        frame = self.frame(frame_id)
        try:
            return frame.get_camera(camera_id)
        except KeyError:
            raise _error(404, "unknown_camera", f"frame {frame_id} has no camera {camera_id}")

    def invalidate(self, frame_id: str) -> None:
        with self._cache_lock:
            self._frames.pop(frame_id, None)

    def session(self, session_id: str) -> Session:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise _error(404, "unknown_session", f"no session {session_id}")
        return sess


def _project_boxes(frame: SceneFrame, cam: CameraFrame, extr: CameraExtrinsics) -> List[BoxProjection]:
    boxes = []
    for bi, box in enumerate(frame.labels):
        corners = []
        for ci, point in enumerate(box_corners(box)):
            px = project(point, extr, cam.intrinsics)
            if px is None:
                corners.append(CornerPoint(corner_index=ci, behind=True))
            else:
                corners.append(CornerPoint(corner_index=ci, u=float(px.u), v=float(px.v)))
        boxes.append(BoxProjection(box_index=bi, corners=corners))
    return boxes


def create_app(scene_root) -> FastAPI:
    state = ServiceState(scene_root)
    app = FastAPI(title="roadsim calibration service", version="0.1.0")
    app.state.svc = state

    @app.get("/frames", response_model=FrameListResponse)
    def list_frames():
        try:
            frame_ids = discover_frames(state.scene_root)
        except MissingFile as exc:
            raise _error(404, "unknown_scene", str(exc))
        frames = []
        for fid in frame_ids:
            frame_dir = state.scene_root / "frames" / fid
            cameras = sorted(d.name for d in frame_dir.iterdir() if d.is_dir())
            labels_path = frame_dir / "labels.txt"
            n_labels = 0
            if labels_path.is_file():
                n_labels = len(
                    [ln for ln in labels_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
                )
            frames.append(FrameSummary(frame_id=fid, cameras=cameras, n_labels=n_labels))
        return FrameListResponse(frames=frames)

    @app.get("/frames/{frame_id}/cameras/{camera_id}/projection", response_model=ProjectionResponse)
    def projection(frame_id: str, camera_id: str, session: Optional[str] = Query(default=None)):
        frame = state.frame(frame_id)
        cam = state.camera(frame_id, camera_id)
        extr = cam.extrinsics
        if session is not None:
            sess = state.session(session)
            if sess.frame_id != frame_id or sess.camera_id != camera_id:
                raise _error(
                    400,
                    "session_mismatch",
                    f"session {session} is for frame {sess.frame_id} camera {sess.camera_id}",
                )
            extr = sess.extrinsics
        return ProjectionResponse(
            frame_id=frame_id,
            camera_id=camera_id,
            image_url=f"/frames/{frame_id}/cameras/{camera_id}/image",
            extrinsics=_extr_model(extr),
            boxes=_project_boxes(frame, cam, extr),
        )

    @app.get("/frames/{frame_id}/cameras/{camera_id}/image")
    def image(frame_id: str, camera_id: str):
        cam = state.camera(frame_id, camera_id)
        return FileResponse(
            cam.image_path,
            media_type="image/png",
            headers={"Cache-Control": "public, max-age=3600"},
        )

    @app.post("/sessions", response_model=SessionStateResponse, status_code=201)
    def open_session(body: OpenSessionRequest):
        cam = state.camera(body.frame_id, body.camera_id)
        session_id = uuid.uuid4().hex[:12]
        sess = Session(session_id, body.frame_id, body.camera_id, cam.extrinsics)
        state.sessions[session_id] = sess
        return sess.state()

    @app.get("/sessions/{session_id}", response_model=SessionStateResponse)
    def session_state(session_id: str):
        return state.session(session_id).state()

    @app.post("/sessions/{session_id}/keypoints", response_model=KeypointSetResponse)
    def update_keypoints(session_id: str, body: KeypointUpdateRequest):
        sess = state.session(session_id)
        frame = state.frame(sess.frame_id)
        n_labels = len(frame.labels)
        with sess.lock:
            for e in body.keypoints:
                if e.box_index >= n_labels:
                    raise _error(
                        400,
                        "unknown_box",
                        f"box_index {e.box_index} out of range; frame has {n_labels} labels",
                    )
            if body.replace:
                sess.keypoints.clear()
            for e in body.keypoints:
                sess.keypoints[(e.box_index, e.corner_index)] = (e.u, e.v)
            return KeypointSetResponse(session_id=session_id, keypoints=sess.edits())

    @app.post("/sessions/{session_id}/optimize", response_model=OptimizationReportModel)
    def run_optimize(session_id: str):
        sess = state.session(session_id)
        if not sess.flight.acquire(blocking=False):
            raise _error(409, "optimize_in_flight", "an optimization is already running for this session")
        try:
            frame = state.frame(sess.frame_id)
            cam = state.camera(sess.frame_id, sess.camera_id)
            with sess.lock:
                entries = [
                    Keypoint(frame.labels[bi], ci, (u, v))
                    for (bi, ci), (u, v) in sorted(sess.keypoints.items())
                ]
                extr0 = sess.extrinsics
            kset = KeypointSet(tuple(entries), camera_id=sess.camera_id)
            try:
                report = optimize(extr0, cam.intrinsics, kset)
            except InsufficientKeypoints as exc:
                raise _error(422, "insufficient_keypoints", str(exc))
            except RoadSimError as exc:
                raise _error(422, "optimize_failed", str(exc))
            model = OptimizationReportModel(
                initial_rmse=report.initial_rmse,
                final_rmse=report.final_rmse,
                iterations=report.iterations,
                converged=report.converged,
                extrinsics=_extr_model(report.optimized),
            )
            with sess.lock:
                sess.extrinsics = report.optimized
                sess.history.append(model)
            return model
        finally:
            sess.flight.release()

    @app.post("/sessions/{session_id}/commit", response_model=CommitResponse)
    def commit(session_id: str):
        sess = state.session(session_id)
        cam = state.camera(sess.frame_id, sess.camera_id)
        calib_path = (
            state.scene_root / "frames" / sess.frame_id / sess.camera_id / "calib.json"
        )
        tmp_path = calib_path.with_name(calib_path.name + ".tmp")
        with sess.lock:
            try:
                save_calib(tmp_path, cam.intrinsics, sess.extrinsics)
                os.replace(tmp_path, calib_path)
            except OSError as exc:
                tmp_path.unlink(missing_ok=True)
                raise _error(500, "commit_failed", str(exc))
        state.invalidate(sess.frame_id)
        return CommitResponse(session_id=session_id, path=str(calib_path))

    return app
