"""Request/response schemas for the calibration service."""

from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field


class ExtrinsicsModel(BaseModel):
    """World-to-camera pose: unit quaternion (w, x, y, z) + translation."""

    quat_wxyz: List[float] = Field(min_length=4, max_length=4)
    translation: List[float] = Field(min_length=3, max_length=3)


class FrameSummary(BaseModel):
    frame_id: str
    cameras: List[str]
    n_labels: int


class FrameListResponse(BaseModel):
    frames: List[FrameSummary]


class CornerPoint(BaseModel):
    """One projected box corner; `behind` marks corners behind the camera
    (u and v are null there)."""

    corner_index: int
    u: Optional[float] = None
    v: Optional[float] = None
    behind: bool = False


class BoxProjection(BaseModel):
    box_index: int
    corners: List[CornerPoint]


class ProjectionResponse(BaseModel):
    frame_id: str
    camera_id: str
    image_url: str
    extrinsics: ExtrinsicsModel
    boxes: List[BoxProjection]


class OpenSessionRequest(BaseModel):
    frame_id: str
    camera_id: str


class KeypointEdit(BaseModel):
    """Target pixel for one box corner; (box_index, corner_index) is the key
    and later edits overwrite earlier ones."""

    box_index: int = Field(ge=0)
    corner_index: int = Field(ge=0, le=7)
    u: float
    v: float


class KeypointUpdateRequest(BaseModel):
    keypoints: List[KeypointEdit]
    replace: bool = False


class KeypointSetResponse(BaseModel):
    session_id: str
    keypoints: List[KeypointEdit]


class OptimizationReportModel(BaseModel):
    initial_rmse: float
    final_rmse: float
    iterations: int
    converged: bool
    extrinsics: ExtrinsicsModel


class SessionStateResponse(BaseModel):
    session_id: str
    frame_id: str
    camera_id: str
    extrinsics: ExtrinsicsModel
    keypoints: List[KeypointEdit]
    history: List[OptimizationReportModel]
    optimizing: bool


class CommitResponse(BaseModel):
    session_id: str
    path: str
