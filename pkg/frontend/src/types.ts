export interface FrameInfo {
  frame_id: string;
  cameras: string[];
  n_labels: number;
}

export interface FrameListResponse {
  frames: FrameInfo[];
}

export interface ExtrinsicsWire {
  quat_wxyz: number[];
  translation: number[];
}

export interface ProjectedCorner {
  corner_index: number;
  u: number | null;
  v: number | null;
  behind: boolean;
}

export interface ProjectedBox {
  box_index: number;
  corners: ProjectedCorner[];
}

export interface ProjectionResponse {
  frame_id: string;
  camera_id: string;
  image_url: string;
  extrinsics: ExtrinsicsWire;
  boxes: ProjectedBox[];
}

export interface KeypointWire {
  box_index: number;
  corner_index: number;
  u: number;
  v: number;
}

export interface OptimizationReport {
  initial_rmse: number;
  final_rmse: number;
  iterations: number;
  converged: boolean;
  extrinsics: ExtrinsicsWire;
}

export interface SessionState {
  session_id: string;
  frame_id: string;
  camera_id: string;
  extrinsics: ExtrinsicsWire;
  keypoints: KeypointWire[];
  history: OptimizationReport[];
  optimizing: boolean;
}

export interface CommitResponse {
  session_id: string;
  path: string;
}
