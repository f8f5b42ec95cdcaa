import type {
  CommitResponse,
  FrameListResponse,
  KeypointWire,
  OptimizationReport,
  ProjectionResponse,
  SessionState,
} from "./types";

/** Error raised for any non-2xx service response, carrying the
 * machine-readable code from the error envelope when one is present. */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

async function toServiceError(resp: Response): Promise<ServiceError> {
  let code = "http_error";
  let message = `${resp.status} ${resp.statusText}`;
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "object" && body.detail !== null) {
      code = body.detail.code ?? code;
      message = body.detail.message ?? message;
    } else if (typeof body?.detail === "string") {
      message = body.detail;
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ServiceError(resp.status, code, message);
}

/** Thin typed wrapper over the calibration service endpoints. */
export class CalibClient {
  constructor(readonly baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.baseUrl + path, init);
    if (!resp.ok) {
      throw await toServiceError(resp);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  }

  listFrames(): Promise<FrameListResponse> {
    return this.request("/frames");
  }

  imageUrl(frameId: string, cameraId: string): string {
    return `${this.baseUrl}/frames/${frameId}/cameras/${cameraId}/image`;
  }

  projection(
    frameId: string,
    cameraId: string,
    sessionId?: string,
  ): Promise<ProjectionResponse> {
    const query = sessionId ? `?session=${sessionId}` : "";
    return this.request(
      `/frames/${frameId}/cameras/${cameraId}/projection${query}`,
    );
  }

  openSession(frameId: string, cameraId: string): Promise<SessionState> {
    return this.post("/sessions", { frame_id: frameId, camera_id: cameraId });
  }

  sessionState(sessionId: string): Promise<SessionState> {
    return this.request(`/sessions/${sessionId}`);
  }

  /** Replaces the session's keypoint set with exactly `keypoints`. */
  setKeypoints(
    sessionId: string,
    keypoints: KeypointWire[],
  ): Promise<{ session_id: string; keypoints: KeypointWire[] }> {
    return this.post(`/sessions/${sessionId}/keypoints`, {
      keypoints,
      replace: true,
    });
  }

  optimize(sessionId: string): Promise<OptimizationReport> {
    return this.post(`/sessions/${sessionId}/optimize`);
  }

  commit(sessionId: string): Promise<CommitResponse> {
    return this.post(`/sessions/${sessionId}/commit`);
  }
}
