import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import { CalibApp } from "../src/app";
import type { KeypointWire } from "../src/types";

const SESSION = {
  session_id: "abc123",
  frame_id: "000000",
  camera_id: "cam0",
  extrinsics: { quat_wxyz: [1, 0, 0, 0], translation: [0, 0, 0] },
  keypoints: [] as KeypointWire[],
  history: [],
  optimizing: false,
};

function projectionBody() {
  // Two boxes, eight corners each, laid out on a simple lattice.
  const boxes = [0, 1].map((boxIndex) => ({
    box_index: boxIndex,
    corners: Array.from({ length: 8 }, (_, cornerIndex) => ({
      corner_index: cornerIndex,
      u: 50 + boxIndex * 200 + cornerIndex * 10,
      v: 100 + cornerIndex * 12,
      behind: false,
    })),
  }));
  return {
    frame_id: "000000",
    camera_id: "cam0",
    image_url: "/frames/000000/cameras/cam0/image",
    extrinsics: SESSION.extrinsics,
    boxes,
  };
}

interface Route {
  match: (url: string, init?: RequestInit) => boolean;
  respond: (url: string, init?: RequestInit) => Response;
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

function errorResponse(status: number, code: string, message: string): Response {
  return jsonResponse({ detail: { code, message } }, status);
}

class FakeService {
  keypointPosts: Array<{ keypoints: KeypointWire[]; replace: boolean }> = [];
  optimizeCalls = 0;
  failKeypoints = false;
  optimizeGate: Promise<void> | null = null;
  routes: Route[] = [];

  install(): void {
    vi.stubGlobal(
      "fetch",
      vi.fn(async (input: RequestInfo | URL, init?: RequestInit) => {
        const url = String(input);
        const method = init?.method ?? "GET";
        if (url.endsWith("/frames") && method === "GET") {
          return jsonResponse({
            frames: [{ frame_id: "000000", cameras: ["cam0"], n_labels: 2 }],
          });
        }
        if (url.endsWith("/sessions") && method === "POST") {
          return jsonResponse(SESSION, 201);
        }
        if (url.includes("/projection")) {
          return jsonResponse(projectionBody());
        }
        if (url.endsWith("/keypoints") && method === "POST") {
          if (this.failKeypoints) {
            return errorResponse(500, "scene_load_failed", "disk gone");
          }
          const body = JSON.parse(String(init?.body));
          this.keypointPosts.push(body);
          return jsonResponse({
            session_id: SESSION.session_id,
            keypoints: body.keypoints,
          });
        }
        if (url.endsWith("/optimize") && method === "POST") {
          this.optimizeCalls += 1;
          if (this.optimizeGate) {
            await this.optimizeGate;
          }
          return jsonResponse({
            initial_rmse: 3.2,
            final_rmse: 0.004,
            iterations: 11,
            converged: true,
            extrinsics: SESSION.extrinsics,
          });
        }
        if (url.endsWith("/commit") && method === "POST") {
          return jsonResponse({
            session_id: SESSION.session_id,
            path: "scene/frames/000000/cam0/calib.json",
          });
        }
        throw new Error(`unrouted request: ${method} ${url}`);
      }),
    );
  }
}

function marker(app: CalibApp, kind: string, box: number, corner: number): HTMLElement {
  const node = app.overlay.markerLayer.querySelector<HTMLElement>(
    `.corner.${kind}[data-box="${box}"][data-corner="${corner}"]`,
  );
  if (!node) {
    throw new Error(`no ${kind} marker for box ${box} corner ${corner}`);
  }
  return node;
}

function dragMarker(node: HTMLElement, toU: number, toV: number): void {
  node.dispatchEvent(
    new MouseEvent("mousedown", { bubbles: true, button: 0, clientX: 0, clientY: 0 }),
  );
  document.dispatchEvent(
    new MouseEvent("mousemove", { clientX: toU, clientY: toV }),
  );
  document.dispatchEvent(
    new MouseEvent("mouseup", { clientX: toU, clientY: toV }),
  );
}

describe("CalibApp with a stubbed service", () => {
  let service: FakeService;
  let app: CalibApp;

  beforeEach(async () => {
    service = new FakeService();
    service.install();
    document.body.innerHTML = '<div id="app"></div>';
    app = new CalibApp(document.getElementById("app")!);
    await app.start();
    await app.load("000000", "cam0");
    // jsdom has no layout; anchor the stage at the viewport origin so
    // client coordinates equal image pixels at zoom 1.
    app.overlay.stage.getBoundingClientRect = () =>
      ({ left: 0, top: 0, width: 640, height: 480 }) as DOMRect;
  });

  afterEach(() => {
    vi.unstubAllGlobals();
  });

  it("a drag posts the full edit list with replace semantics", async () => {
    dragMarker(marker(app, "server", 0, 2), 82.5, 140.25);
    await app.settled();
    expect(app.edits.entries()).toEqual([
      { boxIndex: 0, cornerIndex: 2, u: 82.5, v: 140.25 },
    ]);
    expect(service.keypointPosts).toHaveLength(1);
    expect(service.keypointPosts[0].replace).toBe(true);
    expect(service.keypointPosts[0].keypoints).toEqual([
      { box_index: 0, corner_index: 2, u: 82.5, v: 140.25 },
    ]);
    expect(marker(app, "pending", 0, 2).dataset.u).toBe("82.5");
  });

  it("dragging the same corner twice keeps one entry", async () => {
    dragMarker(marker(app, "server", 0, 2), 80, 140);
    dragMarker(marker(app, "server", 0, 2), 90, 150);
    await app.settled();
    expect(app.edits.size).toBe(1);
    expect(app.edits.get(0, 2)).toEqual({
      boxIndex: 0,
      cornerIndex: 2,
      u: 90,
      v: 150,
    });
  });

  it("rolls back the edit and shows a banner when the sync fails", async () => {
    service.failKeypoints = true;
    dragMarker(marker(app, "server", 0, 2), 80, 140);
    await app.settled();
    expect(app.edits.size).toBe(0);
    const banner = document.querySelector(".banner")!;
    expect(banner.classList.contains("hidden")).toBe(false);
    expect(banner.classList.contains("error")).toBe(true);
    expect(banner.textContent).toContain("disk gone");
    expect(
      app.overlay.markerLayer.querySelector(".corner.pending"),
    ).toBeNull();
  });

  it("disables optimize until the edit set is identifiable", async () => {
    const button = document.querySelector<HTMLButtonElement>(".btn-optimize")!;
    const hint = document.querySelector(".optimize-hint")!;
    expect(button.disabled).toBe(true);
    dragMarker(marker(app, "server", 0, 0), 10, 10);
    dragMarker(marker(app, "server", 0, 1), 20, 10);
    dragMarker(marker(app, "server", 0, 2), 30, 10);
    dragMarker(marker(app, "server", 0, 3), 40, 10);
    await app.settled();
    expect(button.disabled).toBe(true);
    expect(hint.textContent).toContain("2 more");
    dragMarker(marker(app, "server", 1, 0), 50, 10);
    await app.settled();
    expect(button.disabled).toBe(false); // five points spanning two boxes
    expect(hint.textContent).toBe("");
  });

  it("arrow keys nudge the selected corner by 1 px, 0.1 px with shift", async () => {
    const node = marker(app, "server", 0, 2);
    node.dispatchEvent(
      new MouseEvent("mousedown", { bubbles: true, button: 0, clientX: 0, clientY: 0 }),
    );
    document.dispatchEvent(new MouseEvent("mouseup", { clientX: 0, clientY: 0 }));
    document.dispatchEvent(
      new KeyboardEvent("keydown", { key: "ArrowRight" }),
    );
    await app.settled();
    // server corner (0,2) sits at u=70, v=124 in the stub projection
    expect(app.edits.get(0, 2)).toEqual({
      boxIndex: 0,
      cornerIndex: 2,
      u: 71,
      v: 124,
    });
    document.dispatchEvent(
      new KeyboardEvent("keydown", { key: "ArrowDown", shiftKey: true }),
    );
    await app.settled();
    expect(app.edits.get(0, 2)?.v).toBeCloseTo(124.1, 10);
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "ArrowLeft" }));
    await app.settled();
    expect(app.edits.get(0, 2)?.u).toBeCloseTo(70, 10);
  });

  it("blocks a second optimize while one is in flight", async () => {
    for (const corner of [0, 1, 2, 3]) {
      dragMarker(marker(app, "server", 0, corner), 10 + corner, 10);
    }
    dragMarker(marker(app, "server", 1, 0), 50, 10);
    await app.settled();
    let release!: () => void;
    service.optimizeGate = new Promise((resolve) => {
      release = resolve;
    });
    const button = document.querySelector<HTMLButtonElement>(".btn-optimize")!;
    button.click();
    button.click();
    expect(app.optimizeInFlight).toBe(true);
    expect(button.disabled).toBe(true);
    release();
    await app.settled();
    expect(service.optimizeCalls).toBe(1);
    expect(app.optimizeInFlight).toBe(false);
  });

  it("renders a 409 from the service as an actionable message", async () => {
    for (const corner of [0, 1, 2, 3]) {
      dragMarker(marker(app, "server", 0, corner), 10 + corner, 10);
    }
    dragMarker(marker(app, "server", 1, 0), 50, 10);
    await app.settled();
    vi.mocked(fetch).mockImplementationOnce(async () =>
      errorResponse(409, "optimize_in_flight", "an optimization is already running"),
    );
    await app.optimize();
    const banner = document.querySelector(".banner")!;
    expect(banner.textContent).toContain("wait for it to finish");
  });

  it("enables commit only below the RMSE threshold", async () => {
    const commit = document.querySelector<HTMLButtonElement>(".btn-commit")!;
    const threshold = document.querySelector<HTMLInputElement>(".commit-threshold")!;
    expect(commit.disabled).toBe(true);
    for (const corner of [0, 1, 2, 3]) {
      dragMarker(marker(app, "server", 0, corner), 10 + corner, 10);
    }
    dragMarker(marker(app, "server", 1, 0), 50, 10);
    await app.settled();
    await app.optimize();
    expect(app.lastReport?.final_rmse).toBeCloseTo(0.004, 12);
    expect(commit.disabled).toBe(false); // 0.004 < default 1.0
    threshold.value = "0.001";
    threshold.dispatchEvent(new Event("input"));
    expect(commit.disabled).toBe(true);
  });

  it("appends one RMSE trend entry per optimization", async () => {
    for (const corner of [0, 1, 2, 3]) {
      dragMarker(marker(app, "server", 0, corner), 10 + corner, 10);
    }
    dragMarker(marker(app, "server", 1, 0), 50, 10);
    await app.settled();
    await app.optimize();
    await app.optimize();
    expect(app.rmseTrend).toEqual([
      [3.2, 0.004],
      [3.2, 0.004],
    ]);
    expect(document.querySelectorAll(".trend li")).toHaveLength(2);
    expect(
      document.querySelector(".trend-chart polyline")?.getAttribute("points"),
    ).toBeTruthy();
  });
});
