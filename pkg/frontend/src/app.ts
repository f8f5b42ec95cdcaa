import { CalibClient, ServiceError } from "./client";
import { OverlayView, type CornerRef } from "./overlay";
import { EditList, identifiability, type EditAction } from "./state";
import type {
  OptimizationReport,
  ProjectionResponse,
  SessionState,
} from "./types";

export interface AppOptions {
  baseUrl?: string;
  commitThreshold?: number;
}

function friendly(err: unknown): string {
  if (err instanceof ServiceError) {
    switch (err.code) {
      case "optimize_in_flight":
        return "an optimization is already running; wait for it to finish";
      case "insufficient_keypoints":
        return `not enough keypoints yet: ${err.message}`;
      default:
        return err.message;
    }
  }
  return err instanceof Error ? err.message : String(err);
}

/** The calibration editor: one frame/camera at a time, edits held in an
 * EditList mirrored to the service session, all overlay geometry
 * fetched back from the service. */
export class CalibApp {
  readonly client: CalibClient;
  readonly edits = new EditList();
  readonly overlay: OverlayView;

  session: SessionState | null = null;
  projection: ProjectionResponse | null = null;
  lastReport: OptimizationReport | null = null;
  rmseTrend: Array<[number, number]> = [];
  selected: CornerRef | null = null;
  optimizeInFlight = false;
  /** Number of optimize requests actually sent; observable in tests to
   * show the single-flight guard held. */
  optimizeRequests = 0;

  private syncQueue: Promise<void> = Promise.resolve();
  private pending: Promise<unknown> = Promise.resolve();
  private overlayOptimized = false;

  private frameSelect: HTMLSelectElement;
  private cameraSelect: HTMLSelectElement;
  private loadButton: HTMLButtonElement;
  private undoButton: HTMLButtonElement;
  private redoButton: HTMLButtonElement;
  private optimizeButton: HTMLButtonElement;
  private optimizeHint: HTMLElement;
  private commitButton: HTMLButtonElement;
  private thresholdInput: HTMLInputElement;
  private banner: HTMLElement;
  private trendList: HTMLElement;
  private trendChart: SVGSVGElement;

  constructor(root: HTMLElement, options: AppOptions = {}) {
    this.client = new CalibClient(options.baseUrl ?? "");

    const toolbar = document.createElement("div");
    toolbar.className = "toolbar";
    this.frameSelect = document.createElement("select");
    this.frameSelect.className = "frame-select";
    this.cameraSelect = document.createElement("select");
    this.cameraSelect.className = "camera-select";
    this.loadButton = this.makeButton("load", "Load");
    this.undoButton = this.makeButton("undo", "Undo");
    this.redoButton = this.makeButton("redo", "Redo");
    this.optimizeButton = this.makeButton("optimize", "Optimize");
    this.optimizeHint = document.createElement("span");
    this.optimizeHint.className = "optimize-hint";
    this.commitButton = this.makeButton("commit", "Commit");
    this.thresholdInput = document.createElement("input");
    this.thresholdInput.type = "number";
    this.thresholdInput.step = "0.1";
    this.thresholdInput.min = "0";
    this.thresholdInput.value = String(options.commitThreshold ?? 1.0);
    this.thresholdInput.className = "commit-threshold";
    this.thresholdInput.title = "commit enabled below this final RMSE (px)";
    toolbar.append(
      this.frameSelect,
      this.cameraSelect,
      this.loadButton,
      this.undoButton,
      this.redoButton,
      this.optimizeButton,
      this.optimizeHint,
      this.thresholdInput,
      this.commitButton,
    );

    this.banner = document.createElement("div");
    this.banner.className = "banner hidden";

    const sidebar = document.createElement("div");
    sidebar.className = "sidebar";
    const trendTitle = document.createElement("h3");
    trendTitle.textContent = "RMSE trend";
    this.trendList = document.createElement("ol");
    this.trendList.className = "trend";
    this.trendChart = document.createElementNS(
      "http://www.w3.org/2000/svg",
      "svg",
    );
    this.trendChart.setAttribute("class", "trend-chart");
    this.trendChart.setAttribute("viewBox", "0 0 120 32");
    sidebar.append(trendTitle, this.trendChart, this.trendList);

    const main = document.createElement("div");
    main.className = "editor-main";
    this.overlay = new OverlayView(main, {
      onSelect: (ref) => this.select(ref),
      onDragEnd: (ref, u, v) => this.dragCorner(ref, u, v),
    });
    main.appendChild(sidebar);

    root.append(toolbar, this.banner, main);

    this.loadButton.addEventListener("click", () => {
      void this.track(
        this.load(this.frameSelect.value, this.cameraSelect.value),
      );
    });
    this.frameSelect.addEventListener("change", () => this.fillCameras());
    this.undoButton.addEventListener("click", () => this.undo());
    this.redoButton.addEventListener("click", () => this.redo());
    this.optimizeButton.addEventListener("click", () => {
      void this.track(this.optimize());
    });
    this.commitButton.addEventListener("click", () => {
      void this.track(this.commit());
    });
    this.thresholdInput.addEventListener("input", () => this.renderControls());
    document.addEventListener("keydown", (e) => this.onKey(e));
    this.renderControls();
  }

  private makeButton(name: string, label: string): HTMLButtonElement {
    const button = document.createElement("button");
    button.className = `btn-${name}`;
    button.textContent = label;
    return button;
  }

  /** Resolves once every queued edit sync and tracked request has
   * settled; tests await this instead of sleeping. */
  async settled(): Promise<void> {
    let last: Promise<unknown>;
    do {
      last = this.pending;
      await last.catch(() => undefined);
      await this.syncQueue.catch(() => undefined);
    } while (last !== this.pending);
  }

  private track<T>(p: Promise<T>): Promise<T> {
    this.pending = this.pending.catch(() => undefined).then(() => p.catch(() => undefined));
    return p;
  }

  async start(): Promise<void> {
    const { frames } = await this.client.listFrames();
    this.frameSelect.textContent = "";
    for (const frame of frames) {
      const option = document.createElement("option");
      option.value = frame.frame_id;
      option.textContent = frame.frame_id;
      option.dataset.cameras = frame.cameras.join(",");
      this.frameSelect.appendChild(option);
    }
    this.fillCameras();
  }

  private fillCameras(): void {
    const option = this.frameSelect.selectedOptions[0];
    this.cameraSelect.textContent = "";
    if (!option) {
      return;
    }
    for (const cam of (option.dataset.cameras ?? "").split(",")) {
      if (!cam) {
        continue;
      }
      const camOption = document.createElement("option");
      camOption.value = cam;
      camOption.textContent = cam;
      this.cameraSelect.appendChild(camOption);
    }
  }

  /** Opens a fresh session on the frame/camera and renders its overlay. */
  async load(frameId: string, cameraId: string): Promise<void> {
    const session = await this.client.openSession(frameId, cameraId);
    await this.adopt(session);
  }

  /** Reattaches to an existing session (page reload): rebuilds the edit
   * list and overlay purely from service state. */
  async resume(sessionId: string): Promise<void> {
    const session = await this.client.sessionState(sessionId);
    await this.adopt(session);
  }

  private async adopt(session: SessionState): Promise<void> {
    this.session = session;
    this.edits.reset();
    for (const kp of session.keypoints) {
      this.edits.set(kp.box_index, kp.corner_index, kp.u, kp.v);
    }
    this.rmseTrend = session.history.map((r) => [r.initial_rmse, r.final_rmse]);
    this.lastReport = session.history.length
      ? session.history[session.history.length - 1]
      : null;
    this.overlayOptimized = session.history.length > 0;
    this.selected = null;
    this.overlay.image.src = this.client.imageUrl(
      session.frame_id,
      session.camera_id,
    );
    await this.refreshOverlay();
    this.clearBanner();
  }

  private async refreshOverlay(): Promise<void> {
    if (!this.session) {
      return;
    }
    this.projection = await this.client.projection(
      this.session.frame_id,
      this.session.camera_id,
      this.session.session_id,
    );
    this.renderAll();
  }

  private renderAll(): void {
    this.overlay.setSelected(this.selected);
    this.overlay.render(
      this.projection?.boxes ?? [],
      this.edits.entries(),
      this.overlayOptimized,
    );
    this.renderControls();
    this.renderTrend();
  }

  private renderControls(): void {
    const loaded = this.session !== null;
    const ident = identifiability(this.edits.entries());
    this.undoButton.disabled = !loaded || !this.edits.canUndo;
    this.redoButton.disabled = !loaded || !this.edits.canRedo;
    this.optimizeButton.disabled =
      !loaded || this.optimizeInFlight || !ident.ok;
    this.optimizeHint.textContent = loaded && !ident.ok ? ident.detail : "";
    const threshold = Number(this.thresholdInput.value);
    this.commitButton.disabled =
      !loaded ||
      this.lastReport === null ||
      !(this.lastReport.final_rmse < threshold);
  }

  private renderTrend(): void {
    this.trendList.textContent = "";
    for (const [initial, final] of this.rmseTrend) {
      const item = document.createElement("li");
      item.textContent = `${initial.toFixed(3)} px → ${final.toFixed(3)} px`;
      this.trendList.appendChild(item);
    }
    this.trendChart.textContent = "";
    if (this.rmseTrend.length === 0) {
      return;
    }
    const values = this.rmseTrend.flat();
    const top = Math.max(...values, 1e-12);
    const step = 120 / Math.max(values.length - 1, 1);
    const points = values
      .map((v, i) => `${(i * step).toFixed(1)},${(30 - (28 * v) / top).toFixed(1)}`)
      .join(" ");
    const line = document.createElementNS(
      "http://www.w3.org/2000/svg",
      "polyline",
    );
    line.setAttribute("points", points);
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", "#27c5e8");
    this.trendChart.appendChild(line);
  }

  private showError(err: unknown): void {
    this.banner.textContent = friendly(err);
    this.banner.classList.remove("hidden");
    this.banner.classList.add("error");
  }

  private showInfo(text: string): void {
    this.banner.textContent = text;
    this.banner.classList.remove("hidden", "error");
  }

  private clearBanner(): void {
    this.banner.textContent = "";
    this.banner.classList.add("hidden");
    this.banner.classList.remove("error");
  }

  private select(ref: CornerRef): void {
    this.selected = ref;
    this.overlay.setSelected(ref);
    this.renderControls();
  }

  /** Records a dragged corner target and mirrors it to the session.
   * The marker has already snapped locally (optimistic echo); a failed
   * sync rolls the edit back and surfaces the error. */
  dragCorner(ref: CornerRef, u: number, v: number): void {
    const action = this.edits.set(ref.boxIndex, ref.cornerIndex, u, v);
    this.overlayOptimized = false;
    this.selected = ref;
    this.renderAll();
    this.enqueueSync(action);
  }

  private enqueueSync(action: EditAction): void {
    if (!this.session) {
      return;
    }
    const sid = this.session.session_id;
    this.syncQueue = this.syncQueue
      .then(() => this.client.setKeypoints(sid, this.edits.toWire()))
      .then(() => {
        this.clearBanner();
      })
      .catch((err) => {
        this.edits.revertAction(action);
        this.showError(err);
        this.renderAll();
      });
  }

  /** Pushes the full edit list after an undo/redo; on failure the local
   * step is reversed so list and session stay in agreement. */
  private syncWholeList(reverse: () => void): void {
    if (!this.session) {
      return;
    }
    const sid = this.session.session_id;
    this.syncQueue = this.syncQueue
      .then(() => this.client.setKeypoints(sid, this.edits.toWire()))
      .then(() => {
        this.clearBanner();
      })
      .catch((err) => {
        reverse();
        this.showError(err);
        this.renderAll();
      });
  }

  undo(): void {
    if (!this.edits.undo()) {
      return;
    }
    this.overlayOptimized = false;
    this.renderAll();
    this.syncWholeList(() => this.edits.redo());
  }

  redo(): void {
    if (!this.edits.redo()) {
      return;
    }
    this.overlayOptimized = false;
    this.renderAll();
    this.syncWholeList(() => this.edits.undo());
  }

  /** Moves the selected corner by (du, dv) pixels from its current
   * target (or its projected position if untouched). */
  nudge(du: number, dv: number): void {
    if (!this.selected) {
      return;
    }
    const { boxIndex, cornerIndex } = this.selected;
    const current = this.edits.get(boxIndex, cornerIndex);
    let u: number;
    let v: number;
    if (current) {
      u = current.u;
      v = current.v;
    } else {
      const box = this.projection?.boxes.find((b) => b.box_index === boxIndex);
      const corner = box?.corners[cornerIndex];
      if (!corner || corner.u === null || corner.v === null) {
        return;
      }
      u = corner.u;
      v = corner.v;
    }
    this.dragCorner(this.selected, u + du, v + dv);
  }

  private onKey(e: KeyboardEvent): void {
    if (e.key === "z" && (e.ctrlKey || e.metaKey)) {
      e.preventDefault();
      if (e.shiftKey) {
        this.redo();
      } else {
        this.undo();
      }
      return;
    }
    const step = e.shiftKey ? 0.1 : 1;
    switch (e.key) {
      case "ArrowLeft":
        e.preventDefault();
        this.nudge(-step, 0);
        break;
      case "ArrowRight":
        e.preventDefault();
        this.nudge(step, 0);
        break;
      case "ArrowUp":
        e.preventDefault();
        this.nudge(0, -step);
        break;
      case "ArrowDown":
        e.preventDefault();
        this.nudge(0, step);
        break;
    }
  }

  /** Runs optimization once; a second trigger while one is in flight is
   * dropped client-side. */
  async optimize(): Promise<void> {
    if (!this.session || this.optimizeInFlight) {
      return;
    }
    if (!identifiability(this.edits.entries()).ok) {
      return;
    }
    this.optimizeInFlight = true;
    this.renderControls();
    try {
      await this.syncQueue; // make sure every edit reached the session
      this.optimizeRequests += 1;
      const report = await this.client.optimize(this.session.session_id);
      this.lastReport = report;
      this.rmseTrend.push([report.initial_rmse, report.final_rmse]);
      this.overlayOptimized = true;
      await this.refreshOverlay();
      this.clearBanner();
    } catch (err) {
      this.showError(err);
    } finally {
      this.optimizeInFlight = false;
      this.renderAll();
    }
  }

  async commit(): Promise<void> {
    if (!this.session) {
      return;
    }
    try {
      const result = await this.client.commit(this.session.session_id);
      this.showInfo(`saved to ${result.path}`);
    } catch (err) {
      this.showError(err);
    }
  }
}
