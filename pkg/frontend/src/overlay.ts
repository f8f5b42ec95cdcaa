import type { KeypointEdit } from "./state";
import type { ProjectedBox } from "./types";

export interface CornerRef {
  boxIndex: number;
  cornerIndex: number;
}

export interface OverlayCallbacks {
  onSelect(ref: CornerRef): void;
  onDragEnd(ref: CornerRef, u: number, v: number): void;
}

// Bottom face loop, top face loop, then the four pillars.
const WIREFRAME_EDGES: Array<[number, number]> = [
  [0, 1],
  [1, 2],
  [2, 3],
  [3, 0],
  [4, 5],
  [5, 6],
  [6, 7],
  [7, 4],
  [0, 4],
  [1, 5],
  [2, 6],
  [3, 7],
];

const SERVER_COLOR = "#27c5e8";
const OPTIMIZED_COLOR = "#3ddc84";
const PENDING_COLOR = "#ff9f40";

const MIN_ZOOM = 0.25;
const MAX_ZOOM = 8;

/** Image, wireframe canvas, and draggable corner markers inside one
 * zoom/pan stage. Holds only pixel positions handed to it — projections
 * come from the service, pending targets from the edit list.
 *
 * Markers are positioned DOM nodes rather than canvas hits so they stay
 * individually addressable (selection, keyboard nudge, tests); the
 * canvas carries just the wireframe lines and is skipped when no 2D
 * context exists. */
export class OverlayView {
  readonly viewport: HTMLElement;
  readonly stage: HTMLElement;
  readonly image: HTMLImageElement;
  readonly canvas: HTMLCanvasElement;
  readonly markerLayer: HTMLElement;

  zoom = 1;
  panX = 0;
  panY = 0;

  private callbacks: OverlayCallbacks;
  private drag: {
    ref: CornerRef;
    marker: HTMLElement;
    moved: boolean;
  } | null = null;
  private selected: CornerRef | null = null;
  private boxes: ProjectedBox[] = [];
  private edits: KeypointEdit[] = [];
  private serverColor = SERVER_COLOR;

  constructor(container: HTMLElement, callbacks: OverlayCallbacks) {
    this.callbacks = callbacks;
    this.viewport = document.createElement("div");
    this.viewport.className = "viewport";
    this.stage = document.createElement("div");
    this.stage.className = "stage";
    this.image = document.createElement("img");
    this.image.className = "frame-image";
    this.image.draggable = false;
    this.canvas = document.createElement("canvas");
    this.canvas.className = "wireframe";
    this.markerLayer = document.createElement("div");
    this.markerLayer.className = "markers";
    this.stage.append(this.image, this.canvas, this.markerLayer);
    this.viewport.appendChild(this.stage);
    container.appendChild(this.viewport);

    this.image.addEventListener("load", () => {
      this.canvas.width = this.image.naturalWidth;
      this.canvas.height = this.image.naturalHeight;
      this.stage.style.width = `${this.image.naturalWidth}px`;
      this.stage.style.height = `${this.image.naturalHeight}px`;
      this.drawWireframes();
    });
    this.viewport.addEventListener("wheel", (e) => this.onWheel(e));
    this.viewport.addEventListener("mousedown", (e) => this.onPanStart(e));
    this.applyTransform();
  }

  /** Converts viewport client coordinates to image pixels. */
  toImage(clientX: number, clientY: number): { u: number; v: number } {
    const rect = this.stage.getBoundingClientRect();
    return {
      u: (clientX - rect.left) / this.zoom,
      v: (clientY - rect.top) / this.zoom,
    };
  }

  setSelected(ref: CornerRef | null): void {
    this.selected = ref;
    this.renderMarkers();
  }

  /** Redraws wireframes and markers from the given server projection
   * and pending edits. `optimized` switches the server color so the
   * operator can tell a post-optimization overlay from the initial
   * one. */
  render(
    boxes: ProjectedBox[],
    edits: KeypointEdit[],
    optimized: boolean,
  ): void {
    this.boxes = boxes;
    this.edits = edits;
    this.serverColor = optimized ? OPTIMIZED_COLOR : SERVER_COLOR;
    this.drawWireframes();
    this.renderMarkers();
  }

  private applyTransform(): void {
    this.stage.style.transformOrigin = "0 0";
    this.stage.style.transform =
      `translate(${this.panX}px, ${this.panY}px) scale(${this.zoom})`;
    this.stage.style.setProperty("--inv-zoom", String(1 / this.zoom));
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault();
    const rect = this.viewport.getBoundingClientRect();
    const cx = e.clientX - rect.left;
    const cy = e.clientY - rect.top;
    const next = Math.min(
      MAX_ZOOM,
      Math.max(MIN_ZOOM, this.zoom * Math.exp(-e.deltaY * 0.0015)),
    );
    const ratio = next / this.zoom;
    this.panX = cx - (cx - this.panX) * ratio;
    this.panY = cy - (cy - this.panY) * ratio;
    this.zoom = next;
    this.applyTransform();
  }

  private onPanStart(e: MouseEvent): void {
    if (e.button !== 0 || (e.target as HTMLElement).closest(".corner")) {
      return;
    }
    const startX = e.clientX - this.panX;
    const startY = e.clientY - this.panY;
    const move = (ev: MouseEvent) => {
      this.panX = ev.clientX - startX;
      this.panY = ev.clientY - startY;
      this.applyTransform();
    };
    const up = () => {
      document.removeEventListener("mousemove", move);
      document.removeEventListener("mouseup", up);
    };
    document.addEventListener("mousemove", move);
    document.addEventListener("mouseup", up);
  }

  private drawWireframes(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) {
      return;
    }
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    ctx.lineWidth = 1.5;
    ctx.strokeStyle = this.serverColor;
    for (const box of this.boxes) {
      ctx.beginPath();
      for (const [a, b] of WIREFRAME_EDGES) {
        const ca = box.corners[a];
        const cb = box.corners[b];
        if (ca.u === null || cb.u === null) {
          continue;
        }
        ctx.moveTo(ca.u, ca.v!);
        ctx.lineTo(cb.u, cb.v!);
      }
      ctx.stroke();
    }
  }

  private renderMarkers(): void {
    if (this.drag) {
      return; // never rebuild under an active drag
    }
    this.markerLayer.textContent = "";
    for (const box of this.boxes) {
      for (const corner of box.corners) {
        if (corner.u === null || corner.v === null) {
          continue;
        }
        this.addMarker(
          { boxIndex: box.box_index, cornerIndex: corner.corner_index },
          corner.u,
          corner.v,
          "server",
        );
      }
    }
    for (const edit of this.edits) {
      this.addMarker(
        { boxIndex: edit.boxIndex, cornerIndex: edit.cornerIndex },
        edit.u,
        edit.v,
        "pending",
      );
    }
  }

  private addMarker(
    ref: CornerRef,
    u: number,
    v: number,
    kind: "server" | "pending",
  ): void {
    const marker = document.createElement("div");
    marker.className = `corner ${kind}`;
    marker.dataset.box = String(ref.boxIndex);
    marker.dataset.corner = String(ref.cornerIndex);
    marker.dataset.u = String(u);
    marker.dataset.v = String(v);
    marker.style.left = `${u}px`;
    marker.style.top = `${v}px`;
    if (kind === "server") {
      marker.style.borderColor = this.serverColor;
    } else {
      marker.style.borderColor = PENDING_COLOR;
    }
    if (
      this.selected &&
      this.selected.boxIndex === ref.boxIndex &&
      this.selected.cornerIndex === ref.cornerIndex
    ) {
      marker.classList.add("selected");
    }
    marker.addEventListener("mousedown", (e) => this.onDragStart(e, ref, marker));
    this.markerLayer.appendChild(marker);
  }

  private onDragStart(e: MouseEvent, ref: CornerRef, marker: HTMLElement): void {
    if (e.button !== 0) {
      return;
    }
    e.preventDefault();
    e.stopPropagation();
    this.callbacks.onSelect(ref);
    this.drag = { ref, marker, moved: false };
    const move = (ev: MouseEvent) => {
      if (!this.drag) {
        return;
      }
      const { u, v } = this.toImage(ev.clientX, ev.clientY);
      this.drag.moved = true;
      this.drag.marker.classList.add("pending-drag");
      this.drag.marker.style.left = `${u}px`;
      this.drag.marker.style.top = `${v}px`;
      this.drag.marker.dataset.u = String(u);
      this.drag.marker.dataset.v = String(v);
    };
    const up = (ev: MouseEvent) => {
      document.removeEventListener("mousemove", move);
      document.removeEventListener("mouseup", up);
      const drag = this.drag;
      this.drag = null;
      if (drag && drag.moved) {
        const { u, v } = this.toImage(ev.clientX, ev.clientY);
        this.callbacks.onDragEnd(ref, u, v);
      } else {
        this.renderMarkers(); // plain click: refresh selection highlight
      }
    };
    document.addEventListener("mousemove", move);
    document.addEventListener("mouseup", up);
  }
}
