import type { KeypointWire } from "./types";

export interface KeypointEdit {
  boxIndex: number;
  cornerIndex: number;
  u: number;
  v: number;
}

export interface EditAction {
  key: string;
  before: KeypointEdit | null;
  after: KeypointEdit | null;
}

function editKey(boxIndex: number, cornerIndex: number): string {
  return `${boxIndex}:${cornerIndex}`;
}

function clone(edit: KeypointEdit | null): KeypointEdit | null {
  return edit === null ? null : { ...edit };
}

/** The operator's pending corner targets, keyed by (box, corner) with
 * last-write-wins overwrite semantics, plus undo/redo over them.
 *
 * This list is the editor's source of truth for which corners have been
 * moved; the session on the service is kept in step by re-posting the
 * whole list after each mutation. It holds pixel targets only — no
 * camera geometry lives on the client. */
export class EditList {
  private edits = new Map<string, KeypointEdit>();
  private undoStack: EditAction[] = [];
  private redoStack: EditAction[] = [];

  /** Adds or overwrites the target for one corner. A new edit clears
   * the redo stack, as in any linear-history editor. Returns the
   * recorded action so a failed sync can revert exactly this change. */
  set(boxIndex: number, cornerIndex: number, u: number, v: number): EditAction {
    const key = editKey(boxIndex, cornerIndex);
    const before = clone(this.edits.get(key) ?? null);
    const after: KeypointEdit = { boxIndex, cornerIndex, u, v };
    this.edits.set(key, after);
    const action: EditAction = { key, before, after: clone(after) };
    this.undoStack.push(action);
    this.redoStack = [];
    return action;
  }

  get(boxIndex: number, cornerIndex: number): KeypointEdit | null {
    return clone(this.edits.get(editKey(boxIndex, cornerIndex)) ?? null);
  }

  has(boxIndex: number, cornerIndex: number): boolean {
    return this.edits.has(editKey(boxIndex, cornerIndex));
  }

  get size(): number {
    return this.edits.size;
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  get canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  undo(): boolean {
    const action = this.undoStack.pop();
    if (!action) {
      return false;
    }
    if (action.before === null) {
      this.edits.delete(action.key);
    } else {
      this.edits.set(action.key, clone(action.before)!);
    }
    this.redoStack.push(action);
    return true;
  }

  redo(): boolean {
    const action = this.redoStack.pop();
    if (!action) {
      return false;
    }
    this.edits.set(action.key, clone(action.after)!);
    this.undoStack.push(action);
    return true;
  }

  /** Current edits in insertion order (undo of an overwrite keeps the
   * key's original position, so order round-trips with undo/redo). */
  entries(): KeypointEdit[] {
    return [...this.edits.values()].map((e) => ({ ...e }));
  }

  toWire(): KeypointWire[] {
    return this.entries().map((e) => ({
      box_index: e.boxIndex,
      corner_index: e.cornerIndex,
      u: e.u,
      v: e.v,
    }));
  }

  /** Drops all edits and history; used when switching sessions. */
  reset(): void {
    this.edits = new Map();
    this.undoStack = [];
    this.redoStack = [];
  }

  /** Rolls back one failed set(): restores the prior value and drops
   * the action from history, leaving the list exactly as it was before
   * that set. No redo entry is left behind — the edit never happened
   * as far as the operator is concerned. */
  revertAction(action: EditAction): void {
    if (action.before === null) {
      this.edits.delete(action.key);
    } else {
      this.edits.set(action.key, clone(action.before)!);
    }
    const idx = this.undoStack.indexOf(action);
    if (idx >= 0) {
      this.undoStack.splice(idx, 1);
    }
  }
}

export interface Identifiability {
  ok: boolean;
  detail: string;
}

/** Mirror of the service's identifiability precondition for optimize:
 * at least 4 keypoints spanning at least 2 boxes, or at least 6 on a
 * single box. Used only to gate the button and phrase the hint; the
 * service remains the authority (422 on violation). */
export function identifiability(edits: KeypointEdit[]): Identifiability {
  const boxes = new Set(edits.map((e) => e.boxIndex));
  if (edits.length >= 4 && boxes.size >= 2) {
    return { ok: true, detail: "" };
  }
  if (edits.length >= 6 && boxes.size === 1) {
    return { ok: true, detail: "" };
  }
  if (boxes.size <= 1) {
    const needed = 6 - edits.length;
    return {
      ok: false,
      detail:
        `need ${Math.max(needed, 0)} more on this box, ` +
        "or 4 total across 2 boxes",
    };
  }
  return { ok: false, detail: `need ${4 - edits.length} more keypoints` };
}
