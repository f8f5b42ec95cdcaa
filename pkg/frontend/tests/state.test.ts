import { describe, expect, it } from "vitest";
import { EditList, identifiability, type KeypointEdit } from "../src/state";

describe("EditList", () => {
  it("keeps one entry per corner with last write winning", () => {
    const list = new EditList();
    list.set(0, 2, 10, 20);
    list.set(0, 3, 11, 21);
    list.set(0, 2, 99, 98);
    expect(list.size).toBe(2);
    expect(list.get(0, 2)).toEqual({ boxIndex: 0, cornerIndex: 2, u: 99, v: 98 });
  });

  it("keeps entries for the same corner index on different boxes apart", () => {
    const list = new EditList();
    list.set(1, 2, 10, 20);
    list.set(11, 2, 30, 40);
    expect(list.size).toBe(2);
    expect(list.get(1, 2)?.u).toBe(10);
    expect(list.get(11, 2)?.u).toBe(30);
  });

  it("undo removes a fresh edit and redo restores it", () => {
    const list = new EditList();
    list.set(0, 0, 5, 6);
    expect(list.undo()).toBe(true);
    expect(list.size).toBe(0);
    expect(list.redo()).toBe(true);
    expect(list.get(0, 0)).toEqual({ boxIndex: 0, cornerIndex: 0, u: 5, v: 6 });
  });

  it("undo of an overwrite restores the previous value in place", () => {
    const list = new EditList();
    list.set(0, 0, 1, 1);
    list.set(1, 4, 2, 2);
    list.set(0, 0, 9, 9);
    list.undo();
    expect(list.entries()).toEqual([
      { boxIndex: 0, cornerIndex: 0, u: 1, v: 1 },
      { boxIndex: 1, cornerIndex: 4, u: 2, v: 2 },
    ]);
  });

  it("a new edit clears the redo stack", () => {
    const list = new EditList();
    list.set(0, 0, 1, 1);
    list.undo();
    list.set(0, 1, 2, 2);
    expect(list.canRedo).toBe(false);
  });

  it("undo/redo round trip restores the exact edit list", () => {
    const list = new EditList();
    list.set(0, 0, 1, 1);
    list.set(0, 1, 2, 2);
    list.set(1, 0, 3, 3);
    list.set(0, 0, 4, 4);
    const snapshot = list.entries();
    for (let i = 0; i < 4; i++) {
      expect(list.undo()).toBe(true);
    }
    expect(list.size).toBe(0);
    for (let i = 0; i < 4; i++) {
      expect(list.redo()).toBe(true);
    }
    expect(list.entries()).toEqual(snapshot);
  });

  it("matches a naive reference under random edit/undo/redo sequences", () => {
    // Reference: full-list snapshots instead of action records. Any
    // divergence means the action-based history dropped or reordered
    // something.
    let seed = 123456789;
    const rand = () => {
      seed = (seed * 1103515245 + 12345) % 2147483648;
      return seed / 2147483648;
    };
    const list = new EditList();
    const snapshots: KeypointEdit[][] = [[]];
    let cursor = 0;
    for (let step = 0; step < 400; step++) {
      const roll = rand();
      if (roll < 0.6) {
        const box = Math.floor(rand() * 3);
        const corner = Math.floor(rand() * 8);
        const u = Math.round(rand() * 640 * 10) / 10;
        const v = Math.round(rand() * 480 * 10) / 10;
        list.set(box, corner, u, v);
        snapshots.length = cursor + 1;
        snapshots.push(
          (() => {
            const prev = snapshots[cursor].map((e) => ({ ...e }));
            const hit = prev.findIndex(
              (e) => e.boxIndex === box && e.cornerIndex === corner,
            );
            const edit = { boxIndex: box, cornerIndex: corner, u, v };
            if (hit >= 0) {
              prev[hit] = edit;
            } else {
              prev.push(edit);
            }
            return prev;
          })(),
        );
        cursor += 1;
      } else if (roll < 0.8) {
        expect(list.undo()).toBe(cursor > 0);
        cursor = Math.max(0, cursor - 1);
      } else {
        expect(list.redo()).toBe(cursor < snapshots.length - 1);
        cursor = Math.min(snapshots.length - 1, cursor + 1);
      }
      expect(list.entries()).toEqual(snapshots[cursor]);
    }
  });

  it("revertAction undoes a failed edit without leaving history", () => {
    const list = new EditList();
    list.set(0, 0, 1, 1);
    const failed = list.set(0, 1, 2, 2);
    list.revertAction(failed);
    expect(list.entries()).toEqual([{ boxIndex: 0, cornerIndex: 0, u: 1, v: 1 }]);
    expect(list.canRedo).toBe(false);
    expect(list.undo()).toBe(true);
    expect(list.size).toBe(0);
    expect(list.undo()).toBe(false);
  });

  it("revertAction restores the overwritten value for a re-drag", () => {
    const list = new EditList();
    list.set(0, 0, 1, 1);
    const failed = list.set(0, 0, 9, 9);
    list.revertAction(failed);
    expect(list.get(0, 0)).toEqual({ boxIndex: 0, cornerIndex: 0, u: 1, v: 1 });
  });
});

describe("identifiability", () => {
  const edit = (box: number, corner: number): KeypointEdit => ({
    boxIndex: box,
    cornerIndex: corner,
    u: 0,
    v: 0,
  });

  it("accepts 4 keypoints across two boxes", () => {
    const edits = [edit(0, 0), edit(0, 1), edit(1, 0), edit(1, 1)];
    expect(identifiability(edits).ok).toBe(true);
  });

  it("rejects 4 keypoints on a single box and counts what is missing", () => {
    const edits = [edit(0, 0), edit(0, 1), edit(0, 2), edit(0, 3)];
    const result = identifiability(edits);
    expect(result.ok).toBe(false);
    expect(result.detail).toContain("2 more");
  });

  it("accepts 6 keypoints on a single box", () => {
    const edits = [0, 1, 2, 3, 4, 5].map((c) => edit(0, c));
    expect(identifiability(edits).ok).toBe(true);
  });

  it("rejects 3 keypoints even when they span two boxes", () => {
    expect(identifiability([edit(0, 0), edit(1, 0), edit(1, 1)]).ok).toBe(false);
  });

  it("rejects an empty list", () => {
    expect(identifiability([]).ok).toBe(false);
  });
});
