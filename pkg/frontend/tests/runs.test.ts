import assert from "node:assert/strict";
import { test } from "node:test";

import type { RunDoc, RunEvent } from "../src/api.js";
import { canCancel, orderNewestFirst, projectRun, stateTimings } from "../src/runs.js";

function event(seq: number, kind: string, state: string | null, ts: string,
              detail: Record<string, unknown> = {}): RunEvent {
  return { seq, kind, state, ts, detail };
}

const EVENTS: RunEvent[] = [
  event(1, "RunStarted", null, "2026-08-08T10:00:00Z"),
  event(2, "StateEntered", "Transfer", "2026-08-08T10:00:00.100Z"),
  event(3, "ActionDispatched", "Transfer", "2026-08-08T10:00:00.120Z"),
  event(4, "ActionCompleted", "Transfer", "2026-08-08T10:00:02.120Z"),
  event(5, "StateExited", "Transfer", "2026-08-08T10:00:02.130Z"),
  event(6, "StateEntered", "Publish", "2026-08-08T10:00:02.140Z"),
  event(7, "StateExited", "Publish", "2026-08-08T10:00:02.640Z"),
  event(8, "RunCompleted", "Publish", "2026-08-08T10:00:02.650Z"),
];

function runDoc(overrides: Partial<RunDoc> = {}): RunDoc {
  return {
    run_id: "r-1", flow_id: "f-1", status: "SUCCEEDED", current_state: null,
    context: {}, output: {}, creator: "alice", label: null, tags: [],
    monitor_by: [], manage_by: [], inactive_reason: null,
    created: "2026-08-08T10:00:00Z", updated: "2026-08-08T10:00:02Z",
    completed: "2026-08-08T10:00:02Z", events: EVENTS, ...overrides,
  };
}

test("event log is ordered most recent first", () => {
  const ordered = orderNewestFirst(EVENTS);
  assert.deepEqual(ordered.map((e) => e.seq), [8, 7, 6, 5, 4, 3, 2, 1]);
});

test("per-state timings pair entry and exit", () => {
  const timings = stateTimings(EVENTS);
  assert.deepEqual(timings.map((t) => t.state), ["Transfer", "Publish"]);
  assert.equal(timings[0]!.seconds, 2.03);
  assert.equal(timings[1]!.seconds, 0.5);
});

test("a state still executing shows an open timing", () => {
  const partial = EVENTS.slice(0, 3);
  const timings = stateTimings(partial);
  assert.equal(timings[0]!.exited, null);
  assert.equal(timings[0]!.seconds, null);
});

test("failed runs surface the failing state and its detail", () => {
  const failing = runDoc({
    status: "FAILED",
    events: [
      event(1, "RunStarted", null, "2026-08-08T10:00:00Z"),
      event(2, "StateEntered", "Validate", "2026-08-08T10:00:00.1Z"),
      event(3, "ActionFailed", "Validate", "2026-08-08T10:00:01Z",
        { error: "ActionFailedException" }),
      event(4, "RunFailed", "Validate", "2026-08-08T10:00:01.2Z",
        { error: "ActionFailedException", detail: { cause: "bad data" } }),
    ],
  });
  const view = projectRun(failing);
  assert.equal(view.failedState, "Validate");
  assert.deepEqual(view.failureDetail,
    { error: "ActionFailedException", detail: { cause: "bad data" } });
});

test("projection exposes only gateway fields", () => {
  const view = projectRun(runDoc({ context: { UserOnly: 1 } })) as unknown as
    Record<string, unknown>;
  assert.ok(!("creator_token" in view));
  assert.ok(!JSON.stringify(view).includes("Internal"));
});

test("cancel gate: creator and managers while the run can still stop", () => {
  const doc = runDoc({ status: "ACTIVE", manage_by: ["maria"], monitor_by: ["mo"] });
  assert.equal(canCancel(doc, "alice"), true);
  assert.equal(canCancel(doc, "maria"), true);
  assert.equal(canCancel(doc, "mo"), false);
  assert.equal(canCancel(doc, null), false);
  assert.equal(canCancel(runDoc({ status: "SUCCEEDED" }), "alice"), false);
  assert.equal(canCancel(runDoc({ status: "INACTIVE" }), "alice"), true);
});
