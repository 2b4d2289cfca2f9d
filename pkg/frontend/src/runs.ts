/**
 * Client-side projections of runs and their event logs: newest-first
 * ordering, per-state timings, failure highlighting, and the cancel gate.
 * Only fields the gateway returned are projected; nothing is synthesized.
 */

import type { RunDoc, RunEvent } from "./api.js";

export interface StateTiming {
  state: string;
  entered: string;
  exited: string | null;
  seconds: number | null;
}

export interface RunView {
  runId: string;
  flowId: string;
  status: RunDoc["status"];
  currentState: string | null;
  label: string | null;
  tags: string[];
  created: string;
  updated: string;
  completed: string | null;
  inactiveReason: string | null;
  eventsNewestFirst: RunEvent[];
  timings: StateTiming[];
  failedState: string | null;
  failureDetail: unknown;
}

export function projectRun(doc: RunDoc): RunView {
  const events = doc.events ?? [];
  const failure = events.find((e) => e.kind === "RunFailed");
  return {
    runId: doc.run_id,
    flowId: doc.flow_id,
    status: doc.status,
    currentState: doc.current_state,
    label: doc.label,
    tags: doc.tags,
    created: doc.created,
    updated: doc.updated,
    completed: doc.completed,
    inactiveReason: doc.inactive_reason,
    eventsNewestFirst: orderNewestFirst(events),
    timings: stateTimings(events),
    failedState: failure?.state ?? null,
    failureDetail: failure?.detail ?? null,
  };
}

export function orderNewestFirst(events: RunEvent[]): RunEvent[] {
  return [...events].sort((a, b) => b.seq - a.seq);
}

/** Durations between each StateEntered and its matching StateExited. */
export function stateTimings(events: RunEvent[]): StateTiming[] {
  const ordered = [...events].sort((a, b) => a.seq - b.seq);
  const open = new Map<string, RunEvent>();
  const out: StateTiming[] = [];
  for (const event of ordered) {
    if (event.kind === "StateEntered" && event.state) {
      open.set(event.state, event);
    } else if ((event.kind === "StateExited" || event.kind === "RunFailed"
               || event.kind === "RunCompleted") && event.state) {
      const entered = open.get(event.state);
      if (entered) {
        open.delete(event.state);
        out.push({
          state: event.state,
          entered: entered.ts,
          exited: event.ts,
          seconds: roundSeconds(Date.parse(event.ts) - Date.parse(entered.ts)),
        });
      }
    }
  }
  for (const [state, entered] of open) {
    out.push({ state, entered: entered.ts, exited: null, seconds: null });
  }
  return out;
}

function roundSeconds(millis: number): number {
  return Math.round(millis / 10) / 100;
}

/**
 * Whether the signed-in principal may cancel the run. The server is the
 * authority (and also honors group membership); this only gates the button.
 */
export function canCancel(doc: RunDoc, subject: string | null): boolean {
  if (!subject) return false;
  if (!["ACTIVE", "INACTIVE"].includes(doc.status)) return false;
  return doc.creator === subject || doc.manage_by.includes(subject);
}
