/**
 * Live refresh by polling. State is server-authoritative: each tick pulls
 * a fresh document and hands it to the renderer; a tick that throws leaves
 * the previous view in place.
 */

export interface Poller {
  start(): void;
  stop(): void;
  readonly running: boolean;
  /** Run one cycle immediately (also what the timer does each period). */
  tick(): Promise<void>;
}

export interface PollTimers {
  set(fn: () => void, ms: number): unknown;
  clear(handle: unknown): void;
}

export const DEFAULT_POLL_MS = 2000;

export function makePoller(
  cycle: () => Promise<void>,
  intervalMs: number = DEFAULT_POLL_MS,
  timers: PollTimers = {
    set: (fn, ms) => setInterval(fn, ms),
    clear: (handle) => clearInterval(handle as Parameters<typeof clearInterval>[0]),
  },
): Poller {
  let handle: unknown = null;
  let inFlight = false;

  async function tick(): Promise<void> {
    if (inFlight) return; // a slow cycle is not stacked, just skipped
    inFlight = true;
    try {
      await cycle();
    } catch {
      // keep polling; the next tick may succeed
    } finally {
      inFlight = false;
    }
  }

  return {
    get running() {
      return handle !== null;
    },
    start() {
      if (handle !== null) return;
      handle = timers.set(() => { void tick(); }, intervalMs);
      void tick();
    },
    stop() {
      if (handle !== null) {
        timers.clear(handle);
        handle = null;
      }
    },
    tick,
  };
}
