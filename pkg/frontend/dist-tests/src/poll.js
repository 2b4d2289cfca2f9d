/**
 * Live refresh by polling. State is server-authoritative: each tick pulls
 * a fresh document and hands it to the renderer; a tick that throws leaves
 * the previous view in place.
 */
export const DEFAULT_POLL_MS = 2000;
export function makePoller(cycle, intervalMs = DEFAULT_POLL_MS, timers = {
    set: (fn, ms) => setInterval(fn, ms),
    clear: (handle) => clearInterval(handle),
}) {
    let handle = null;
    let inFlight = false;
    async function tick() {
        if (inFlight)
            return; // a slow cycle is not stacked, just skipped
        inFlight = true;
        try {
            await cycle();
        }
        catch {
            // keep polling; the next tick may succeed
        }
        finally {
            inFlight = false;
        }
    }
    return {
        get running() {
            return handle !== null;
        },
        start() {
            if (handle !== null)
                return;
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
