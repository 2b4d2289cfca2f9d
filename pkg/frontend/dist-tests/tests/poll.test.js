import assert from "node:assert/strict";
import { test } from "node:test";
import { makePoller } from "../src/poll.js";
function manualTimers() {
    let fn = null;
    return {
        cleared: false,
        set(callback) {
            fn = callback;
            return 1;
        },
        clear() {
            this.cleared = true;
            fn = null;
        },
        fire() {
            fn?.();
        },
    };
}
test("start runs a cycle immediately and per period", async () => {
    let cycles = 0;
    const timers = manualTimers();
    const poller = makePoller(async () => { cycles += 1; }, 50, timers);
    poller.start();
    await Promise.resolve();
    assert.equal(cycles, 1);
    timers.fire();
    await Promise.resolve();
    assert.equal(cycles, 2);
});
test("stop clears the timer", () => {
    const timers = manualTimers();
    const poller = makePoller(async () => undefined, 50, timers);
    poller.start();
    assert.equal(poller.running, true);
    poller.stop();
    assert.equal(poller.running, false);
    assert.equal(timers.cleared, true);
});
test("a slow cycle is skipped, not stacked", async () => {
    let running = 0;
    let peak = 0;
    let release = null;
    const timers = manualTimers();
    const poller = makePoller(async () => {
        running += 1;
        peak = Math.max(peak, running);
        await new Promise((resolve) => { release = resolve; });
        running -= 1;
    }, 50, timers);
    poller.start();
    timers.fire();
    timers.fire();
    release();
    await Promise.resolve();
    assert.equal(peak, 1);
});
test("a failing cycle does not stop the poller", async () => {
    let calls = 0;
    const timers = manualTimers();
    const poller = makePoller(async () => {
        calls += 1;
        throw new Error("transient");
    }, 50, timers);
    poller.start();
    await poller.tick();
    timers.fire();
    await Promise.resolve();
    assert.ok(calls >= 2);
    assert.equal(poller.running, true);
});
