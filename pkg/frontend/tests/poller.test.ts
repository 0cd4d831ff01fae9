import { describe, expect, it, vi } from "vitest";
import { Poller } from "../src/poller.js";

describe("Poller", () => {
  it("delivers fresh data on a successful tick", async () => {
    const onUpdate = vi.fn();
    const poller = new Poller(async () => [1, 2, 3], onUpdate, 3000);
    const state = await poller.tick();
    expect(state.data).toEqual([1, 2, 3]);
    expect(state.stale).toBe(false);
    expect(state.lastError).toBeNull();
    expect(onUpdate).toHaveBeenCalledOnce();
  });

  it("keeps the last good snapshot and marks it stale on failure", async () => {
    let fail = false;
    const poller = new Poller(
      async () => {
        if (fail) throw new Error("connection refused");
        return ["pending-1"];
      },
      () => {},
      3000,
    );
    await poller.tick();
    fail = true;
    const state = await poller.tick();
    expect(state.data).toEqual(["pending-1"]);
    expect(state.stale).toBe(true);
    expect(state.lastError).toBe("connection refused");
  });

  it("never fabricates data when it has none", async () => {
    const poller = new Poller<string[]>(
      async () => {
        throw new Error("down");
      },
      () => {},
    );
    const state = await poller.tick();
    expect(state.data).toBeNull();
    expect(state.stale).toBe(false);
  });

  it("recovers after a failed poll", async () => {
    let fail = true;
    const poller = new Poller(
      async () => {
        if (fail) throw new Error("down");
        return ["ok"];
      },
      () => {},
    );
    await poller.tick();
    fail = false;
    const state = await poller.tick();
    expect(state.stale).toBe(false);
    expect(state.lastError).toBeNull();
    expect(state.data).toEqual(["ok"]);
  });

  it("polls on the configured interval until stopped", async () => {
    vi.useFakeTimers();
    const fetchFn = vi.fn(async () => "x");
    const poller = new Poller(fetchFn, () => {}, 3000);
    poller.start();
    await vi.advanceTimersByTimeAsync(9000);
    poller.stop();
    await vi.advanceTimersByTimeAsync(9000);
    expect(fetchFn).toHaveBeenCalledTimes(4);
    vi.useRealTimers();
  });
});
