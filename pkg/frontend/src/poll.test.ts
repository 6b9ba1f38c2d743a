import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiClient } from "./api";
import { pollSession, StaleSessionError } from "./poll";
import { mockFetch, sessionFixture } from "./test_helpers";

afterEach(() => {
  vi.unstubAllGlobals();
  vi.useRealTimers();
});

describe("pollSession", () => {
  it("stops polling after the terminal state", async () => {
    let calls = 0;
    const fetchMock = mockFetch([
      (url) => {
        if (!url.includes("/api/sessions/abc123")) return undefined;
        calls += 1;
        return {
          body: sessionFixture({ status: calls < 3 ? "pending" : "done", label: "Happy" }),
        };
      },
    ]);

    const snapshots: string[] = [];
    const final = await pollSession(
      new ApiClient(""),
      "abc123",
      (s) => snapshots.push(s.status),
      0,
    );
    expect(final.status).toBe("done");
    expect(snapshots).toEqual(["pending", "pending", "done"]);
    const callsAtTerminal = fetchMock.mock.calls.length;

    // give any stray timers a chance to fire: no further requests allowed
    await new Promise((resolve) => setTimeout(resolve, 20));
    expect(fetchMock.mock.calls.length).toBe(callsAtTerminal);
    expect(calls).toBe(3);
  });

  it("waits the configured interval between polls", async () => {
    vi.useFakeTimers();
    let calls = 0;
    mockFetch([
      () => {
        calls += 1;
        return { body: sessionFixture({ status: calls < 2 ? "pending" : "done" }) };
      },
    ]);
    const done = pollSession(new ApiClient(""), "abc123", () => {}, 500);
    await vi.advanceTimersByTimeAsync(0);
    expect(calls).toBe(1);
    await vi.advanceTimersByTimeAsync(499);
    expect(calls).toBe(1);
    await vi.advanceTimersByTimeAsync(1);
    const final = await done;
    expect(final.status).toBe("done");
    expect(calls).toBe(2);
  });

  it("raises a stale-session error on 404", async () => {
    mockFetch([() => ({ status: 404, body: { detail: "unknown session" } })]);
    await expect(
      pollSession(new ApiClient(""), "ghost", () => {}, 0),
    ).rejects.toBeInstanceOf(StaleSessionError);
  });

  it("renders failed sessions as terminal", async () => {
    mockFetch([
      () => ({ body: sessionFixture({ status: "failed", error: "no result within 10s" }) }),
    ]);
    const final = await pollSession(new ApiClient(""), "abc123", () => {}, 0);
    expect(final.status).toBe("failed");
    expect(final.error).toBe("no result within 10s");
  });
});
