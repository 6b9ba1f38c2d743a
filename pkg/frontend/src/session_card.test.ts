import { describe, expect, it } from "vitest";

import { renderHistory, renderSessionCard } from "./session_card";
import { sessionFixture } from "./test_helpers";

describe("renderSessionCard", () => {
  it("shows the sensing window while pending", () => {
    const card = document.createElement("div");
    renderSessionCard(card, sessionFixture({ window_s: 7 }));
    expect(card.textContent).toContain("sensing 7s window");
    expect(card.className).toContain("session-pending");
  });

  it("shows exactly the API label, recommendation, and numbers when done", () => {
    const card = document.createElement("div");
    const payload = sessionFixture({
      status: "done",
      label: "Sad",
      recommendation: "uplifting music, warm dim lighting",
      probabilities: [0.01, 0.04, 0.95],
      elapsed_ms: 10042,
      mean_gsr: 2012.3456,
      mean_bpm: 71.5,
    });
    renderSessionCard(card, payload);
    expect(card.querySelector(".card-label")!.textContent).toBe("Sad");
    expect(card.querySelector(".card-recommendation")!.textContent).toBe(
      "uplifting music, warm dim lighting",
    );
    const detail = card.querySelector(".card-detail")!.textContent!;
    expect(detail).toContain("0.950");
    expect(detail).toContain("10042 ms");
    expect(detail).toContain("2012.3");
  });

  it("shows the failure reason for failed sessions", () => {
    const card = document.createElement("div");
    renderSessionCard(
      card,
      sessionFixture({ status: "failed", error: "endpoint missing" }),
    );
    expect(card.querySelector(".card-error")!.textContent).toBe("endpoint missing");
  });
});

describe("renderHistory", () => {
  it("orders cards by trigger time, newest first", () => {
    const list = document.createElement("div");
    const sessions = [
      sessionFixture({ session_id: "old", t_trigger: 100 }),
      sessionFixture({ session_id: "newest", t_trigger: 900 }),
      sessionFixture({ session_id: "mid", t_trigger: 500 }),
    ];
    renderHistory(list, sessions);
    const ids = [...list.querySelectorAll<HTMLElement>(".session-card")].map(
      (el) => el.dataset.sessionId,
    );
    expect(ids).toEqual(["newest", "mid", "old"]);
  });
});
