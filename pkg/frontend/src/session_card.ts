import { SessionView } from "./api";

// One card per detection session; re-rendered on every poll snapshot.

export function renderSessionCard(card: HTMLElement, session: SessionView): void {
  card.className = `session-card session-${session.status}`;
  card.dataset.sessionId = session.session_id;
  card.replaceChildren();

  const head = document.createElement("div");
  head.className = "card-head";
  const title = document.createElement("span");
  title.className = "card-title";
  title.textContent = `${session.participant} · ${session.session_id}`;
  const badge = document.createElement("span");
  badge.className = `status-badge status-${session.status}`;
  badge.textContent = session.status;
  head.append(title, badge);
  card.append(head);

  if (session.status === "pending") {
    const wait = document.createElement("p");
    wait.className = "card-pending";
    wait.textContent = `sensing ${session.window_s}s window…`;
    card.append(wait);
    return;
  }

  if (session.status === "failed") {
    const reason = document.createElement("p");
    reason.className = "card-error";
    reason.textContent = session.error ?? "detection failed";
    card.append(reason);
    return;
  }

  const label = document.createElement("p");
  label.className = "card-label";
  label.textContent = session.label ?? "?";
  card.append(label);

  if (session.recommendation) {
    const rec = document.createElement("p");
    rec.className = "card-recommendation";
    rec.textContent = session.recommendation;
    card.append(rec);
  }

  const detail = document.createElement("p");
  detail.className = "card-detail";
  const probs = (session.probabilities ?? []).map((p) => p.toFixed(3)).join(" / ");
  const bits = [];
  if (probs) bits.push(`p = ${probs}`);
  if (session.elapsed_ms != null) bits.push(`${session.elapsed_ms} ms`);
  if (session.mean_gsr != null && session.mean_bpm != null) {
    bits.push(`gsr ${session.mean_gsr.toFixed(1)}, bpm ${session.mean_bpm.toFixed(1)}`);
  }
  detail.textContent = bits.join(" · ");
  card.append(detail);
}

export function renderHistory(list: HTMLElement, sessions: SessionView[]): void {
  const ordered = [...sessions].sort((a, b) => b.t_trigger - a.t_trigger);
  list.replaceChildren();
  for (const session of ordered) {
    const card = document.createElement("div");
    renderSessionCard(card, session);
    list.append(card);
  }
}
