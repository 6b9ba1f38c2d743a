import { ApiClient, ApiError } from "./api";
import { renderMetrics, renderMetricsEmpty } from "./metrics_view";
import { pollSession, StaleSessionError } from "./poll";
import { renderHistory, renderSessionCard } from "./session_card";

export interface AppOptions {
  pollIntervalMs?: number;
}

export function initApp(root: HTMLElement, api: ApiClient, options: AppOptions = {}): void {
  const pollIntervalMs = options.pollIntervalMs ?? 500;
  root.replaceChildren();
  root.innerHTML = `
    <header class="top">
      <h1>emosense</h1>
      <p class="tagline">sensor-driven emotion dashboard</p>
    </header>
    <section class="controls">
      <label>participant <input id="participant" value="p1" /></label>
      <label>window (s) <input id="window" type="number" min="1" max="300" value="10" /></label>
      <label>demo regime
        <select id="regime">
          <option value="">service default</option>
          <option>Angry</option>
          <option>Happy</option>
          <option>Sad</option>
        </select>
      </label>
      <button id="detect">Detect your emotion</button>
      <p id="error-banner" class="error-banner hidden"></p>
    </section>
    <section>
      <h2>current session</h2>
      <div id="current" class="current-empty">press the button to start</div>
    </section>
    <section>
      <h2>history</h2>
      <div id="history"></div>
    </section>
    <section>
      <h2>model metrics</h2>
      <button id="refresh-metrics">refresh metrics</button>
      <div id="metrics"></div>
    </section>
  `;

  const participantInput = root.querySelector<HTMLInputElement>("#participant")!;
  const windowInput = root.querySelector<HTMLInputElement>("#window")!;
  const regimeSelect = root.querySelector<HTMLSelectElement>("#regime")!;
  const detectButton = root.querySelector<HTMLButtonElement>("#detect")!;
  const banner = root.querySelector<HTMLElement>("#error-banner")!;
  const current = root.querySelector<HTMLElement>("#current")!;
  const history = root.querySelector<HTMLElement>("#history")!;
  const metricsRoot = root.querySelector<HTMLElement>("#metrics")!;

  function showError(message: string): void {
    banner.textContent = message;
    banner.classList.remove("hidden");
  }

  function clearError(): void {
    banner.textContent = "";
    banner.classList.add("hidden");
  }

  async function refreshHistory(): Promise<void> {
    try {
      const doc = await api.listSessions();
      renderHistory(history, doc.sessions);
    } catch {
      // history refresh is best-effort; the card itself already rendered
    }
  }

  async function detect(): Promise<void> {
    clearError();
    detectButton.disabled = true;
    try {
      const participant = participantInput.value.trim();
      const windowS = Number(windowInput.value) || undefined;
      const regime = regimeSelect.value || undefined;
      const created = await api.createSession(participant, windowS, regime);
      current.className = "";
      const card = document.createElement("div");
      current.replaceChildren(card);
      const final = await pollSession(
        api,
        created.session_id,
        (session) => renderSessionCard(card, session),
        pollIntervalMs,
      );
      if (final.status === "failed") {
        showError(final.error ?? "session failed");
      }
      await refreshHistory();
    } catch (err) {
      if (err instanceof StaleSessionError) {
        showError(`stale session: ${err.message}`);
      } else if (err instanceof ApiError) {
        showError(`service error ${err.status}: ${err.message}`);
      } else {
        showError(`cannot reach the service: ${String(err)}`);
      }
    } finally {
      detectButton.disabled = false;
    }
  }

  async function refreshMetrics(): Promise<void> {
    const participant = participantInput.value.trim();
    try {
      const doc = await api.getMetrics(participant);
      renderMetrics(metricsRoot, doc);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        renderMetricsEmpty(metricsRoot, participant);
      } else {
        showError(`metrics unavailable: ${String(err)}`);
      }
    }
  }

  detectButton.addEventListener("click", () => void detect());
  root.querySelector<HTMLButtonElement>("#refresh-metrics")!.addEventListener(
    "click",
    () => void refreshMetrics(),
  );

  void refreshHistory();
  void refreshMetrics();
}
