// Typed client for the detection service. The UI never computes a label
// or a metric: everything rendered comes verbatim from these responses.

export type SessionStatus = "pending" | "done" | "failed";

export interface SessionView {
  session_id: string;
  participant: string;
  status: SessionStatus;
  window_s: number;
  label?: string | null;
  probabilities?: number[] | null;
  recommendation?: string | null;
  mean_gsr?: number | null;
  mean_bpm?: number | null;
  error?: string | null;
  t_trigger: number;
  t_result?: number | null;
  elapsed_ms?: number | null;
  regime?: string | null;
}

export interface EvalReport {
  accuracy: number;
  precision: (number | null)[];
  recall: (number | null)[];
  f1: (number | null)[];
  confusion: number[][];
  labels: string[];
  roc: ([number, number][] | null)[];
  auc: (number | null)[];
}

// the metrics response IS the held-out EvalReport plus training context
export interface MetricsDoc extends EvalReport {
  participant_id: string;
  trained_at: number;
  train_accuracy: number;
  rows?: Record<string, number>;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, {
    headers: { "Content-Type": "application/json" },
    ...init,
  });
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body.detail) detail = JSON.stringify(body.detail);
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  constructor(private base: string = "") {}

  createSession(participantId: string, windowS?: number, regime?: string): Promise<{ session_id: string }> {
    const body: Record<string, unknown> = { participant_id: participantId };
    if (windowS !== undefined) body.window_s = windowS;
    if (regime !== undefined) body.regime = regime;
    return request(`${this.base}/api/sessions`, {
      method: "POST",
      body: JSON.stringify(body),
    });
  }

  getSession(sessionId: string): Promise<SessionView> {
    return request(`${this.base}/api/sessions/${sessionId}`);
  }

  listSessions(): Promise<{ sessions: SessionView[] }> {
    return request(`${this.base}/api/sessions`);
  }

  getMetrics(participantId: string): Promise<MetricsDoc> {
    return request(`${this.base}/api/model/${participantId}/metrics`);
  }
}
