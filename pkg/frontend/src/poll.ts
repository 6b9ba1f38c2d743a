import { ApiClient, ApiError, SessionView } from "./api";

export class StaleSessionError extends Error {}

const TERMINAL: ReadonlySet<string> = new Set(["done", "failed"]);

function delay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/**
 * Poll one session every `intervalMs` until it reaches a terminal state,
 * invoking `onUpdate` with each snapshot. No request is made after the
 * terminal snapshot. A 404 means the session vanished server-side.
 */
export async function pollSession(
  api: ApiClient,
  sessionId: string,
  onUpdate: (session: SessionView) => void,
  intervalMs = 500,
): Promise<SessionView> {
  for (;;) {
    let session: SessionView;
    try {
      session = await api.getSession(sessionId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        throw new StaleSessionError(`session ${sessionId} no longer exists`);
      }
      throw err;
    }
    onUpdate(session);
    if (TERMINAL.has(session.status)) {
      return session;
    }
    await delay(intervalMs);
  }
}
