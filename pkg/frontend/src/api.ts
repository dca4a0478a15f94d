// Client for the three labelling-session endpoints. The wire schema is
// versioned with a `v` field; refuse anything we were not written against.

export const API_VERSION = 1;

export interface Prototype {
  cluster_id: number;
  frame_png_base64: string;
  label: number | null;
}

export interface SessionView {
  v: number;
  classes: string[];
  prototypes: Prototype[];
}

export interface SessionStatus {
  labelled: number;
  total: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

async function errorMessage(res: Response): Promise<string> {
  try {
    const body = await res.json();
    if (body && typeof body.error === "string") return body.error;
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `request failed with status ${res.status}`;
}

export async function fetchSession(): Promise<SessionView> {
  const res = await fetch("/api/session");
  if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
  const view = (await res.json()) as SessionView;
  if (view.v !== API_VERSION) {
    throw new Error(`unsupported session schema v${view.v}`);
  }
  return view;
}

export async function fetchStatus(): Promise<SessionStatus> {
  const res = await fetch("/api/session/status");
  if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
  return (await res.json()) as SessionStatus;
}

export async function postLabel(
  clusterId: number,
  label: number,
): Promise<SessionStatus> {
  const res = await fetch("/api/session/labels", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ cluster_id: clusterId, label }),
  });
  if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
  return (await res.json()) as SessionStatus;
}
