import type {
  AcceptedDecision,
  AdvanceResponse,
  DecisionPayload,
  DecisionTablePayload,
  EnrollRequest,
  EnrollResponse,
  FieldError,
  OutcomeRequest,
  OutcomeResponse,
  SelectionPayload,
  TrialConfig,
  TrialPayload,
} from "./types";

/** Error raised for any non-2xx response, carrying the parsed `detail`. */
export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status: number,
    public readonly detail: unknown,
  ) {
    super(message);
    this.name = "ApiError";
  }

  /** Field-level validation errors, when the service reported them. */
  fieldErrors(): FieldError[] {
    if (!Array.isArray(this.detail)) return [];
    return this.detail.filter(
      (item): item is FieldError =>
        typeof item === "object" &&
        item !== null &&
        typeof (item as FieldError).field === "string" &&
        typeof (item as FieldError).message === "string",
    );
  }

  /** True when the service rejected a mutation because our version is stale. */
  isVersionConflict(): boolean {
    return (
      this.status === 409 &&
      typeof this.detail === "string" &&
      this.detail.startsWith("version conflict")
    );
  }
}

function detailMessage(detail: unknown, status: number): string {
  if (typeof detail === "string") return detail;
  if (Array.isArray(detail)) {
    const parts = detail
      .map((item) =>
        typeof item === "object" && item !== null && "message" in item
          ? String((item as { message: unknown }).message)
          : String(item),
      )
      .join("; ");
    if (parts) return parts;
  }
  if (typeof detail === "object" && detail !== null && "message" in detail) {
    return String((detail as { message: unknown }).message);
  }
  return `request failed with status ${status}`;
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, {
      ...init,
      headers: { "Content-Type": "application/json", ...init?.headers },
    });
    const body = response.status === 204 ? null : await response.json();
    if (!response.ok) {
      const detail =
        typeof body === "object" && body !== null && "detail" in body
          ? (body as { detail: unknown }).detail
          : body;
      throw new ApiError(detailMessage(detail, response.status), response.status, detail);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, { method: "POST", body: JSON.stringify(payload) });
  }

  createTrial(config: Partial<TrialConfig>): Promise<TrialPayload> {
    return this.post("/trials", { config });
  }

  getTrial(trialId: string): Promise<TrialPayload> {
    return this.request(`/trials/${trialId}`);
  }

  enroll(trialId: string, body: EnrollRequest): Promise<EnrollResponse> {
    return this.post(`/trials/${trialId}/patients`, body);
  }

  recordOutcome(trialId: string, body: OutcomeRequest): Promise<OutcomeResponse> {
    return this.post(`/trials/${trialId}/outcomes`, body);
  }

  decision(trialId: string, at: string | number = "now"): Promise<DecisionPayload> {
    return this.request(`/trials/${trialId}/decision?at=${encodeURIComponent(at)}`);
  }

  advanceClock(trialId: string, time: number, version?: number): Promise<AdvanceResponse> {
    return this.post(`/trials/${trialId}/advance`, { advance_clock: time, version });
  }

  acceptDecision(
    trialId: string,
    accepted: true | AcceptedDecision,
    version?: number,
  ): Promise<AdvanceResponse> {
    return this.post(`/trials/${trialId}/advance`, { accept_decision: accepted, version });
  }

  selection(trialId: string): Promise<SelectionPayload> {
    return this.request(`/trials/${trialId}/selection`);
  }

  decisionTable(phi: number, cohort: number, nmax: number): Promise<DecisionTablePayload> {
    return this.request(
      `/decision-table?phi=${encodeURIComponent(phi)}&cohort=${encodeURIComponent(
        cohort,
      )}&nmax=${encodeURIComponent(nmax)}&format=json`,
    );
  }
}
