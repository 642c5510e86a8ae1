// Thin fetch client over the engine's review API. The server is the source
// of truth; nothing is cached here.

import type { CaseDetail, CaseSummary, ReviewStats, VerdictBody } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export class RevisionConflictError extends ApiError {}

async function parseError(response: Response): Promise<never> {
  let code = "http_error";
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as { error?: string; message?: string };
    code = body.error ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body: keep the defaults
  }
  if (response.status === 409) {
    throw new RevisionConflictError(response.status, code, message);
  }
  throw new ApiError(response.status, code, message);
}

export class ApiClient {
  constructor(
    readonly runId: string,
    readonly baseUrl: string = "",
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path);
    if (!response.ok) await parseError(response);
    return (await response.json()) as T;
  }

  async listCases(state?: string): Promise<CaseSummary[]> {
    const query = state ? `?state=${encodeURIComponent(state)}` : "";
    const body = await this.getJson<{ cases: CaseSummary[] }>(
      `/api/runs/${this.runId}/cases${query}`,
    );
    return body.cases;
  }

  async getCase(caseId: string): Promise<CaseDetail> {
    return this.getJson<CaseDetail>(`/api/cases/${caseId}`);
  }

  async reviewStats(): Promise<ReviewStats> {
    return this.getJson<ReviewStats>(`/api/runs/${this.runId}/review-stats`);
  }

  async submitVerdict(caseId: string, body: VerdictBody): Promise<CaseDetail> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/cases/${caseId}/verdict`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) await parseError(response);
    return (await response.json()) as CaseDetail;
  }
}
