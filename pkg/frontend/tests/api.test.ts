import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, RevisionConflictError } from "../src/api.js";

function fetchReturning(status: number, body: unknown): typeof fetch {
  return async () => new Response(JSON.stringify(body), { status });
}

describe("ApiClient", () => {
  it("parses case lists", async () => {
    const api = new ApiClient("r1", "", fetchReturning(200, { cases: [{ id: "a" }] }));
    const cases = await api.listCases("pending");
    expect(cases).toEqual([{ id: "a" }]);
  });

  it("maps 409 to RevisionConflictError with the server's code", async () => {
    const api = new ApiClient(
      "r1", "",
      fetchReturning(409, { error: "revision_conflict", message: "stale" }),
    );
    await expect(
      api.submitVerdict("c", { verdict: "passed", corrections: [], expected_revision: 0 }),
    ).rejects.toBeInstanceOf(RevisionConflictError);
  });

  it("maps other failures to ApiError with status", async () => {
    const api = new ApiClient("r1", "", fetchReturning(404, { error: "unknown_case", message: "x" }));
    const err = await api.getCase("nope").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(404);
    expect((err as ApiError).code).toBe("unknown_case");
  });

  it("tolerates non-JSON error bodies", async () => {
    const broken: typeof fetch = async () => new Response("boom", { status: 500 });
    const api = new ApiClient("r1", "", broken);
    const err = await api.reviewStats().catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).code).toBe("http_error");
  });
});
