// Client-side review state. There is deliberately no persistence here: the
// engine owns the truth, the store holds only the active session (queue,
// open case, draft boxes, banner). All mutation goes through the optimistic
// concurrency API; a 409 reloads the case but keeps the reviewer's drafts.

import { ApiClient, RevisionConflictError } from "./api.js";
import type { CaseDetail, CaseSummary, DraftBox, ReviewStats } from "./types.js";

export interface Banner {
  kind: "info" | "conflict" | "error";
  text: string;
}

type Listener = () => void;

export class ReviewStore {
  queue: CaseSummary[] = [];
  stats: ReviewStats = { pending: 0, passed: 0, failed: 0, total: 0 };
  current: CaseDetail | null = null;
  imageIndex = 0;
  drafts: DraftBox[] = [];
  banner: Banner | null = null;
  busy = false;

  private listeners: Listener[] = [];

  constructor(readonly api: ApiClient) {}

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** Reload queue and stats; the queue length must agree with the server's
   * pending count (both come from the same snapshot). */
  async refresh(): Promise<void> {
    this.queue = await this.api.listCases("pending");
    this.stats = await this.api.reviewStats();
    if (this.queue.length !== this.stats.pending) {
      // raced another reviewer between the two requests: take a clean snapshot
      this.queue = await this.api.listCases("pending");
      this.stats = await this.api.reviewStats();
    }
    this.emit();
  }

  async openCase(caseId: string, keepDrafts = false): Promise<void> {
    this.current = await this.api.getCase(caseId);
    this.imageIndex = 0;
    if (!keepDrafts) this.drafts = [];
    this.emit();
  }

  async openNext(): Promise<void> {
    const next = this.queue.find((c) => c.id !== this.current?.id && c.state === "pending");
    if (next) {
      await this.openCase(next.id);
    } else {
      this.current = this.queue.length ? this.current : null;
      this.banner = this.queue.length
        ? this.banner
        : { kind: "info", text: "Queue empty — every case is reviewed." };
      this.emit();
    }
  }

  currentImageId(): string | null {
    return this.current?.image_ids[this.imageIndex] ?? null;
  }

  addDraft(draft: DraftBox): void {
    this.drafts.push(draft);
    this.emit();
  }

  updateDraft(index: number, draft: DraftBox): void {
    if (index >= 0 && index < this.drafts.length) {
      this.drafts[index] = draft;
      this.emit();
    }
  }

  removeDraft(index: number): void {
    this.drafts.splice(index, 1);
    this.emit();
  }

  /** Submit a verdict for the open case. Failed verdicts carry the drafts;
   * a passing verdict with drafts still on screen is refused so a reviewer
   * cannot silently lose their corrections. */
  async submit(verdict: "passed" | "failed"): Promise<boolean> {
    const current = this.current;
    if (!current || this.busy) return false;
    if (verdict === "passed" && this.drafts.length > 0) {
      this.banner = {
        kind: "error",
        text: "Remove the drawn boxes before passing, or fail the case with them.",
      };
      this.emit();
      return false;
    }
    this.busy = true;
    this.emit();
    try {
      const updated = await this.api.submitVerdict(current.id, {
        verdict,
        corrections: this.drafts.map((d) => ({
          image_id: d.imageId,
          box: d.box,
          category: d.category,
        })),
        expected_revision: current.revision,
      });
      this.current = { ...current, ...updated };
      this.drafts = [];
      this.banner = { kind: "info", text: `Case ${current.id} marked ${verdict}.` };
      await this.refresh();
      await this.openNext();
      return true;
    } catch (error) {
      if (error instanceof RevisionConflictError) {
        // someone else reviewed it first: reload, keep the drafts
        await this.openCase(current.id, true);
        await this.refresh();
        this.banner = {
          kind: "conflict",
          text: `Case ${current.id} changed under you (now revision ` +
            `${this.current?.revision}); your drawn boxes are preserved.`,
        };
        this.emit();
        return false;
      }
      this.banner = { kind: "error", text: String(error) };
      this.emit();
      return false;
    } finally {
      this.busy = false;
      this.emit();
    }
  }
}
