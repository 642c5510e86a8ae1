// Payload shapes of the review API, mirrored from the engine's JSON.

export interface Box {
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
}

export interface Prediction {
  box: Box;
  category: number;
  score: number;
}

export interface CaseSummary {
  id: string;
  state: CaseState;
  revision: number;
  scenario: string;
  category: string;
  image_count: number;
}

export type CaseState = "pending" | "passed" | "failed";

export interface CaseImage {
  image_id: string;
  url: string;
  width?: number;
  height?: number;
}

export interface CaseCorrection {
  image_id: string;
  detection: { box: Box; category: number; score: number };
}

export interface CaseDetail {
  id: string;
  scenario: { text: string; category: string; generator: string };
  image_ids: string[];
  predictions: Record<string, Prediction[]>;
  state: CaseState;
  corrections: CaseCorrection[];
  reviewer_note: string;
  revision: number;
  images: CaseImage[];
  category_id: number | null;
}

export interface ReviewStats {
  pending: number;
  passed: number;
  failed: number;
  total: number;
}

/** A correction box being drawn or edited, in image pixel coordinates. */
export interface DraftBox {
  imageId: string;
  box: Box;
  category: number;
}

export interface VerdictBody {
  verdict: "passed" | "failed";
  corrections: { image_id: string; box: Box; category: number }[];
  expected_revision: number;
}
