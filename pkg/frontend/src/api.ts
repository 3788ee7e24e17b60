/**
 * Typed client for the study service JSON API.
 *
 * The rater-facing surface is blind by construction: requests carry only a
 * rater id, a comparison id, a question, and a choice — never a model tag.
 */

export const QUESTIONS = ["text_fidelity", "visual_integration"] as const;
export const CHOICES = ["left", "right", "tie"] as const;

export type Question = (typeof QUESTIONS)[number];
export type Choice = (typeof CHOICES)[number];

/** One comparison as served to a rater (model identities withheld). */
export interface ComparisonPayload {
  done: false;
  comparison_id: string;
  prompt_index: number;
  target_text: string;
  left_image: string;
  right_image: string;
  questions: string[];
}

export interface DonePayload {
  done: true;
}

export type NextPayload = ComparisonPayload | DonePayload;

export interface VoteRequest {
  rater: string;
  comparison_id: string;
  question: string;
  choice: Choice;
}

export interface VoteAck {
  status: "recorded";
  advanced: boolean;
}

/** Per-question vote counts; ties are kept out of the per-model counts. */
export interface QuestionTally {
  models: Record<string, number>;
  ties: number;
  total: number;
}

export interface Tally {
  questions: Record<string, QuestionTally>;
  config?: Record<string, unknown>;
}

/** Non-2xx response from the service, carrying the HTTP status. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function readJson(resp: Response): Promise<unknown> {
  try {
    return await resp.json();
  } catch {
    return null;
  }
}

export class StudyApi {
  private readonly fetchFn: FetchLike;

  constructor(
    private readonly baseUrl: string = "",
    fetchFn?: FetchLike,
  ) {
    // Bind here so a bare global fetch keeps its expected receiver.
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  /** Next comparison for this rater, or {done: true} once finished. */
  async next(rater: string): Promise<NextPayload> {
    const url = `${this.baseUrl}/api/next?rater=${encodeURIComponent(rater)}`;
    const resp = await this.fetchFn(url);
    if (!resp.ok) {
      throw new ApiError(resp.status, `next failed with status ${resp.status}`);
    }
    return (await resp.json()) as NextPayload;
  }

  /** Submit one answer. Throws ApiError on any non-2xx status. */
  async vote(request: VoteRequest): Promise<VoteAck> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/vote`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    if (!resp.ok) {
      const detail = await readJson(resp);
      throw new ApiError(resp.status, `vote failed with status ${resp.status}: ${JSON.stringify(detail)}`);
    }
    return (await resp.json()) as VoteAck;
  }

  /** Current tally; requires the admin token when the service has one set. */
  async tally(adminToken?: string): Promise<Tally> {
    const headers: Record<string, string> = {};
    if (adminToken) {
      headers["x-admin-token"] = adminToken;
    }
    const resp = await this.fetchFn(`${this.baseUrl}/api/tally`, { headers });
    if (!resp.ok) {
      throw new ApiError(resp.status, `tally failed with status ${resp.status}`);
    }
    return (await resp.json()) as Tally;
  }

  /** URL for an image ref, preserving path separators inside the ref. */
  imageUrl(ref: string): string {
    const encoded = ref.split("/").map(encodeURIComponent).join("/");
    return `${this.baseUrl}/images/${encoded}`;
  }
}
