/**
 * Rating-flow state machine, independent of the DOM.
 *
 * One rater session: fetch a comparison, collect an answer for every
 * question, submit optimistically, and advance only after every answer is
 * acknowledged by the service. Answers stay buffered across network
 * failures so a retry never loses a vote, and a conflict (409) means the
 * service already has that answer, so the flow skips forward.
 */

import { ApiError, StudyApi } from "./api.js";
import type { Choice, ComparisonPayload } from "./api.js";

export type Phase =
  | "idle" /* constructed, start() not called yet */
  | "loading" /* waiting for the next comparison */
  | "rating" /* comparison on screen, collecting answers */
  | "submitting" /* flushing buffered answers */
  | "retry" /* network failure; buffered work intact */
  | "done" /* service reports no comparisons left */
  | "fatal"; /* protocol error; reload required */

interface PendingVote {
  question: string;
  choice: Choice;
  acked: boolean;
}

export interface FlowState {
  phase: Phase;
  view: ComparisonPayload | null;
  answers: Readonly<Record<string, Choice>>;
  /** Answers buffered for (re)submission, in question order. */
  pending: readonly { question: string; choice: Choice; acked: boolean }[];
  /** Votes acknowledged by the service over this session. */
  ackedVotes: number;
  /** Comparisons fully submitted over this session. */
  completed: number;
  error: string | null;
}

export type FlowListener = (state: FlowState) => void;

export class RatingFlow {
  private phase: Phase = "idle";
  private view: ComparisonPayload | null = null;
  private answers: Record<string, Choice> = {};
  private pending: PendingVote[] = [];
  private ackedVotes = 0;
  private completed = 0;
  private error: string | null = null;
  private readonly listeners: FlowListener[] = [];

  constructor(
    private readonly api: StudyApi,
    private readonly rater: string,
  ) {}

  getState(): FlowState {
    return {
      phase: this.phase,
      view: this.view,
      answers: { ...this.answers },
      pending: this.pending.map((p) => ({ ...p })),
      ackedVotes: this.ackedVotes,
      completed: this.completed,
      error: this.error,
    };
  }

  subscribe(listener: FlowListener): () => void {
    this.listeners.push(listener);
    return () => {
      const i = this.listeners.indexOf(listener);
      if (i >= 0) this.listeners.splice(i, 1);
    };
  }

  private emit(): void {
    const snapshot = this.getState();
    for (const listener of this.listeners) listener(snapshot);
  }

  /** Questions for the current comparison, in display order. */
  get questions(): string[] {
    return this.view ? [...this.view.questions] : [];
  }

  /** True once every question has an answer selected. */
  get canSubmit(): boolean {
    return (
      this.phase === "rating" &&
      this.view !== null &&
      this.view.questions.every((q) => this.answers[q] !== undefined)
    );
  }

  /** First question still lacking an answer (keyboard target). */
  get activeQuestion(): string | null {
    if (!this.view) return null;
    return this.view.questions.find((q) => this.answers[q] === undefined) ?? null;
  }

  async start(): Promise<void> {
    if (this.phase !== "idle") return;
    await this.advance();
  }

  /** Record a choice for one question; only valid while rating. */
  select(question: string, choice: Choice): void {
    if (this.phase !== "rating" || !this.view) return;
    if (!this.view.questions.includes(question)) return;
    this.answers[question] = choice;
    this.emit();
  }

  /** Buffer every answer and flush; no-op until all questions answered. */
  async submit(): Promise<void> {
    if (!this.canSubmit || !this.view) return;
    this.pending = this.view.questions.map((q) => ({
      question: q,
      choice: this.answers[q] as Choice,
      acked: false,
    }));
    await this.flush();
  }

  /** Re-run the failed step after a network error. */
  async retry(): Promise<void> {
    if (this.phase !== "retry") return;
    if (this.pending.some((p) => !p.acked)) {
      await this.flush();
    } else {
      await this.advance();
    }
  }

  private async flush(): Promise<void> {
    if (!this.view) return;
    this.phase = "submitting";
    this.error = null;
    this.emit();
    for (const vote of this.pending) {
      if (vote.acked) continue;
      try {
        await this.api.vote({
          rater: this.rater,
          comparison_id: this.view.comparison_id,
          question: vote.question,
          choice: vote.choice,
        });
        vote.acked = true;
        this.ackedVotes += 1;
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          // Already recorded (e.g. resubmit after a reload): skip forward.
          vote.acked = true;
        } else if (err instanceof ApiError) {
          this.phase = "fatal";
          this.error = err.message;
          this.emit();
          return;
        } else {
          // Network failure: keep the buffer, surface a retry banner.
          this.phase = "retry";
          this.error = "Could not reach the study service. Your answers are saved locally.";
          this.emit();
          return;
        }
      }
    }
    this.completed += 1;
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.phase = "loading";
    this.view = null;
    this.answers = {};
    this.pending = [];
    this.error = null;
    this.emit();
    try {
      const payload = await this.api.next(this.rater);
      if (payload.done) {
        this.phase = "done";
      } else {
        this.view = payload;
        this.phase = "rating";
      }
    } catch (err) {
      if (err instanceof ApiError) {
        this.phase = "fatal";
        this.error = err.message;
      } else {
        this.phase = "retry";
        this.error = "Could not reach the study service.";
      }
    }
    this.emit();
  }
}
