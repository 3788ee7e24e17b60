/**
 * Shapes a raw tally into the grouped-bar view model the admin page draws:
 * one group per question, one bar per model, and ties as their own segment.
 */

import type { Tally } from "./api.js";

export interface Bar {
  label: string;
  count: number;
  /** Width fraction relative to the tallest bar in the group (0..1). */
  share: number;
}

export interface QuestionBars {
  question: string;
  bars: Bar[];
  tie: Bar;
  total: number;
}

/** True when no votes have been recorded for any question. */
export function tallyIsEmpty(tally: Tally): boolean {
  return Object.values(tally.questions).every((q) => q.total === 0);
}

/**
 * Per-question bar groups. Model bars are sorted by count (descending),
 * then name, so the display order is stable; shares are normalized to the
 * tallest segment in the group, ties included.
 */
export function tallyBars(tally: Tally): QuestionBars[] {
  const questions = Object.keys(tally.questions).sort();
  return questions.map((question) => {
    const bucket = tally.questions[question] ?? { models: {}, ties: 0, total: 0 };
    const entries = Object.entries(bucket.models).sort(
      ([ma, ca], [mb, cb]) => cb - ca || (ma < mb ? -1 : 1),
    );
    const tallest = Math.max(bucket.ties, ...entries.map(([, c]) => c), 1);
    return {
      question,
      bars: entries.map(([label, count]) => ({
        label,
        count,
        share: count / tallest,
      })),
      tie: { label: "tie", count: bucket.ties, share: bucket.ties / tallest },
      total: bucket.total,
    };
  });
}
