/**
 * DOM rendering for the rater flow and the admin tally view.
 *
 * Rendering is a pure function of state (full re-render per change), all
 * content goes through textContent, and nothing in the rater view ever
 * receives a model identity — the payloads it renders carry none.
 */

import type { Choice } from "./api.js";
import { ApiError, StudyApi } from "./api.js";
import type { Tally } from "./api.js";
import { RatingFlow } from "./flow.js";
import type { FlowState } from "./flow.js";
import { tallyBars, tallyIsEmpty } from "./tally.js";

/** Display copy for the two standard questions (wording is ours). */
const QUESTION_COPY: Record<string, { title: string; hint: string }> = {
  text_fidelity: {
    title: "Text fidelity",
    hint: "Which image renders the target text more accurately — spelling, completeness, legibility?",
  },
  visual_integration: {
    title: "Visual integration",
    hint: "In which image does the text sit more naturally in the scene — style, perspective, lighting?",
  },
};

const CHOICE_LABELS: Record<Choice, string> = {
  left: "Left (1)",
  right: "Right (2)",
  tie: "Tie (0)",
};

const KEY_TO_CHOICE: Record<string, Choice> = {
  "1": "left",
  "2": "right",
  "0": "tie",
};

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function questionCopy(question: string): { title: string; hint: string } {
  return (
    QUESTION_COPY[question] ?? {
      title: question.replace(/_/g, " "),
      hint: "",
    }
  );
}

export interface Mounted {
  dispose(): void;
}

/**
 * Mount the rater view: renders the flow's state into `root` and keeps it
 * in sync, with 1/2/0 answering the first open question and Enter
 * submitting once both answers are in.
 */
export function mountRatingView(root: HTMLElement, flow: RatingFlow, api: StudyApi): Mounted {
  const doc = root.ownerDocument;

  const render = (state: FlowState): void => {
    root.textContent = "";
    const wrap = el(doc, "div", "study");

    if (state.phase === "idle" || state.phase === "loading") {
      wrap.appendChild(el(doc, "p", "study-loading", "Loading the next comparison…"));
      root.appendChild(wrap);
      return;
    }
    if (state.phase === "done") {
      const done = el(doc, "div", "study-done");
      done.appendChild(el(doc, "h2", undefined, "All comparisons rated"));
      done.appendChild(
        el(doc, "p", undefined, `Thank you — ${state.ackedVotes} answers were recorded.`),
      );
      wrap.appendChild(done);
      root.appendChild(wrap);
      return;
    }
    if (state.phase === "fatal") {
      const fatal = el(doc, "div", "study-fatal");
      fatal.appendChild(el(doc, "h2", undefined, "Something went wrong"));
      fatal.appendChild(el(doc, "p", undefined, state.error ?? "Unexpected error."));
      fatal.appendChild(el(doc, "p", undefined, "Please reload the page."));
      wrap.appendChild(fatal);
      root.appendChild(wrap);
      return;
    }

    if (state.phase === "retry") {
      const banner = el(doc, "div", "study-retry-banner");
      banner.setAttribute("role", "alert");
      banner.appendChild(el(doc, "span", undefined, state.error ?? "Connection lost."));
      const retryBtn = el(doc, "button", "study-retry-button", "Retry");
      retryBtn.addEventListener("click", () => {
        void flow.retry();
      });
      banner.appendChild(retryBtn);
      wrap.appendChild(banner);
    }

    const view = state.view;
    if (view) {
      const target = el(doc, "div", "study-target");
      target.appendChild(el(doc, "p", "study-target-label", "Target text"));
      const quote = el(doc, "blockquote", "study-target-text", view.target_text);
      target.appendChild(quote);
      wrap.appendChild(target);

      const pair = el(doc, "div", "study-pair");
      for (const side of ["left", "right"] as const) {
        const cell = el(doc, "figure", `study-image study-image--${side}`);
        const img = el(doc, "img");
        img.src = api.imageUrl(side === "left" ? view.left_image : view.right_image);
        img.alt = `${side} image`;
        cell.appendChild(img);
        cell.appendChild(el(doc, "figcaption", undefined, side === "left" ? "Left" : "Right"));
        pair.appendChild(cell);
      }
      wrap.appendChild(pair);

      const busy = state.phase === "submitting";
      for (const question of view.questions) {
        const copy = questionCopy(question);
        const block = el(doc, "fieldset", "study-question");
        block.setAttribute("data-question", question);
        if (question === flow.activeQuestion) block.classList.add("study-question--active");
        block.appendChild(el(doc, "legend", undefined, copy.title));
        if (copy.hint) block.appendChild(el(doc, "p", "study-question-hint", copy.hint));
        const row = el(doc, "div", "study-choices");
        for (const choice of Object.keys(CHOICE_LABELS) as Choice[]) {
          const btn = el(doc, "button", "study-choice", CHOICE_LABELS[choice]);
          btn.setAttribute("data-choice", choice);
          btn.setAttribute("aria-pressed", String(state.answers[question] === choice));
          btn.disabled = busy;
          btn.addEventListener("click", () => flow.select(question, choice));
          row.appendChild(btn);
        }
        block.appendChild(row);
        wrap.appendChild(block);
      }

      const next = el(doc, "button", "study-next", busy ? "Submitting…" : "Next");
      next.id = "next";
      next.disabled = !flow.canSubmit; // partial comparisons cannot be submitted
      next.addEventListener("click", () => {
        void flow.submit();
      });
      wrap.appendChild(next);
    }

    root.appendChild(wrap);
  };

  const onKey = (event: KeyboardEvent): void => {
    const choice = KEY_TO_CHOICE[event.key];
    if (choice) {
      const question = flow.activeQuestion;
      if (question) flow.select(question, choice);
      return;
    }
    if (event.key === "Enter" && flow.canSubmit) {
      void flow.submit();
    }
  };

  const unsubscribe = flow.subscribe(render);
  doc.addEventListener("keydown", onKey);
  render(flow.getState());
  return {
    dispose(): void {
      unsubscribe();
      doc.removeEventListener("keydown", onKey);
    },
  };
}

export interface TallyViewOptions {
  adminToken?: string;
  /** Auto-refresh period; 0 disables the timer (tests call refresh()). */
  intervalMs?: number;
}

export interface MountedTally extends Mounted {
  refresh(): Promise<void>;
}

/** Render one fetched tally into `root`. Exported for direct testing. */
export function renderTally(root: HTMLElement, tally: Tally): void {
  const doc = root.ownerDocument;
  root.textContent = "";
  const wrap = el(doc, "div", "tally");
  wrap.appendChild(el(doc, "h2", undefined, "Preference votes"));

  if (tallyIsEmpty(tally)) {
    wrap.appendChild(el(doc, "p", "tally-empty", "No votes recorded yet."));
    root.appendChild(wrap);
    return;
  }

  for (const group of tallyBars(tally)) {
    const section = el(doc, "section", "tally-question");
    section.setAttribute("data-question", group.question);
    section.appendChild(
      el(doc, "h3", undefined, `${questionCopy(group.question).title} — ${group.total} votes`),
    );
    const chart = el(doc, "div", "tally-bars");
    const segments = [...group.bars, group.tie];
    for (const bar of segments) {
      const row = el(doc, "div", "tally-row");
      row.appendChild(el(doc, "span", "tally-label", bar.label));
      const track = el(doc, "div", "tally-track");
      const fill = el(
        doc,
        "div",
        bar.label === "tie" ? "tally-bar tally-bar--tie" : "tally-bar",
      );
      fill.style.width = `${Math.round(bar.share * 100)}%`;
      fill.setAttribute("data-count", String(bar.count));
      track.appendChild(fill);
      row.appendChild(track);
      row.appendChild(el(doc, "span", "tally-count", String(bar.count)));
      chart.appendChild(row);
    }
    section.appendChild(chart);
    wrap.appendChild(section);
  }
  root.appendChild(wrap);
}

/**
 * Mount the live tally view. Unauthorized responses hide the view
 * entirely rather than rendering an error.
 */
export function mountTallyView(
  root: HTMLElement,
  api: StudyApi,
  options: TallyViewOptions = {},
): MountedTally {
  const doc = root.ownerDocument;
  let timer: ReturnType<typeof setInterval> | null = null;

  const refresh = async (): Promise<void> => {
    try {
      const tally = await api.tally(options.adminToken);
      root.classList.remove("tally--hidden");
      renderTally(root, tally);
    } catch (err) {
      if (err instanceof ApiError && (err.status === 401 || err.status === 403)) {
        root.textContent = "";
        root.classList.add("tally--hidden");
        return;
      }
      root.textContent = "";
      const note = el(doc, "p", "tally-unavailable", "Tally temporarily unavailable; retrying.");
      root.appendChild(note);
    }
  };

  if (options.intervalMs && options.intervalMs > 0) {
    timer = setInterval(() => {
      void refresh();
    }, options.intervalMs);
  }
  return {
    refresh,
    dispose(): void {
      if (timer !== null) clearInterval(timer);
    },
  };
}
