/**
 * Page bootstrap: picks the rater flow or the admin tally view from the
 * URL. Raters arrive as /?rater=<id>; admins as /?view=tally&token=<t>.
 */

import { StudyApi } from "./api.js";
import { RatingFlow } from "./flow.js";
import { mountRatingView, mountTallyView } from "./ui.js";
import type { Mounted } from "./ui.js";

export function initStudyPage(root: HTMLElement, search: string): Mounted {
  const params = new URLSearchParams(search);
  const api = new StudyApi("");

  if (params.get("view") === "tally") {
    const view = mountTallyView(root, api, {
      adminToken: params.get("token") ?? undefined,
      intervalMs: 5000,
    });
    void view.refresh();
    return view;
  }

  const rater = params.get("rater");
  if (!rater) {
    root.textContent =
      "Missing rater id: open this page as /?rater=<your-id> to begin rating.";
    return { dispose: () => undefined };
  }
  const flow = new RatingFlow(api, rater);
  const view = mountRatingView(root, flow, api);
  void flow.start();
  return view;
}

/* c8 ignore start -- browser-only entry point */
if (typeof document !== "undefined") {
  const root = document.getElementById("app");
  if (root) {
    initStudyPage(root, window.location.search);
  }
}
/* c8 ignore stop */
