import { describe, expect, it } from "vitest";

import { StudyApi } from "../src/api.js";
import { RatingFlow } from "../src/flow.js";
import { MockStudyService, makeEntries } from "./mockService.js";

function setup(entries = makeEntries()) {
  const service = new MockStudyService(entries);
  const api = new StudyApi("", service.fetch);
  return { service, api };
}

describe("RatingFlow", () => {
  it("one comparison produces exactly two vote submissions, then done", async () => {
    const { service, api } = setup(makeEntries(["model-x", "model-y"], 1));
    const flow = new RatingFlow(api, "r1");
    await flow.start();
    expect(flow.getState().phase).toBe("rating");

    flow.select("text_fidelity", "left");
    flow.select("visual_integration", "right");
    await flow.submit();

    expect(flow.getState().phase).toBe("done");
    expect(flow.getState().ackedVotes).toBe(2);
    expect(service.log).toHaveLength(2);
    expect(service.log.map((r) => r.question)).toEqual([
      "text_fidelity",
      "visual_integration",
    ]);
  });

  it("cannot submit a partial comparison", async () => {
    const { service, api } = setup();
    const flow = new RatingFlow(api, "r1");
    await flow.start();

    expect(flow.canSubmit).toBe(false);
    await flow.submit(); // no-op
    expect(service.log).toHaveLength(0);
    expect(flow.getState().phase).toBe("rating");

    flow.select("text_fidelity", "tie");
    expect(flow.canSubmit).toBe(false);
    await flow.submit(); // still a no-op with one answer missing
    expect(service.log).toHaveLength(0);

    flow.select("visual_integration", "left");
    expect(flow.canSubmit).toBe(true);
  });

  it("a tie on both questions records two tie votes", async () => {
    const { service, api } = setup(makeEntries(["model-x", "model-y"], 1));
    const flow = new RatingFlow(api, "r1");
    await flow.start();
    flow.select("text_fidelity", "tie");
    flow.select("visual_integration", "tie");
    await flow.submit();
    expect(service.log.map((r) => r.choice)).toEqual(["tie", "tie"]);
  });

  it("skips forward on conflict when resubmitting after a reload", async () => {
    const { service, api } = setup(makeEntries(["model-x", "model-y"], 1));
    // First session answers one question, then the page is "reloaded".
    const before = new RatingFlow(api, "r1");
    await before.start();
    await api.vote({
      rater: "r1",
      comparison_id: "c0000",
      question: "text_fidelity",
      choice: "left",
    });

    const after = new RatingFlow(api, "r1");
    await after.start(); // the outstanding comparison is served again
    expect(after.getState().view?.comparison_id).toBe("c0000");
    after.select("text_fidelity", "right"); // re-answer; service already has it
    after.select("visual_integration", "tie");
    await after.submit();

    expect(after.getState().phase).toBe("done");
    expect(service.log).toHaveLength(2); // the conflicting answer was not duplicated
    expect(service.log[0]?.choice).toBe("left"); // first recording wins
  });

  it("buffers answers across a network failure and loses nothing on retry", async () => {
    const { service, api } = setup(makeEntries(["model-x", "model-y"], 1));
    const flow = new RatingFlow(api, "r1");
    await flow.start();
    flow.select("text_fidelity", "left");
    flow.select("visual_integration", "right");

    service.failNext(1); // the first vote request dies on the wire
    await flow.submit();
    expect(flow.getState().phase).toBe("retry");
    expect(flow.getState().error).toMatch(/saved locally/);
    expect(flow.getState().pending.filter((p) => !p.acked)).toHaveLength(2);
    expect(service.log).toHaveLength(0);

    await flow.retry();
    expect(flow.getState().phase).toBe("done");
    expect(service.log).toHaveLength(2);
    expect(service.log.map((r) => r.choice)).toEqual(["left", "right"]);
  });

  it("resumes cleanly when the failure hits between the two votes", async () => {
    const { service, api } = setup(makeEntries(["model-x", "model-y"], 1));
    const flow = new RatingFlow(api, "r1");
    await flow.start();
    flow.select("text_fidelity", "left");
    flow.select("visual_integration", "right");

    // First vote lands; the connection dies before the second.
    // Calls: 1 = start()'s next, 2 = first vote, 3 = second vote.
    const realFetch = service.fetch;
    let calls = 0;
    const flaky: typeof realFetch = (url, init) => {
      calls += 1;
      if (calls === 3) return Promise.reject(new TypeError("network down"));
      return realFetch(url, init);
    };
    const flakyFlow = new RatingFlow(new StudyApi("", flaky), "r2");
    await flakyFlow.start();
    flakyFlow.select("text_fidelity", "left");
    flakyFlow.select("visual_integration", "right");
    await flakyFlow.submit(); // first vote acked, second failed
    expect(flakyFlow.getState().phase).toBe("retry");
    expect(service.log.filter((r) => r.rater_id === "r2")).toHaveLength(1);

    await flakyFlow.retry(); // only the unacked vote is resent
    expect(flakyFlow.getState().phase).toBe("done");
    expect(service.log.filter((r) => r.rater_id === "r2")).toHaveLength(2);
  });

  it("turns protocol errors into a fatal state", async () => {
    const broken = new RatingFlow(
      new StudyApi("", () => Promise.resolve(new Response("{}", { status: 404 }))),
      "r1",
    );
    await broken.start();
    expect(broken.getState().phase).toBe("fatal");
    expect(broken.getState().error).toMatch(/404/);
  });

  it("walks a rater through every comparison to the done screen", async () => {
    const { service, api } = setup(makeEntries(["model-x", "model-y"], 3));
    const flow = new RatingFlow(api, "r1");
    await flow.start();
    const seen: string[] = [];
    while (flow.getState().phase === "rating") {
      const view = flow.getState().view;
      if (!view) break;
      seen.push(view.comparison_id);
      flow.select("text_fidelity", "left");
      flow.select("visual_integration", "tie");
      await flow.submit();
    }
    expect(flow.getState().phase).toBe("done");
    expect(seen).toEqual(["c0000", "c0001", "c0002"]);
    expect(service.log).toHaveLength(6);
    expect(flow.getState().completed).toBe(3);
  });
});
