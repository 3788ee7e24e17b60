"""Pairwise human-study backend: comparisons, votes, and tallies.

Two renderings of the same prompt by different models are shown side by
side; a rater answers two questions (text fidelity, visual integration)
with left / right / tie. The service keeps raters blind — no response to
the rater view ever carries a model tag — while every persisted vote row
carries the side-to-model resolution, so the tally is a pure fold over
the append-only JSONL vote log and can be reproduced by replaying it.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Any, Callable, Iterable, Mapping

# Handler annotations resolve against module globals (postponed annotations),
# so Request must live here rather than inside create_app.
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, HTMLResponse, JSONResponse

from .core import dumps_record

logger = logging.getLogger(__name__)

QUESTIONS = ("text_fidelity", "visual_integration")
CHOICES = ("left", "right", "tie")

ADMIN_TOKEN_ENV = "STUDY_ADMIN_TOKEN"


class StudyNotLoaded(RuntimeError):
    """No manifest has been loaded; nothing to serve."""


class UnknownComparison(KeyError):
    """Vote referenced a comparison never served to this rater."""


class DuplicateVote(ValueError):
    """This (rater, comparison, question) was already voted on."""


class VoteRejected(ValueError):
    """Malformed vote payload (bad question or choice)."""


@dataclass(frozen=True)
class StudyEntry:
    prompt_index: int
    model_tag: str
    image_ref: str


@dataclass(frozen=True)
class Comparison:
    """One unordered model pair under one prompt, before side assignment."""

    comparison_id: str
    prompt_index: int
    target_text: str
    model_a: str  # lexicographically smaller tag
    model_b: str
    image_a: str
    image_b: str


@dataclass(frozen=True)
class ServedView:
    """A comparison as one rater sees it, sides already assigned."""

    comparison_id: str
    prompt_index: int
    target_text: str
    left_model: str
    right_model: str
    left_image: str
    right_image: str
    side_assignment_seed: str

    def rater_payload(self) -> dict[str, Any]:
        # Blind protocol: model tags never leave the server on this path.
        return {
            "done": False,
            "comparison_id": self.comparison_id,
            "prompt_index": self.prompt_index,
            "target_text": self.target_text,
            "left_image": self.left_image,
            "right_image": self.right_image,
            "questions": list(QUESTIONS),
        }


def load_manifest(source: Mapping[str, Any] | list | str | Path) -> tuple[list[StudyEntry], dict[int, str], int]:
    """Parse a study manifest into entries, prompt texts, and a seed.

    Accepts a path to a JSON file, a {"entries": [...], "prompts": {...},
    "seed": N} object, or a bare list of entry objects.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            source = json.load(fh)
    if isinstance(source, list):
        source = {"entries": source}
    entries = [
        StudyEntry(
            prompt_index=int(e["prompt_index"]),
            model_tag=str(e["model_tag"]),
            image_ref=str(e["image_ref"]),
        )
        for e in source.get("entries", [])
    ]
    prompts = {int(k): str(v) for k, v in (source.get("prompts") or {}).items()}
    seed = int(source.get("seed", 0))
    return entries, prompts, seed


def build_comparisons(
    entries: Iterable[StudyEntry], prompts: Mapping[int, str]
) -> list[Comparison]:
    """All unordered model pairs under each prompt, in deterministic order."""
    by_prompt: dict[int, dict[str, str]] = {}
    for e in entries:
        slot = by_prompt.setdefault(e.prompt_index, {})
        if e.model_tag in slot:
            raise ValueError(
                f"duplicate entry for prompt {e.prompt_index}, model {e.model_tag!r}"
            )
        slot[e.model_tag] = e.image_ref
    pool: list[Comparison] = []
    for prompt_index in sorted(by_prompt):
        tags = sorted(by_prompt[prompt_index])
        for i, a in enumerate(tags):
            for b in tags[i + 1 :]:
                pool.append(
                    Comparison(
                        comparison_id=f"c{len(pool):04d}",
                        prompt_index=prompt_index,
                        target_text=prompts.get(prompt_index, ""),
                        model_a=a,
                        model_b=b,
                        image_a=by_prompt[prompt_index][a],
                        image_b=by_prompt[prompt_index][b],
                    )
                )
    return pool


def tally_from_log(rows: Iterable[Mapping[str, Any]]) -> dict[str, Any]:
    """Fold vote rows into per-(model, question) counts; ties separate."""
    questions: dict[str, dict[str, Any]] = {
        q: {"models": {}, "ties": 0, "total": 0} for q in QUESTIONS
    }
    for row in rows:
        q = row["question"]
        bucket = questions.setdefault(q, {"models": {}, "ties": 0, "total": 0})
        bucket["total"] += 1
        choice = row["choice"]
        if choice == "tie":
            bucket["ties"] += 1
            continue
        model = row[f"{choice}_model"]
        bucket["models"][model] = bucket["models"].get(model, 0) + 1
    return {"questions": questions}


class StudyStore:
    """All study state: comparison pool, per-rater cursors, vote log.

    Vote appends go through one lock (single-writer discipline); reads
    take snapshots under the same lock and never block on I/O.
    """

    def __init__(
        self,
        votes_path: str | Path,
        *,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.votes_path = Path(votes_path)
        self.clock = clock
        self.seed = 0
        self._lock = threading.Lock()
        self._pool: list[Comparison] = []
        self._by_id: dict[str, Comparison] = {}
        self._votes: list[dict[str, Any]] = []
        self._answered: dict[tuple[str, str], set[str]] = {}
        self._served: dict[str, ServedView] = {}  # rater -> outstanding view
        self._left_counts: dict[str, int] = {}  # model -> times served on the left
        self._serves = 0

    # -- loading -------------------------------------------------------------

    def load(self, source: Mapping[str, Any] | list | str | Path) -> int:
        entries, prompts, seed = load_manifest(source)
        pool = build_comparisons(entries, prompts)
        with self._lock:
            self.seed = seed
            self._pool = pool
            self._by_id = {c.comparison_id: c for c in pool}
            self._votes = []
            self._answered = {}
            self._served = {}
            self._left_counts = {}
            self._serves = 0
        if self.votes_path.exists():
            self._replay_log()
        return len(pool)

    def _replay_log(self) -> None:
        with open(self.votes_path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        with self._lock:
            for row in rows:
                self._votes.append(row)
                key = (row["rater_id"], row["comparison_id"])
                self._answered.setdefault(key, set()).add(row["question"])
            # Restore half-finished comparisons so their second vote still lands.
            for (rater, cid), questions in self._answered.items():
                if len(questions) < len(QUESTIONS) and cid in self._by_id:
                    self._served[rater] = self._assign_sides(rater, self._by_id[cid])
        logger.info("replayed %d vote(s) from %s", len(rows), self.votes_path)

    # -- serving -------------------------------------------------------------

    def _assign_sides(self, rater_id: str, comparison: Comparison) -> ServedView:
        seed_str = f"{self.seed}:{rater_id}:{comparison.comparison_id}"
        swap = Random(seed_str).random() < 0.5
        a = (comparison.model_a, comparison.image_a)
        b = (comparison.model_b, comparison.image_b)
        left, right = (b, a) if swap else (a, b)
        return ServedView(
            comparison_id=comparison.comparison_id,
            prompt_index=comparison.prompt_index,
            target_text=comparison.target_text,
            left_model=left[0],
            right_model=right[0],
            left_image=left[1],
            right_image=right[1],
            side_assignment_seed=seed_str,
        )

    def _answer_count(self, cid: str) -> int:
        return sum(
            1
            for (_, c), qs in self._answered.items()
            if c == cid and len(qs) == len(QUESTIONS)
        )

    def next_comparison(self, rater_id: str) -> ServedView | None:
        """Outstanding view if any, else the least-answered unseen comparison.

        Returns None when this rater has completed every comparison.
        """
        if not rater_id:
            raise ValueError("rater id must be non-empty")
        with self._lock:
            if not self._pool:
                raise StudyNotLoaded("no study manifest loaded")
            served = self._served.get(rater_id)
            if served is not None:
                return served  # idempotent cursor: re-request, same comparison
            candidates = [
                c
                for c in self._pool
                if len(self._answered.get((rater_id, c.comparison_id), ())) < len(QUESTIONS)
            ]
            if not candidates:
                return None
            chosen = min(
                candidates,
                key=lambda c: (self._answer_count(c.comparison_id), c.comparison_id),
            )
            view = self._assign_sides(rater_id, chosen)
            self._served[rater_id] = view
            self._serves += 1
            self._left_counts[view.left_model] = self._left_counts.get(view.left_model, 0) + 1
            return view

    # -- voting ----------------------------------------------------------------

    def submit_vote(
        self, rater_id: str, comparison_id: str, question: str, choice: str
    ) -> dict[str, Any]:
        if question not in QUESTIONS:
            raise VoteRejected(f"unknown question: {question!r}")
        if choice not in CHOICES:
            raise VoteRejected(f"unknown choice: {choice!r}")
        with self._lock:
            served = self._served.get(rater_id)
            key = (rater_id, comparison_id)
            if served is None or served.comparison_id != comparison_id:
                if question in self._answered.get(key, ()):  # fully answered earlier
                    raise DuplicateVote(
                        f"{rater_id} already voted on {comparison_id}/{question}"
                    )
                raise UnknownComparison(
                    f"comparison {comparison_id} is not outstanding for {rater_id}"
                )
            if question in self._answered.get(key, ()):
                raise DuplicateVote(
                    f"{rater_id} already voted on {comparison_id}/{question}"
                )
            row = {
                "comparison_id": comparison_id,
                "rater_id": rater_id,
                "question": question,
                "choice": choice,
                "left_model": served.left_model,
                "right_model": served.right_model,
                "timestamp": self.clock(),
            }
            with open(self.votes_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(dumps_record(row) + "\n")
            self._votes.append(row)
            answered = self._answered.setdefault(key, set())
            answered.add(question)
            advanced = len(answered) == len(QUESTIONS)
            if advanced:
                del self._served[rater_id]  # cursor advances only when complete
            return {"status": "recorded", "advanced": advanced}

    # -- reporting ---------------------------------------------------------------

    def tally(self) -> dict[str, Any]:
        with self._lock:
            votes = list(self._votes)
            out = tally_from_log(votes)
            out["config"] = {
                "total_comparisons": len(self._pool),
                "raters": len({r["rater_id"] for r in votes}),
                "votes": len(votes),
                "seed": self.seed,
            }
            return out

    def side_balance(self) -> dict[str, Any]:
        with self._lock:
            return {"serves": self._serves, "left_counts": dict(self._left_counts)}


# --- HTTP layer ----------------------------------------------------------------


def _authorized(request) -> bool:
    token = os.environ.get(ADMIN_TOKEN_ENV, "")
    if not token:
        return True  # no token configured: open instance (local studies)
    supplied = request.headers.get("x-admin-token") or request.query_params.get("token")
    return supplied == token


def create_app(store: StudyStore, *, images_root: str | Path | None = None):
    """FastAPI app over one StudyStore; images served from images_root."""
    app = FastAPI(title="pairwise rendering study", version="0.1.0")
    root = Path(images_root).resolve() if images_root else None

    @app.get("/api/next")
    def api_next(rater: str = ""):
        if not rater:
            return JSONResponse({"error": "missing rater id"}, status_code=422)
        try:
            view = store.next_comparison(rater)
        except StudyNotLoaded:
            return JSONResponse({"error": "study_not_loaded"}, status_code=409)
        if view is None:
            return {"done": True}
        return view.rater_payload()

    @app.post("/api/vote")
    async def api_vote(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return JSONResponse({"error": "invalid JSON body"}, status_code=422)
        try:
            result = store.submit_vote(
                rater_id=str(body.get("rater", "")),
                comparison_id=str(body.get("comparison_id", "")),
                question=str(body.get("question", "")),
                choice=str(body.get("choice", "")),
            )
        except VoteRejected as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        except DuplicateVote as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        except UnknownComparison as exc:
            return JSONResponse({"error": str(exc.args[0])}, status_code=404)
        return result

    @app.get("/api/tally")
    def api_tally(request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "unauthorized"}, status_code=401)
        return store.tally()

    @app.post("/api/load")
    async def api_load(request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "unauthorized"}, status_code=401)
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return JSONResponse({"error": "invalid JSON body"}, status_code=422)
        count = store.load(body)
        return {"status": "loaded", "comparisons": count}

    @app.get("/images/{ref:path}")
    def api_image(ref: str):
        if root is None:
            return JSONResponse({"error": "no images root configured"}, status_code=404)
        target = (root / ref).resolve()
        if not target.is_relative_to(root) or not target.is_file():
            return JSONResponse({"error": "not found"}, status_code=404)
        return FileResponse(target)

    @app.get("/")
    def index():
        ui = Path(__file__).parent / "static" / "study.html"
        if ui.is_file():
            return HTMLResponse(ui.read_text(encoding="utf-8"))
        return {"service": "pairwise rendering study", "api": "/api/next"}

    return app


def serve_study(
    manifest_path: str | Path,
    votes_path: str | Path,
    *,
    port: int = 8000,
    host: str = "127.0.0.1",
    images_root: str | Path | None = None,
) -> None:
    import uvicorn

    store = StudyStore(votes_path)
    count = store.load(manifest_path)
    logger.info("study loaded: %d comparison(s)", count)
    if images_root is None:
        images_root = Path(manifest_path).resolve().parent
    app = create_app(store, images_root=images_root)
    uvicorn.run(app, host=host, port=port)
