"""Benchmark dataset pipeline: texts, prompts, dedup, safety, serialization.

Stages, in order: category-conditioned target-text generation with length
stratification; embedding-based semantic dedup of texts; prompt synthesis
with position control (back placement uses a two-step scene + connective
assembly); per-(category, prompt-length) dedup of prompts; safety
filtering with a fail-closed JSON verdict; schema serialization with
recomputed bucket verification. Attrition at any stage is covered by
bounded top-up rounds, with new candidates deduped against prior retained
items via the cross-round similarity rule. Every run is deterministic
given a seed and deterministic clients.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .clients import ChatClient, ClientError, EmbedClient
from .core import (
    CATEGORIES,
    BenchSample,
    LengthBucket,
    Position,
    TargetNotFoundError,
    AmbiguousTargetError,
    classify_position,
    classify_prompt_length,
    classify_text_length,
    write_bench_samples,
)
from .kernels import unit_normalize

logger = logging.getLogger(__name__)

TEXT_GEN_TEMPERATURE = 0.8
TEXT_GEN_TOP_P = 0.9
TEXT_GEN_BATCH_SIZE = 50

PROMPT_TEMPERATURE = 0.85
PROMPT_TOP_P = 0.92

SAFETY_TEMPERATURE = 0.3
SAFETY_TOP_P = 0.8
SAFETY_CATEGORIES = ("sexual", "violent", "gore", "hateful", "illegal")

CONNECTIVES = ("displaying the text", "with the inscription", "inscribed with")

DEFAULT_RETRY_BUDGET = 5
DEFAULT_CROSS_THRESHOLD = 0.90
DEDUP_RETENTION = 0.8


class BenchError(RuntimeError):
    """Base class for pipeline failures."""


class GenerationExhausted(BenchError):
    """Zero conforming texts after the retry budget."""


class PositionUnsatisfiable(BenchError):
    """Prompt synthesis could not hit the requested buckets within budget."""

    def __init__(self, message: str, last_candidate: str):
        super().__init__(message)
        self.last_candidate = last_candidate


class BuildAborted(BenchError):
    """A hard error aborted the build; a resumable checkpoint was written."""

    def __init__(self, message: str, checkpoint_path: str | None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


# --- category specs ----------------------------------------------------------


@dataclass(frozen=True)
class CategorySpec:
    """One carrier category: an expert persona plus style exemplars.

    reference_samples calibrate style only; they are never emitted as
    outputs and generated texts matching one verbatim are discarded.
    """

    name: str
    expert_role: str
    reference_samples: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.name not in CATEGORIES:
            raise ValueError(f"unknown category: {self.name!r}")
        if not self.expert_role.strip():
            raise ValueError("expert_role must be non-empty")


_DEFAULT_SPEC_DATA: dict[str, tuple[str, tuple[str, ...]]] = {
    "Poster": (
        "You are a veteran poster copywriter who distills events and causes "
        "into punchy display text.",
        ("Midnight Jazz Festival", "Save Our River, Join The Cleanup", "One Night Only"),
    ),
    "Advertisement": (
        "You are an advertising copywriter crafting short, persuasive taglines "
        "for consumer products.",
        ("Crunch Into Morning", "Half Price, Full Flavor", "Built To Outlast You"),
    ),
    "Cover": (
        "You are a book and magazine cover editor who writes evocative titles "
        "and cover lines.",
        ("The Cartographer's Daughter", "Winter Issue", "Stories From The Tide"),
    ),
    "Logo": (
        "You are a brand naming consultant inventing crisp wordmarks and "
        "slogans for logos.",
        ("Northwind Supply Co", "Blue Fern Studio", "Hearth And Harbor"),
    ),
    "Sticker": (
        "You are a sticker designer writing playful, compact phrases people "
        "slap on laptops.",
        ("Powered By Coffee", "Be Kind To Bugs", "Tiny But Mighty"),
    ),
    "Handwriting": (
        "You are a calligraphy studio assistant drafting warm, personal lines "
        "for handwritten pieces.",
        ("Thank You For Everything", "Happy Anniversary Mom And Dad", "With Love From Maine"),
    ),
    "Scene": (
        "You are a set decorator writing realistic signage that appears inside "
        "everyday scenes.",
        ("No Parking On Game Days", "Fresh Bread Daily", "Platform 4 Closed"),
    ),
    "Basic": (
        "You are a typography test author writing plain, unadorned sample "
        "sentences.",
        ("The Quick Brown Fox", "Sample Text Here", "Hello World"),
    ),
    "Artistic": (
        "You are a gallery curator composing expressive fragments for art "
        "typography pieces.",
        ("Dreams In Ultraviolet", "The Sound Of Falling Light", "Ephemeral"),
    ),
    "Academic": (
        "You are an academic editor writing titles and headings for papers "
        "and lecture slides.",
        ("Introduction To Measure Theory", "Results And Discussion", "On The Origin Of Clusters"),
    ),
}

DEFAULT_CATEGORY_SPECS: dict[str, CategorySpec] = {
    name: CategorySpec(name, role, refs) for name, (role, refs) in _DEFAULT_SPEC_DATA.items()
}


def load_category_specs(directory: str | Path) -> dict[str, CategorySpec]:
    """Load per-category JSON files {name, expert_role, reference_samples}."""
    specs: dict[str, CategorySpec] = {}
    for path in sorted(Path(directory).glob("*.json")):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        spec = CategorySpec(
            name=d["name"],
            expert_role=d["expert_role"],
            reference_samples=tuple(d.get("reference_samples", ())),
        )
        specs[spec.name] = spec
    if not specs:
        raise ValueError(f"no category spec files found in {directory}")
    return specs


# --- stage 1: target-text generation -----------------------------------------

_BUCKET_INSTRUCTION = {
    LengthBucket.SHORT: "at most 5 words",
    LengthBucket.MEDIUM: "between 6 and 15 words",
    LengthBucket.LONG: "at least 16 words",
}

_LINE_PREFIX = re.compile(r"^\s*(?:[-*•]\s+|\d+[.)]\s+)?")


def _parse_lines(raw: str) -> list[str]:
    out = []
    for line in raw.splitlines():
        if line.strip().startswith("```"):
            continue
        cleaned = _LINE_PREFIX.sub("", line).strip().strip('"').strip()
        if cleaned:
            out.append(cleaned)
    return out


def generate_texts(
    cat: CategorySpec,
    length_bucket: LengthBucket,
    count: int,
    llm: ChatClient,
    *,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    nonce: str = "",
) -> list[str]:
    """Generate up to ``count`` texts conforming to the length bucket.

    Outputs are post-filtered: wrong measured bucket, verbatim reference
    leaks, and exact duplicates are dropped rather than trusted away.
    Raises GenerationExhausted only when every batch in the budget yields
    zero conforming strings.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    refs = {r.strip() for r in cat.reference_samples}
    system = cat.expert_role
    batches = math.ceil(count / TEXT_GEN_BATCH_SIZE)
    out: list[str] = []
    seen: set[str] = set()
    rejected_bucket = 0
    rejected_leak = 0
    for attempt in range(batches + retry_budget):
        if len(out) >= count:
            break
        want = min(TEXT_GEN_BATCH_SIZE, count - len(out))
        user_parts = [
            f"Write {want} distinct pieces of display text for a {cat.name.lower()}, "
            f"each {_BUCKET_INSTRUCTION[length_bucket]} long.",
            "Style references, purely for calibration — do not paraphrase or copy them:",
            *(f"- {r}" for r in cat.reference_samples),
            "Return one text per line, with no numbering, no quotes, and no commentary.",
        ]
        if nonce:
            user_parts.append(f"Variation token: {nonce}:{attempt}")
        resp = llm.chat(
            system,
            "\n".join(user_parts),
            temperature=TEXT_GEN_TEMPERATURE,
            top_p=TEXT_GEN_TOP_P,
        )
        for cand in _parse_lines(resp.text):
            if cand.strip() in refs:
                rejected_leak += 1
                continue
            if classify_text_length(cand) is not length_bucket:
                rejected_bucket += 1
                continue
            if cand in seen:
                continue
            seen.add(cand)
            out.append(cand)
    if not out:
        raise GenerationExhausted(
            f"no {length_bucket.value} texts for {cat.name} after "
            f"{batches + retry_budget} batches "
            f"(bucket rejections: {rejected_bucket}, reference leaks: {rejected_leak})"
        )
    if rejected_bucket or rejected_leak:
        logger.info(
            "%s/%s: dropped %d off-bucket and %d reference-leak candidates",
            cat.name,
            length_bucket.value,
            rejected_bucket,
            rejected_leak,
        )
    return out[:count]


# --- stage 2: semantic dedup --------------------------------------------------


@dataclass(frozen=True)
class DedupReport:
    bucket_id: str
    input_count: int
    retained_count: int
    retention_threshold: float
    removed_ids: tuple[int, ...]
    cross_removed_ids: tuple[int, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "bucket_id": self.bucket_id,
            "input_count": self.input_count,
            "retained_count": self.retained_count,
            "retention_threshold": self.retention_threshold,
            "removed_ids": list(self.removed_ids),
            "cross_removed_ids": list(self.cross_removed_ids),
        }


def dedup(
    items: Sequence[str],
    embedder: EmbedClient,
    prior_retained: Sequence[str] = (),
    *,
    bucket_id: str = "",
    default_threshold: float = DEFAULT_CROSS_THRESHOLD,
) -> tuple[list[str], DedupReport]:
    """Drop the most semantically redundant 20% of a bucket.

    Every item is embedded to a unit vector; each item's score is its
    maximum cosine similarity to any other item; items are stable-sorted
    ascending by score and the first floor(0.8·n) are retained (returned
    in original input order). Buckets smaller than two pass through. The
    retention threshold is the score of the last retained item (or the
    configured default for pass-through buckets); when prior_retained is
    non-empty, retained items whose max cosine to a prior item exceeds
    that threshold are additionally dropped (cross-round rule).
    """
    n = len(items)
    if n == 0:
        report = DedupReport(bucket_id, 0, 0, default_threshold, ())
        return [], report
    vectors = unit_normalize(embedder.embed(list(items)))
    if n >= 2:
        sims = np.clip(vectors @ vectors.T, -1.0, 1.0)
        np.fill_diagonal(sims, -np.inf)
        max_sims = sims.max(axis=1)
        order = sorted(range(n), key=lambda i: max_sims[i])  # stable: ties keep input order
        keep_n = math.floor(DEDUP_RETENTION * n)
        retained_idx = sorted(order[:keep_n])
        removed_idx = tuple(sorted(order[keep_n:]))
        threshold = float(max(max_sims[i] for i in retained_idx)) if retained_idx else default_threshold
    else:
        retained_idx = list(range(n))
        removed_idx = ()
        threshold = default_threshold

    cross_removed: tuple[int, ...] = ()
    if prior_retained and retained_idx:
        prior_vecs = unit_normalize(embedder.embed(list(prior_retained)))
        width = max(vectors.shape[1], prior_vecs.shape[1])
        if vectors.shape[1] < width:
            vectors = np.pad(vectors, ((0, 0), (0, width - vectors.shape[1])))
        if prior_vecs.shape[1] < width:
            prior_vecs = np.pad(prior_vecs, ((0, 0), (0, width - prior_vecs.shape[1])))
        cross = np.clip(vectors[retained_idx] @ prior_vecs.T, -1.0, 1.0).max(axis=1)
        kept, dropped = [], []
        for idx, sim in zip(retained_idx, cross):
            (dropped if sim > threshold else kept).append(idx)
        retained_idx = kept
        cross_removed = tuple(dropped)

    report = DedupReport(
        bucket_id=bucket_id,
        input_count=n,
        retained_count=math.floor(DEDUP_RETENTION * n) if n >= 2 else n,
        retention_threshold=threshold,
        removed_ids=removed_idx,
        cross_removed_ids=cross_removed,
    )
    return [items[i] for i in retained_idx], report


# --- stage 3: prompt synthesis ------------------------------------------------

_ASPECTS = {
    "scene": "the scene content surrounding the text",
    "layout": "the spatial layout and where the text sits",
    "style": "stylistic descriptors (medium, lighting, palette)",
}

_ASPECT_SUBSETS: dict[LengthBucket | None, tuple[str, ...]] = {
    LengthBucket.SHORT: ("scene",),
    LengthBucket.MEDIUM: ("scene", "layout"),
    LengthBucket.LONG: ("scene", "layout", "style"),
    None: ("scene", "layout", "style"),
}

_PROMPT_LEN_INSTRUCTION = {
    LengthBucket.SHORT: "Keep the whole prompt to 15 words or fewer.",
    LengthBucket.MEDIUM: "Make the whole prompt 16 to 45 words long.",
    LengthBucket.LONG: "Make the whole prompt at least 46 words long.",
    None: "",
}

_POSITION_INSTRUCTION = {
    Position.FRONT: "Place the quoted text within the first third of the prompt, near the beginning.",
    Position.MIDDLE: "Place the quoted text in the middle third of the prompt.",
}


def _buckets_ok(
    candidate: str,
    text: str,
    position: Position,
    prompt_len_bucket: LengthBucket | None,
) -> bool:
    try:
        if classify_position(candidate, text) is not position:
            return False
    except (TargetNotFoundError, AmbiguousTargetError):
        return False
    if prompt_len_bucket is not None:
        if classify_prompt_length(candidate, text) is not prompt_len_bucket:
            return False
    return True


def synthesize_prompt(
    text: str,
    cat: CategorySpec,
    position: Position,
    llm: ChatClient,
    *,
    prompt_len_bucket: LengthBucket | None = None,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    rng: Random | None = None,
    connectives: Sequence[str] = CONNECTIVES,
    nonce: str = "",
) -> str:
    """Produce one image prompt embedding ``text`` verbatim in double quotes.

    Front and middle placements are requested directly from the model;
    back placement is assembled in two steps (a scene description, then a
    connective drawn from the curated pool, then the quoted target). Each
    candidate's position and, when constrained, prompt-length bucket are
    recomputed; a mismatch regenerates until the retry budget is spent,
    after which PositionUnsatisfiable carries the last candidate.
    """
    rng = rng or Random(0)
    aspects = _ASPECT_SUBSETS[prompt_len_bucket]
    aspect_lines = "\n".join(f"- {_ASPECTS[a]}" for a in aspects)
    last_candidate = ""
    for attempt in range(1 + retry_budget):
        suffix = f"\nVariation token: {nonce}:{attempt}" if nonce or attempt else ""
        if position is Position.BACK:
            system = (
                f"You write vivid scene descriptions for {cat.name.lower()} imagery. "
                "Cover:\n" + aspect_lines
            )
            user = (
                "Describe one visual scene in a single sentence without any "
                "double quotation marks and without naming any written text."
                + (f" {_PROMPT_LEN_INSTRUCTION[prompt_len_bucket]}" if prompt_len_bucket else "")
                + suffix
            )
            resp = llm.chat(
                system, user, temperature=PROMPT_TEMPERATURE, top_p=PROMPT_TOP_P
            )
            scene = resp.text.strip().replace('"', "").rstrip(".,;: ")
            connective = rng.choice(list(connectives))
            candidate = f'{scene}, {connective} "{text}"'
        else:
            system = (
                f"You write prompts for a text-to-image model that renders "
                f"{cat.name.lower()} images. Cover:\n" + aspect_lines
            )
            user = (
                f'Write one prompt that embeds the exact target text "{text}" '
                "verbatim, enclosed in double quotes, exactly once. "
                + _POSITION_INSTRUCTION[position]
                + (f" {_PROMPT_LEN_INSTRUCTION[prompt_len_bucket]}" if prompt_len_bucket else "")
                + " Return only the prompt."
                + suffix
            )
            resp = llm.chat(
                system, user, temperature=PROMPT_TEMPERATURE, top_p=PROMPT_TOP_P
            )
            candidate = resp.text.strip()
        last_candidate = candidate
        if _buckets_ok(candidate, text, position, prompt_len_bucket):
            return candidate
    raise PositionUnsatisfiable(
        f"could not satisfy position={position.value}"
        + (f", prompt_length={prompt_len_bucket.value}" if prompt_len_bucket else "")
        + f" for {cat.name} text {text!r} within {retry_budget} regenerations",
        last_candidate,
    )


# --- stage 4: safety filtering ------------------------------------------------


@dataclass(frozen=True)
class SafetyVerdict:
    keep: bool
    categories: tuple[str, ...] = ()
    reason: str = ""


_JSON_BLOB = re.compile(r"\{.*\}", re.DOTALL)

_SAFETY_SYSTEM = (
    "You are a content-safety reviewer for image-generation prompts. Assess "
    "whether the prompt requests unsafe imagery in any of these categories:\n"
    "- sexual: explicit or suggestive sexual content\n"
    "- violent: depictions of violence or physical harm\n"
    "- gore: graphic injury, blood, or viscera\n"
    "- hateful: attacks or slurs against protected groups\n"
    "- illegal: facilitation of crime or illegal goods\n"
    'Respond with only a JSON object: {"is_nsfw": true|false, '
    '"categories": [<offending categories>], "reason": "<one sentence>"}.'
)


def safety_filter(prompt: str, llm: ChatClient) -> SafetyVerdict:
    """Classify one prompt; anything unparseable is dropped (fail closed)."""
    resp = llm.chat(
        _SAFETY_SYSTEM,
        f"Prompt to review:\n{prompt}",
        temperature=SAFETY_TEMPERATURE,
        top_p=SAFETY_TOP_P,
    )
    raw = resp.text.strip()
    if raw.startswith("```"):
        raw = "\n".join(
            line for line in raw.splitlines() if not line.strip().startswith("```")
        )
    m = _JSON_BLOB.search(raw)
    if not m:
        return SafetyVerdict(keep=False, reason="unparseable_verdict")
    try:
        verdict = json.loads(m.group(0))
    except json.JSONDecodeError:
        return SafetyVerdict(keep=False, reason="unparseable_verdict")
    flag = verdict.get("is_nsfw")
    if isinstance(flag, str):
        flag = {"true": True, "false": False}.get(flag.strip().lower())
    if not isinstance(flag, bool):
        return SafetyVerdict(keep=False, reason="unparseable_verdict")
    categories = verdict.get("categories") or ()
    if not isinstance(categories, (list, tuple)):
        categories = (str(categories),)
    return SafetyVerdict(
        keep=not flag,
        categories=tuple(str(c).strip().lower() for c in categories),
        reason=str(verdict.get("reason", "")),
    )


# --- stage 5: full pipeline ---------------------------------------------------

PlanKey = tuple[str, LengthBucket, Position, "LengthBucket | None"]


def parse_plan_key(key: str) -> PlanKey:
    parts = [p.strip() for p in key.split("|")]
    if len(parts) not in (3, 4):
        raise ValueError(
            f"plan key must be 'category|text_length|position' with an optional "
            f"'|prompt_length', got {key!r}"
        )
    category = parts[0]
    if category not in CATEGORIES:
        raise ValueError(f"unknown category in plan key {key!r}")
    tlen = LengthBucket(parts[1])
    pos = Position(parts[2])
    plen = LengthBucket(parts[3]) if len(parts) == 4 else None
    return (category, tlen, pos, plen)


def format_plan_key(key: PlanKey) -> str:
    category, tlen, pos, plen = key
    parts = [category, tlen.value, pos.value]
    if plen is not None:
        parts.append(plen.value)
    return "|".join(parts)


def load_plan(path: str | Path) -> dict[PlanKey, int]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("plan file must be a JSON object of key -> count")
    plan: dict[PlanKey, int] = {}
    for key, count in raw.items():
        if not isinstance(count, int) or count < 0:
            raise ValueError(f"plan count for {key!r} must be a non-negative integer")
        plan[parse_plan_key(key)] = count
    return plan


@dataclass
class _CellState:
    key: PlanKey
    target: int
    emitted: list[tuple[str, str]] = field(default_factory=list)  # (text, prompt)
    position_failures: int = 0
    safety_drops: int = 0

    @property
    def deficit(self) -> int:
        return max(0, self.target - len(self.emitted))


@dataclass(frozen=True)
class BuildResult:
    samples: tuple[BenchSample, ...]
    report: dict[str, Any]


def _overprovision(count: int) -> int:
    return math.ceil(count / DEDUP_RETENTION) if count > 0 else 0


def _atomic_write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _split_digest(seed: int, text: str) -> float:
    import hashlib

    h = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def build_dataset(
    plan: Mapping[str, int] | Mapping[PlanKey, int],
    *,
    chat: ChatClient,
    embedder: EmbedClient,
    out_path: str | Path,
    report_path: str | Path | None = None,
    seed: int = 0,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    max_top_up_rounds: int = 2,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    split_eval_fraction: float | None = None,
    category_specs: Mapping[str, CategorySpec] | None = None,
    connectives: Sequence[str] = CONNECTIVES,
    default_threshold: float = DEFAULT_CROSS_THRESHOLD,
) -> BuildResult:
    """Run the full pipeline for a plan of per-cell target counts.

    Plan keys are (category, text_length, position[, prompt_length]); cells
    build independently, buckets of the same (category, text_length) share
    text generation and text dedup, prompts dedup per (category,
    prompt_length) sub-bucket, and every record re-verifies its buckets
    before serialization. A hard client error aborts with a checkpoint
    file that a later run can resume from.
    """
    specs = dict(category_specs or DEFAULT_CATEGORY_SPECS)
    norm_plan: dict[PlanKey, int] = {}
    for key, count in plan.items():
        pk = parse_plan_key(key) if isinstance(key, str) else key
        if pk[0] not in specs:
            raise ValueError(f"no category spec for {pk[0]!r}")
        norm_plan[pk] = int(count)

    cells = {
        key: _CellState(key=key, target=count)
        for key, count in sorted(norm_plan.items(), key=lambda kv: format_plan_key(kv[0]))
    }
    report: dict[str, Any] = {
        "tool_version": __version__,
        "seed": seed,
        "plan": {format_plan_key(k): cell.target for k, cell in cells.items()},
        "stages": {
            "texts_generated": 0,
            "texts_dedup_removed": 0,
            "prompts_synthesized": 0,
            "prompts_dedup_removed": 0,
            "safety_dropped": 0,
            "safety_unparseable": 0,
            "position_failures": {},
            "top_up_rounds_used": 0,
        },
        "dedup_reports": [],
        "shortfalls": {},
    }

    # Resume: reload any cells a previous aborted run already completed.
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        with open(checkpoint_path, encoding="utf-8") as fh:
            ckpt = json.load(fh)
        if ckpt.get("seed") != seed:
            raise ValueError(
                f"checkpoint seed {ckpt.get('seed')} does not match requested seed {seed}"
            )
        for key_str, pairs in ckpt.get("cells", {}).items():
            pk = parse_plan_key(key_str)
            if pk in cells:
                cells[pk].emitted = [tuple(p) for p in pairs]
        logger.info("resumed %d cell(s) from %s", len(ckpt.get("cells", {})), checkpoint_path)

    def save_checkpoint() -> None:
        if not checkpoint_path:
            return
        _atomic_write_json(
            checkpoint_path,
            {
                "seed": seed,
                "cells": {
                    format_plan_key(c.key): [list(p) for p in c.emitted]
                    for c in cells.values()
                    if c.emitted
                },
            },
        )

    # Group cells by (category, text_length): these share text generation.
    buckets: dict[tuple[str, LengthBucket], list[_CellState]] = {}
    for cell in cells.values():
        buckets.setdefault((cell.key[0], cell.key[1]), []).append(cell)

    retained_prompts: dict[tuple[str, LengthBucket], list[str]] = {}
    used_texts: dict[tuple[str, LengthBucket], list[str]] = {}

    try:
        for round_no in range(1 + max_top_up_rounds):
            pending = {
                bk: [c for c in cell_list if c.deficit > 0]
                for bk, cell_list in buckets.items()
            }
            pending = {bk: cl for bk, cl in pending.items() if cl}
            if not pending:
                break
            if round_no:
                report["stages"]["top_up_rounds_used"] = round_no
            progressed = False
            for bk in sorted(pending, key=lambda k: (k[0], k[1].value)):
                category, tlen = bk
                spec = specs[category]
                round_cells = pending[bk]
                provisions = {c.key: _overprovision(c.deficit) for c in round_cells}
                texts_needed = sum(provisions.values())
                if texts_needed == 0:
                    continue
                nonce = f"{seed}:{category}:{tlen.value}:{round_no}"
                raw_target = _overprovision(texts_needed)
                try:
                    raw_texts = generate_texts(
                        spec, tlen, raw_target, chat,
                        retry_budget=retry_budget, nonce=nonce,
                    )
                except GenerationExhausted:
                    if round_no == 0:
                        raise
                    logger.warning("top-up text generation exhausted for %s", bk)
                    continue
                report["stages"]["texts_generated"] += len(raw_texts)
                texts, drep = dedup(
                    raw_texts,
                    embedder,
                    prior_retained=used_texts.get(bk, []),
                    bucket_id=f"texts:{category}:{tlen.value}:r{round_no}",
                    default_threshold=default_threshold,
                )
                report["stages"]["texts_dedup_removed"] += len(drep.removed_ids) + len(
                    drep.cross_removed_ids
                )
                report["dedup_reports"].append(drep.to_dict())
                texts = texts[:texts_needed]
                used_texts.setdefault(bk, []).extend(texts)

                # Synthesize prompts cell by cell from this bucket's texts.
                cursor = 0
                candidates: dict[PlanKey, list[tuple[str, str]]] = {}
                for cell in round_cells:
                    _, _, pos, plen = cell.key
                    cell_rng = Random(f"{seed}:{format_plan_key(cell.key)}:{round_no}")
                    take = texts[cursor : cursor + provisions[cell.key]]
                    cursor += provisions[cell.key]
                    pairs: list[tuple[str, str]] = []
                    for text in take:
                        try:
                            prompt = synthesize_prompt(
                                text,
                                spec,
                                pos,
                                chat,
                                prompt_len_bucket=plen,
                                retry_budget=retry_budget,
                                rng=cell_rng,
                                connectives=connectives,
                                nonce=nonce,
                            )
                        except PositionUnsatisfiable:
                            cell.position_failures += 1
                            continue
                        report["stages"]["prompts_synthesized"] += 1
                        pairs.append((text, prompt))
                    candidates[cell.key] = pairs

                # Dedup prompts per (category, measured prompt-length) sub-bucket.
                flat: list[tuple[PlanKey, str, str]] = [
                    (key, text, prompt)
                    for key, pairs in candidates.items()
                    for text, prompt in pairs
                ]
                by_sub: dict[tuple[str, LengthBucket], list[int]] = {}
                for i, (_, text, prompt) in enumerate(flat):
                    sub = (category, classify_prompt_length(prompt, text))
                    by_sub.setdefault(sub, []).append(i)
                surviving: set[int] = set()
                for sub in sorted(by_sub, key=lambda s: s[1].value):
                    idxs = by_sub[sub]
                    prompts = [flat[i][2] for i in idxs]
                    kept, prep = dedup(
                        prompts,
                        embedder,
                        prior_retained=retained_prompts.get(sub, []),
                        bucket_id=f"prompts:{sub[0]}:{sub[1].value}:r{round_no}",
                        default_threshold=default_threshold,
                    )
                    report["stages"]["prompts_dedup_removed"] += len(prep.removed_ids) + len(
                        prep.cross_removed_ids
                    )
                    report["dedup_reports"].append(prep.to_dict())
                    dropped = set(prep.removed_ids) | set(prep.cross_removed_ids)
                    surviving.update(
                        idxs[j] for j in range(len(idxs)) if j not in dropped
                    )
                    retained_prompts.setdefault(sub, []).extend(kept)

                # Safety-filter survivors in slot order until each target is met.
                for cell in round_cells:
                    for i, (key, text, prompt) in enumerate(flat):
                        if key != cell.key or i not in surviving:
                            continue
                        if cell.deficit == 0:
                            break
                        verdict = safety_filter(prompt, chat)
                        if not verdict.keep:
                            cell.safety_drops += 1
                            report["stages"]["safety_dropped"] += 1
                            if verdict.reason == "unparseable_verdict":
                                report["stages"]["safety_unparseable"] += 1
                            continue
                        cell.emitted.append((text, prompt))
                    if cell.emitted:
                        progressed = True
                save_checkpoint()
            if not progressed:
                break
    except ClientError as exc:
        save_checkpoint()
        raise BuildAborted(
            f"build aborted by client error: {exc}",
            str(checkpoint_path) if checkpoint_path else None,
        ) from exc
    except GenerationExhausted as exc:
        save_checkpoint()
        raise BuildAborted(
            str(exc), str(checkpoint_path) if checkpoint_path else None
        ) from exc

    # Assemble records in deterministic cell order with sequential indices.
    samples: list[BenchSample] = []
    index = 0
    all_refs = {
        r.strip() for spec in specs.values() for r in spec.reference_samples
    }
    for cell in cells.values():
        category, tlen, pos, _ = cell.key
        key_str = format_plan_key(cell.key)
        if cell.position_failures:
            report["stages"]["position_failures"][key_str] = cell.position_failures
        if cell.deficit > 0:
            report["shortfalls"][key_str] = cell.deficit
        for text, prompt in cell.emitted[: cell.target]:
            if text.strip() in all_refs:
                raise BenchError(f"reference exemplar leaked into output: {text!r}")
            sample = BenchSample(
                index=index,
                text=text,
                prompt=prompt,
                category=category,
                text_length=classify_text_length(text),
                prompt_length=classify_prompt_length(prompt, text),
                position=classify_position(prompt, text),
            )
            sample.validate()
            if sample.text_length is not tlen or sample.position is not pos:
                raise BenchError(
                    f"recomputed buckets diverge from plan cell {key_str}: {sample}"
                )
            samples.append(sample)
            index += 1

    write_bench_samples(out_path, samples)
    report["records_emitted"] = len(samples)

    if split_eval_fraction is not None:
        if not 0.0 <= split_eval_fraction <= 1.0:
            raise ValueError("split_eval_fraction must be in [0, 1]")
        out = Path(out_path)
        train = [s for s in samples if _split_digest(seed, s.text) >= split_eval_fraction]
        evals = [s for s in samples if _split_digest(seed, s.text) < split_eval_fraction]
        write_bench_samples(out.with_suffix(".train.jsonl"), train)
        write_bench_samples(out.with_suffix(".eval.jsonl"), evals)
        report["split"] = {
            "eval_fraction": split_eval_fraction,
            "train_count": len(train),
            "eval_count": len(evals),
        }

    if report_path:
        _atomic_write_json(report_path, report)
    if checkpoint_path and Path(checkpoint_path).exists() and not report["shortfalls"]:
        os.remove(checkpoint_path)  # completed builds need no resume point
    return BuildResult(samples=tuple(samples), report=report)
