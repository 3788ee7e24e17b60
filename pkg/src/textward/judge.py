"""Hierarchical VLM reward: prompts, verdict parsing, aggregation, discard.

Rendering defects are judged at three levels, each by an independent VLM
call restricted to its own failure modes:

* global -- is any readable text present; are glyph contours intact
* word   -- dropped / extraneous / substituted whole words
* glyph  -- missing / inserted characters and single-character swaps

Each call must answer in a fixed-field ``name: 0|1`` format. Per-indicator
parse misses shrink the valid count; a level whose response yields zero
indicators discards the whole sample so noisy feedback never reaches the
optimizer. A deterministic text-only oracle judge lives here too, used by
the test suites and by the ``--oracle-from-ocr`` CLI path.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .core import (
    ALL_INDICATORS,
    INDICATORS_BY_LEVEL,
    BenchSample,
    DefectIndicators,
    RewardedSample,
    normalize_text,
)
from .clients import ClientError, VlmClient

LEVELS: tuple[str, ...] = ("global", "word", "glyph")

JUDGE_TEMPERATURE = 0.0
JUDGE_MAX_TOKENS = 512


class NoParsedIndicatorsError(ValueError):
    """aggregate_reward called with zero parsed indicators."""


class ParseStatus(str, Enum):
    FULL = "full"
    PARTIAL = "partial"
    FAILED = "failed"


@dataclass(frozen=True)
class JudgeVerdict:
    level: str
    raw_response: str
    parsed_bits: dict[str, int]
    parse_status: ParseStatus


_FORMAT_RULES = (
    "Answer with exactly {n} lines and nothing else, one line per "
    "indicator, each in the form `{example}: 0` or `{example}: 1`. "
    "Do not explain."
)

_LEVEL_DEFINITIONS = {
    "global": (
        "You judge only the overall presence and shape of rendered text.\n"
        "- no_text: 1 if the image contains no recognizable text at all, else 0.\n"
        "- misshape: 1 if characters of the correct identity show severely "
        "distorted contours (broken strokes, imbalanced proportions, warped "
        "baselines), else 0.\n"
        "Ignore whether the text content matches the reference; judge presence "
        "and contour quality only."
    ),
    "word": (
        "You judge only whole-unit fidelity of the rendered text. Read the text "
        "in the image, normalize case, ignore punctuation, and align it "
        "unit-by-unit against the reference text.\n"
        "- drop_word: 1 if any reference unit is missing from the image, else 0.\n"
        "- add_word: 1 if the image shows any extraneous unit not in the "
        "reference, else 0.\n"
        "- replace_word: 1 if any intended unit is rendered as a different one, "
        "typically two or more character errors at once, else 0."
    ),
    "glyph": (
        "You judge only character-level precision. Compare each rendered unit "
        "with its counterpart in the reference text.\n"
        "- drop_glyph: 1 if characters are missing while the surviving "
        "characters still read, in order, as part of the intended unit, else 0.\n"
        "- add_glyph: 1 if extra characters are inserted while the intended "
        "characters still appear in order, else 0.\n"
        "- replace_glyph: 1 if a unit keeps its exact length but exactly one "
        "character differs, else 0."
    ),
}


def build_judge_prompt(level: str, reference_text: str) -> tuple[str, str]:
    """System and user messages for one level's defect inspection.

    The returned prompt names exactly the indicators of the requested
    level, so a parser can recover the fixed-field response unambiguously.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown judge level: {level!r}")
    names = INDICATORS_BY_LEVEL[level]
    system = (
        "You are a meticulous inspector of text rendered inside generated "
        "images. Apply only the defect definitions you are given; do not "
        "judge anything else about the image.\n\n"
        + _LEVEL_DEFINITIONS[level]
        + "\n\n"
        + _FORMAT_RULES.format(n=len(names), example=names[0])
    )
    user = (
        f'Reference text: "{reference_text}"\n'
        "Inspect the attached image and report each indicator."
    )
    return system, user


_FIELD_LINE = re.compile(
    r"^\s*(?:[-*]\s*)?\**`?(?P<name>[A-Za-z_ ]+?)`?\**\s*[:=]\s*`?(?P<value>[01])`?\s*[.,]?\s*$"
)


def parse_verdict(level: str, raw: str) -> JudgeVerdict:
    """Recover the level's fixed-field bits from a raw model response.

    Tolerates markdown fences, bullets, bold markers, and case variation.
    The first occurrence of a field wins. Failure is encoded in
    parse_status, never raised.
    """
    names = INDICATORS_BY_LEVEL[level]
    bits: dict[str, int] = {}
    for line in raw.splitlines():
        if line.strip().startswith("```"):
            continue
        m = _FIELD_LINE.match(line)
        if not m:
            continue
        name = m.group("name").strip().lower().replace(" ", "_")
        if name in names and name not in bits:
            bits[name] = int(m.group("value"))
    if len(bits) == len(names):
        status = ParseStatus.FULL
    elif bits:
        status = ParseStatus.PARTIAL
    else:
        status = ParseStatus.FAILED
    return JudgeVerdict(level=level, raw_response=raw, parsed_bits=bits, parse_status=status)


def aggregate_reward(indicators: DefectIndicators) -> float:
    """Fraction of parsed indicators reporting no defect."""
    n_valid = indicators.n_valid
    if n_valid == 0:
        raise NoParsedIndicatorsError("no indicators were parsed for this sample")
    return (n_valid - indicators.defect_sum) / n_valid


def judge_sample(
    sample: BenchSample,
    image_ref: str,
    vlm: VlmClient,
    *,
    concurrent: bool = True,
) -> RewardedSample:
    """Issue the three level calls for one generated image and aggregate.

    A level whose response parses to zero indicators, or whose call fails
    on transport after retries, marks the sample invalid with no reward;
    such samples are excluded downstream from group normalization and
    pair construction.
    """

    def run_level(level: str) -> JudgeVerdict | ClientError:
        system, user = build_judge_prompt(level, sample.text)
        try:
            resp = vlm.chat_with_image(
                system,
                user,
                image_ref,
                temperature=JUDGE_TEMPERATURE,
                max_tokens=JUDGE_MAX_TOKENS,
            )
        except ClientError as exc:
            return exc
        return parse_verdict(level, resp.text)

    if concurrent:
        with ThreadPoolExecutor(max_workers=len(LEVELS)) as pool:
            outcomes = dict(zip(LEVELS, pool.map(run_level, LEVELS)))
    else:
        outcomes = {level: run_level(level) for level in LEVELS}

    bits: dict[str, int | None] = {name: None for name in ALL_INDICATORS}
    discard_reason: str | None = None
    for level in LEVELS:  # fixed order keeps the reported reason deterministic
        outcome = outcomes[level]
        if isinstance(outcome, ClientError):
            if discard_reason is None:
                discard_reason = f"transport:{level}"
            continue
        bits.update(outcome.parsed_bits)
        if outcome.parse_status is ParseStatus.FAILED and discard_reason is None:
            discard_reason = f"unparseable:{level}"

    indicators = DefectIndicators.from_bits(bits)
    if discard_reason is not None:
        return RewardedSample(
            sample_index=sample.index,
            image_ref=image_ref,
            indicators=indicators,
            reward=None,
            valid=False,
            discard_reason=discard_reason,
        )
    return RewardedSample(
        sample_index=sample.index,
        image_ref=image_ref,
        indicators=indicators,
        reward=aggregate_reward(indicators),
        valid=True,
    )


def judge_many(
    pairs: Sequence[tuple[BenchSample, str]],
    vlm: VlmClient,
    *,
    max_workers: int = 8,
) -> list[RewardedSample]:
    """Judge many (sample, image_ref) pairs; output order matches input."""
    if max_workers <= 1 or len(pairs) <= 1:
        return [judge_sample(s, ref, vlm, concurrent=False) for s, ref in pairs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda p: judge_sample(p[0], p[1], vlm), pairs))


# --- deterministic oracle ----------------------------------------------------


def is_subsequence(short: str, long: str) -> bool:
    it = iter(long)
    return all(ch in it for ch in short)


def classify_pair(ref_token: str, hyp_token: str) -> str:
    """Classify one substituted token pair as exactly one defect kind.

    A pair differing in two or more characters, or in length by two or
    more, is a whole-unit replacement. Otherwise: equal length with one
    differing character is a single-character swap; a one-character gap
    where the shorter side is a strict subsequence of the longer is a
    character drop (rendered side shorter) or insertion (rendered side
    longer).
    """
    if ref_token == hyp_token:
        raise ValueError("classify_pair expects a differing token pair")
    la, lb = len(ref_token), len(hyp_token)
    if abs(la - lb) >= 2:
        return "replace_word"
    if la == lb:
        diffs = sum(1 for x, y in zip(ref_token, hyp_token) if x != y)
        return "replace_glyph" if diffs == 1 else "replace_word"
    if la > lb:
        return "drop_glyph" if is_subsequence(hyp_token, ref_token) else "replace_word"
    return "add_glyph" if is_subsequence(ref_token, hyp_token) else "replace_word"


def align_tokens(
    ref_tokens: Sequence[str], hyp_tokens: Sequence[str]
) -> list[tuple[str, int, int]]:
    """Minimal edit script over tokens as (op, ref_idx, hyp_idx) triples.

    op is one of match/sub/del/ins; unused indices are -1. Unit costs,
    ties broken preferring an aligned pair over an indel pair.
    """
    n, m = len(ref_tokens), len(hyp_tokens)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref_tokens[i - 1] == hyp_tokens[j - 1] else 1
            dp[i][j] = min(dp[i - 1][j - 1] + cost, dp[i - 1][j] + 1, dp[i][j - 1] + 1)
    ops: list[tuple[str, int, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref_tokens[i - 1] == hyp_tokens[j - 1] else 1
            if dp[i][j] == dp[i - 1][j - 1] + cost:
                ops.append(("match" if cost == 0 else "sub", i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            ops.append(("del", i - 1, -1))
            i -= 1
        else:
            ops.append(("ins", -1, j - 1))
            j -= 1
    ops.reverse()
    return ops


def oracle_judge(reference_text: str, rendered_text: str) -> DefectIndicators:
    """Compute all indicators deterministically from known rendered text.

    Both strings are normalized, token sequences are aligned by minimal
    edit script, and each aligned operation feeds exactly one indicator.
    Contour quality is not decidable from text, so misshape is pinned to 0.
    """
    ref_tokens = normalize_text(reference_text)
    hyp_tokens = normalize_text(rendered_text)
    bits = {name: 0 for name in ALL_INDICATORS}
    bits["no_text"] = 1 if not hyp_tokens else 0
    for op, i, j in align_tokens(ref_tokens, hyp_tokens):
        if op == "del":
            bits["drop_word"] = 1
        elif op == "ins":
            bits["add_word"] = 1
        elif op == "sub":
            bits[classify_pair(ref_tokens[i], hyp_tokens[j])] = 1
    return DefectIndicators.from_bits(bits)


def oracle_judge_sample(
    sample: BenchSample, image_ref: str, rendered_text: str
) -> RewardedSample:
    """Oracle path: score a sample from already-extracted rendered text."""
    indicators = oracle_judge(sample.text, rendered_text)
    return RewardedSample(
        sample_index=sample.index,
        image_ref=image_ref,
        indicators=indicators,
        reward=aggregate_reward(indicators),
        valid=True,
    )


def write_rewards(path: str, rewards: Iterable[RewardedSample]) -> int:
    from .core import write_jsonl

    return write_jsonl(path, (r.to_dict() for r in rewards))


def load_rewards(path: str) -> list[RewardedSample]:
    from .core import read_jsonl

    return [RewardedSample.from_dict(d) for d in read_jsonl(path)]
