"""Shared fixtures and independent oracles used across the test suites.

The oracles here are deliberately naive re-implementations (full-matrix
dynamic programming, direct arithmetic) kept separate from the package so
the tests compare two independently written computations.
"""

from __future__ import annotations

import math
import random
import re

import pytest

from textward.clients import MockVlmClient
from textward.core import (
    INDICATORS_BY_LEVEL,
    BenchSample,
    classify_position,
    classify_prompt_length,
    classify_text_length,
)
from textward.judge import oracle_judge


def oracle_levenshtein(a: str, b: str) -> int:
    """Full-matrix Wagner-Fischer edit distance, written independently of
    the package kernel (no row reuse, no vectorization)."""
    n, m = len(a), len(b)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            dist[i][j] = min(
                dist[i - 1][j] + 1,
                dist[i][j - 1] + 1,
                dist[i - 1][j - 1] + cost,
            )
    return dist[n][m]


def oracle_advantages(rewards: list[float], epsilon: float) -> list[float]:
    """Direct arithmetic for group-relative advantages."""
    n = len(rewards)
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    if var == 0.0:
        return [0.0] * n
    std = math.sqrt(var)
    return [(r - mean) / (std + epsilon) for r in rewards]


def make_sample(
    index: int,
    text: str,
    prompt: str | None = None,
    category: str = "Poster",
) -> BenchSample:
    """Construct a schema-consistent benchmark sample from text + prompt."""
    if prompt is None:
        prompt = f'A clean poster on a brick wall displaying the text "{text}" in bold type'
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
    return sample


def random_token(rng: random.Random, length: int | None = None) -> str:
    length = length or rng.randint(2, 8)
    return "".join(rng.choice("abcdefgh") for _ in range(length))


_REFERENCE_RE = re.compile(r'Reference text: "(.*)"\n', re.DOTALL)


def detect_level(system: str) -> str:
    """Identify which inspection level a judge prompt belongs to, purely
    from the indicator field names it asks about."""
    matches = [
        level
        for level, names in INDICATORS_BY_LEVEL.items()
        if all(name in system for name in names)
    ]
    assert len(matches) == 1, f"prompt names indicators of {matches or 'no'} levels"
    return matches[0]


def truth_vlm(
    rendered_by_ref: dict[str, str],
    *,
    garble: "callable | None" = None,
    fail_refs: tuple[str, ...] = (),
) -> MockVlmClient:
    """A mock judge that answers from known rendered text.

    It recovers the level from the prompt's field names and the reference
    text from the user message, runs the deterministic text oracle against
    the fixture's rendered text, and formats a well-formed fixed-field
    response. ``garble(ref, level)`` may return replacement raw text to
    simulate an unparseable response for that (image, level) call.
    """

    def responder(system: str, user: str, image_ref: str) -> str:
        level = detect_level(system)
        if garble is not None:
            garbled = garble(image_ref, level)
            if garbled is not None:
                return garbled
        m = _REFERENCE_RE.search(user)
        assert m, "judge user message must quote the reference text"
        bits = oracle_judge(m.group(1), rendered_by_ref[image_ref]).bits()
        return "\n".join(f"{name}: {bits[name]}" for name in INDICATORS_BY_LEVEL[level])

    return MockVlmClient(responder, fail_refs=fail_refs)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240811)
