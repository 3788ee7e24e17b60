"""Acceptance gate: one test per numbered release criterion.

Each test pins one core behavioural guarantee at its stated tolerance,
runs entirely on mock clients (no network), and prints a single PASS line
with the measured quantity so a verbose run reads as a checklist.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import random
import time

import pytest

from conftest import make_sample, oracle_advantages, oracle_levenshtein, truth_vlm
from test_bench import one_hot, scripted_model
from test_evaluate import _random_records
from textward.align import RewardGroup, dpo_pairs, group_rewards, grpo_advantages
from textward.bench import build_dataset, dedup, safety_filter
from textward.clients import MockChatClient, MockEmbedClient
from textward.core import (
    ALL_INDICATORS,
    DefectIndicators,
    LengthBucket,
    Position,
    RewardedSample,
    classify_position,
    classify_prompt_length,
    classify_text_length,
    find_quoted_target,
    normalize_text,
)
from textward.evaluate import STRAT_DIMENSIONS, ned, stratify, word_metrics
from textward.judge import (
    LEVELS,
    aggregate_reward,
    classify_pair,
    judge_many,
    oracle_judge,
)

ALPHABET = "abcdefgh"


def _word(rng: random.Random, lo: int = 2, hi: int = 6) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(lo, hi)))


def _group(rewards: list[float], idx: int = 0) -> RewardGroup:
    zero_bits = {name: 0 for name in ALL_INDICATORS}
    members = tuple(
        RewardedSample(
            sample_index=idx,
            image_ref=f"g{idx:05d}_{i:03d}.png",
            indicators=DefectIndicators.from_bits(zero_bits),
            reward=r,
            valid=True,
        )
        for i, r in enumerate(rewards)
    )
    return RewardGroup(prompt_index=idx, members=members)


def test_criterion_01_reward_formula_exact():
    """Reward equals (parsed - defects) / parsed for every indicator tri-state."""
    t0 = time.perf_counter()
    checked = 0
    for combo in itertools.product((None, 0, 1), repeat=len(ALL_INDICATORS)):
        n_parsed = sum(v is not None for v in combo)
        if n_parsed == 0:
            continue  # nothing parsed at any level: sample is discarded, not scored
        defects = sum(v for v in combo if v)
        expected = (n_parsed - defects) / n_parsed
        indicators = DefectIndicators.from_bits(dict(zip(ALL_INDICATORS, combo)))
        assert aggregate_reward(indicators) == expected
        checked += 1
    elapsed = time.perf_counter() - t0
    assert checked == 3 ** len(ALL_INDICATORS) - 1
    assert elapsed < 1.0
    print(f"\nCRITERION 1 PASS: reward exact on {checked} tri-states in {elapsed:.3f}s")


def _render_variant(rng: random.Random, words: list[str]) -> str:
    """A rendered string with a controlled mix of faithful and defective output."""
    roll = rng.random()
    if roll < 0.35:
        return " ".join(words)
    if roll < 0.50:
        return " ".join(words[1:])  # dropped first word
    if roll < 0.65:
        return " ".join(words + [_word(rng)])  # extra word
    if roll < 0.80:  # one substituted character
        i = rng.randrange(len(words))
        w = words[i]
        j = rng.randrange(len(w))
        repl = ALPHABET[(ALPHABET.index(w[j]) + 1) % len(ALPHABET)]
        return " ".join(words[:i] + [w[:j] + repl + w[j + 1 :]] + words[i + 1 :])
    if roll < 0.90:
        return ""  # nothing legible rendered
    return " ".join(rng.sample(words, len(words)))  # scrambled order


def test_criterion_02_unparseable_level_discard():
    """Samples with any wholly-unparseable judge level never reach training data."""
    rng = random.Random(2024)
    n_prompts, n_images = 100, 10
    pairs, rendered = [], {}
    for p in range(n_prompts):
        words = [_word(rng) for _ in range(rng.randint(2, 5))]
        sample = make_sample(p, " ".join(words))
        for v in range(n_images):
            ref = f"p{p:03d}_v{v}.png"
            rendered[ref] = _render_variant(rng, words)
            pairs.append((sample, ref))
    assert len(pairs) == 1000

    def garbled(ref: str, level: str) -> bool:
        return hashlib.sha256(f"{ref}:{level}".encode()).digest()[0] % 10 == 0

    vlm = truth_vlm(
        rendered,
        garble=lambda ref, level: (
            "the image looks broadly acceptable to me" if garbled(ref, level) else None
        ),
    )
    results = judge_many(pairs, vlm)

    n_garbled_responses = sum(garbled(ref, lvl) for _, ref in pairs for lvl in LEVELS)
    rate = n_garbled_responses / (len(pairs) * len(LEVELS))
    assert 0.06 < rate < 0.14  # the hash predicate lands near the target 10%

    expected_discards = {
        ref for _, ref in pairs if any(garbled(ref, lvl) for lvl in LEVELS)
    }
    assert {r.image_ref for r in results if not r.valid} == expected_discards
    for r in results:
        if r.valid:
            continue
        first_bad = next(lvl for lvl in LEVELS if garbled(r.image_ref, lvl))
        assert r.discard_reason == f"unparseable:{first_bad}"
        assert r.reward is None

    survivors: dict[int, list[RewardedSample]] = {}
    for r in results:
        if r.valid:
            survivors.setdefault(r.sample_index, []).append(r)

    groups = group_rewards(results)
    assert {g.prompt_index for g in groups} == set(survivors)
    violations = 0
    n_dpo = 0
    for g in groups:
        if {m.image_ref for m in g.members} != {
            s.image_ref for s in survivors[g.prompt_index]
        }:
            violations += 1
        want = oracle_advantages([m.reward for m in g.members], 1e-6)
        for entry, expected in zip(grpo_advantages(g), want):
            if abs(entry.advantage - expected) > 1e-12:
                violations += 1
        for pair in dpo_pairs(g):
            n_dpo += 1
            if pair.winner_image_ref in expected_discards:
                violations += 1
            if pair.loser_image_ref in expected_discards:
                violations += 1
            if not pair.winner_reward > pair.loser_reward:
                violations += 1
    assert violations == 0
    print(
        f"\nCRITERION 2 PASS: {len(pairs)} samples, {rate:.1%} responses garbled, "
        f"{len(expected_discards)} discarded, {n_dpo} preference pairs, 0 violations"
    )


def test_criterion_03_advantage_invariants():
    """Advantages are zero-sum, order-preserving, and match the worked example."""
    worked = grpo_advantages(_group([1.0, 0.5, 0.75, 0.75]))
    assert [e.advantage for e in worked] == pytest.approx(
        [1.41421, -1.41421, 0.0, 0.0], abs=1e-4
    )

    rng = random.Random(31415)
    worst_sum = 0.0
    violations = 0
    for g_idx in range(10_000):
        size = rng.randint(2, 16)
        rewards = [rng.random() for _ in range(size)]
        entries = grpo_advantages(_group(rewards, idx=g_idx))
        total = sum(e.advantage for e in entries)
        worst_sum = max(worst_sum, abs(total))
        if abs(total) > 1e-9:
            violations += 1
        advantages = [e.advantage for e in entries]
        for i in range(size):
            for j in range(i + 1, size):
                dr = rewards[i] - rewards[j]
                da = advantages[i] - advantages[j]
                if ((dr > 0) - (dr < 0)) != ((da > 0) - (da < 0)):
                    violations += 1
    assert violations == 0
    print(
        f"\nCRITERION 3 PASS: 10000 groups, worst |sum| = {worst_sum:.2e} <= 1e-9, "
        "ordering preserved, worked example within 1e-4"
    )


def test_criterion_04_preference_pair_contract():
    """Every preference pair is strictly ordered; tie groups emit nothing."""
    rng = random.Random(27182)
    lattice = [0.0, 0.25, 0.5, 0.75, 1.0]
    emitted = ties = violations = 0
    for g_idx in range(10_000):
        size = rng.randint(2, 16)
        rewards = [rng.choice(lattice) for _ in range(size)]
        group = _group(rewards, idx=g_idx)
        pairs = dpo_pairs(group)
        hi, lo = max(rewards), min(rewards)
        if hi == lo:
            ties += 1
            if pairs:
                violations += 1
            continue
        emitted += 1
        if len(pairs) != 1:
            violations += 1
        (pair,) = pairs
        if not pair.winner_reward > pair.loser_reward:
            violations += 1
        if (pair.winner_reward, pair.loser_reward) != (hi, lo):
            violations += 1
        # deterministic tie-break inside the extremes: lowest image ref wins
        want_w = min(m.image_ref for m in group.members if m.reward == hi)
        want_l = min(m.image_ref for m in group.members if m.reward == lo)
        if (pair.winner_image_ref, pair.loser_image_ref) != (want_w, want_l):
            violations += 1
        if g_idx % 10 == 0:  # exhaustive mode obeys the same strictness rule
            for p in dpo_pairs(group, all_pairs=True):
                if not p.winner_reward > p.loser_reward:
                    violations += 1
    assert violations == 0
    assert ties > 0 and emitted > 0
    print(
        f"\nCRITERION 4 PASS: 10000 groups ({ties} all-tie, {emitted} paired), "
        "0 contract violations"
    )


def test_criterion_05_edit_similarity_oracle():
    """Edit similarity matches a brute-force DP oracle exactly."""
    assert ned("kitten", "sitting") == pytest.approx(0.5714, abs=1e-4)
    rng = random.Random(16180)
    for _ in range(10_000):
        a = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 20)))
        b = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 20)))
        ref_n = " ".join(normalize_text(a))
        hyp_n = " ".join(normalize_text(b))
        want = 1.0 - oracle_levenshtein(ref_n, hyp_n) / max(len(ref_n), len(hyp_n), 1)
        assert ned(a, b) == want
    print("\nCRITERION 5 PASS: 10000 random pairs exact vs DP oracle; kitten/sitting = 0.5714")


def test_criterion_06_word_metric_protocol():
    """Hand fixtures are bit-exact and perfect accuracy implies perfect metrics."""
    assert word_metrics("open the door", "open a door") == (2 / 3, 2 / 3, 2 / 3, 0.0)
    assert word_metrics("", "") == (1.0, 1.0, 1.0, 1.0)
    assert word_metrics("hello world", "hello world") == (1.0, 1.0, 1.0, 1.0)
    assert word_metrics("la la land", "la land land")[:3] == (2 / 3, 2 / 3, 2 / 3)

    rng = random.Random(6180)
    perfect = 0
    for _ in range(2_000):
        words = [_word(rng) for _ in range(rng.randint(1, 8))]
        ref = " ".join(words)
        if rng.random() < 0.5:
            shuffled = words[:]
            rng.shuffle(shuffled)
            hyp = " ".join(shuffled)
        else:
            hyp = " ".join(words[1:] + [_word(rng)] * rng.randint(0, 2))
        precision, recall, f1, accuracy = word_metrics(ref, hyp)
        if accuracy == 1.0:
            assert (precision, recall, f1) == (1.0, 1.0, 1.0)
            perfect += 1
        else:
            assert sorted(normalize_text(ref)) != sorted(normalize_text(hyp))
    assert perfect > 500
    print(f"\nCRITERION 6 PASS: fixtures exact; accuracy=1 => all metrics 1 on {perfect} cases")


def _sub_char(rng: random.Random, w: str) -> str:
    j = rng.randrange(len(w))
    repl = rng.choice([c for c in ALPHABET if c != w[j]])
    return w[: j] + repl + w[j + 1 :]


def _corrupt_replace_glyph(rng, words):
    i = rng.randrange(len(words))
    return words[:i] + [_sub_char(rng, words[i])] + words[i + 1 :]


def _corrupt_drop_glyph(rng, words):
    i = rng.randrange(len(words))
    w = words[i]
    j = rng.randrange(len(w))
    return words[:i] + [w[:j] + w[j + 1 :]] + words[i + 1 :]


def _corrupt_add_glyph(rng, words):
    i = rng.randrange(len(words))
    w = words[i]
    j = rng.randrange(len(w) + 1)
    return words[:i] + [w[:j] + rng.choice(ALPHABET) + w[j:]] + words[i + 1 :]


def _corrupt_replace_word(rng, words):
    i = rng.randrange(len(words))
    w = words[i]
    if rng.random() < 0.5 and len(w) >= 2:
        # same length, at least two character positions changed
        j, k = rng.sample(range(len(w)), 2)
        new = list(w)
        new[j] = rng.choice([c for c in ALPHABET if c != w[j]])
        new[k] = rng.choice([c for c in ALPHABET if c != w[k]])
        new = "".join(new)
    else:
        # length differs by two or more
        new = w + "".join(rng.choice(ALPHABET) for _ in range(2 + rng.randint(0, 2)))
    return words[:i] + [new] + words[i + 1 :]


def _corrupt_drop_word(rng, words):
    i = rng.randrange(len(words))
    return words[:i] + words[i + 1 :]


def _corrupt_add_word(rng, words):
    i = rng.randint(0, len(words))
    return words[:i] + [_word(rng)] + words[i:]


def test_criterion_07_judge_corruption_classification():
    """Each synthetic corruption sets exactly its intended defect indicator."""
    generators = [
        ("replace_glyph", _corrupt_replace_glyph),
        ("drop_glyph", _corrupt_drop_glyph),
        ("add_glyph", _corrupt_add_glyph),
        ("replace_word", _corrupt_replace_word),
        ("drop_word", _corrupt_drop_word),
        ("add_word", _corrupt_add_word),
    ]
    rng = random.Random(3141)
    counts = {name: 0 for name, _ in generators}
    for n in range(1_000):
        name, corrupt = generators[n % len(generators)]
        words = [_word(rng) for _ in range(rng.randint(3, 8))]
        hyp_words = corrupt(rng, words)
        bits = oracle_judge(" ".join(words), " ".join(hyp_words)).bits()
        expected = {k: (1 if k == name else 0) for k in ALL_INDICATORS}
        assert bits == expected, (name, words, hyp_words, bits)
        counts[name] += 1

    # mutual exclusion: an aligned token pair maps to exactly one defect class
    for _ in range(500):
        a, b = _word(rng, 1, 8), _word(rng, 1, 8)
        if a == b:
            continue
        bits = oracle_judge(a, b).bits()
        assert sum(bits.values()) == 1
        assert bits[classify_pair(a, b)] == 1
    print(f"\nCRITERION 7 PASS: 1000 corruptions classified exactly ({counts})")


def test_criterion_08_bench_pipeline_determinism(tmp_path):
    """Full mock-client build: verified buckets, exact dedup, byte-identical rerun."""
    t0 = time.perf_counter()
    plan = {
        f"{cat}|{length}|{pos}": 2
        for cat in ("Poster", "Scene")
        for length in ("short", "medium", "long")
        for pos in ("front", "middle", "back")
    }
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / f"run_{tag}.jsonl"
        result = build_dataset(
            plan,
            chat=MockChatClient(scripted_model),
            embedder=MockEmbedClient(),
            out_path=out,
            checkpoint_path=tmp_path / f"run_{tag}.ckpt.json",
            seed=4,
        )
        runs.append((result, out))
    (res_a, out_a), (res_b, out_b) = runs

    records = [json.loads(line) for line in out_a.read_text().splitlines()]
    assert len(records) == len(res_a.samples) >= 30
    emitted_per_cell: dict[str, int] = {}
    for rec in records:
        find_quoted_target(rec["prompt"], rec["text"])  # raises if absent/duplicated
        assert classify_text_length(rec["text"]) is LengthBucket(rec["text_length"])
        assert classify_prompt_length(rec["prompt"], rec["text"]) is LengthBucket(
            rec["prompt_length"]
        )
        assert classify_position(rec["prompt"], rec["text"]) is Position(rec["position"])
        assert rec["class"] in ("Poster", "Scene")
        cell = f'{rec["class"]}|{rec["text_length"]}|{rec["position"]}'
        emitted_per_cell[cell] = emitted_per_cell.get(cell, 0) + 1
    shortfalls = res_a.report["shortfalls"]
    for cell, target in plan.items():
        assert emitted_per_cell.get(cell, 0) + shortfalls.get(cell, 0) == target

    # ten-item duplicate fixture: floor(0.8 * 10) = 8 kept, both clones dropped
    texts = [f"text variant {i}" for i in range(10)]
    fixed = {t: one_hot(i) for i, t in enumerate(texts[:8])}
    fixed[texts[8]] = one_hot(0)
    fixed[texts[9]] = one_hot(1)
    retained, report = dedup(texts, MockEmbedClient(fixed), bucket_id="fixture")
    assert retained == texts[:8]
    assert report.retained_count == 8
    assert set(report.removed_ids) == {8, 9}

    assert out_a.read_bytes() == out_b.read_bytes()
    assert res_a.report == res_b.report
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(
        f"\nCRITERION 8 PASS: {len(records)} records verified, dedup fixture exact, "
        f"rerun byte-identical, {elapsed:.2f}s < 10s"
    )


def test_criterion_09_safety_fail_closed():
    """Unparseable safety verdicts never let a prompt through."""

    def garbled(i: int) -> bool:  # deterministic ~20% of prompts
        return hashlib.sha256(f"verdict:{i}".encode()).digest()[0] < 51

    def responder(system: str, user: str) -> str:
        i = int(user.rsplit("#", 1)[1])
        if garbled(i):
            return "I think this prompt is probably fine?"
        if i % 7 == 0:
            return '{"is_nsfw": true, "categories": ["violent"], "reason": "weapon scene"}'
        return '{"is_nsfw": false, "categories": [], "reason": "benign"}'

    llm = MockChatClient(responder)
    leaks = n_garbled = 0
    for i in range(500):
        verdict = safety_filter(f"A storefront scene variant #{i}", llm)
        if garbled(i):
            n_garbled += 1
            if verdict.keep:
                leaks += 1
            assert verdict.reason == "unparseable_verdict"
        elif i % 7 == 0:
            assert not verdict.keep and "violent" in verdict.categories
        else:
            assert verdict.keep
    assert leaks == 0
    assert 0.15 < n_garbled / 500 < 0.25
    print(f"\nCRITERION 9 PASS: {n_garbled}/500 garbled verdicts, 0 leaks (fail closed)")


def test_criterion_10_stratified_recombination():
    """Group means recombine to the overall mean within 1e-9 on every dimension."""
    rng = random.Random(8128)
    records = _random_records(rng, 500)
    worst = 0.0
    for dim in STRAT_DIMENSIONS:
        summaries = stratify(records, dim)
        overall = summaries[-1]
        assert (overall.dimension, overall.value) == ("overall", "overall")
        groups = summaries[:-1]
        assert len(groups) >= 2
        assert sum(g.n for g in groups) == overall.n == len(records)
        for metric in ("ned", "precision", "recall", "f1", "accuracy"):
            combined = sum(g.n * getattr(g, f"mean_{metric}") for g in groups)
            delta = abs(combined - overall.n * getattr(overall, f"mean_{metric}"))
            worst = max(worst, delta)
            assert delta <= 1e-9
    print(
        f"\nCRITERION 10 PASS: recombination identity on {len(records)} records x "
        f"{len(STRAT_DIMENSIONS)} dimensions, worst delta {worst:.2e} <= 1e-9"
    )


def test_criterion_11_study_round_trip(tmp_path):
    """Service-level twin of the browser flow: 20 votes, replayable, balanced sides.

    The browser client itself lives in the frontend package and is tested
    there; this exercises the same HTTP contract end to end.
    """
    from fastapi.testclient import TestClient

    from textward.study import QUESTIONS, StudyStore, create_app, tally_from_log

    models = ("model-x", "model-y")
    manifest = {
        "entries": [
            {
                "prompt_index": p,
                "model_tag": m,
                "image_ref": f"{p:02d}{chr(ord('a') + i)}.png",
            }
            for p in range(5)
            for i, m in enumerate(models)
        ],
        "prompts": {str(p): f"target text {p}" for p in range(5)},
        "seed": 11,
    }
    log = tmp_path / "votes.jsonl"
    store = StudyStore(log, clock=lambda: 99.0)
    store.load(manifest)
    client = TestClient(create_app(store))

    choices = itertools.cycle(("left", "right", "tie"))
    votes_sent = 0
    for rater in ("r1", "r2"):
        while True:
            payload = client.get("/api/next", params={"rater": rater}).json()
            if payload["done"]:
                break
            assert "model" not in json.dumps(payload)  # blind: no model tags leak
            for question in QUESTIONS:
                resp = client.post(
                    "/api/vote",
                    json={
                        "rater": rater,
                        "comparison_id": payload["comparison_id"],
                        "question": question,
                        "choice": next(choices),
                    },
                )
                assert resp.status_code == 200
                votes_sent += 1
    assert votes_sent == 20
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 20

    live = store.tally()
    replayed = StudyStore(log, clock=lambda: 99.0)
    replayed.load(manifest)
    assert replayed.tally() == live
    assert {**tally_from_log(rows), "config": live["config"]} == live

    balance_store = StudyStore(tmp_path / "balance.jsonl")
    balance_store.load(manifest)
    for k in range(200):
        balance_store.next_comparison(f"rater{k:03d}")
    balance = balance_store.side_balance()
    assert balance["serves"] == 200
    left_x = balance["left_counts"].get("model-x", 0)
    assert 80 <= left_x <= 120  # 40-60% of 200 serves
    print(
        f"\nCRITERION 11 PASS: 20 votes persisted, replay reproduces tally, "
        f"left-side share {left_x / 200:.0%} within 40-60%"
    )
