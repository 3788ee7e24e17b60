"""Group-relative advantage files and preference-pair files from rewards.

Rewarded samples are grouped by prompt, discarded samples are excluded on
the way in, and each group becomes either a list of normalized advantages
(group-relative policy optimization) or a single winner/loser preference
pair (direct preference optimization). Both exports are JSONL with a
header line recording run parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import __version__
from .core import (
    AlignmentExport,
    DpoPair,
    GrpoEntry,
    RewardedSample,
    dumps_record,
)

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6
DEFAULT_GROUP_SIZE = 8


class EmptyGroupError(ValueError):
    """A reward group with no valid members cannot be normalized."""


@dataclass(frozen=True)
class RewardGroup:
    """All valid rewarded samples that share one prompt."""

    prompt_index: int
    members: tuple[RewardedSample, ...]
    group_size_requested: int = DEFAULT_GROUP_SIZE

    def __post_init__(self) -> None:
        for m in self.members:
            if not m.valid:
                raise ValueError("reward groups admit valid samples only")
            if m.sample_index != self.prompt_index:
                raise ValueError(
                    f"member sample_index {m.sample_index} does not match "
                    f"group prompt_index {self.prompt_index}"
                )

    @property
    def rewards(self) -> list[float]:
        return [m.reward for m in self.members]  # type: ignore[misc]


def group_rewards(
    samples: Iterable[RewardedSample],
    *,
    group_size_requested: int = DEFAULT_GROUP_SIZE,
) -> list[RewardGroup]:
    """Partition valid samples by prompt index, preserving input order.

    Discarded samples are dropped here, so neither export path can see
    them. Groups are returned in order of first appearance.
    """
    buckets: dict[int, list[RewardedSample]] = {}
    dropped = 0
    for s in samples:
        if not s.valid:
            dropped += 1
            continue
        buckets.setdefault(s.sample_index, []).append(s)
    if dropped:
        logger.info("excluded %d discarded sample(s) from grouping", dropped)
    return [
        RewardGroup(
            prompt_index=idx,
            members=tuple(members),
            group_size_requested=group_size_requested,
        )
        for idx, members in buckets.items()
    ]


def grpo_advantages(
    group: RewardGroup, epsilon: float = DEFAULT_EPSILON
) -> list[GrpoEntry]:
    """Normalize the group's rewards into relative advantages.

    advantage_i = (R_i - mean) / (std_pop + epsilon), population standard
    deviation. A zero-variance group yields all-zero advantages: it carries
    no learning signal, but dropping it would bias the prompt distribution.
    Output order preserves member order.
    """
    if not group.members:
        raise EmptyGroupError(f"group {group.prompt_index} has no valid members")
    rewards = group.rewards
    n = len(rewards)
    if n == 1:
        logger.warning(
            "group %d has a single valid member; emitting advantage 0",
            group.prompt_index,
        )
        return [GrpoEntry(group.members[0].image_ref, rewards[0], 0.0)]
    if all(r == rewards[0] for r in rewards):
        # Zero-variance group: no learning signal, but dropping it would
        # bias the prompt distribution, so emit all-zero advantages.
        return [GrpoEntry(m.image_ref, r, 0.0) for m, r in zip(group.members, rewards)]
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    denom = var**0.5 + epsilon
    if denom == 0.0:  # spread below float underflow: treat as signal-free
        return [GrpoEntry(m.image_ref, r, 0.0) for m, r in zip(group.members, rewards)]
    return [
        GrpoEntry(m.image_ref, r, (r - mean) / denom)
        for m, r in zip(group.members, rewards)
    ]


def _extreme(members: Sequence[RewardedSample], *, largest: bool) -> RewardedSample:
    # Reward ties broken by lowest image_ref so exports are deterministic.
    key = (
        (lambda m: (-m.reward, m.image_ref))
        if largest
        else (lambda m: (m.reward, m.image_ref))
    )
    return min(members, key=key)


def dpo_pairs(group: RewardGroup, *, all_pairs: bool = False) -> list[DpoPair]:
    """Winner/loser pairs for one group; empty when no strict preference.

    Default emits at most the single extreme pair (maximal vs minimal
    reward). all_pairs emits every strictly-ordered combination, winners
    first by descending reward then image_ref, for ablation use.
    """
    if len(group.members) < 2:
        logger.info(
            "group %d has %d valid member(s); no pair emitted",
            group.prompt_index,
            len(group.members),
        )
        return []
    if all_pairs:
        ordered = sorted(group.members, key=lambda m: (-m.reward, m.image_ref))
        return [
            DpoPair(w.image_ref, l.image_ref, w.reward, l.reward)
            for i, w in enumerate(ordered)
            for l in ordered[i + 1 :]
            if w.reward > l.reward
        ]
    winner = _extreme(group.members, largest=True)
    loser = _extreme(group.members, largest=False)
    if not winner.reward > loser.reward:
        logger.info(
            "group %d rewards are all equal; no strict preference", group.prompt_index
        )
        return []
    return [DpoPair(winner.image_ref, loser.image_ref, winner.reward, loser.reward)]


# --- export files ------------------------------------------------------------


def _write_export(
    path: str, header: dict, rows: Iterable[AlignmentExport]
) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_record(header) + "\n")
        for row in rows:
            row.validate()
            fh.write(dumps_record(row.to_dict()) + "\n")
            count += 1
    return count


def write_grpo_export(
    path: str,
    samples: Iterable[RewardedSample],
    *,
    epsilon: float = DEFAULT_EPSILON,
    group_size_requested: int = DEFAULT_GROUP_SIZE,
) -> int:
    """Group, normalize, and write one GRPO JSONL export; returns row count."""
    groups = group_rewards(samples, group_size_requested=group_size_requested)
    header = {
        "mode": "grpo",
        "epsilon": epsilon,
        "tool_version": __version__,
        "group_size_requested": group_size_requested,
    }
    rows = (
        AlignmentExport(
            mode="grpo",
            prompt_index=g.prompt_index,
            entries=tuple(grpo_advantages(g, epsilon)),
        )
        for g in groups
    )
    return _write_export(path, header, rows)


def write_dpo_export(
    path: str,
    samples: Iterable[RewardedSample],
    *,
    all_pairs: bool = False,
    group_size_requested: int = DEFAULT_GROUP_SIZE,
) -> int:
    """Group, rank, and write one DPO JSONL export; returns pair count."""
    groups = group_rewards(samples, group_size_requested=group_size_requested)
    header = {
        "mode": "dpo",
        "all_pairs": all_pairs,
        "tool_version": __version__,
        "group_size_requested": group_size_requested,
    }
    rows = (
        AlignmentExport(mode="dpo", prompt_index=g.prompt_index, pair=p)
        for g in groups
        for p in dpo_pairs(g, all_pairs=all_pairs)
    )
    return _write_export(path, header, rows)
