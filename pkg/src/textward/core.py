"""Shared domain types, bucket classification, and JSONL serialization.

Every other module builds on the vocabulary defined here: benchmark
records, defect indicators, rewarded samples, alignment exports, and
evaluation records. All types are immutable values; there is no interior
mutation, so they are safe to share across threads and workers.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, fields as dataclass_fields
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping

CATEGORIES: tuple[str, ...] = (
    "Poster",
    "Advertisement",
    "Cover",
    "Logo",
    "Sticker",
    "Handwriting",
    "Scene",
    "Basic",
    "Artistic",
    "Academic",
)

GLOBAL_INDICATORS: tuple[str, ...] = ("no_text", "misshape")
WORD_INDICATORS: tuple[str, ...] = ("drop_word", "add_word", "replace_word")
GLYPH_INDICATORS: tuple[str, ...] = ("drop_glyph", "add_glyph", "replace_glyph")
ALL_INDICATORS: tuple[str, ...] = GLOBAL_INDICATORS + WORD_INDICATORS + GLYPH_INDICATORS

INDICATORS_BY_LEVEL: dict[str, tuple[str, ...]] = {
    "global": GLOBAL_INDICATORS,
    "word": WORD_INDICATORS,
    "glyph": GLYPH_INDICATORS,
}


class LengthBucket(str, Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"


class Position(str, Enum):
    FRONT = "front"
    MIDDLE = "middle"
    BACK = "back"


class EmptyTextError(ValueError):
    """Target text is empty after trimming."""


class TargetNotFoundError(ValueError):
    """The double-quoted target text does not occur in the prompt."""


class AmbiguousTargetError(ValueError):
    """The double-quoted target text occurs more than once in the prompt."""


class SchemaError(ValueError):
    """A JSONL record does not match the expected schema."""


def word_count(s: str) -> int:
    return len(s.split())


def classify_text_length(text: str) -> LengthBucket:
    """Bucket a target text by whitespace-delimited word count.

    short <= 5 words, medium 6..15, long >= 16. A word is a maximal
    whitespace-delimited token after trimming.
    """
    n = word_count(text)
    if n == 0:
        raise EmptyTextError("target text is empty after trimming")
    if n <= 5:
        return LengthBucket.SHORT
    if n <= 15:
        return LengthBucket.MEDIUM
    return LengthBucket.LONG


def find_quoted_target(prompt: str, text: str) -> int:
    """Index of the opening quote of the unique occurrence of ``"text"``.

    Raises TargetNotFoundError / AmbiguousTargetError when the quoted
    target is absent or occurs more than once.
    """
    quoted = f'"{text}"'
    first = prompt.find(quoted)
    if first < 0:
        raise TargetNotFoundError(f"quoted target not found in prompt: {text!r}")
    if prompt.find(quoted, first + 1) >= 0:
        raise AmbiguousTargetError(f"quoted target occurs more than once: {text!r}")
    return first


def strip_quoted_target(prompt: str, text: str) -> str:
    """Prompt with the unique quoted target removed."""
    idx = find_quoted_target(prompt, text)
    quoted_len = len(text) + 2
    return prompt[:idx] + prompt[idx + quoted_len:]


def classify_prompt_length(prompt: str, text: str) -> LengthBucket:
    """Bucket a prompt by word count excluding the quoted target text.

    short <= 15 words, medium 16..45, long >= 46.
    """
    n = word_count(strip_quoted_target(prompt, text))
    if n <= 15:
        return LengthBucket.SHORT
    if n <= 45:
        return LengthBucket.MEDIUM
    return LengthBucket.LONG


def classify_position(prompt: str, text: str) -> Position:
    """Bucket the placement of the quoted target within the prompt.

    The relative offset r is the character index of the opening quote
    divided by the total prompt length: front r < 1/3, middle
    1/3 <= r < 2/3, back r >= 2/3.
    """
    idx = find_quoted_target(prompt, text)
    r = idx / len(prompt)
    if r < 1 / 3:
        return Position.FRONT
    if r < 2 / 3:
        return Position.MIDDLE
    return Position.BACK


def normalize_text(raw: str) -> list[str]:
    """Case-fold, strip Unicode punctuation, and whitespace-tokenize.

    Intra-word punctuation is deleted rather than replaced by a space, so
    "don't-stop" becomes the single token "dontstop". Idempotent: applying
    the normalization to its own joined output changes nothing.
    """
    folded = raw.casefold()
    stripped = "".join(
        ch for ch in folded if not unicodedata.category(ch).startswith("P")
    )
    return stripped.split()


# --- benchmark records -----------------------------------------------------

_BENCH_FIELDS = ("index", "text", "prompt", "class", "text_length", "prompt_length", "position")


@dataclass(frozen=True)
class BenchSample:
    """One benchmark record: a target text embedded in a full prompt.

    ``category`` is serialized under the JSON key ``class``.
    """

    index: int
    text: str
    prompt: str
    category: str
    text_length: LengthBucket
    prompt_length: LengthBucket
    position: Position

    def validate(self) -> None:
        """Recompute every bucket and check it against the stored value."""
        if self.category not in CATEGORIES:
            raise SchemaError(f"unknown category: {self.category!r}")
        if not isinstance(self.index, int) or isinstance(self.index, bool):
            raise SchemaError(f"index must be an integer, got {self.index!r}")
        # find_quoted_target raises if the target is absent or duplicated
        find_quoted_target(self.prompt, self.text)
        if classify_text_length(self.text) is not self.text_length:
            raise SchemaError(f"text_length mismatch for sample {self.index}")
        if classify_prompt_length(self.prompt, self.text) is not self.prompt_length:
            raise SchemaError(f"prompt_length mismatch for sample {self.index}")
        if classify_position(self.prompt, self.text) is not self.position:
            raise SchemaError(f"position mismatch for sample {self.index}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "text": self.text,
            "prompt": self.prompt,
            "class": self.category,
            "text_length": self.text_length.value,
            "prompt_length": self.prompt_length.value,
            "position": self.position.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BenchSample":
        missing = [k for k in _BENCH_FIELDS if k not in d]
        extra = [k for k in d if k not in _BENCH_FIELDS]
        if missing or extra:
            raise SchemaError(f"bad record fields: missing={missing} extra={extra}")
        try:
            return cls(
                index=d["index"],
                text=d["text"],
                prompt=d["prompt"],
                category=d["class"],
                text_length=LengthBucket(d["text_length"]),
                prompt_length=LengthBucket(d["prompt_length"]),
                position=Position(d["position"]),
            )
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc


# --- defect indicators -----------------------------------------------------


@dataclass(frozen=True)
class DefectIndicators:
    """The eight binary defect bits; None marks an unparsed indicator."""

    no_text: int | None = None
    misshape: int | None = None
    drop_word: int | None = None
    add_word: int | None = None
    replace_word: int | None = None
    drop_glyph: int | None = None
    add_glyph: int | None = None
    replace_glyph: int | None = None

    def __post_init__(self) -> None:
        for name in ALL_INDICATORS:
            v = getattr(self, name)
            if v not in (0, 1, None):
                raise ValueError(f"indicator {name} must be 0, 1, or None, got {v!r}")

    def bits(self) -> dict[str, int | None]:
        return {name: getattr(self, name) for name in ALL_INDICATORS}

    @property
    def n_valid(self) -> int:
        """Count of indicators that were successfully parsed."""
        return sum(1 for name in ALL_INDICATORS if getattr(self, name) is not None)

    @property
    def defect_sum(self) -> int:
        return sum(getattr(self, name) or 0 for name in ALL_INDICATORS)

    @classmethod
    def from_bits(cls, bits: Mapping[str, int | None]) -> "DefectIndicators":
        unknown = [k for k in bits if k not in ALL_INDICATORS]
        if unknown:
            raise ValueError(f"unknown indicator names: {unknown}")
        return cls(**{name: bits.get(name) for name in ALL_INDICATORS})


# --- rewarded samples ------------------------------------------------------


@dataclass(frozen=True)
class RewardedSample:
    """A generated image joined with its scalar reward and validity flag."""

    sample_index: int
    image_ref: str
    indicators: DefectIndicators
    reward: float | None
    valid: bool
    discard_reason: str | None = None

    def validate(self) -> None:
        if self.valid:
            if self.reward is None:
                raise SchemaError("valid sample must carry a reward")
            if not 0.0 <= self.reward <= 1.0:
                raise SchemaError(f"reward out of range: {self.reward}")
        elif self.reward is not None:
            raise SchemaError("discarded sample must not carry a reward")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_index": self.sample_index,
            "image_ref": self.image_ref,
            "indicators": self.indicators.bits(),
            "n_valid": self.indicators.n_valid,
            "reward": self.reward,
            "valid": self.valid,
            "discard_reason": self.discard_reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RewardedSample":
        try:
            return cls(
                sample_index=d["sample_index"],
                image_ref=d["image_ref"],
                indicators=DefectIndicators.from_bits(d["indicators"]),
                reward=d["reward"],
                valid=d["valid"],
                discard_reason=d.get("discard_reason"),
            )
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad rewarded-sample record: {exc}") from exc


# --- alignment exports -----------------------------------------------------


@dataclass(frozen=True)
class GrpoEntry:
    image_ref: str
    reward: float
    advantage: float


@dataclass(frozen=True)
class DpoPair:
    winner_image_ref: str
    loser_image_ref: str
    winner_reward: float
    loser_reward: float


@dataclass(frozen=True)
class AlignmentExport:
    """One export row for an external trainer: a GRPO group or a DPO pair.

    config_passthrough is an opaque key-value map (it may carry the
    downstream trainer's KL weight); nothing here computes on it.
    """

    mode: str  # "grpo" | "dpo"
    prompt_index: int
    entries: tuple[GrpoEntry, ...] = ()
    pair: DpoPair | None = None
    config_passthrough: Mapping[str, Any] | None = None

    def validate(self) -> None:
        if self.mode == "grpo":
            if not self.entries or self.pair is not None:
                raise SchemaError("grpo export must carry entries and no pair")
        elif self.mode == "dpo":
            if self.pair is None or self.entries:
                raise SchemaError("dpo export must carry a pair and no entries")
            if not self.pair.winner_reward > self.pair.loser_reward:
                raise SchemaError("dpo winner reward must strictly exceed loser reward")
        else:
            raise SchemaError(f"unknown export mode: {self.mode!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"mode": self.mode, "prompt_index": self.prompt_index}
        if self.mode == "grpo":
            d["entries"] = [
                {"image_ref": e.image_ref, "reward": e.reward, "advantage": e.advantage}
                for e in self.entries
            ]
        else:
            assert self.pair is not None
            d["winner_image_ref"] = self.pair.winner_image_ref
            d["loser_image_ref"] = self.pair.loser_image_ref
            d["winner_reward"] = self.pair.winner_reward
            d["loser_reward"] = self.pair.loser_reward
        if self.config_passthrough:
            d["config_passthrough"] = dict(self.config_passthrough)
        return d


# --- evaluation records ----------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    """OCR extraction plus per-sample metrics, carrying stratification keys."""

    sample_index: int
    ocr_text: str
    ned: float
    precision: float
    recall: float
    f1: float
    accuracy: float
    category: str
    text_length: LengthBucket
    position: Position
    error: str | None = None

    @property
    def strat_keys(self) -> tuple[str, str, str]:
        return (self.category, self.text_length.value, self.position.value)

    def validate(self) -> None:
        for name in ("ned", "precision", "recall", "f1", "accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"{name} out of range: {v}")
        if self.accuracy not in (0.0, 1.0):
            raise SchemaError(f"accuracy must be 0 or 1, got {self.accuracy}")
        if self.accuracy == 1.0 and not (
            self.precision == self.recall == self.f1 == 1.0
        ):
            raise SchemaError("accuracy 1 requires precision = recall = f1 = 1")
        if (self.f1 == 0.0) != (self.precision == 0.0 or self.recall == 0.0):
            raise SchemaError("f1 is 0 exactly when precision or recall is 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_index": self.sample_index,
            "ocr_text": self.ocr_text,
            "ned": self.ned,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "class": self.category,
            "text_length": self.text_length.value,
            "position": self.position.value,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalRecord":
        try:
            return cls(
                sample_index=d["sample_index"],
                ocr_text=d["ocr_text"],
                ned=d["ned"],
                precision=d["precision"],
                recall=d["recall"],
                f1=d["f1"],
                accuracy=d["accuracy"],
                category=d["class"],
                text_length=LengthBucket(d["text_length"]),
                position=Position(d["position"]),
                error=d.get("error"),
            )
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad eval record: {exc}") from exc


# --- image manifests ---------------------------------------------------------

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".webp", ".bmp")


def load_image_manifest(path: str) -> dict[int, list[str]]:
    """Map sample index -> generated image refs.

    Accepts either a JSON file ({"12": "a.png"} or {"12": ["a.png", ...]})
    or a directory whose image files are named ``<index>.<ext>`` or
    ``<index>_<anything>.<ext>``. Refs for one index keep a stable sorted
    order.
    """
    import os

    manifest: dict[int, list[str]] = {}
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            stem, ext = os.path.splitext(name)
            if ext.lower() not in IMAGE_EXTS:
                continue
            head = stem.split("_", 1)[0]
            if not head.isdigit():
                continue
            manifest.setdefault(int(head), []).append(os.path.join(path, name))
        return manifest
    with open(path, "r", encoding="utf-8") as fp:
        raw = json.load(fp)
    if not isinstance(raw, dict):
        raise SchemaError("image manifest must be a JSON object keyed by sample index")
    for key, refs in raw.items():
        try:
            index = int(key)
        except ValueError as exc:
            raise SchemaError(f"bad manifest key {key!r}: not an integer") from exc
        manifest[index] = [refs] if isinstance(refs, str) else list(refs)
    return manifest


# --- JSONL I/O -------------------------------------------------------------


def dumps_record(d: Mapping[str, Any]) -> str:
    return json.dumps(d, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: str, rows: Iterable[Mapping[str, Any]]) -> int:
    """Write one JSON object per line, UTF-8, LF endings. Returns row count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for row in rows:
            fp.write(dumps_record(row))
            fp.write("\n")
            n += 1
    return n


def read_jsonl(path: str) -> Iterator[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def load_bench_samples(path: str, validate: bool = True) -> list[BenchSample]:
    """Load a benchmark JSONL file, checking schema and index uniqueness."""
    samples = [BenchSample.from_dict(d) for d in read_jsonl(path)]
    seen: set[int] = set()
    for s in samples:
        if s.index in seen:
            raise SchemaError(f"duplicate sample index: {s.index}")
        seen.add(s.index)
        if validate:
            s.validate()
    return samples


def write_bench_samples(path: str, samples: Iterable[BenchSample]) -> int:
    return write_jsonl(path, (s.to_dict() for s in samples))
