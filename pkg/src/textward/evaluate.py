"""OCR-grounded evaluation: per-sample metrics and stratified aggregation.

Per sample, the rendered text is extracted by an OCR client and compared
with the target: a normalized character-level edit similarity (higher is
better) plus word-level precision / recall / F1 / accuracy under a
multiset-matching protocol over normalized tokens. Aggregation reports
unweighted per-sample means, overall and stratified by category, text
length, and position. This module never consults the reward judge; the
two signals stay fully decoupled.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .clients import ImageUnreadableError, OcrClient
from .core import (
    BenchSample,
    EvalRecord,
    dumps_record,
    normalize_text,
    read_jsonl,
    write_jsonl,
)
from .kernels import levenshtein

logger = logging.getLogger(__name__)

STRAT_DIMENSIONS = ("class", "text_length", "position")

# Protocol strings are embedded in every report so numbers stay comparable
# across tool versions.
NED_PROTOCOL = (
    "1 - levenshtein(a, b) / max(len(a), len(b), 1) over casefolded, "
    "punctuation-stripped, single-spaced characters; both-empty pairs score 1"
)
WORD_PROTOCOL = (
    "multiset intersection over normalized tokens; precision = matched/|hyp| "
    "(0 if hyp empty), recall = matched/|ref| (1 if ref empty), f1 = harmonic "
    "mean (0 if degenerate), accuracy = 1 iff the multisets are equal"
)


def _norm_chars(s: str) -> str:
    return " ".join(normalize_text(s))


def ned(reference: str, hypothesis: str) -> float:
    """Normalized edit similarity between two strings, in [0, 1].

    Computed over normalized characters (case folded, punctuation removed,
    spaces between tokens preserved) and divided by the longer length, so
    1.0 means normalized equality and 0.0 total mismatch.
    """
    a, b = _norm_chars(reference), _norm_chars(hypothesis)
    return 1.0 - levenshtein(a, b) / max(len(a), len(b), 1)


def word_metrics(reference: str, hypothesis: str) -> tuple[float, float, float, float]:
    """(precision, recall, f1, accuracy) over normalized token multisets.

    Two empty strings count as a perfect rendering of nothing: (1,1,1,1),
    keeping accuracy = 1 consistent with the other three metrics.
    """
    ref = Counter(normalize_text(reference))
    hyp = Counter(normalize_text(hypothesis))
    if not ref and not hyp:
        return (1.0, 1.0, 1.0, 1.0)
    matched = sum((ref & hyp).values())
    precision = matched / sum(hyp.values()) if hyp else 0.0
    recall = matched / sum(ref.values()) if ref else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = 1.0 if ref == hyp else 0.0
    return (precision, recall, f1, accuracy)


def evaluate_one(sample: BenchSample, ocr_text: str) -> EvalRecord:
    """Score one extracted rendering against its sample's target text."""
    precision, recall, f1, accuracy = word_metrics(sample.text, ocr_text)
    record = EvalRecord(
        sample_index=sample.index,
        ocr_text=ocr_text,
        ned=ned(sample.text, ocr_text),
        precision=precision,
        recall=recall,
        f1=f1,
        accuracy=accuracy,
        category=sample.category,
        text_length=sample.text_length,
        position=sample.position,
    )
    record.validate()
    return record


def _error_record(sample: BenchSample, error: str) -> EvalRecord:
    # Unreadable images count as total failures, never silent exclusions.
    return EvalRecord(
        sample_index=sample.index,
        ocr_text="",
        ned=0.0,
        precision=0.0,
        recall=0.0,
        f1=0.0,
        accuracy=0.0,
        category=sample.category,
        text_length=sample.text_length,
        position=sample.position,
        error=error,
    )


def evaluate(
    samples: Sequence[BenchSample],
    manifest: Mapping[int, Sequence[str]],
    ocr: OcrClient,
    *,
    max_workers: int = 8,
) -> list[EvalRecord]:
    """OCR every sample's image and score it; output order matches input.

    Every sample index must have an image reference (the first reference
    is used when several exist). An unreadable image yields a record with
    all metrics 0 and an error flag so failures stay countable.
    """
    missing = [s.index for s in samples if not manifest.get(s.index)]
    if missing:
        raise ValueError(f"no image reference for sample indices: {missing[:10]}")

    def run(sample: BenchSample) -> EvalRecord:
        ref = manifest[sample.index][0]
        try:
            text = ocr.ocr(ref)
        except ImageUnreadableError as exc:
            logger.warning("sample %d: unreadable image %s", sample.index, ref)
            return _error_record(sample, str(exc) or "unreadable_image")
        return evaluate_one(sample, text)

    if max_workers <= 1 or len(samples) <= 1:
        return [run(s) for s in samples]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, samples))


# --- aggregation ---------------------------------------------------------------

_METRIC_FIELDS = ("ned", "precision", "recall", "f1", "accuracy")


@dataclass(frozen=True)
class MetricSummary:
    """Unweighted per-sample means over one group of eval records."""

    dimension: str  # "class" | "text_length" | "position" | "overall"
    value: str
    n: int
    mean_ned: float
    mean_precision: float
    mean_recall: float
    mean_f1: float
    mean_accuracy: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "dimension": self.dimension,
            "value": self.value,
            "n": self.n,
            "mean_ned": self.mean_ned,
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "mean_f1": self.mean_f1,
            "mean_accuracy": self.mean_accuracy,
        }


def _summary(dimension: str, value: str, records: Sequence[EvalRecord]) -> MetricSummary:
    n = len(records)
    means = {
        f: sum(getattr(r, f) for r in records) / n for f in _METRIC_FIELDS
    }
    return MetricSummary(
        dimension=dimension,
        value=value,
        n=n,
        mean_ned=means["ned"],
        mean_precision=means["precision"],
        mean_recall=means["recall"],
        mean_f1=means["f1"],
        mean_accuracy=means["accuracy"],
    )


def _dimension_value(record: EvalRecord, dimension: str) -> str:
    if dimension == "class":
        return record.category
    if dimension == "text_length":
        return record.text_length.value
    if dimension == "position":
        return record.position.value
    raise ValueError(f"unknown stratification dimension: {dimension!r}")


def stratify(records: Sequence[EvalRecord], dimension: str) -> list[MetricSummary]:
    """Group summaries along one dimension, plus the overall summary.

    Means are unweighted per-sample arithmetic means, so group means
    recombine exactly: sum_g n_g * mean_g = n_total * mean_overall.
    """
    if not records:
        raise ValueError("stratify requires at least one record")
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(_dimension_value(r, dimension), []).append(r)
    out = [_summary(dimension, value, groups[value]) for value in sorted(groups)]
    out.append(_summary("overall", "overall", records))
    return out


# --- report files ----------------------------------------------------------------


def write_eval_records(path: str | Path, records: Iterable[EvalRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def load_eval_records(path: str | Path) -> list[EvalRecord]:
    return [EvalRecord.from_dict(d) for d in read_jsonl(path)]


def records_digest(records: Sequence[EvalRecord]) -> str:
    """sha256 over the serialized records, for report/file cross-checks."""
    h = hashlib.sha256()
    for r in records:
        h.update(dumps_record(r.to_dict()).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def build_report(
    records: Sequence[EvalRecord], dimensions: Sequence[str] = STRAT_DIMENSIONS
) -> dict[str, Any]:
    """Machine-readable report: summaries per dimension plus radar data.

    The radar block carries per-category means for each metric, ready to
    plot. external_scores is reserved for merged columns from hosted
    scoring models; nothing here computes them.
    """
    for d in dimensions:
        if d not in STRAT_DIMENSIONS:
            raise ValueError(f"unknown stratification dimension: {d!r}")
    summaries = {d: [s.to_dict() for s in stratify(records, d)] for d in dimensions}
    by_class = stratify(records, "class") if "class" in dimensions else []
    radar = {
        f"mean_{metric}": {
            s.value: getattr(s, f"mean_{metric}")
            for s in by_class
            if s.dimension == "class"
        }
        for metric in _METRIC_FIELDS
    }
    return {
        "tool_version": __version__,
        "protocols": {"ned": NED_PROTOCOL, "word_metrics": WORD_PROTOCOL},
        "n_records": len(records),
        "n_errors": sum(1 for r in records if r.error),
        "records_digest": records_digest(records),
        "summaries": summaries,
        "radar": radar,
        "external_scores": None,
    }


def write_report(
    records: Sequence[EvalRecord],
    out_path: str | Path,
    *,
    dimensions: Sequence[str] = STRAT_DIMENSIONS,
    csv_path: str | Path | None = None,
) -> dict[str, Any]:
    report = build_report(records, dimensions)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["dimension", "value", "n"] + [f"mean_{m}" for m in _METRIC_FIELDS]
            )
            for dim in dimensions:
                for s in report["summaries"][dim]:
                    writer.writerow(
                        [s["dimension"], s["value"], s["n"]]
                        + [s[f"mean_{m}"] for m in _METRIC_FIELDS]
                    )
    return report
