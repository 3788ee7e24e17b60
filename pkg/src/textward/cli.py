"""Command-line entry points for the toolkit.

Subcommands: judge, prep-grpo, prep-dpo, build-dataset, evaluate, report,
serve-study. Endpoint credentials and sampling parameters come from a
TOML config file; API keys are read from environment variables named in
that config, never from the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .align import (
    DEFAULT_EPSILON,
    DEFAULT_GROUP_SIZE,
    write_dpo_export,
    write_grpo_export,
)
from .bench import build_dataset, load_category_specs, load_plan
from .clients import (
    ChatClient,
    EmbedClient,
    OcrClient,
    VlmClient,
    load_endpoint_configs,
)
from .core import load_bench_samples, load_image_manifest
from .evaluate import (
    STRAT_DIMENSIONS,
    evaluate,
    load_eval_records,
    write_eval_records,
    write_report,
)
from .judge import judge_many, load_rewards, oracle_judge_sample, write_rewards
from .study import serve_study

logger = logging.getLogger(__name__)


def _endpoint(config_path: str, section: str):
    configs = load_endpoint_configs(config_path)
    if section not in configs:
        raise SystemExit(
            f"config {config_path} has no [{section}] section "
            f"(found: {', '.join(sorted(configs)) or 'none'})"
        )
    return configs[section]


def _cmd_judge(args: argparse.Namespace) -> int:
    samples = load_bench_samples(args.dataset)
    manifest = load_image_manifest(args.images)
    by_index = {s.index: s for s in samples}
    pairs = [
        (by_index[idx], ref)
        for idx in sorted(manifest)
        if idx in by_index
        for ref in manifest[idx]
    ]
    skipped = sorted(set(manifest) - set(by_index))
    if skipped:
        logger.warning("manifest indices absent from dataset: %s", skipped[:10])
    if args.oracle_from_ocr:
        ocr = OcrClient(_endpoint(args.config, "ocr"))
        rewards = [
            oracle_judge_sample(sample, ref, ocr.ocr(ref)) for sample, ref in pairs
        ]
    else:
        vlm = VlmClient(_endpoint(args.config, "judge"))
        rewards = judge_many(pairs, vlm, max_workers=args.workers)
    count = write_rewards(args.out, rewards)
    discarded = sum(1 for r in rewards if not r.valid)
    logger.info("wrote %d reward row(s) (%d discarded) to %s", count, discarded, args.out)
    return 0


def _cmd_prep_grpo(args: argparse.Namespace) -> int:
    rewards = load_rewards(args.rewards)
    count = write_grpo_export(
        args.out, rewards, epsilon=args.epsilon, group_size_requested=args.group_size
    )
    logger.info("wrote %d group(s) to %s", count, args.out)
    return 0


def _cmd_prep_dpo(args: argparse.Namespace) -> int:
    rewards = load_rewards(args.rewards)
    count = write_dpo_export(
        args.out, rewards, all_pairs=args.all_pairs, group_size_requested=args.group_size
    )
    logger.info("wrote %d pair(s) to %s", count, args.out)
    return 0


def _cmd_build_dataset(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    chat = ChatClient(_endpoint(args.config, "chat"))
    embedder = EmbedClient(_endpoint(args.config, "embed"))
    specs = load_category_specs(args.categories) if args.categories else None
    checkpoint = args.resume or str(Path(args.out).with_suffix(".ckpt.json"))
    result = build_dataset(
        plan,
        chat=chat,
        embedder=embedder,
        out_path=args.out,
        report_path=args.report,
        seed=args.seed,
        retry_budget=args.retry_budget,
        checkpoint_path=checkpoint,
        resume=args.resume is not None,
        split_eval_fraction=args.split_eval_fraction,
        category_specs=specs,
    )
    logger.info(
        "emitted %d record(s) to %s; report at %s",
        len(result.samples),
        args.out,
        args.report,
    )
    if result.report["shortfalls"]:
        logger.warning("plan shortfalls: %s", result.report["shortfalls"])
        return 1
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    samples = load_bench_samples(args.dataset)
    manifest = load_image_manifest(args.images)
    ocr = OcrClient(_endpoint(args.config, "ocr"))
    records = evaluate(samples, manifest, ocr, max_workers=args.workers)
    count = write_eval_records(args.out, records)
    errors = sum(1 for r in records if r.error)
    logger.info("wrote %d eval record(s) (%d unreadable) to %s", count, errors, args.out)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    records = load_eval_records(args.eval)
    dims = [d.strip() for d in args.by.split(",") if d.strip()]
    report = write_report(records, args.out, dimensions=dims, csv_path=args.csv)
    overall = next(
        s
        for dim in report["summaries"].values()
        for s in dim
        if s["dimension"] == "overall"
    )
    print(json.dumps(overall, indent=2))
    return 0


def _cmd_serve_study(args: argparse.Namespace) -> int:
    serve_study(
        args.manifest,
        args.votes,
        port=args.port,
        host=args.host,
        images_root=args.images_root,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textward",
        description=(
            "Benchmark construction, hierarchical reward scoring, preference-"
            "data preparation, OCR evaluation, and a pairwise study service "
            "for visual text rendering."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("judge", help="score generated images with the defect judge")
    p.add_argument("--dataset", required=True, help="benchmark JSONL file")
    p.add_argument("--images", required=True, help="image directory or manifest JSON")
    p.add_argument("--out", required=True, help="output rewards JSONL")
    p.add_argument("--config", default="endpoints.toml", help="endpoint TOML config")
    p.add_argument(
        "--oracle-from-ocr",
        action="store_true",
        help="score deterministically from OCR text instead of the image judge",
    )
    p.add_argument("--workers", type=int, default=8)
    p.set_defaults(func=_cmd_judge)

    p = sub.add_parser("prep-grpo", help="rewards -> grouped advantage export")
    p.add_argument("--rewards", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE)
    p.set_defaults(func=_cmd_prep_grpo)

    p = sub.add_parser("prep-dpo", help="rewards -> preference pair export")
    p.add_argument("--rewards", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-pairs", action="store_true", help="emit every strict pair")
    p.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE)
    p.set_defaults(func=_cmd_prep_dpo)

    p = sub.add_parser("build-dataset", help="run the full benchmark pipeline")
    p.add_argument("--plan", required=True, help="JSON map of cell -> count")
    p.add_argument("--config", default="endpoints.toml")
    p.add_argument("--out", required=True, help="output benchmark JSONL")
    p.add_argument("--report", required=True, help="output build report JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", metavar="CHECKPOINT", help="resume from a checkpoint file")
    p.add_argument("--retry-budget", type=int, default=5)
    p.add_argument("--categories", help="directory of category spec JSON files")
    p.add_argument(
        "--split-eval-fraction",
        type=float,
        help="also write .train/.eval splits by deterministic text hash",
    )
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("evaluate", help="OCR images and score against targets")
    p.add_argument("--dataset", required=True)
    p.add_argument("--images", required=True, help="image directory or manifest JSON")
    p.add_argument("--out", required=True, help="output eval JSONL")
    p.add_argument("--config", default="endpoints.toml")
    p.add_argument("--workers", type=int, default=8)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="aggregate eval records into a report")
    p.add_argument("--eval", required=True, help="eval JSONL from `evaluate`")
    p.add_argument("--by", default=",".join(STRAT_DIMENSIONS))
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--csv", help="also write summaries as CSV")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("serve-study", help="serve the pairwise human study")
    p.add_argument("--manifest", required=True)
    p.add_argument("--votes", required=True, help="append-only vote log JSONL")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--images-root", help="directory for /images/<ref> serving")
    p.set_defaults(func=_cmd_serve_study)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
