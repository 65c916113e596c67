"""``drad`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import AppConfig, ConfigError, load_config
from .entities import OutOfRange
from .evaluation import (
    AGGREGATES,
    DegenerateLabels,
    evaluate_detection,
    evaluate_policy,
    load_detection_dataset,
    load_qa_dataset,
)
from .gateway import GatewayError
from .policies import Policy, run_policy
from .retrieval import DuplicateId, IndexHandle, IngestError, build_index, read_corpus, segment_corpus
from .scoring import detect
from .trace import AlignmentError, load_traces

log = logging.getLogger("drad")

POLICIES = [p.value for p in Policy]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="TOML config file (defaults built in)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--json", action="store_true", help="machine-readable JSON output")
    if out:
        p.add_argument("--out", help="also write the JSON result to this file")
    p.add_argument("--log-level", default=None, help="logging level, e.g. INFO")


def _generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--index", help="index directory from `drad index`")
    p.add_argument("--mock-script", help="JSON mock script (selects the mock gateway)")
    p.add_argument("--budget", type=int, help="token budget per question")
    p.add_argument("--theta1", type=float, help="entity probability threshold")
    p.add_argument("--theta2", type=float, help="entity entropy threshold")
    p.add_argument("--entropy", action="store_true", default=None, help="enable the entropy clause")
    p.add_argument("--m", type=int, help="query window half-width (tokens)")
    p.add_argument("--k", type=int, help="passages per retrieval")
    p.add_argument("--tpr-threshold", type=float, help="token probability threshold for tpr")
    p.add_argument("--strict-window", action="store_true", default=None,
                   help="literal right bound for the query window")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drad", description="Entity-level hallucination detection and dynamic retrieval.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.set_defaults(_subparsers=sub.choices)

    p = sub.add_parser("index", help="segment a corpus and build a BM25 index")
    p.add_argument("--corpus", required=True, help="JSON-lines {title, text} file or directory of text files")
    p.add_argument("--out", required=True, help="index directory to (re)build")
    _common(p, out=False)

    p = sub.add_parser("generate", help="answer one question under a retrieval policy")
    p.add_argument("--question", required=True)
    p.add_argument("--policy", required=True, choices=POLICIES)
    _generation_flags(p)
    _common(p)

    p = sub.add_parser("detect", help="score entities in trace fixtures (JSON lines out)")
    p.add_argument("--trace", required=True, help="JSON-lines trace file")
    p.add_argument("--sidecar", help="entity annotation sidecar (JSON lines)")
    p.add_argument("--theta1", type=float)
    p.add_argument("--theta2", type=float)
    p.add_argument("--entropy", action="store_true", default=None, help="enable the entropy clause")
    _common(p)

    p = sub.add_parser("evaluate", help="detection AUC table or QA metrics for one policy")
    p.add_argument("--task", required=True, choices=["detection", "qa"])
    p.add_argument("--dataset", required=True, help="JSON-lines dataset")
    p.add_argument("--policy", choices=POLICIES, default="drad", help="policy for --task qa")
    p.add_argument("--sidecar", help="entity annotation sidecar (JSON lines)")
    p.add_argument("--concurrency", type=int, help="examples evaluated in parallel")
    _generation_flags(p)
    _common(p)

    p = sub.add_parser("compare-policies", help="QA metrics and retrieval counts across policies")
    p.add_argument("--dataset", required=True, help="JSON-lines QA dataset")
    p.add_argument("--policies", default=",".join(POLICIES), help="comma-separated subset of " + ",".join(POLICIES))
    p.add_argument("--concurrency", type=int, help="examples evaluated in parallel")
    _generation_flags(p)
    _common(p)
    return parser


def _config(args: argparse.Namespace) -> AppConfig:
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    g = vars(args)
    cfg = cfg.with_overrides(
        seed=g.get("seed"),
        log_level=g.get("log_level"),
        budget=g.get("budget"),
        m=g.get("m"),
        k=g.get("k"),
        tpr_threshold=g.get("tpr_threshold"),
        strict_window=g.get("strict_window"),
        concurrency=g.get("concurrency"),
        **{
            "detection.theta1": g.get("theta1"),
            "detection.theta2": g.get("theta2"),
            "detection.entropy_enabled": g.get("entropy"),
        },
    )
    _require_file(g.get("mock_script"), "--mock-script")
    _require_file(g.get("sidecar"), "--sidecar")
    if g.get("mock_script"):
        cfg = cfg.with_overrides(**{"gateway.backend": "mock", "gateway.mock_script": g["mock_script"]})
    if g.get("sidecar"):
        cfg = cfg.with_overrides(**{"entities.backend": "sidecar", "entities.sidecar": g["sidecar"]})
    return cfg


def _require_file(path: str | None, flag: str) -> None:
    if path is not None and not Path(path).exists():
        raise UsageError(f"{flag}: path not found: {path}")


def _open_index(args: argparse.Namespace, policies: Sequence[str]) -> IndexHandle | None:
    needs = [p for p in policies if p != Policy.NOR.value]
    if not args.index:
        if needs:
            raise UsageError(f"the --index flag is required for policy {needs[0]}")
        return None
    _require_file(args.index, "--index")
    return IndexHandle.open(args.index)


def _emit(args: argparse.Namespace, result: Any, text: str | None = None) -> None:
    blob = json.dumps(result, sort_keys=True, ensure_ascii=False, indent=None)
    if args.out and args.command != "index":
        Path(args.out).write_text(blob + "\n", encoding="utf-8")
    print(blob if args.json or text is None else text)


def _table(rows: list[dict[str, Any]], columns: Sequence[str]) -> str:
    def fmt(v: Any) -> str:
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_index(args: argparse.Namespace, cfg: AppConfig) -> None:
    _require_file(args.corpus, "--corpus")
    handle = build_index(segment_corpus(read_corpus(args.corpus)), args.out)
    result = {"index": str(args.out), "doc_count": handle.doc_count}
    _emit(args, result, f"indexed {handle.doc_count} passages into {args.out}")


def cmd_generate(args: argparse.Namespace, cfg: AppConfig) -> None:
    index = _open_index(args, [args.policy])
    run = run_policy(
        args.question, cfg.policy(args.policy), cfg.make_gateway(), index, cfg.budget,
        template=cfg.prompt, recognizer=cfg.make_recognizer(), stop_sequences=cfg.stop_sequences,
        top_logprobs=cfg.gateway.top_logprobs, temperature=cfg.gateway.temperature,
    )
    _emit(args, run.to_dict())


def cmd_detect(args: argparse.Namespace, cfg: AppConfig) -> None:
    _require_file(args.trace, "--trace")
    _require_file(args.sidecar, "--sidecar")
    recognizer = cfg.make_recognizer()
    lines = []
    for trace in load_traces(args.trace):
        for span in recognizer(trace):
            lines.append(detect(trace, span, cfg.detection).to_report(cfg.detection))
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines), encoding="utf-8")
    for rec in lines:
        print(json.dumps(rec, sort_keys=True, ensure_ascii=False))


def _qa_report(args: argparse.Namespace, cfg: AppConfig, policy: str, index: IndexHandle | None, dataset):
    return evaluate_policy(
        dataset, cfg.policy(policy), cfg.make_gateway(), index, budget=cfg.budget,
        template=cfg.prompt, recognizer=cfg.make_recognizer(), answer_mode=cfg.answer_mode,
        answer_marker=cfg.answer_marker, concurrency=cfg.concurrency, stop_sequences=cfg.stop_sequences,
    )


def cmd_evaluate(args: argparse.Namespace, cfg: AppConfig) -> None:
    _require_file(args.dataset, "--dataset")
    _require_file(args.sidecar, "--sidecar")
    if args.task == "detection":
        table = evaluate_detection(load_detection_dataset(args.dataset), recognizer=cfg.make_recognizer())
        rows = [{"detector": k, "auc": v} for k, v in table.items()]
        _emit(args, {"task": "detection", "auc": table}, _table(rows, ["detector", "auc"]))
        return
    index = _open_index(args, [args.policy])
    report = _qa_report(args, cfg, args.policy, index, load_qa_dataset(args.dataset))
    row = {"policy": report.policy, **report.aggregates, "failed": report.failed}
    _emit(args, report.to_dict(), _table([row], ["policy", *AGGREGATES, "failed"]))


def cmd_compare(args: argparse.Namespace, cfg: AppConfig) -> None:
    _require_file(args.dataset, "--dataset")
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    unknown = [p for p in policies if p not in POLICIES]
    if unknown or not policies:
        raise UsageError(f"--policies: unknown policy {unknown[0] if unknown else '(none)'}")
    index = _open_index(args, policies)
    dataset = load_qa_dataset(args.dataset)
    reports = [_qa_report(args, cfg, p, index, dataset) for p in policies]
    rows = [{"policy": r.policy, **r.aggregates, "failed": r.failed} for r in reports]
    result = {"policies": {r.policy: {"aggregates": r.aggregates, "failed": r.failed} for r in reports}}
    _emit(args, result, _table(rows, ["policy", *AGGREGATES, "failed"]))


COMMANDS = {
    "index": cmd_index,
    "generate": cmd_generate,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "compare-policies": cmd_compare,
}

RUNTIME_ERRORS = (GatewayError, IngestError, DuplicateId, AlignmentError, OutOfRange, DegenerateLabels,
                  OSError, ValueError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        cfg = _config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"drad: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(cfg.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    random.seed(cfg.seed)
    try:
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        args._subparsers[args.command].print_help(sys.stderr)
        print(f"drad {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"drad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
